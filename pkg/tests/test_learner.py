import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from demorl.errors import ConfigurationError, TrainingError
from demorl.learner import LearnerConfig, SACAgent, ValueBounds, soft_update, squashed_log_prob
from demorl.latentmodel import to_chw

SMALL = LearnerConfig(feature_dim=8, enc_channels=4, enc_convs=1, hidden=32, crop_pad=1)


def _agent(seed=0, cfg=SMALL, side=10):
    return SACAgent((side, side, 3), 2, cfg, seed)


def _zero_last(net):
    last = [m for m in net.modules() if isinstance(m, torch.nn.Linear)][-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    return last


def test_value_bounds():
    b = ValueBounds.from_rewards(100.0, -1.0, 0.99)
    assert b.q_min == pytest.approx(-100.0) and b.q_max == 100.0
    printed = ValueBounds.from_rewards(100.0, -1.0, 0.99, printed_variant=True)
    assert printed.q_min == pytest.approx(-0.01)
    with pytest.raises(ConfigurationError):
        ValueBounds(1.0, 0.0)


def test_zero_actor_acts_zero():
    agent = _agent()
    _zero_last(agent.actor.net)
    a = agent.act(np.random.default_rng(0).uniform(size=(10, 10, 3)), deterministic=True)
    assert np.array_equal(a, np.zeros(2, np.float32))


def test_actions_bounded_and_reproducible():
    obs = np.random.default_rng(0).uniform(size=(10, 10, 3))
    a1 = [_agent(seed=3).act(obs) for _ in range(2)]
    assert np.array_equal(a1[0], a1[1])
    agent = _agent(seed=3)
    with torch.no_grad():
        for p in agent.actor.parameters():
            p.mul_(50.0)
    for _ in range(20):
        a = agent.act(obs)
        assert a.shape == (2,) and np.all(np.abs(a) <= 1.0)


def _batch(agent, n=16, seed=0, reward=-1.0, done=0.0):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(size=(n, 10, 10, 3)).astype(np.float32)
    nxt = rng.uniform(size=(n, 10, 10, 3)).astype(np.float32)
    act = torch.as_tensor(rng.uniform(-1, 1, size=(n, 2)), dtype=torch.float32)
    return (agent.augment_batch(imgs, rng), act, torch.full((n,), reward), agent.augment_batch(nxt, rng),
            torch.full((n,), done))


def test_terminal_success_target_is_r_done():
    agent = _agent()
    bounds = ValueBounds.from_rewards(100.0, -1.0, agent.cfg.gamma)
    agent.critic_update(*_batch(agent, reward=100.0, done=1.0), bounds)
    assert torch.equal(agent.last_targets, torch.full((16,), 100.0))


def test_targets_clipped_into_bounds():
    agent = _agent()
    # make the target critics very pessimistic so the bootstrap falls below q_min
    with torch.no_grad():
        _zero_last(agent.target_critic.q1).bias.fill_(-1e4)
        _zero_last(agent.target_critic.q2).bias.fill_(-1e4)
    bounds = ValueBounds.from_rewards(100.0, -1.0, agent.cfg.gamma)
    stats = agent.critic_update(*_batch(agent), bounds)
    assert torch.equal(agent.last_targets, torch.full((16,), -100.0))
    assert stats["clip_hit_rate"] == 1.0
    agent.critic_update(*_batch(agent), None)
    assert float(agent.last_targets.max()) < -1000.0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.floats(0.1, 1e3))
def test_every_target_within_bounds(seed, scale):
    agent = _agent(seed=seed % 7)
    with torch.no_grad():
        for p in agent.target_critic.parameters():
            p.mul_(scale)
    bounds = ValueBounds.from_rewards(100.0, -1.0, agent.cfg.gamma)
    rng = np.random.default_rng(seed)
    obs, act, _, nxt, _ = _batch(agent, seed=seed)
    reward = torch.as_tensor(np.where(rng.uniform(size=16) < 0.3, 100.0, -1.0), dtype=torch.float32)
    done = (reward > 0).float()
    agent.critic_update(obs, act, reward, nxt, done, bounds)
    t = agent.last_targets
    # the learner works in float32, so the bounds are compared at that width
    lo, hi = (torch.tensor(v, dtype=t.dtype) for v in (bounds.q_min, bounds.q_max))
    assert bool((t >= lo).all()) and bool((t <= hi).all())


def test_non_finite_target_raises():
    agent = _agent()
    obs, act, reward, nxt, done = _batch(agent)
    with pytest.raises(TrainingError):
        agent.critic_update(obs, act, reward * float("nan"), nxt, done, None)


def test_polyak_boundaries_and_composition():
    online, target = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    t0 = [p.detach().clone() for p in target.parameters()]
    soft_update(online, target, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(t0, target.parameters()))
    twice = copy.deepcopy(target)
    soft_update(online, twice, 0.01)
    soft_update(online, twice, 0.01)
    # (1 - 0.01)^2 weight on the old target, 1 - 0.99^2 on the online net
    for p_on, p_tw, p0 in zip(online.parameters(), twice.parameters(), t0):
        expected = 0.99 ** 2 * p0 + (1 - 0.99 ** 2) * p_on.detach()
        assert torch.allclose(p_tw, expected, atol=1e-7)
    soft_update(online, target, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(online.parameters(), target.parameters()))


def test_agent_polyak_uses_both_rates():
    agent = _agent()
    with torch.no_grad():
        for p in agent.critic.parameters():
            p.add_(1.0)
    agent.polyak_update(tau=1.0, encoder_tau=0.0)
    assert all(torch.equal(a, b) for a, b in zip(agent.critic.parameters(), agent.target_critic.parameters()))


def test_augment_batch_shapes_and_variation():
    agent = _agent()
    imgs = np.random.default_rng(0).uniform(size=(4, 10, 10, 3)).astype(np.float32)
    out = agent.augment_batch(imgs, np.random.default_rng(1))
    assert out.shape == (4, 3, 8, 8)
    other = agent.augment_batch(imgs, np.random.default_rng(2))
    assert not torch.equal(out, other)
    flat = SACAgent((10, 10, 3), 2, LearnerConfig(**{**SMALL.__dict__, "crop_pad": 0}))
    assert torch.equal(flat.augment_batch(imgs, np.random.default_rng(1)), to_chw(imgs))


@pytest.mark.parametrize("mu,log_std", [(0.0, 0.0), (0.7, -0.5), (-1.5, 0.3)])
def test_squashed_log_prob_matches_monte_carlo(mu, log_std):
    rng = np.random.default_rng(0)
    n = 100_000
    y = np.tanh(mu + math.exp(log_std) * rng.standard_normal(n))
    edges = np.linspace(-0.999, 0.999, 6)
    counts, _ = np.histogram(y, bins=edges)
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        grid = np.linspace(lo, hi, 2001)
        u = torch.as_tensor(np.arctanh(grid))[:, None]
        dens = torch.exp(squashed_log_prob(u, torch.full_like(u, mu), torch.full_like(u, log_std))).numpy()
        p = float(((dens[1:] + dens[:-1]) * 0.5 * np.diff(grid)).sum())
        se = math.sqrt(max(p * (1 - p), 1e-12) / n)
        assert abs(c / n - p) < 3 * se


def test_squashed_log_prob_stable_for_large_pre_tanh():
    u = torch.tensor([[30.0], [-30.0]])
    lp = squashed_log_prob(u, torch.zeros_like(u), torch.zeros_like(u))
    assert torch.isfinite(lp).all()


def test_actor_gradient_from_entropy_only_when_q_constant():
    agent = _agent()
    for q in (agent.critic.q1, agent.critic.q2):
        with torch.no_grad():
            _zero_last(q).bias.fill_(3.0)
    feat = torch.randn(8, SMALL.feature_dim)
    twin = copy.deepcopy(agent)
    agent.actor_update(feat)
    _, logp, _ = twin.actor.sample(feat, twin.generator)
    loss = (twin.alpha.detach() * logp).mean()
    twin.actor_opt.zero_grad()
    loss.backward()
    twin.actor_opt.step()
    for a, b in zip(agent.actor.parameters(), twin.actor.parameters()):
        assert torch.allclose(a, b, atol=1e-7)


def test_temperature_stays_positive():
    agent = _agent()
    feat = torch.randn(8, SMALL.feature_dim)
    for _ in range(50):
        stats = agent.actor_update(feat)
        assert stats["alpha"] > 0


def test_bandit_converges_to_optimum():
    best = np.array([0.5, -0.3], np.float32)
    cfg = LearnerConfig(feature_dim=8, enc_channels=4, enc_convs=1, hidden=64, crop_pad=0, actor_lr=3e-3,
                        critic_lr=3e-3, actor_update_every=1, init_temperature=0.01)
    agent = SACAgent((6, 6, 3), 2, cfg, seed=0)
    obs = np.full((6, 6, 3), 0.5, np.float32)
    rng = np.random.default_rng(0)
    n = 64
    x = to_chw(np.repeat(obs[None], n, 0))
    for _ in range(500):
        a = rng.uniform(-1, 1, size=(n, 2)).astype(np.float32)
        r = -10.0 * ((a - best) ** 2).sum(1)
        agent.update(x, torch.as_tensor(a), torch.as_tensor(r), x, torch.ones(n), None)
    assert np.abs(agent.act(obs, deterministic=True) - best).max() < 0.1


def test_tensors_round_trip():
    a, b = _agent(seed=1), _agent(seed=2)
    with torch.no_grad():
        a.log_alpha.fill_(-1.234)
    b.load_tensors({k: v.detach().numpy() for k, v in a.tensors().items()})
    obs = np.random.default_rng(0).uniform(size=(10, 10, 3))
    assert np.array_equal(a.act(obs, True), b.act(obs, True))
    assert b.log_alpha.item() == pytest.approx(-1.234)
