"""Training schedule, evaluation, demo collection and the distance-metric bench."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .demostore import ReplayBuffer, Transition, Trajectory, load_demos, read_demo_dir, save_demo_dir
from .diffnet import load_checkpoint, save_checkpoint
from .envsim import EnvState, MazeConfig, PointMaze, WaypointPolicy, probe_u_maze, render, scripted_demonstrator
from .errors import CheckpointError, TrainingError
from .latentmodel import LatentModel, ModelConfig, to_chw, train_until_converged
from .learner import SACAgent, ValueBounds
from .shaping import DemoShaper

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step", "episodes", "train_return", "train_success", "train_length", "first_success_step",
    "model_version", "model_loss", "model_updates", "epsilon", "match_rate", "mean_bonus",
    "critic_loss", "actor_loss", "q_mean", "alpha", "clip_hit_rate", "eval_success", "eval_return",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


class MetricsWriter:
    """Append-only CSV with a header and strictly increasing ``step``."""

    def __init__(self, path: os.PathLike, columns: Sequence[str] = METRIC_COLUMNS):
        self.path = Path(path)
        self.columns = list(columns)
        self._last_step = -1
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def append(self, row: Dict) -> None:
        step = int(row["step"])
        if step <= self._last_step:
            raise ValueError(f"metrics step {step} does not increase past {self._last_step}")
        self._last_step = step
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(c)) for c in self.columns])


def read_metrics(path: os.PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def seed_streams(seed: int, names: Sequence[str]) -> Dict[str, int]:
    """Fan one master seed out into independent named integer seeds."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# -- demonstrations ----------------------------------------------------------

def generate_demos(env_cfg: MazeConfig, count: int, seed: int, noise: float) -> List[Trajectory]:
    out = []
    for k in range(count):
        tr = scripted_demonstrator(env_cfg, seed=seed + k, noise=noise)
        tr.index = k
        out.append(tr)
    return out


def collect_demos(cfg: RunConfig, out_dir: os.PathLike) -> List[Trajectory]:
    """Write ``cfg.demos.count`` scripted demonstrations to ``out_dir``."""
    trajs = generate_demos(cfg.env, cfg.demos.count, cfg.demos.seed, cfg.demos.noise)
    if not trajs:
        log.warning("zero demonstrations requested: writing an empty manifest")
    save_demo_dir(out_dir, trajs)
    return trajs


def obtain_demos(cfg: RunConfig) -> List[Trajectory]:
    if cfg.demos.path:
        return read_demo_dir(cfg.demos.path)
    return generate_demos(cfg.env, cfg.demos.count, cfg.demos.seed, cfg.demos.noise)


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    lengths: List[int] = field(default_factory=list)


def evaluate_policy(env_cfg: MazeConfig, policy: Callable[[np.ndarray, EnvState], np.ndarray], episodes: int,
                    seed: int) -> EvalResult:
    """Run ``episodes`` episodes; success means the episode ended with ``r_done``."""
    env = PointMaze(env_cfg)
    rng = np.random.default_rng(seed)
    successes, returns, lengths = 0, [], []
    for _ in range(episodes):
        obs = env.reset(rng=rng)
        if hasattr(policy, "reset"):
            policy.reset()
        total = 0.0
        while True:
            res = env.step(policy(obs, env.state))
            total += res.reward
            obs = res.obs
            if res.done:
                successes += int(res.success)
                break
        returns.append(total)
        lengths.append(env.state.steps)
    return EvalResult(successes / max(episodes, 1), float(np.mean(returns)) if returns else float("nan"), lengths)


def agent_policy(agent: SACAgent):
    return lambda obs, state: agent.act(obs, deterministic=True)


def build_agent(cfg: RunConfig, seed: int) -> SACAgent:
    return SACAgent((cfg.env.side, cfg.env.side, 3), 2, cfg.learner, seed)


def save_run_checkpoint(path: os.PathLike, agent: SACAgent, model: Optional[LatentModel], step: int) -> Path:
    tensors = dict(agent.tensors())
    if model is not None:
        for k, v in model.state_dict().items():
            tensors[f"model.{k}"] = v
    extra = {"step": step, "model_version": model.version if model is not None else None}
    return save_checkpoint(path, tensors, extra)


def load_agent(cfg: RunConfig, checkpoint: os.PathLike) -> SACAgent:
    tensors, _ = load_checkpoint(checkpoint)
    agent = build_agent(cfg, 0)
    agent.load_tensors(tensors)
    return agent


def evaluate(cfg: RunConfig, checkpoint: os.PathLike, episodes: int, seed: int = 0) -> EvalResult:
    agent = load_agent(cfg, checkpoint)
    return evaluate_policy(cfg.env, agent_policy(agent), episodes, seed)


# -- training ----------------------------------------------------------------

class _Mean:
    def __init__(self):
        self.sums: Dict[str, float] = {}
        self.counts: Dict[str, int] = {}

    def add(self, key, value):
        self.sums[key] = self.sums.get(key, 0.0) + float(value)
        self.counts[key] = self.counts.get(key, 0) + 1

    def get(self, key):
        n = self.counts.get(key, 0)
        return self.sums[key] / n if n else None

    def reset(self):
        self.sums.clear()
        self.counts.clear()


@dataclass
class TrainResult:
    out_dir: Path
    metrics_path: Path
    final_checkpoint: Path
    first_success_step: Optional[int]
    eval_history: List[tuple]
    learner_updates: int
    env_steps: int


def train(cfg: RunConfig, out_dir: os.PathLike) -> TrainResult:
    """Interleaved schedule: latent-model refreshes, one learner update per env step, periodic evaluation."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    seeds = seed_streams(cfg.seed, ["env", "nets", "model", "sample", "augment", "explore", "eval"])
    torch.manual_seed(seeds["nets"])
    env = PointMaze(cfg.env)
    env_rng = np.random.default_rng(seeds["env"])
    sample_rng = np.random.default_rng(seeds["sample"])
    aug_rng = np.random.default_rng(seeds["augment"])
    explore_rng = np.random.default_rng(seeds["explore"])

    trajs = obtain_demos(cfg)
    demo_set = load_demos(trajs, cfg.env.r_done, cfg.env.r_live)
    buffer = ReplayBuffer(cfg.rl.replay_capacity)
    buffer.load_demos(demo_set)
    flags = cfg.flags
    p_d = cfg.rl.p_d if flags.importance_sampling else 0.0
    bounds = (ValueBounds.from_rewards(cfg.env.r_done, cfg.env.r_live, cfg.learner.gamma, flags.printed_q_min)
              if flags.value_clipping else None)
    agent = build_agent(cfg, seeds["nets"] % (2 ** 31))
    model = shaper = None
    use_shaping = flags.shaping and cfg.shaping.enabled and len(trajs) > 0
    if flags.shaping and not trajs:
        log.warning("shaping requested without demonstrations: disabled")
    if use_shaping:
        mcfg = ModelConfig(**{**cfg.model.__dict__, "augment": cfg.model.augment and flags.augmentation})
        model = LatentModel(mcfg, seeds["model"] % (2 ** 31))
        shaper = DemoShaper(model, demo_set.trajectories, cfg.shaping)

    metrics = MetricsWriter(out / "metrics.csv")
    ckpt_dir = out / "checkpoints"
    acc = _Mean()
    state = {"model_loss": None, "model_updates": None}

    def refresh_model():
        ms = cfg.model_schedule
        res = train_until_converged(
            model, lambda: _model_batch(buffer, model.cfg.batch_size, sample_rng), ms.max_updates,
            ms.min_updates, ms.window, ms.average, ms.tol)
        shaper.refresh()
        state["model_loss"], state["model_updates"] = res["loss"], res["updates"]

    def diagnostic(step, exc):
        save_run_checkpoint(ckpt_dir / "diagnostic", agent, model, step)
        raise TrainingError(f"training aborted at step {step}: {exc}") from exc

    if use_shaping:
        try:
            refresh_model()
        except TrainingError as exc:
            diagnostic(0, exc)

    first_success = None
    episodes = 0
    ep_return, ep_len = 0.0, 0
    eval_history = []
    updates = 0
    obs = env.reset(rng=env_rng)
    s = cfg.schedule
    for step in range(1, s.max_steps + 1):
        if step <= s.init_random_steps:
            action = explore_rng.uniform(-1.0, 1.0, size=2).astype(np.float32)
        else:
            action = agent.act(obs)
        res = env.step(action)
        buffer.push(Transition(obs, action, res.obs, res.reward, res.success))
        ep_return += res.reward
        ep_len += 1
        if res.done:
            episodes += 1
            acc.add("train_return", ep_return)
            acc.add("train_success", float(res.success))
            acc.add("train_length", ep_len)
            if res.success and first_success is None:
                first_success = step
            ep_return, ep_len = 0.0, 0
            obs = env.reset(rng=env_rng)
        else:
            obs = res.obs

        try:
            if use_shaping and step % cfg.model_schedule.period == 0:
                refresh_model()
            if step >= s.learn_start:
                stats = _learner_step(cfg, agent, buffer, shaper, bounds, p_d, sample_rng, aug_rng)
                updates += 1
                for k, v in stats.items():
                    acc.add(k, v)
        except TrainingError as exc:
            diagnostic(step, exc)

        if step % s.log_period == 0:
            row = {"step": step, "episodes": episodes, "first_success_step": first_success,
                   "model_version": model.version if model is not None else None,
                   "model_loss": state["model_loss"], "model_updates": state["model_updates"],
                   "epsilon": shaper.epsilon if shaper is not None else None}
            for k in ("train_return", "train_success", "train_length", "match_rate", "mean_bonus", "critic_loss",
                      "actor_loss", "q_mean", "alpha", "clip_hit_rate"):
                row[k] = acc.get(k)
            acc.reset()
            if step % s.eval_period == 0:
                ev = evaluate_policy(cfg.env, agent_policy(agent), s.eval_episodes, seeds["eval"] + step)
                row["eval_success"], row["eval_return"] = ev.success_rate, ev.mean_return
                eval_history.append((step, ev.success_rate))
            metrics.append(row)
        if step % s.checkpoint_period == 0:
            save_run_checkpoint(ckpt_dir / f"step_{step}", agent, model, step)
        if s.stop_success is not None and eval_history and eval_history[-1][0] == step \
                and eval_history[-1][1] >= s.stop_success:
            log.info("evaluation success %.2f at step %d: stopping early", eval_history[-1][1], step)
            break

    final = save_run_checkpoint(ckpt_dir / "final", agent, model, step)
    return TrainResult(out, out / "metrics.csv", final, first_success, eval_history, updates, step)


def _model_batch(buffer: ReplayBuffer, size: int, rng):
    b = buffer.sample_batch(size, 0.0, rng)
    return b.obs, b.action, b.next_obs


def _learner_step(cfg, agent, buffer, shaper, bounds, p_d, sample_rng, aug_rng) -> Dict[str, float]:
    batch = buffer.sample_batch(cfg.rl.batch_size, p_d, sample_rng)
    if shaper is not None:
        reward, shaped, bonus = shaper(batch.reward, batch.next_obs, batch.done)
    else:
        reward, shaped, bonus = batch.reward.astype(np.float64), np.zeros(len(batch), bool), np.zeros(len(batch))
    if cfg.flags.augmentation:
        obs = agent.augment_batch(batch.obs, aug_rng)
        next_obs = agent.augment_batch(batch.next_obs, aug_rng)
    else:
        obs = agent.augmenter.identity(to_chw(batch.obs))
        next_obs = agent.augmenter.identity(to_chw(batch.next_obs))
    stats = agent.update(obs, torch.as_tensor(batch.action), torch.as_tensor(reward, dtype=torch.float32),
                         next_obs, torch.as_tensor(batch.done, dtype=torch.float32), bounds)
    stats["match_rate"] = float(np.mean(shaped))
    stats["mean_bonus"] = float(np.mean(bonus))
    return stats


# -- ablations ---------------------------------------------------------------

ABLATIONS = {
    "baseline": dict(importance_sampling=False, value_clipping=False, shaping=False),
    "is": dict(importance_sampling=True, value_clipping=False, shaping=False),
    "is_vc": dict(importance_sampling=True, value_clipping=True, shaping=False),
    "is_vc_shaping": dict(importance_sampling=True, value_clipping=True, shaping=True),
}


def with_flags(cfg: RunConfig, **flags) -> RunConfig:
    return RunConfig.from_flat({**cfg.to_flat(), **{f"flags.{k}": v for k, v in flags.items()}})


# -- distance-metric bench ---------------------------------------------------

PROBES = {"a": (0.8, 0.8), "b": (0.8, 1.3), "c": (2.8, 0.8)}


def exploration_dataset(env_cfg: MazeConfig, episodes: int, length: int, seed: int):
    """Random-action transitions from uniformly drawn free positions."""
    env = PointMaze(env_cfg)
    rng = np.random.default_rng(seed)
    free = np.argwhere(~env.grid)
    obs_l, act_l, nxt_l = [], [], []
    for _ in range(episodes):
        while True:
            cell = free[rng.integers(len(free))]
            pos = cell + rng.uniform(-0.45, 0.45, size=2)
            if not env.in_goal(pos):
                break
        obs = env.reset(position=pos)
        for _ in range(length):
            a = rng.uniform(-1.0, 1.0, size=2).astype(np.float32)
            res = env.step(a)
            obs_l.append(obs)
            act_l.append(a)
            nxt_l.append(res.obs)
            obs = res.obs
            if res.done:
                break
    return np.stack(obs_l), np.stack(act_l), np.stack(nxt_l)


def metric_bench(cfg: RunConfig, out_path: Optional[os.PathLike] = None, seed: Optional[int] = None) -> List[Dict]:
    """Compare ground truth, pixel, plain-VAE and ADM distances on three probe positions."""
    seed = cfg.seed if seed is None else seed
    b = cfg.bench
    env_cfg = probe_u_maze(side=b.side, agent_radius_px=b.agent_radius_px)
    seeds = seed_streams(seed, ["data", "vae", "adm", "sample"])
    torch.manual_seed(seeds["vae"])
    obs, act, nxt = exploration_dataset(env_cfg, b.episodes, b.episode_length, seeds["data"])
    probes = {k: render(env_cfg, EnvState(np.array(v))) for k, v in PROBES.items()}

    def fit(use_dynamics: bool, model_seed: int) -> LatentModel:
        mcfg = ModelConfig(**{**cfg.model.__dict__, "side": b.side, "latent_dim": b.latent_dim,
                              "use_dynamics": use_dynamics, "augment": b.augment, "batch_size": b.batch_size,
                              "crop_pad": cfg.model.crop_pad if b.side == cfg.model.side else 4,
                              "dec_upsample": 2 if b.side % 4 == 0 else 1})
        model = LatentModel(mcfg, model_seed % (2 ** 31))
        rng = np.random.default_rng(seeds["sample"] + int(use_dynamics))
        for _ in range(b.updates):
            idx = rng.integers(0, len(obs), size=b.batch_size)
            model.update(to_chw(obs[idx]), torch.as_tensor(act[idx]), to_chw(nxt[idx]))
        return model

    def row(name, dab, dac):
        return {"metric": name, "d_ab": dab, "d_ac": dac, "ratio": dab / dac if dac > 0 else float("inf")}

    a, bb, c = probes["a"], probes["b"], probes["c"]
    gt = {k: EnvState(np.array(v)) for k, v in PROBES.items()}
    from .envsim import ground_truth_distance

    rows = [row("ground_truth", ground_truth_distance(gt["a"], gt["b"]), ground_truth_distance(gt["a"], gt["c"])),
            row("pixel_l2", float(np.linalg.norm(a - bb)), float(np.linalg.norm(a - c)))]
    vae = fit(False, seeds["vae"])
    rows.append(row("plain_vae", vae.adm_distance(a, bb), vae.adm_distance(a, c)))
    adm = fit(True, seeds["adm"])
    rows.append(row("adm", adm.adm_distance(a, bb), adm.adm_distance(a, c)))
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "d_ab", "d_ac", "ratio"])
            for r in rows:
                w.writerow([r["metric"], repr(r["d_ab"]), repr(r["d_ac"]), repr(r["ratio"])])
    return rows
