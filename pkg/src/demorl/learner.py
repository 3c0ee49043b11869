"""Off-policy actor-critic (SAC with twin critics) on augmented pixel batches."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffnet import Network, NetworkSpec, Optimizer, conv, dense, flatten, infer_shapes, mlp_spec
from .errors import ConfigurationError, TrainingError
from .latentmodel import Augmenter, to_chw

ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX = -10.0, 2.0


@dataclass(frozen=True)
class ValueBounds:
    q_min: float
    q_max: float

    def __post_init__(self):
        if self.q_min > self.q_max:
            raise ConfigurationError("q_min must not exceed q_max")

    @classmethod
    def from_rewards(cls, r_done: float, r_live: float, gamma: float, printed_variant: bool = False) -> "ValueBounds":
        """Lower bound is the value of collecting ``r_live`` forever, ``r_live / (1 - gamma)``.

        ``printed_variant`` uses ``(1 - gamma) * r_live`` instead.
        """
        q_min = (1.0 - gamma) * r_live if printed_variant else r_live / (1.0 - gamma)
        return cls(q_min, r_done)


@dataclass
class LearnerConfig:
    gamma: float = 0.99
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    alpha_lr: float = 1e-4
    init_temperature: float = 0.1
    tau: float = 0.01
    encoder_tau: float = 0.05
    feature_dim: int = 32
    enc_channels: int = 16
    enc_convs: int = 2
    hidden: int = 256
    crop_pad: int = 2
    actor_update_every: int = 2
    target_update_every: int = 2


def rl_encoder_spec(in_channels: int, crop: int, feature_dim: int, channels: int, n_conv: int) -> NetworkSpec:
    layers = []
    c = in_channels
    for _ in range(n_conv):
        layers.append(conv(c, channels, 3, 2, activation="relu", norm=True))
        c = channels
    layers.append(flatten())
    n = infer_shapes(NetworkSpec((in_channels, crop, crop), tuple(layers)))[-1][0]
    layers.append(dense(n, feature_dim, norm=True))
    return NetworkSpec((in_channels, crop, crop), tuple(layers))


def squashed_log_prob(pre_tanh: torch.Tensor, mu: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """log density of ``tanh(u)`` for ``u ~ N(mu, std^2)``, summed over action axes."""
    logp = (-0.5 * ((pre_tanh - mu) / log_std.exp()) ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    return logp - (2.0 * (math.log(2.0) - pre_tanh - F.softplus(-2.0 * pre_tanh))).sum(-1)


def soft_update(online: nn.Module, target: nn.Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online."""
    with torch.no_grad():
        for p, tp in zip(online.parameters(), target.parameters()):
            tp.mul_(1.0 - tau).add_(p, alpha=tau)


class Actor(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int, hidden: int, seed: int):
        super().__init__()
        self.net = Network(mlp_spec(feature_dim, 2 * action_dim, hidden), seed)
        self.action_dim = action_dim

    def forward(self, feat: torch.Tensor):
        out = self.net(feat)
        mu, raw = out[:, :self.action_dim], out[:, self.action_dim:]
        log_std = ACTOR_LOG_STD_MIN + 0.5 * (ACTOR_LOG_STD_MAX - ACTOR_LOG_STD_MIN) * (torch.tanh(raw) + 1.0)
        return mu, log_std

    def sample(self, feat: torch.Tensor, generator: Optional[torch.Generator] = None):
        mu, log_std = self(feat)
        u = mu + log_std.exp() * torch.randn(mu.shape, generator=generator)
        return torch.tanh(u), squashed_log_prob(u, mu, log_std), torch.tanh(mu)


class Critic(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int, hidden: int, seed: int):
        super().__init__()
        self.q1 = Network(mlp_spec(feature_dim + action_dim, 1, hidden), seed)
        self.q2 = Network(mlp_spec(feature_dim + action_dim, 1, hidden), seed + 1)

    def forward(self, feat, action):
        x = torch.cat([feat, action], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


class SACAgent:
    """Twin-critic SAC with a shared pixel encoder trained only through the critic loss."""

    def __init__(self, obs_shape, action_dim: int, cfg: LearnerConfig, seed: int = 0):
        side, _, channels = obs_shape
        self.cfg = cfg
        self.action_dim = action_dim
        self.augmenter = Augmenter(cfg.crop_pad, seed)
        crop = side - 2 * cfg.crop_pad
        self.encoder = Network(rl_encoder_spec(channels, crop, cfg.feature_dim, cfg.enc_channels, cfg.enc_convs), seed)
        self.actor = Actor(cfg.feature_dim, action_dim, cfg.hidden, seed + 10)
        self.critic = Critic(cfg.feature_dim, action_dim, cfg.hidden, seed + 20)
        self.target_encoder = copy.deepcopy(self.encoder)
        self.target_critic = copy.deepcopy(self.critic)
        for p in list(self.target_encoder.parameters()) + list(self.target_critic.parameters()):
            p.requires_grad_(False)
        self.log_alpha = torch.tensor(math.log(cfg.init_temperature), requires_grad=True)
        self.target_entropy = -float(action_dim)
        self.critic_opt = Optimizer(list(self.encoder.parameters()) + list(self.critic.parameters()), cfg.critic_lr)
        self.actor_opt = Optimizer(self.actor.parameters(), cfg.actor_lr)
        self.alpha_opt = Optimizer([self.log_alpha], cfg.alpha_lr)
        self.generator = torch.Generator().manual_seed(seed + 30)
        self.updates = 0
        self.last_targets: Optional[torch.Tensor] = None

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def modules(self) -> Dict[str, nn.Module]:
        return {"encoder": self.encoder, "actor": self.actor, "critic": self.critic,
                "target_encoder": self.target_encoder, "target_critic": self.target_critic}

    # -- acting ------------------------------------------------------------
    @torch.no_grad()
    def act(self, obs: np.ndarray, deterministic: bool = False) -> np.ndarray:
        x = self.augmenter.identity(to_chw(obs))
        feat = self.encoder(x)
        if deterministic:
            mu, _ = self.actor(feat)
            return torch.tanh(mu)[0].numpy().astype(np.float32)
        a, _, _ = self.actor.sample(feat, self.generator)
        return a[0].numpy().astype(np.float32)

    def augment_batch(self, images, rng: np.random.Generator) -> torch.Tensor:
        """Independent random crop for every element of an (N, H, W, C) batch."""
        return self.augmenter(to_chw(images), rng)

    # -- updates -----------------------------------------------------------
    def critic_update(self, obs, action, reward, next_obs, done, bounds: Optional[ValueBounds]) -> Dict[str, float]:
        """One TD step; ``obs``/``next_obs`` are already augmented (N, C, h, w) tensors."""
        with torch.no_grad():
            next_feat = self.encoder(next_obs)
            next_action, next_logp, _ = self.actor.sample(next_feat, self.generator)
            tq1, tq2 = self.target_critic(self.target_encoder(next_obs), next_action)
            soft_v = torch.min(tq1, tq2) - self.alpha.detach() * next_logp
            target = reward + self.cfg.gamma * (1.0 - done) * soft_v
            clip_rate = 0.0
            if bounds is not None:
                clip_rate = float(((target < bounds.q_min) | (target > bounds.q_max)).float().mean())
                target = target.clamp(bounds.q_min, bounds.q_max)
            if not torch.isfinite(target).all():
                raise TrainingError("non-finite TD target")
        self.last_targets = target
        feat = self.encoder(obs)
        q1, q2 = self.critic(feat, action)
        loss = F.mse_loss(q1, target) + F.mse_loss(q2, target)
        self.critic_opt.zero_grad()
        loss.backward()
        self.critic_opt.step()
        return {"critic_loss": loss.item(), "q_mean": q1.mean().item(), "target_mean": target.mean().item(),
                "clip_hit_rate": clip_rate, "_feat": feat.detach()}

    def actor_update(self, feat: torch.Tensor) -> Dict[str, float]:
        """Maximize min-Q minus entropy cost on detached features, then tune the temperature."""
        action, logp, _ = self.actor.sample(feat, self.generator)
        for p in self.critic.parameters():
            p.requires_grad_(False)
        q1, q2 = self.critic(feat, action)
        for p in self.critic.parameters():
            p.requires_grad_(True)
        loss = (self.alpha.detach() * logp - torch.min(q1, q2)).mean()
        self.actor_opt.zero_grad()
        loss.backward()
        self.actor_opt.step()
        alpha_loss = -(self.log_alpha * (logp.detach() + self.target_entropy)).mean()
        self.alpha_opt.zero_grad()
        alpha_loss.backward()
        self.alpha_opt.step()
        return {"actor_loss": loss.item(), "alpha": self.alpha.item(), "entropy": -logp.mean().item()}

    def update(self, obs, action, reward, next_obs, done, bounds: Optional[ValueBounds]) -> Dict[str, float]:
        """Critic step, then (every few updates) actor and target steps."""
        stats = self.critic_update(obs, action, reward, next_obs, done, bounds)
        feat = stats.pop("_feat")
        self.updates += 1
        if self.updates % self.cfg.actor_update_every == 0:
            stats.update(self.actor_update(feat))
        if self.updates % self.cfg.target_update_every == 0:
            self.polyak_update()
        return stats

    def polyak_update(self, tau: Optional[float] = None, encoder_tau: Optional[float] = None) -> None:
        soft_update(self.critic, self.target_critic, self.cfg.tau if tau is None else tau)
        soft_update(self.encoder, self.target_encoder, self.cfg.encoder_tau if encoder_tau is None else encoder_tau)

    def tensors(self) -> Dict[str, torch.Tensor]:
        out = {}
        for prefix, module in self.modules().items():
            for k, v in module.state_dict().items():
                out[f"{prefix}.{k}"] = v
        out["log_alpha"] = self.log_alpha.detach().reshape(1)
        return out

    def load_tensors(self, tensors) -> None:
        from .diffnet import load_module_tensors

        load_module_tensors(self.modules(), tensors)
        with torch.no_grad():
            self.log_alpha.copy_(torch.as_tensor(np.asarray(tensors["log_alpha"]).reshape(())))
