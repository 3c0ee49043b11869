"""Demonstration-guided exploration reward.

A transition whose next observation lies within ``epsilon`` of its nearest
demonstration frame ``(i*, t*)`` earns ``alpha ** (T_i* - t*) * r_e`` on top
of the sparse reward, unless it already reached the goal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, UsageError

log = logging.getLogger(__name__)


@dataclass
class ShapingConfig:
    r_e: float = 1.0
    alpha: float = 0.98
    enabled: bool = True

    def validate(self, r_live: Optional[float] = None) -> None:
        if not self.r_e > 0:
            raise ConfigurationError("r_e must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if r_live is not None and abs(self.r_e) > abs(r_live):
            raise ConfigurationError("|r_e| must not exceed |r_live| or value clipping loses its guarantee")


@dataclass
class DemoEmbeddingIndex:
    """Encoded demo frames, stored sorted by (-t, i) so first-argmin breaks ties."""

    embeddings: np.ndarray  # (M, d) float64
    traj: np.ndarray  # (M,) demo index i
    step: np.ndarray  # (M,) time index t
    lengths: np.ndarray  # (n,) T_i
    version: int
    pair_distances: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.traj)


def rebuild_index(trajectories: Sequence, embed_fn: Callable[[np.ndarray], np.ndarray],
                  version: int) -> DemoEmbeddingIndex:
    """Re-encode every demo frame, terminal frames included."""
    embs, traj, step, lengths, pairs = [], [], [], [], []
    for i, tr in enumerate(trajectories):
        e = np.asarray(embed_fn(tr.observations), dtype=np.float64)
        embs.append(e)
        traj.append(np.full(len(e), i))
        step.append(np.arange(len(e)))
        lengths.append(tr.length)
        if len(e) > 1:
            pairs.append(np.linalg.norm(e[1:] - e[:-1], axis=1))
    if not embs:
        return DemoEmbeddingIndex(np.zeros((0, 0)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), version)
    embs, traj, step = np.concatenate(embs), np.concatenate(traj), np.concatenate(step)
    order = np.lexsort((traj, -step))
    return DemoEmbeddingIndex(embs[order], traj[order], step[order], np.asarray(lengths), version,
                              np.concatenate(pairs) if pairs else np.zeros(0))


def compute_epsilon(index: DemoEmbeddingIndex) -> Optional[float]:
    """Mean distance between consecutive frames over all demos; ``None`` if there are no pairs."""
    if len(index.pair_distances) == 0:
        log.warning("no consecutive demo frames: exploration reward disabled")
        return None
    return float(np.mean(index.pair_distances))


def nearest_demo_batch(queries: np.ndarray, index: DemoEmbeddingIndex) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact nearest demo frame for each query row: (i*, t*, distance)."""
    if len(index) == 0:
        raise UsageError("nearest-demo lookup on an empty index")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d2 = ((q[:, None, :] - index.embeddings[None, :, :]) ** 2).sum(-1)
    k = np.argmin(d2, axis=1)
    return index.traj[k], index.step[k], np.sqrt(d2[np.arange(len(q)), k])


def nearest_demo(query: np.ndarray, index: DemoEmbeddingIndex) -> Tuple[int, int, float]:
    i, t, d = nearest_demo_batch(np.asarray(query)[None], index)
    return int(i[0]), int(t[0]), float(d[0])


def _check_version(index: DemoEmbeddingIndex, version: Optional[int]) -> None:
    if version is not None and version != index.version:
        raise UsageError(f"demo index built for encoder version {index.version}, current is {version}")


def shape_rewards(rewards: np.ndarray, next_embeddings: np.ndarray, goal_hit: np.ndarray,
                  index: Optional[DemoEmbeddingIndex], epsilon: Optional[float], cfg: ShapingConfig,
                  encoder_version: Optional[int] = None):
    """Vectorized dense reward; returns (r_dense, shaped_mask, bonus)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    zeros = np.zeros_like(rewards)
    if not cfg.enabled or index is None or epsilon is None or len(index) == 0:
        return rewards.copy(), zeros.astype(bool), zeros
    _check_version(index, encoder_version)
    i, t, dist = nearest_demo_batch(next_embeddings, index)
    steps_to_go = index.lengths[i] - t
    shaped = (dist <= epsilon) & ~np.asarray(goal_hit, dtype=bool)
    bonus = np.where(shaped, cfg.alpha ** steps_to_go * cfg.r_e, 0.0)
    return rewards + bonus, shaped, bonus


def shape_reward(reward: float, next_embedding: np.ndarray, goal_hit: bool, index: Optional[DemoEmbeddingIndex],
                 epsilon: Optional[float], cfg: ShapingConfig, encoder_version: Optional[int] = None) -> float:
    r, _, _ = shape_rewards(np.array([reward]), np.asarray(next_embedding)[None], np.array([goal_hit]), index,
                            epsilon, cfg, encoder_version)
    return float(r[0])


class DemoShaper:
    """Keeps the demo index and threshold in step with a latent model's encoder version."""

    def __init__(self, model, trajectories: Sequence, cfg: ShapingConfig):
        self.model = model
        self.trajectories = list(trajectories)
        self.cfg = cfg
        self.index: Optional[DemoEmbeddingIndex] = None
        self.epsilon: Optional[float] = None

    def refresh(self) -> None:
        self.index = rebuild_index(self.trajectories, self.model.embed, self.model.version)
        self.epsilon = compute_epsilon(self.index) if len(self.index) else None

    @property
    def active(self) -> bool:
        return self.cfg.enabled and self.index is not None and self.epsilon is not None

    def __call__(self, rewards, next_obs, goal_hit):
        if not self.active:
            return shape_rewards(rewards, None, goal_hit, None, None, self.cfg)
        emb = self.model.embed(next_obs)
        return shape_rewards(rewards, emb, goal_hit, self.index, self.epsilon, self.cfg, self.model.version)
