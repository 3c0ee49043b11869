"""Demonstration trajectories, the on-disk demo format and the replay buffer.

Demonstrations are kept twice: intact (for steps-to-success bookkeeping) and
sliced into pinned transitions that the ring buffer never evicts.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, UsageError

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    index: int
    observations: np.ndarray  # (T + 1, H, W, 3)
    actions: np.ndarray  # (T, A)
    success: bool = True
    states: Optional[np.ndarray] = None  # hidden positions, evaluation only

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.actions.ndim != 2:
            raise ConfigurationError("actions must be a (T, action_dim) array")
        if len(self.observations) != len(self.actions) + 1:
            raise ConfigurationError(
                f"trajectory {self.index}: {len(self.observations)} observations for {len(self.actions)} actions")

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    reward: float
    done: bool
    demo: bool = False
    demo_coords: Optional[Tuple[int, int]] = None


@dataclass
class DemoSet:
    trajectories: List[Trajectory]
    transitions: List[Transition]

    def __len__(self):
        return len(self.trajectories)

    @property
    def total_steps(self) -> int:
        return sum(t.length for t in self.trajectories)


def load_demos(trajectories: Sequence[Trajectory], r_done: float, r_live: float) -> DemoSet:
    """Validate demo trajectories and slice them into transitions.

    Demo ``i`` step ``t`` becomes ``(o_t, a_t, o_{t+1})`` with reward
    ``r_done`` and ``d = True`` on the final step only.
    """
    trajs = []
    transitions = []
    for i, traj in enumerate(trajectories):
        if not traj.success:
            raise UsageError(f"demonstration {i} does not end in the goal set")
        if traj.length == 0:
            raise UsageError(f"demonstration {i} is empty")
        traj = Trajectory(i, traj.observations, traj.actions, True, traj.states)
        trajs.append(traj)
        T = traj.length
        for t in range(T):
            last = t == T - 1
            transitions.append(Transition(traj.observations[t], traj.actions[t], traj.observations[t + 1],
                                          r_done if last else r_live, last, True, (i, t)))
    return DemoSet(trajs, transitions)


# -- demo file format --------------------------------------------------------

def save_demo_dir(path: os.PathLike, trajectories: Sequence[Trajectory]) -> Path:
    """``manifest.json`` + ``obs_<i>.bin`` (float32 LE frames) + ``act_<i>.csv``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, traj in enumerate(trajectories):
        (path / f"obs_{i}.bin").write_bytes(np.ascontiguousarray(traj.observations, dtype="<f4").tobytes())
        with open(path / f"act_{i}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in traj.actions:
                writer.writerow([format(float(v), ".9g") for v in row])
        entries.append({"index": i, "length": traj.length, "action_dim": int(traj.actions.shape[1]),
                        "image_shape": list(traj.observations.shape[1:])})
    manifest = {"num_trajectories": len(entries), "total_steps": sum(e["length"] for e in entries),
                "trajectories": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_demo_dir(path: os.PathLike) -> List[Trajectory]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read demo manifest in {path}: {exc}") from exc
    out = []
    for e in manifest["trajectories"]:
        i, T, A = e["index"], e["length"], e["action_dim"]
        shape = tuple(e["image_shape"])
        obs = np.frombuffer((path / f"obs_{i}.bin").read_bytes(), dtype="<f4")
        if obs.size != (T + 1) * int(np.prod(shape)):
            raise ConfigurationError(f"obs_{i}.bin holds {obs.size} floats, expected {(T + 1) * int(np.prod(shape))}")
        with open(path / f"act_{i}.csv", newline="", encoding="utf-8") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        acts = np.asarray(rows, dtype=np.float32).reshape(T, A) if T else np.zeros((0, A), np.float32)
        out.append(Trajectory(i, obs.reshape((T + 1,) + shape).copy(), acts, True))
    return out


# -- replay buffer -----------------------------------------------------------

@dataclass
class Batch:
    obs: np.ndarray  # float32 (b, H, W, 3)
    action: np.ndarray
    next_obs: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    is_demo: np.ndarray
    demo_coords: np.ndarray  # (b, 2), -1 for agent transitions

    def __len__(self):
        return len(self.reward)


def demo_quota(batch_size: int, p_d: float) -> int:
    """ceil(p_d * b), robust to float round-off just above an integer."""
    return min(batch_size, int(math.ceil(p_d * batch_size - 1e-9)))


class _Store:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.size = 0
        self.obs = self.next_obs = self.action = None
        self.reward = np.zeros(capacity, np.float32)
        self.done = np.zeros(capacity, bool)
        self.coords = np.full((capacity, 2), -1, np.int64)

    def allocate(self, obs_shape, action_dim):
        # np.zeros pages are committed lazily, so capacity is cheap until used
        self.obs = np.zeros((self.capacity,) + tuple(obs_shape), np.uint8)
        self.next_obs = np.zeros((self.capacity,) + tuple(obs_shape), np.uint8)
        self.action = np.zeros((self.capacity, action_dim), np.float32)

    def write(self, k, tr: Transition):
        self.obs[k] = _to_u8(tr.obs)
        self.next_obs[k] = _to_u8(tr.next_obs)
        self.action[k] = tr.action
        self.reward[k] = tr.reward
        self.done[k] = tr.done
        self.coords[k] = tr.demo_coords if tr.demo_coords is not None else (-1, -1)


def _to_u8(img) -> np.ndarray:
    return np.round(np.asarray(img, dtype=np.float32) * 255.0).astype(np.uint8)


class ReplayBuffer:
    """FIFO ring of agent transitions plus a pinned, never-evicted demo store.

    Images are held as uint8; rendered observations are multiples of 1/255 so
    the conversion is exact.
    """

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be positive")
        self.capacity = capacity
        self._agent = _Store(capacity)
        self._demo: Optional[_Store] = None
        self._next = 0
        self.demo_set: Optional[DemoSet] = None

    @property
    def num_agent(self) -> int:
        return self._agent.size

    @property
    def num_demo(self) -> int:
        return 0 if self._demo is None else self._demo.size

    def __len__(self):
        return self.num_agent + self.num_demo

    def load_demos(self, demo_set: DemoSet) -> None:
        n = len(demo_set.transitions)
        self.demo_set = demo_set
        if n == 0:
            self._demo = None
            return
        store = _Store(n)
        first = demo_set.transitions[0]
        store.allocate(np.shape(first.obs), len(first.action))
        for k, tr in enumerate(demo_set.transitions):
            store.write(k, tr)
        store.size = n
        self._demo = store

    def push(self, tr: Transition) -> None:
        if self._agent.obs is None:
            self._agent.allocate(np.shape(tr.obs), len(np.atleast_1d(tr.action)))
        self._agent.write(self._next, Transition(tr.obs, tr.action, tr.next_obs, tr.reward, tr.done))
        self._next = (self._next + 1) % self.capacity
        self._agent.size = min(self._agent.size + 1, self.capacity)

    def _gather(self, store: _Store, idx: np.ndarray, demo: bool):
        return (store.obs[idx], store.action[idx], store.next_obs[idx], store.reward[idx], store.done[idx],
                np.full(len(idx), demo), store.coords[idx])

    def sample_indices(self, batch_size: int, p_d: float, rng: np.random.Generator):
        if len(self) == 0:
            raise UsageError("cannot sample from an empty replay buffer")
        if not 0.0 <= p_d <= 1.0:
            raise ConfigurationError("p_d must lie in [0, 1]")
        n_demo = demo_quota(batch_size, p_d)
        if n_demo and self.num_demo == 0:
            raise UsageError("p_d > 0 requires demonstration transitions in the buffer")
        forced = rng.integers(0, self.num_demo, size=n_demo) if n_demo else np.zeros(0, np.int64)
        rest = rng.integers(0, len(self), size=batch_size - n_demo)
        # flat index space: [0, num_demo) are demos, the rest agent slots
        flat = np.concatenate([forced, rest])
        return flat

    def sample_batch(self, batch_size: int, p_d: float, rng: np.random.Generator) -> Batch:
        flat = self.sample_indices(batch_size, p_d, rng)
        is_demo = flat < self.num_demo
        parts = []
        if is_demo.any():
            parts.append((np.nonzero(is_demo)[0], self._gather(self._demo, flat[is_demo], True)))
        if (~is_demo).any():
            parts.append((np.nonzero(~is_demo)[0], self._gather(self._agent, flat[~is_demo] - self.num_demo, False)))
        b = len(flat)
        sample = parts[0][1]
        cols = [np.empty((b,) + col.shape[1:], col.dtype) for col in sample]
        for pos, values in parts:
            for col, v in zip(cols, values):
                col[pos] = v
        obs, act, nobs, rew, done, demo, coords = cols
        return Batch(obs.astype(np.float32) / 255.0, act, nobs.astype(np.float32) / 255.0, rew, done, demo, coords)

    def demo_transition(self, k: int) -> Transition:
        s = self._demo
        return Transition(s.obs[k].astype(np.float32) / 255.0, s.action[k].copy(),
                          s.next_obs[k].astype(np.float32) / 255.0, float(s.reward[k]), bool(s.done[k]), True,
                          tuple(int(v) for v in s.coords[k]))

    def agent_transition(self, k: int) -> Transition:
        """k-th stored agent transition, oldest first."""
        if not 0 <= k < self.num_agent:
            raise IndexError(k)
        slot = (self._next - self.num_agent + k) % self.capacity
        s = self._agent
        return Transition(s.obs[slot].astype(np.float32) / 255.0, s.action[slot].copy(),
                          s.next_obs[slot].astype(np.float32) / 255.0, float(s.reward[slot]), bool(s.done[slot]))
