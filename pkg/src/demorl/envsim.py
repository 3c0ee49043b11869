"""Pixel-rendered 2-D point maze with a sparse reward and a waypoint demonstrator.

World frame: cell ``(i, j)`` of the wall grid covers
``[i - 0.5, i + 0.5] x [j - 0.5, j + 0.5]``; a position is ``(x, y)`` with
``x`` along grid rows and ``y`` along grid columns. Images are rendered with
rows following ``x`` and columns following ``y``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DemonstratorError, UsageError

FLOOR = np.array([0.92, 0.92, 0.92])
WALL = np.array([0.25, 0.3, 0.45])
AGENT = np.array([0.1, 0.8, 0.15])

U_MAZE = ("#####",
          "#...#",
          "###.#",
          "#...#",
          "#####")

CORRIDOR = ("#######",
            "#.....#",
            "#######")


@dataclass
class MazeConfig:
    walls: Tuple[str, ...] = U_MAZE
    start: Tuple[int, int] = (3, 2)
    goal: Tuple[float, float] = (1.0, 2.0)
    goal_radius: float = 0.35
    side: int = 48
    max_episode_length: int = 50
    r_done: float = 100.0
    r_live: float = -1.0
    max_step: float = 0.15
    start_jitter: float = 0.1
    agent_radius_px: float = 1.6

    def __post_init__(self):
        self.walls = tuple(self.walls)
        self.start = tuple(int(v) for v in self.start)
        self.goal = tuple(float(v) for v in self.goal)

    @property
    def grid(self) -> np.ndarray:
        return np.array([[ch == "#" for ch in row] for row in self.walls], dtype=bool)

    def validate(self) -> None:
        rows = {len(r) for r in self.walls}
        if len(rows) != 1:
            raise ConfigurationError("maze rows must all have the same length")
        if not set("".join(self.walls)) <= {"#", "."}:
            raise ConfigurationError("maze rows may only contain '#' and '.'")
        if not self.r_done > 0:
            raise ConfigurationError("r_done must be positive")
        if not self.r_live < 0:
            raise ConfigurationError("r_live must be negative")
        if self.side < 8 or self.max_episode_length < 1 or self.max_step <= 0:
            raise ConfigurationError("side, max_episode_length and max_step must be positive")
        grid = self.grid
        si, sj = self.start
        if not (0 <= si < grid.shape[0] and 0 <= sj < grid.shape[1]) or grid[si, sj]:
            raise ConfigurationError(f"start cell {self.start} is outside the maze or a wall")
        if is_blocked(grid, np.asarray(self.goal)):
            raise ConfigurationError("goal centre lies inside a wall")
        for i, j in zip(*np.nonzero(grid)):
            # closest point of the wall cell to the goal centre
            cx = np.clip(self.goal[0], i - 0.5, i + 0.5)
            cy = np.clip(self.goal[1], j - 0.5, j + 0.5)
            if np.hypot(cx - self.goal[0], cy - self.goal[1]) < self.goal_radius:
                raise ConfigurationError("goal region overlaps a wall")
        if np.hypot(si - self.goal[0], sj - self.goal[1]) <= self.goal_radius + self.start_jitter:
            raise ConfigurationError("start region intersects the goal region")


def u_maze(**overrides) -> MazeConfig:
    """U-maze with start and goal in the two arms' middles; the demonstrator needs ~25 steps."""
    return MazeConfig(**overrides)


def probe_u_maze(**overrides) -> MazeConfig:
    """U-maze laid out like the point-mass probe figure: start and goal at the arm ends."""
    kw = dict(start=(3, 1), goal=(1.0, 1.0), goal_radius=0.35, max_episode_length=80)
    kw.update(overrides)
    return MazeConfig(**kw)


def corridor_maze(**overrides) -> MazeConfig:
    kw = dict(walls=CORRIDOR, start=(1, 1), goal=(1.0, 5.0), goal_radius=0.3, max_episode_length=60)
    kw.update(overrides)
    return MazeConfig(**kw)


@dataclass
class EnvState:
    position: np.ndarray
    steps: int = 0
    done: bool = False

    def copy(self) -> "EnvState":
        return EnvState(np.array(self.position, dtype=np.float64), self.steps, self.done)


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    success: bool
    truncated: bool


def is_blocked(grid: np.ndarray, pos: np.ndarray) -> bool:
    i = int(np.floor(pos[0] + 0.5))
    j = int(np.floor(pos[1] + 0.5))
    if i < 0 or j < 0 or i >= grid.shape[0] or j >= grid.shape[1]:
        return True
    return bool(grid[i, j])


def _segment_blocked(grid: np.ndarray, a: np.ndarray, b: np.ndarray, samples: int = 8) -> bool:
    for s in np.linspace(0.0, 1.0, samples + 1)[1:]:
        if is_blocked(grid, a + s * (b - a)):
            return True
    return False


_BACKGROUNDS = {}


def _background(config: MazeConfig) -> np.ndarray:
    key = (config.walls, config.side)
    if key not in _BACKGROUNDS:
        grid = config.grid
        side = config.side
        scale = side / max(grid.shape)
        centres = (np.arange(side) + 0.5) / scale - 0.5
        ii = np.clip(np.floor(centres + 0.5).astype(int), 0, grid.shape[0] - 1)
        jj = np.clip(np.floor(centres + 0.5).astype(int), 0, grid.shape[1] - 1)
        occ = grid[ii[:, None], jj[None, :]]
        # pixels beyond a non-square grid are painted as wall
        occ |= (centres[:, None] > grid.shape[0] - 0.5) | (centres[None, :] > grid.shape[1] - 0.5)
        img = np.where(occ[..., None], WALL, FLOOR)
        yy, xx = np.meshgrid(centres, centres)
        _BACKGROUNDS[key] = (img, xx, yy, scale)
    return _BACKGROUNDS[key]


def render(config: MazeConfig, state: EnvState) -> np.ndarray:
    """RGB image (side, side, 3) in [0, 1], quantized to multiples of 1/255."""
    bg, xx, yy, scale = _background(config)
    dist_px = np.hypot(xx - state.position[0], yy - state.position[1]) * scale
    alpha = np.clip(config.agent_radius_px + 0.5 - dist_px, 0.0, 1.0)[..., None]
    img = bg * (1.0 - alpha) + AGENT * alpha
    return np.round(img * 255.0).astype(np.float32) / np.float32(255.0)


def ground_truth_distance(state1: EnvState, state2: EnvState) -> float:
    """Euclidean distance between two agent positions (evaluation only)."""
    return float(np.linalg.norm(np.asarray(state1.position, float) - np.asarray(state2.position, float)))


class PointMaze:
    """Deterministic point-mass maze. The hidden state is exposed only for evaluation."""

    def __init__(self, config: MazeConfig):
        config.validate()
        self.config = config
        self.grid = config.grid
        self.state: Optional[EnvState] = None

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def obs_shape(self) -> Tuple[int, int, int]:
        return (self.config.side, self.config.side, 3)

    def in_goal(self, pos) -> bool:
        g = self.config.goal
        return bool(np.hypot(pos[0] - g[0], pos[1] - g[1]) <= self.config.goal_radius)

    def reset(self, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None,
              position=None) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng(seed)
        if position is not None:
            pos = np.asarray(position, dtype=np.float64)
            if is_blocked(self.grid, pos):
                raise ConfigurationError(f"position {pos} lies inside a wall")
        else:
            centre = np.asarray(self.config.start, dtype=np.float64)
            pos = centre.copy()
            r = self.config.start_jitter
            if r > 0:
                for _ in range(100):
                    ang = rng.uniform(0, 2 * np.pi)
                    rad = r * np.sqrt(rng.uniform())
                    cand = centre + rad * np.array([np.cos(ang), np.sin(ang)])
                    if not is_blocked(self.grid, cand) and not self.in_goal(cand):
                        pos = cand
                        break
        self.state = EnvState(pos, 0, False)
        return render(self.config, self.state)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise UsageError("reset() must be called before step()")
        if self.state.done:
            raise UsageError("step() called on a finished episode")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        disp = self.config.max_step * a
        norm = np.linalg.norm(disp)
        if norm > self.config.max_step:
            disp *= self.config.max_step / norm
        pos = self.state.position
        new = pos + disp
        if _segment_blocked(self.grid, pos, new):
            new = pos.copy()
        self.state.position = new
        self.state.steps += 1
        success = self.in_goal(new)
        truncated = (not success) and self.state.steps >= self.config.max_episode_length
        self.state.done = success or truncated
        reward = self.config.r_done if success else self.config.r_live
        return StepResult(render(self.config, self.state), float(reward), self.state.done, success, truncated)


def shortest_path(grid: np.ndarray, start: Tuple[int, int], goal: Tuple[int, int]) -> Optional[List[Tuple[int, int]]]:
    """Breadth-first search over free cells with 4-connectivity."""
    start, goal = tuple(start), tuple(goal)
    prev = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            path = []
            while cell is not None:
                path.append(cell)
                cell = prev[cell]
            return path[::-1]
        i, j = cell
        for nb in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= nb[0] < grid.shape[0] and 0 <= nb[1] < grid.shape[1] and not grid[nb] and nb not in prev:
                prev[nb] = cell
                queue.append(nb)
    return None


@dataclass
class Rollout:
    observations: List[np.ndarray] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    states: List[np.ndarray] = field(default_factory=list)
    success: bool = False


class WaypointPolicy:
    """Follows cell centres along the BFS path, then heads for the goal centre.

    Reads the hidden agent position, which only the scripted demonstrator may do.
    """

    def __init__(self, config: MazeConfig, noise: float = 0.05, rng: Optional[np.random.Generator] = None):
        grid = config.grid
        gi, gj = int(np.floor(config.goal[0] + 0.5)), int(np.floor(config.goal[1] + 0.5))
        path = shortest_path(grid, config.start, (gi, gj))
        if path is None:
            raise DemonstratorError(f"no path from {config.start} to the goal cell {(gi, gj)}")
        self.waypoints = [np.asarray(c, dtype=np.float64) for c in path[1:-1]] + [np.asarray(config.goal)]
        self.config = config
        self.noise = noise
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._k = 0

    def reset(self) -> None:
        self._k = 0

    def __call__(self, obs, state: EnvState) -> np.ndarray:
        pos = state.position
        while self._k < len(self.waypoints) - 1 and np.linalg.norm(self.waypoints[self._k] - pos) < self.config.max_step:
            self._k += 1
        delta = self.waypoints[self._k] - pos
        dist = np.linalg.norm(delta)
        speed = min(1.0, dist / self.config.max_step)
        action = delta / max(dist, 1e-12) * speed
        if self.noise > 0:
            action = action + self.rng.normal(0.0, self.noise, size=2)
        return np.clip(action, -1.0, 1.0)


def rollout(env: PointMaze, policy: Callable[[np.ndarray, EnvState], np.ndarray],
            rng: Optional[np.random.Generator] = None, seed: Optional[int] = None) -> Rollout:
    obs = env.reset(seed=seed, rng=rng)
    if hasattr(policy, "reset"):
        policy.reset()
    out = Rollout(observations=[obs], states=[env.state.position.copy()])
    while True:
        action = np.asarray(policy(obs, env.state), dtype=np.float32)
        res = env.step(action)
        obs = res.obs
        out.actions.append(action)
        out.rewards.append(res.reward)
        out.observations.append(obs)
        out.states.append(env.state.position.copy())
        if res.done:
            out.success = res.success
            return out


def scripted_demonstrator(config: MazeConfig, seed: int = 0, noise: float = 0.05):
    """One successful demonstration trajectory (raises DemonstratorError otherwise)."""
    from .demostore import Trajectory

    rng = np.random.default_rng(seed)
    env = PointMaze(config)
    policy = WaypointPolicy(config, noise=noise, rng=rng)
    ro = rollout(env, policy, rng=rng)
    if not ro.success:
        raise DemonstratorError(f"demonstrator failed to reach the goal within {config.max_episode_length} steps")
    return Trajectory(index=0, observations=np.stack(ro.observations), actions=np.stack(ro.actions),
                      success=True, states=np.stack(ro.states))
