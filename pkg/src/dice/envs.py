"""Small built-in environments with closed-form dynamics.

All environments share the ``reset(seed) -> obs`` / ``step(action) -> StepResult``
contract. Each team member owns its own instance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigurationError

log = logging.getLogger(__name__)


class ContractError(RuntimeError):
    """Raised when an environment is driven outside its contract."""


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_kind: str  # "continuous" or "discrete"
    action_dim: int   # number of actions for discrete spaces
    horizon: int
    low: tuple | None = None
    high: tuple | None = None
    reward_scale: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.action_kind not in ("continuous", "discrete"):
            raise ConfigurationError(f"unknown action kind {self.action_kind!r}")
        if self.action_kind == "continuous":
            if self.low is None or self.high is None:
                raise ConfigurationError("continuous actions need bounds")
            if not all(math.isfinite(v) for v in (*self.low, *self.high)):
                raise ConfigurationError("continuous action bounds must be finite")


@dataclass
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class Env:
    spec: EnvSpec

    def __init__(self):
        self.t = 0
        self.done = True

    def reset(self, seed=None):
        raise NotImplementedError

    def step(self, action) -> StepResult:
        raise NotImplementedError

    def _begin_step(self):
        if self.done:
            raise ContractError("step() called on a finished episode; call reset() first")
        self.t += 1

    def _clamp(self, action, info):
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        clamped = np.clip(a, self.spec.low, self.spec.high)
        if np.any(clamped != a):
            info["clamped"] = True
            log.debug("action %s clamped to %s", a, clamped)
        return clamped


class PointGoal2D(Env):
    """Point mass on the plane with several goal discs around the origin.

    Observation: position followed by the offset to every goal. Action: 2-D
    velocity in ``[-1, 1]^2`` scaled by ``max_speed``. Each step costs
    ``step_cost``; entering any goal disc ends the episode with that goal's
    bonus. ``goal_radius`` and ``goal_bonus`` may be scalars or one value
    per goal, which makes some optima harder to find than others.
    """

    def __init__(self, n_goals=3, goal_distance=1.0, goal_radius=0.15, goal_bonus=None,
                 max_speed=0.1, step_cost=0.01, horizon=64, angle_offset=math.pi / 2):
        super().__init__()
        if n_goals < 1:
            raise ConfigurationError("n_goals must be >= 1")
        angles = angle_offset + 2.0 * math.pi * np.arange(n_goals) / n_goals
        self.goals = goal_distance * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        self.goal_bonus = self._per_goal(1.0 if goal_bonus is None else goal_bonus, n_goals, "goal_bonus")
        self.goal_radius = self._per_goal(goal_radius, n_goals, "goal_radius")
        if np.any(self.goal_radius <= 0):
            raise ConfigurationError("goal_radius must be positive")
        self.max_speed = float(max_speed)
        self.step_cost = float(step_cost)
        self.spec = EnvSpec(obs_dim=2 + 2 * n_goals, action_kind="continuous", action_dim=2,
                            horizon=int(horizon), low=(-1.0, -1.0), high=(1.0, 1.0))
        self.pos = np.zeros(2)

    @staticmethod
    def _per_goal(value, n_goals, name):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            return np.full(n_goals, float(arr))
        if arr.shape != (n_goals,):
            raise ConfigurationError(f"{name} needs one entry per goal")
        return arr.copy()

    def _obs(self):
        return np.concatenate([self.pos, (self.goals - self.pos).ravel()])

    def reset(self, seed=None):
        self.t = 0
        self.done = False
        self.pos = np.zeros(2)
        return self._obs()

    def step(self, action):
        self._begin_step()
        info = {}
        a = self._clamp(action, info)
        self.pos = self.pos + self.max_speed * a
        reward = -self.step_cost
        dist = np.linalg.norm(self.goals - self.pos, axis=1)
        hit = np.flatnonzero(dist <= self.goal_radius)
        if hit.size:
            g = int(hit[np.argmin(dist[hit])])
            reward += float(self.goal_bonus[g])
            info["goal"] = g
            self.done = True
        if self.t >= self.spec.horizon:
            self.done = True
        return StepResult(self._obs(), reward, self.done, info)


DEFAULT_MAZE = (
    "S..#....",
    ".#.#.##.",
    ".#...#..",
    ".####.#.",
    "......#.",
    ".##.###.",
    "..#...#.",
    "#...#..G",
)


class GridMaze(Env):
    """Sparse-reward maze: +1 on reaching ``G``, 0 otherwise.

    Observation is a one-hot encoding of the current cell. Actions are
    0=up, 1=down, 2=left, 3=right; moves into walls or off the grid are no-ops.
    """

    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, layout=DEFAULT_MAZE, horizon=100):
        super().__init__()
        rows = [str(r) for r in layout]
        self.height = len(rows)
        self.width = len(rows[0])
        if any(len(r) != self.width for r in rows):
            raise ConfigurationError("maze rows must have equal length")
        self.walls = np.array([[c == "#" for c in r] for r in rows])
        self.start = self._find(rows, "S")
        self.goal = self._find(rows, "G")
        self.spec = EnvSpec(obs_dim=self.height * self.width, action_kind="discrete",
                            action_dim=4, horizon=int(horizon))
        self.cell = self.start

    @staticmethod
    def _find(rows, ch):
        for i, r in enumerate(rows):
            if ch in r:
                return (i, r.index(ch))
        raise ConfigurationError(f"maze layout has no {ch!r}")

    def _obs(self):
        obs = np.zeros(self.spec.obs_dim)
        obs[self.cell[0] * self.width + self.cell[1]] = 1.0
        return obs

    def reset(self, seed=None):
        self.t = 0
        self.done = False
        self.cell = self.start
        return self._obs()

    def step(self, action):
        self._begin_step()
        a = int(action)
        if not 0 <= a < 4:
            raise ContractError(f"action {a} outside 0..3")
        dr, dc = self.MOVES[a]
        r, c = self.cell[0] + dr, self.cell[1] + dc
        if 0 <= r < self.height and 0 <= c < self.width and not self.walls[r, c]:
            self.cell = (r, c)
        reward = 0.0
        if self.cell == self.goal:
            reward = 1.0
            self.done = True
        if self.t >= self.spec.horizon:
            self.done = True
        return StepResult(self._obs(), reward, self.done, {})


class LineReturn(Env):
    """One-dimensional bandit-like task with two symmetric optima at ``+-peak``.

    Reward is ``height - min((a - peak)^2, (a + peak)^2)`` for a constant
    observation, so optimal actions and reward gradients are known exactly.
    """

    def __init__(self, peak=1.0, height=1.0, bound=2.0, horizon=1):
        super().__init__()
        self.peak = float(peak)
        self.height = float(height)
        self.spec = EnvSpec(obs_dim=1, action_kind="continuous", action_dim=1,
                            horizon=int(horizon), low=(-float(bound),), high=(float(bound),))

    def reward(self, a):
        a = np.asarray(a, dtype=np.float64)
        return self.height - np.minimum((a - self.peak) ** 2, (a + self.peak) ** 2)

    def reset(self, seed=None):
        self.t = 0
        self.done = False
        return np.ones(1)

    def step(self, action):
        self._begin_step()
        info = {}
        a = self._clamp(action, info)
        r = float(self.reward(a[0]))
        if self.t >= self.spec.horizon:
            self.done = True
        return StepResult(np.ones(1), r, self.done, info)


ENVIRONMENTS = {
    "point_goal_2d": PointGoal2D,
    "grid_maze": GridMaze,
    "line_return": LineReturn,
}


def make_env(name, **params):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**params)
