"""Seeded environments behind one reset/step interface.

* ``gridworld``: 4x4 grid, start (0, 0), goal (3, 3), -1 per step and 0 on
  the move that reaches the goal.
* ``mountaincar``: the classic under-powered car, -1 per step.
* ``minibreakout``: a 10x10 MinAtar-style breakout with four binary channels
  (paddle, ball, trail, bricks).

Each env object owns its state and, where needed, its rng; ``reset`` takes
the episode seed so that trajectories are a pure function of
(task, episode seed, actions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractViolation

ENV_IDS = ("gridworld", "mountaincar", "minibreakout")

# Per-episode step caps applied by the training and transfer loops.
EPISODE_STEP_CAPS = {"gridworld": 100, "mountaincar": 1000, "minibreakout": 2000}


@dataclass(frozen=True)
class TaskSpec:
    env_id: str
    goal_perturbation_sigma: float = 0.0
    seed: int = 0
    # None means the environment's default goal.
    goal: Optional[tuple] = None


@dataclass(frozen=True)
class EnvState:
    observation: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class StepResult:
    next_observation: np.ndarray
    reward: float
    terminal: bool


class _Env:
    env_id = ""
    n_actions = 0
    obs_dim = 0

    def __init__(self):
        self.terminal = True

    def _check_step(self, action):
        if self.terminal:
            raise ContractViolation("step() called on a terminal (or unreset) state")
        if not (0 <= int(action) < self.n_actions) or int(action) != action:
            raise ContractViolation(f"action {action!r} outside 0..{self.n_actions - 1}")

    @property
    def state(self) -> EnvState:
        return EnvState(self.observation(), self.terminal)


class GridWorld(_Env):
    env_id = "gridworld"
    n_actions = 4
    obs_dim = 2
    size = 4
    start = (0, 0)
    # up, right, down, left as (dx, dy)
    moves = ((0, -1), (1, 0), (0, 1), (-1, 0))
    UP, RIGHT, DOWN, LEFT = range(4)

    def __init__(self, goal=(3, 3)):
        super().__init__()
        self.goal = tuple(int(g) for g in goal)
        self.pos = self.start

    def reset(self, episode_seed: int = 0) -> np.ndarray:
        self.pos = self.start
        self.terminal = False
        return self.observation()

    def observation(self, pos=None) -> np.ndarray:
        x, y = self.pos if pos is None else pos
        return np.array([x / (self.size - 1), y / (self.size - 1)])

    def step(self, action: int) -> StepResult:
        self._check_step(action)
        dx, dy = self.moves[action]
        x, y = self.pos[0] + dx, self.pos[1] + dy
        if 0 <= x < self.size and 0 <= y < self.size:
            self.pos = (x, y)
        if self.pos == self.goal:
            self.terminal = True
            return StepResult(self.observation(), 0.0, True)
        return StepResult(self.observation(), -1.0, False)

    def all_positions(self):
        return [(x, y) for y in range(self.size) for x in range(self.size)]

    def all_states(self) -> np.ndarray:
        return np.array([self.observation(p) for p in self.all_positions()])

    def cell_index(self, obs) -> int:
        x = int(round(obs[0] * (self.size - 1)))
        y = int(round(obs[1] * (self.size - 1)))
        return y * self.size + x


class MountainCar(_Env):
    """Standard dynamics: force 0.001, gravity 0.0025, terminal at the goal."""

    env_id = "mountaincar"
    n_actions = 3
    obs_dim = 2
    min_position, max_position = -1.2, 0.6
    max_speed = 0.07
    force, gravity = 0.001, 0.0025

    def __init__(self, goal_position=0.5):
        super().__init__()
        self.goal_position = float(goal_position)
        self.position = -0.5
        self.velocity = 0.0

    def reset(self, episode_seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(episode_seed)
        self.position = float(rng.uniform(-0.6, -0.4))
        self.velocity = 0.0
        self.terminal = False
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.array([self.position, self.velocity])

    def step(self, action: int) -> StepResult:
        self._check_step(action)
        v = self.velocity + (action - 1) * self.force - self.gravity * math.cos(3.0 * self.position)
        v = min(max(v, -self.max_speed), self.max_speed)
        p = min(max(self.position + v, self.min_position), self.max_position)
        if p == self.min_position and v < 0:
            v = 0.0
        self.position, self.velocity = p, v
        self.terminal = p >= self.goal_position
        return StepResult(self.observation(), -1.0, self.terminal)


class MiniBreakout(_Env):
    """10x10 breakout. Actions: 0 left, 1 stay, 2 right.

    The ball starts on row 4 at a seeded column moving down-diagonally. A
    brick hit scores +1 and reflects the ball vertically; missing the ball
    with the paddle ends the episode. Clearing the wall rebuilds it and
    respawns the ball, which is the only rng use after reset.
    """

    env_id = "minibreakout"
    n_actions = 3
    size = 10
    channels = ("paddle", "ball", "trail", "brick")
    obs_dim = 4 * size * size
    brick_rows = (1, 2, 3)
    ball_row = 4

    def __init__(self):
        super().__init__()
        self.rng = np.random.default_rng(0)
        self.bricks = np.zeros((self.size, self.size), dtype=bool)
        self.paddle = self.size // 2 - 1
        self.ball = (0, self.ball_row)
        self.last = self.ball
        self.direction = (1, 1)

    def _spawn_ball(self):
        col = int(self.rng.integers(self.size))
        dx = 1 if self.rng.random() < 0.5 else -1
        self.ball = (col, self.ball_row)
        self.last = self.ball
        self.direction = (dx, 1)

    def _build_wall(self):
        self.bricks[:] = False
        for r in self.brick_rows:
            self.bricks[r, :] = True

    def reset(self, episode_seed: int = 0) -> np.ndarray:
        self.rng = np.random.default_rng(episode_seed)
        self._build_wall()
        self.paddle = self.size // 2 - 1
        self._spawn_ball()
        self.terminal = False
        return self.observation()

    def observation(self) -> np.ndarray:
        n = self.size
        grid = np.zeros((4, n, n))
        grid[0, n - 1, self.paddle] = 1.0
        grid[1, self.ball[1], self.ball[0]] = 1.0
        grid[2, self.last[1], self.last[0]] = 1.0
        grid[3] = self.bricks
        return grid.ravel()

    def step(self, action: int) -> StepResult:
        self._check_step(action)
        n = self.size
        if action == 0:
            self.paddle = max(0, self.paddle - 1)
        elif action == 2:
            self.paddle = min(n - 1, self.paddle + 1)

        reward = 0.0
        bx, by = self.ball
        dx, dy = self.direction
        nx = bx + dx
        if not 0 <= nx < n:
            dx = -dx
            nx = bx + dx
        ny = by + dy
        if ny < 0:
            dy = 1
            ny = by + dy
        if self.bricks[ny, nx]:
            self.bricks[ny, nx] = False
            reward += 1.0
            dy = -dy
            ny = by
            if self.bricks[ny, nx]:
                self.bricks[ny, nx] = False
                reward += 1.0
        elif ny == n - 1:
            if self.paddle == nx:
                dy, ny = -1, by
            elif self.paddle == bx:
                dx, dy = -dx, -1
                nx, ny = bx, by
            else:
                self.terminal = True

        self.last = (bx, by)
        self.ball = (nx, ny)
        self.direction = (dx, dy)
        if not self.bricks.any() and not self.terminal:
            self._build_wall()
            self._spawn_ball()
        return StepResult(self.observation(), reward, self.terminal)


def _check_env_id(env_id):
    if env_id not in ENV_IDS:
        raise ConfigError("env_id", f"unknown environment {env_id!r}; choose from {ENV_IDS}")


def make_env(task: TaskSpec) -> _Env:
    _check_env_id(task.env_id)
    if task.env_id == "gridworld":
        return GridWorld(task.goal if task.goal is not None else (3, 3))
    if task.env_id == "mountaincar":
        return MountainCar(task.goal[0] if task.goal is not None else 0.5)
    return MiniBreakout()


def reset(task: TaskSpec, episode_seed: int):
    """Build the environment for ``task`` and reset it. Returns ``(env, EnvState)``."""
    env = make_env(task)
    env.reset(episode_seed)
    return env, env.state


def action_count(env_id: str) -> int:
    _check_env_id(env_id)
    return {"gridworld": 4, "mountaincar": 3, "minibreakout": 3}[env_id]


def observation_dim(env_id: str) -> int:
    _check_env_id(env_id)
    return {"gridworld": 2, "mountaincar": 2, "minibreakout": MiniBreakout.obs_dim}[env_id]


def perturb_goal(task: TaskSpec, trial_seed: int) -> TaskSpec:
    """Shift the goal by seeded zero-mean Gaussian noise.

    Gridworld noise is in normalised grid units (one unit spans the board)
    and the result is snapped to a cell that is never the start cell.
    Mountain-car noise is in position units, clamped to the track.
    Mini-breakout has no goal and is returned unchanged.
    """
    sigma = task.goal_perturbation_sigma
    if sigma < 0:
        raise ContractViolation("goal_perturbation_sigma must be non-negative")
    if sigma == 0 or task.env_id == "minibreakout":
        return task
    _check_env_id(task.env_id)
    rng = np.random.default_rng(trial_seed)
    if task.env_id == "gridworld":
        side = GridWorld.size - 1
        gx, gy = task.goal if task.goal is not None else (3, 3)
        noisy = np.array([gx / side, gy / side]) + rng.normal(0.0, sigma, size=2)
        cell = tuple(int(v) for v in np.rint(np.clip(noisy, 0.0, 1.0) * side))
        if cell == GridWorld.start:
            cell = (gx, gy)
        return replace(task, goal=cell)
    base = task.goal[0] if task.goal is not None else 0.5
    g = float(rng.normal(0.0, sigma))
    pos = min(max(base + g, MountainCar.min_position), MountainCar.max_position)
    return replace(task, goal=(pos,))


def probe_states(task: TaskSpec, count: int = 64, seed: int = 0) -> np.ndarray:
    """A fixed set of distinct states for correlation measurements.

    Gridworld returns all 16 cells; the other environments collect distinct
    observations from a seeded uniformly-random policy.
    """
    env = make_env(task)
    if isinstance(env, GridWorld):
        return env.all_states()
    rng = np.random.default_rng(seed)
    seen, states = set(), []
    episode = 0
    while len(states) < count and episode < 10 * count:
        obs = env.reset(int(rng.integers(2**31)))
        episode += 1
        for _ in range(EPISODE_STEP_CAPS[task.env_id]):
            key = obs.tobytes()
            if key not in seen:
                seen.add(key)
                states.append(obs)
                if len(states) >= count:
                    break
            res = env.step(int(rng.integers(env.n_actions)))
            obs = res.next_observation
            if res.terminal:
                break
    return np.array(states)
