"""Generative-model environments for planning.

Every environment is an immutable object with a pure ``step`` function over
copyable :class:`SimState` values, so a planner can branch from any state as
often as it likes. Score changes are clipped to ``{-1, 0, +1}`` and planning
treats a lost life as terminal while evaluation only stops at game over.

Families
--------
DelayedCorridor
    A 1-D corridor. Moving right off the last cell ends the game with +10.
    Nothing else scores, so a planner whose horizon is shorter than the
    distance to the exit sees only zero rewards.
TrapGrid
    A square grid with a goal and trap cells. Entering a trap starts a fall
    that lasts ``fall_steps`` decisions (actions are ignored meanwhile) and
    ends with a lost life, so the bad outcome is delayed.
RandomMDP
    Seeded tabular MDP with one-hot observations. Used by the oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid environment or experiment configuration."""


class UsageError(RuntimeError):
    """An operation was called in a state that does not allow it."""


@dataclass(frozen=True)
class SimState:
    """Copyable environment state.

    Equality and hashing use ``payload`` and ``game_over`` only; ``score``
    and ``step_count`` are bookkeeping that does not affect the dynamics.
    """

    payload: tuple
    score: int = field(default=0, compare=False)
    step_count: int = field(default=0, compare=False)
    game_over: bool = False


@dataclass(frozen=True)
class StepOutcome:
    next_state: SimState
    score_delta: int
    clipped_reward: int
    life_lost: bool
    game_over: bool

    @property
    def planning_terminal(self) -> bool:
        return self.life_lost or self.game_over


@dataclass(frozen=True)
class EnvSpec:
    """Environment family plus its size parameters.

    ``params`` is family specific; see the ``make_env`` docstring.
    """

    family: str = "DelayedCorridor"
    params: dict = field(default_factory=dict)
    num_actions: int | None = None
    frame_skip: int = 1
    seed: int = 0


def clip_reward(score_delta: float) -> int:
    return int(np.sign(score_delta))


class Env:
    """Base class. Subclasses implement ``_initial``, ``_advance`` and ``frame``."""

    num_actions: int
    frame_shape: tuple[int, int]
    frame_skip: int = 1
    stochastic = False

    def reset(self, rng_seed=None) -> SimState:
        return self._initial(rng_seed)

    def step(self, state: SimState, action: int, rng: np.random.Generator | None = None) -> StepOutcome:
        if state.game_over:
            raise UsageError("step called on a game-over state")
        if not 0 <= action < self.num_actions:
            raise UsageError(f"action {action} out of range [0, {self.num_actions})")
        if self.stochastic and rng is None:
            raise UsageError(f"{type(self).__name__} is stochastic; step needs an rng")
        delta = 0
        life_lost = False
        s = state
        for _ in range(self.frame_skip):
            s, d, lost = self._advance(s, action, rng)
            delta += d
            life_lost = life_lost or lost
            if s.game_over or lost:
                break
        s = SimState(s.payload, state.score + delta, state.step_count + 1, s.game_over)
        return StepOutcome(s, delta, clip_reward(delta), life_lost or s.game_over, s.game_over)

    def frame(self, state: SimState) -> np.ndarray:
        raise NotImplementedError

    def _initial(self, rng_seed) -> SimState:
        raise NotImplementedError

    def _advance(self, state, action, rng) -> tuple[SimState, int, bool]:
        raise NotImplementedError


class DelayedCorridor(Env):
    """Corridor of ``length`` cells; action 0 moves left, 1 moves right, the rest wait."""

    def __init__(self, length: int = 12, num_actions: int = 3, exit_reward: int = 10, frame_skip: int = 1):
        if length < 1 or num_actions < 2 or exit_reward <= 0 or frame_skip < 1:
            raise ConfigError("DelayedCorridor needs length >= 1, num_actions >= 2, exit_reward > 0")
        self.length = length
        self.num_actions = num_actions
        self.exit_reward = exit_reward
        self.frame_skip = frame_skip
        self.frame_shape = (1, length)

    @property
    def max_return(self) -> int:
        return self.exit_reward

    def _initial(self, rng_seed):
        return SimState((0,))

    def _advance(self, state, action, rng):
        (pos,) = state.payload
        if action == 1:
            if pos == self.length - 1:
                return SimState(state.payload, game_over=True), self.exit_reward, False
            pos += 1
        elif action == 0:
            pos = max(pos - 1, 0)
        return SimState((pos,)), 0, False

    def frame(self, state):
        f = np.zeros(self.frame_shape)
        f[0, state.payload[0]] = 1.0
        return f


class TrapGrid(Env):
    """Square grid with delayed life loss.

    Payload is ``(row, col, lives, fall_counter)``; a positive fall counter
    means the agent is falling and its actions are ignored. Actions are
    up, right, down, left, then no-ops.
    """

    MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))

    def __init__(self, size: int = 6, traps: Sequence[Sequence[int]] | None = None,
                 goal: Sequence[int] | None = None, lives: int = 3, fall_steps: int = 3,
                 goal_reward: int = 10, num_actions: int = 4, frame_skip: int = 1):
        if size < 2 or lives < 1 or fall_steps < 1 or num_actions < 2 or frame_skip < 1:
            raise ConfigError("invalid TrapGrid parameters")
        self.size = size
        self.goal = tuple(goal) if goal is not None else (size - 1, size - 1)
        if traps is None:
            traps = [(r, size // 2) for r in range(1, size)]
        self.traps = frozenset(tuple(t) for t in traps)
        for cell in (*self.traps, self.goal):
            if not all(0 <= c < size for c in cell):
                raise ConfigError(f"cell {cell} outside the {size}x{size} grid")
        if self.goal in self.traps or (0, 0) in self.traps:
            raise ConfigError("start and goal cells must not be traps")
        self.lives = lives
        self.fall_steps = fall_steps
        self.goal_reward = goal_reward
        self.num_actions = num_actions
        self.frame_skip = frame_skip
        self.frame_shape = (size, size)

    @property
    def max_return(self) -> int:
        return self.goal_reward

    def _initial(self, rng_seed):
        return SimState((0, 0, self.lives, 0))

    def _advance(self, state, action, rng):
        r, c, lives, fall = state.payload
        if fall > 0:
            fall -= 1
            if fall == 0:
                lives -= 1
                if lives == 0:
                    return SimState((r, c, 0, 0), game_over=True), 0, True
                return SimState((0, 0, lives, 0)), 0, True
            return SimState((r, c, lives, fall)), 0, False
        if action < 4:
            dr, dc = self.MOVES[action]
            r = min(max(r + dr, 0), self.size - 1)
            c = min(max(c + dc, 0), self.size - 1)
        if (r, c) == self.goal:
            return SimState((r, c, lives, 0), game_over=True), self.goal_reward, False
        if (r, c) in self.traps:
            return SimState((r, c, lives, self.fall_steps)), 0, False
        return SimState((r, c, lives, 0)), 0, False

    def frame(self, state):
        r, c, _, fall = state.payload
        f = np.zeros(self.frame_shape)
        for t in self.traps:
            f[t] = -0.5
        f[self.goal] = 0.5
        f[r, c] = -1.0 if fall else 1.0
        return f


class TabularEnv(Env):
    """Finite MDP given by tables.

    ``transitions`` is either an ``(S, A)`` int array of next states or an
    ``(S, A, S)`` probability array. ``rewards`` is an ``(S, A)`` int array of
    score deltas. Entering a state in ``terminal`` ends the game.
    """

    def __init__(self, transitions, rewards, terminal=(), start: int = 0, frame_skip: int = 1):
        transitions = np.asarray(transitions)
        rewards = np.asarray(rewards)
        if transitions.ndim == 2:
            self.stochastic = False
        elif transitions.ndim == 3:
            if not np.allclose(transitions.sum(axis=2), 1.0) or (transitions < 0).any():
                raise ConfigError("transition rows must be probability distributions")
            self.stochastic = True
        else:
            raise ConfigError("transitions must be (S, A) or (S, A, S)")
        n_states, num_actions = transitions.shape[:2]
        if rewards.shape != (n_states, num_actions):
            raise ConfigError("rewards must have shape (S, A)")
        if num_actions < 2:
            raise ConfigError("num_actions must be >= 2")
        self.transitions = transitions
        self.rewards = rewards.astype(int)
        self.terminal = frozenset(int(t) for t in terminal)
        self.start = start
        self.n_states = n_states
        self.num_actions = num_actions
        self.frame_skip = frame_skip
        self.frame_shape = (1, n_states)

    def _initial(self, rng_seed):
        return SimState((self.start,), game_over=self.start in self.terminal)

    def _advance(self, state, action, rng):
        (s,) = state.payload
        if self.stochastic:
            nxt = int(rng.choice(self.n_states, p=self.transitions[s, action]))
        else:
            nxt = int(self.transitions[s, action])
        return SimState((nxt,), game_over=nxt in self.terminal), int(self.rewards[s, action]), False

    def frame(self, state):
        f = np.zeros(self.frame_shape)
        f[0, state.payload[0]] = 1.0
        return f


def random_mdp(n_states: int = 5, num_actions: int = 2, seed: int = 0, stochastic: bool = False,
               reward_values: Sequence[int] = (-1, 0, 0, 1, 2), n_terminal: int = 0,
               frame_skip: int = 1) -> TabularEnv:
    """Seeded random tabular MDP; the last ``n_terminal`` states are terminal."""
    if n_states < 1 or num_actions < 2 or not 0 <= n_terminal < n_states:
        raise ConfigError("invalid RandomMDP sizes")
    rng = np.random.default_rng(seed)
    rewards = rng.choice(np.asarray(reward_values), size=(n_states, num_actions))
    if stochastic:
        transitions = rng.dirichlet(np.ones(n_states), size=(n_states, num_actions))
    else:
        transitions = rng.integers(n_states, size=(n_states, num_actions))
    terminal = range(n_states - n_terminal, n_states)
    return TabularEnv(transitions, rewards, terminal=terminal, frame_skip=frame_skip)


def make_env(spec: EnvSpec) -> Env:
    """Build an environment from an :class:`EnvSpec`.

    ``DelayedCorridor`` takes ``length``, ``exit_reward``; ``TrapGrid`` takes
    ``size``, ``traps``, ``goal``, ``lives``, ``fall_steps``, ``goal_reward``;
    ``RandomMDP`` takes ``n_states``, ``stochastic``, ``n_terminal``.
    """
    p = dict(spec.params)
    if spec.num_actions is not None:
        p["num_actions"] = spec.num_actions
    try:
        if spec.family == "DelayedCorridor":
            return DelayedCorridor(frame_skip=spec.frame_skip, **p)
        if spec.family == "TrapGrid":
            return TrapGrid(frame_skip=spec.frame_skip, **p)
        if spec.family == "RandomMDP":
            return random_mdp(seed=spec.seed, frame_skip=spec.frame_skip, **p)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {spec.family}: {exc}") from exc
    raise ConfigError(f"unknown environment family {spec.family!r}")


def observe(frames: Sequence[np.ndarray], mean_image: np.ndarray | None, frame_stack: int = 4) -> np.ndarray:
    """Stack the last ``frame_stack`` frames (oldest first) minus the mean image.

    Histories shorter than the stack are padded by repeating the oldest frame.
    """
    if len(frames) == 0:
        raise ConfigError("observe needs at least one frame")
    frames = list(frames[-frame_stack:])
    frames = [frames[0]] * (frame_stack - len(frames)) + frames
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ConfigError("frames in a history must share one shape")
    obs = np.stack(frames).astype(float)
    if mean_image is not None:
        if mean_image.shape != shape:
            raise ConfigError(f"mean image shape {mean_image.shape} != frame shape {shape}")
        obs -= mean_image
    return obs


def compute_mean_image(env: Env, n_games: int = 10, rng: np.random.Generator | None = None,
                       max_steps: int = 1000) -> np.ndarray:
    """Pixel-wise mean of every frame seen by a uniform-random policy over ``n_games`` games."""
    if n_games < 1:
        raise ConfigError("n_games must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    total = np.zeros(env.frame_shape)
    count = 0
    for _ in range(n_games):
        s = env.reset()
        total += env.frame(s)
        count += 1
        for _ in range(max_steps):
            if s.game_over:
                break
            s = env.step(s, int(rng.integers(env.num_actions)), rng).next_state
            total += env.frame(s)
            count += 1
    return total / count


class Preprocessor:
    """Turns a history of states into network observations.

    Observations are cached by the payloads of the stacked states, which
    fully determine the frames.
    """

    def __init__(self, env: Env, mean_image: np.ndarray | None = None, frame_stack: int = 4):
        if frame_stack < 1:
            raise ConfigError("frame_stack must be >= 1")
        self.env = env
        self.mean_image = mean_image
        self.frame_stack = frame_stack

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.frame_stack, *self.env.frame_shape)

    def key(self, history: Sequence[SimState]) -> tuple:
        return tuple(s.payload for s in history[-self.frame_stack:])

    def observe(self, history: Sequence[SimState]) -> np.ndarray:
        return observe([self.env.frame(s) for s in history[-self.frame_stack:]],
                       self.mean_image, self.frame_stack)
