"""Policy-gradient learning of the reward-bonus parameters.

Each executed decision contributes the score-function gradient of the
planner's softmax policy, obtained by pushing the policy's sensitivity to
every internal reward on the plan's tape back through the network. The
per-step gradients are combined with an eligibility trace and an average
reward baseline; the accumulated estimate updates the parameters with Adam
once per episode.
"""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import bonusnet
from .envsim import Env, Preprocessor
from .uct import PlannerParams, PlanResult, RewardBonus, plan, softmax_policy

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    halving_period: int = 1000
    beta: float = 0.99
    max_episodes: int = 5000
    max_total_steps: int = 1_000_000
    episode_cap: int = 1000
    temperature: float = 1.0
    baseline: str = "cumulative"  # or "exponential"
    baseline_rate: float = 0.01
    adam_eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.halving_period, self.max_episodes,
               self.max_total_steps, self.episode_cap, self.temperature) < 0:
            raise ValueError("TrainConfig values must be non-negative")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        if self.baseline not in ("cumulative", "exponential"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


@dataclass
class GarbState:
    """Eligibility trace ``e``, gradient accumulator ``g`` and reward baseline ``b``."""

    e: np.ndarray
    g: np.ndarray
    beta: float = 0.99
    b: float = 0.0
    n_rewards: int = 0
    step_count: int = 0
    baseline: str = "cumulative"
    baseline_rate: float = 0.01

    @classmethod
    def zeros(cls, n_params: int, beta: float = 0.99, **kw) -> "GarbState":
        return cls(np.zeros(n_params), np.zeros(n_params), beta, **kw)

    def start_episode(self) -> None:
        self.e = np.zeros_like(self.e)
        self.g = np.zeros_like(self.g)
        self.step_count = 0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params: int, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), eps=eps)


def reward_sensitivities(tape, chosen: int, mu) -> np.ndarray:
    """d log mu(chosen) / d R^I for every tape entry.

    A trajectory only belongs to the root node of its own first action, so
    the sum over root actions has a single term per entry.
    """
    mu = np.asarray(mu, dtype=float)
    roots = np.asarray(tape.root_actions, dtype=int)
    counts = tape.root_counts
    indicator = (np.arange(tape.num_actions) == chosen).astype(float)
    per_root = (indicator - mu) / np.maximum(counts, 1)
    traj = np.asarray(tape.traj, dtype=int)
    depth = np.asarray(tape.depth, dtype=float)
    return per_root[roots[traj]] * tape.gamma ** depth


def logpolicy_gradient(spec: bonusnet.NetworkSpec, theta, tape, sensitivities,
                       bonus: RewardBonus | None = None) -> np.ndarray:
    """Gradient of log mu(chosen) with respect to ``theta`` under the frozen tree.

    Sensitivities are summed per observation into one output-gradient vector,
    so each distinct observation costs one backward pass. When ``bonus`` is
    given its forward caches are reused.
    """
    grads = defaultdict(lambda: np.zeros(spec.num_actions))
    for key, a, d in zip(tape.obs_key, tape.action, sensitivities):
        grads[key][a] += d
    total = np.zeros(spec.n_params)
    for key, og in grads.items():
        if not og.any():
            continue
        if bonus is not None and bonus.theta is theta:
            cache = bonus.forward_cache(key)
        else:
            cache = bonusnet.forward(spec, theta, tape.observations[key])[1]
        total += bonusnet.backward(spec, theta, cache, og)
    return total


def garb_step(state: GarbState, grad_logmu, r_t: float) -> GarbState:
    """Advance the trace and accumulator by one decision (in place).

    The accumulator uses the baseline value from before ``r_t`` is folded in.
    """
    state.e = state.beta * state.e + grad_logmu
    state.g = state.g + (r_t - state.b) * state.e
    state.n_rewards += 1
    state.step_count += 1
    if state.baseline == "cumulative":
        state.b += (r_t - state.b) / state.n_rewards
    else:
        state.b += state.baseline_rate * (r_t - state.b)
    return state


def adam_ascent(theta, grad, adam: AdamState, lr: float):
    """One bias-corrected Adam step uphill. Returns ``(new_theta, adam)``."""
    adam.t += 1
    adam.m = adam.beta1 * adam.m + (1 - adam.beta1) * grad
    adam.v = adam.beta2 * adam.v + (1 - adam.beta2) * grad * grad
    m_hat = adam.m / (1 - adam.beta1 ** adam.t)
    v_hat = adam.v / (1 - adam.beta2 ** adam.t)
    return theta + lr * m_hat / (np.sqrt(v_hat) + adam.eps), adam


def end_episode_update(theta, garb: GarbState, adam: AdamState, lr: float):
    """Apply the episode's gradient estimate and clear the trace and accumulator.

    Raises :class:`NumericalError` (leaving ``theta`` and ``adam`` untouched)
    if the estimate has non-finite entries.
    """
    g = garb.g
    if not np.all(np.isfinite(g)):
        garb.start_episode()
        log.error("non-finite gradient estimate (%d bad entries); update skipped",
                  int((~np.isfinite(g)).sum()))
        raise NumericalError("non-finite gradient estimate")
    theta, adam = adam_ascent(theta, g, adam, lr)
    garb.start_episode()
    return theta, adam


def lr_at(episode: int, config: TrainConfig) -> float:
    return config.learning_rate * 2.0 ** -(episode // config.halving_period)


@dataclass
class EpisodeLog:
    u: float = 0.0
    score: int = 0
    steps: int = 0
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)


def run_episode(env: Env, pre: Preprocessor, spec, theta, planner: PlannerParams,
                garb: GarbState, rng_plan, rng_policy, cap: int, temperature: float = 1.0,
                rng_env=None) -> EpisodeLog:
    """Play one training episode with fixed ``theta``, accumulating into ``garb``.

    Actions are sampled from the softmax policy; a lost life ends the episode.
    """
    rng_env = rng_plan if rng_env is None else rng_env
    bonus = RewardBonus(spec, theta, pre)
    garb.start_episode()
    s = env.reset()
    history = (s,)
    ep = EpisodeLog()
    while ep.steps < cap:
        result: PlanResult = plan(env, s, history, bonus, planner, rng_plan)
        mu = softmax_policy(result.root_q, temperature)
        a = int(rng_policy.choice(len(mu), p=mu))
        delta = reward_sensitivities(result.tape, a, mu) / temperature
        grad = logpolicy_gradient(spec, theta, result.tape, delta, bonus)
        out = env.step(s, a, rng_env)
        garb_step(garb, grad, out.clipped_reward)
        ep.u += out.clipped_reward
        ep.score += out.score_delta
        ep.steps += 1
        ep.actions.append(a)
        ep.rewards.append(out.clipped_reward)
        if out.planning_terminal:
            break
        s = out.next_state
        history = (history + (s,))[-pre.frame_stack:]
    return ep


TRAIN_LOG_COLUMNS = ("episode", "steps", "u_hT", "baseline_b", "lr", "grad_norm", "wall_ms")


def train(env: Env, pre: Preprocessor, spec, theta0, planner: PlannerParams, config: TrainConfig,
          rng_plan, rng_policy, on_episode=None, timing: bool = True, rng_env=None):
    """Online training loop. Returns ``(theta, rows)``.

    ``rows`` holds one dict per episode with the ``TRAIN_LOG_COLUMNS`` keys.
    ``on_episode(episode, theta, row)`` is called after every update. With
    ``timing=False`` the wall-clock column is written as 0 so logs are
    reproducible byte for byte.
    """
    theta = np.array(theta0, dtype=float)
    garb = GarbState.zeros(spec.n_params, config.beta, baseline=config.baseline,
                           baseline_rate=config.baseline_rate)
    adam = AdamState.zeros(spec.n_params, config.adam_eps)
    rows = []
    total_steps = 0
    for episode in range(config.max_episodes):
        if total_steps >= config.max_total_steps:
            break
        t0 = time.perf_counter()
        cap = min(config.episode_cap, config.max_total_steps - total_steps)
        ep = run_episode(env, pre, spec, theta, planner, garb, rng_plan, rng_policy, cap,
                         config.temperature, rng_env)
        total_steps += ep.steps
        lr = lr_at(episode, config)
        grad_norm = float(np.linalg.norm(garb.g))
        if lr > 0:
            try:
                theta, adam = end_episode_update(theta, garb, adam, lr)
            except NumericalError:
                log.warning("episode %d: parameter update aborted", episode)
        else:
            garb.start_episode()
        row = {"episode": episode, "steps": ep.steps, "u_hT": ep.u, "baseline_b": garb.b, "lr": lr,
               "grad_norm": grad_norm, "wall_ms": round(1000 * (time.perf_counter() - t0)) if timing else 0}
        rows.append(row)
        if on_episode is not None:
            on_episode(episode, theta, row)
    return theta, rows
