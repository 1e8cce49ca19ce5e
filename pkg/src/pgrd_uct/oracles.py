"""Brute-force references for testing the planner and the learner.

Nothing here shares code paths with the things it checks: the DP oracle
never touches the planner, the finite-difference gradients only call
``forward``, and the enumerated policy value never reads a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import bonusnet
from .envsim import Preprocessor, TabularEnv, clip_reward
from .uct import root_q_from_tape


@dataclass
class TabularMDP:
    """Finite MDP with clipped rewards.

    ``transitions`` is ``(S, A)`` next-state indices or ``(S, A, S)``
    probabilities.
    """

    n_states: int
    n_actions: int
    transitions: np.ndarray
    rewards: np.ndarray
    terminal: frozenset
    gamma: float

    def __post_init__(self):
        t = np.asarray(self.transitions)
        if t.shape[:2] != (self.n_states, self.n_actions):
            raise ValueError("transition table has wrong shape")
        if t.ndim == 3 and not np.allclose(t.sum(axis=2), 1.0):
            raise ValueError("transition rows must sum to one")

    @classmethod
    def from_env(cls, env: TabularEnv, gamma: float) -> "TabularMDP":
        clipped = np.vectorize(clip_reward)(env.rewards)
        return cls(env.n_states, env.num_actions, env.transitions, clipped, env.terminal, gamma)


def dp_q(mdp: TabularMDP, horizon: int, exact: bool = False) -> np.ndarray:
    """Finite-horizon optimal action values ``Q[s, a, d]`` by backward induction.

    ``d`` is the depth of the decision, so ``horizon - d`` steps remain.
    With ``exact=True`` values are :class:`fractions.Fraction` objects.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    S, A = mdp.n_states, mdp.n_actions
    conv = (lambda x: Fraction(x)) if exact else float
    gamma = conv(mdp.gamma)
    zero = conv(0)
    Q = np.empty((S, A, horizon), dtype=object if exact else float)
    v_next = [zero] * S
    deterministic = np.asarray(mdp.transitions).ndim == 2
    for d in range(horizon - 1, -1, -1):
        for s in range(S):
            for a in range(A):
                r = conv(int(mdp.rewards[s, a]))
                if deterministic:
                    nxt = int(mdp.transitions[s, a])
                    cont = zero if nxt in mdp.terminal else v_next[nxt]
                else:
                    cont = zero
                    for s2, p in enumerate(mdp.transitions[s, a]):
                        if p and s2 not in mdp.terminal:
                            cont += conv(p) * v_next[s2]
                Q[s, a, d] = r + gamma * cont
        v_next = [max(Q[s, :, d]) for s in range(S)]
    return Q


def _log_softmax(q, chosen, temperature=1.0):
    q = np.asarray(q, dtype=float) / temperature
    visited = ~np.isnan(q)
    m = q[visited].max()
    return q[chosen] - m - math.log(np.exp(q[visited] - m).sum())


def fd_log_policy_grad(tape, spec: bonusnet.NetworkSpec, theta, chosen: int, eps: float = 1e-5,
                       coords=None, temperature: float = 1.0) -> np.ndarray:
    """Central differences of ``log softmax(root_q_from_tape(tape, theta))[chosen]``.

    ``coords`` restricts the differences to a subset of coordinates; the
    others are left at zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.asarray(theta, dtype=float)
    idx = range(theta.size) if coords is None else coords
    grad = np.zeros_like(theta)
    for k in idx:
        tp = theta.copy()
        tp[k] += eps
        tm = theta.copy()
        tm[k] -= eps
        fp = _log_softmax(root_q_from_tape(tape, spec, tp), chosen, temperature)
        fm = _log_softmax(root_q_from_tape(tape, spec, tm), chosen, temperature)
        grad[k] = (fp - fm) / (2 * eps)
    return grad


@dataclass
class OneStepProblem:
    """A single decision from ``env``'s start state; every action ends the game.

    With depth-1 planning and at least one trajectory per action the root
    values are exactly ``bonus + clipped reward``, so the policy is a
    closed-form function of ``theta``.
    """

    env: TabularEnv
    pre: Preprocessor
    max_actions: int = 16

    def check(self) -> None:
        env = self.env
        if env.num_actions > self.max_actions:
            raise ValueError(f"{env.num_actions} actions exceed the enumeration guard {self.max_actions}")
        if env.stochastic:
            raise ValueError("enumeration needs a deterministic one-step problem")
        s0 = env.start
        if not all(int(env.transitions[s0, a]) in env.terminal for a in range(env.num_actions)):
            raise ValueError("every action from the start state must end the game")

    def outcomes(self) -> np.ndarray:
        s0 = self.env.start
        return np.array([clip_reward(self.env.rewards[s0, a]) for a in range(self.env.num_actions)], float)

    def value(self, spec, theta) -> float:
        s0 = self.env.reset()
        bonus = bonusnet.forward(spec, theta, self.pre.observe((s0,)))[0]
        u = self.outcomes()
        q = bonus + u
        p = np.exp(q - q.max())
        p /= p.sum()
        return float(p @ u)


def enum_policy_value_grad(problem: OneStepProblem, spec, theta, eps: float = 1e-6):
    """Exact expected return ``U(theta)`` and its gradient (central differences of U)."""
    problem.check()
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        tp = theta.copy()
        tp[k] += eps
        tm = theta.copy()
        tm[k] -= eps
        grad[k] = (problem.value(spec, tp) - problem.value(spec, tm)) / (2 * eps)
    return problem.value(spec, theta), grad


def bonus_free_uct(env, root, n_trajectories, max_depth, c, gamma, rng):
    """Plain UCT on objective rewards, written independently of :mod:`uct`.

    Uses the same randomness protocol (uniform pick among untried actions,
    then uniform tie-breaking among UCB maximisers, one ``integers`` draw per
    pick with more than one candidate). Returns ``(root_q, trajectories)``.
    """
    A = env.num_actions
    n_sd: dict = {}
    n_sad: dict = {}
    ret: dict = {}
    trajectories = []
    for _ in range(n_trajectories):
        s = root
        visited = []
        for d in range(max_depth):
            tried = [a for a in range(A) if n_sad.get((s, d, a), 0) > 0]
            if len(tried) < A:
                cands = [a for a in range(A) if a not in tried]
            else:
                n = n_sd[(s, d)]
                score = [ret[(s, d, a)] / n_sad[(s, d, a)] + c * math.sqrt(math.log(n) / n_sad[(s, d, a)])
                         for a in range(A)]
                best = max(score)
                cands = [a for a in range(A) if score[a] == best]
            a = cands[int(rng.integers(len(cands)))] if len(cands) > 1 else cands[0]
            out = env.step(s, a, rng)
            visited.append((s, d, a, float(out.clipped_reward)))
            if out.life_lost or out.game_over:
                break
            s = out.next_state
        trajectories.append([v[2] for v in visited])
        g = 0.0
        for s, d, a, r in reversed(visited):
            g = r + gamma * g
            n_sd[(s, d)] = n_sd.get((s, d), 0) + 1
            n_sad[(s, d, a)] = n_sad.get((s, d, a), 0) + 1
            ret[(s, d, a)] = ret.get((s, d, a), 0.0) + g
    root_q = np.array([ret[(root, 0, a)] / n_sad[(root, 0, a)] if n_sad.get((root, 0, a)) else np.nan
                       for a in range(A)])
    return root_q, trajectories
