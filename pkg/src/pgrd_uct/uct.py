"""UCT planning with a learned reward bonus.

Statistics are kept per (state, depth) node and action value estimates are
plain averages of the discounted returns that followed each (s, a, d) tuple.
There is no rollout phase: a trajectory extends the tree one node per step
until the depth budget runs out or a planning-terminal transition (lost life
or game over) happens.

While planning, every internal reward evaluation is written to a
:class:`RewardTape`. The tape is enough to recompute the root action values
for different network parameters with the tree held fixed, which is what the
learner differentiates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import bonusnet
from .envsim import Env, Preprocessor, SimState


@dataclass(frozen=True)
class PlannerParams:
    n_trajectories: int = 100
    max_depth: int = 25
    c: float = 0.1
    gamma: float = 0.99

    def __post_init__(self):
        if self.n_trajectories < 1 or self.max_depth < 1:
            raise ValueError("n_trajectories and max_depth must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")


class RewardBonus:
    """Network bonus for a fixed parameter vector, cached per observation.

    ``theta`` must not change while an instance is in use; build a new one
    after every parameter update.
    """

    def __init__(self, spec: bonusnet.NetworkSpec, theta: np.ndarray, preprocessor: Preprocessor):
        self.spec = spec
        self.theta = theta
        self.pre = preprocessor
        self._cache: dict = {}

    def lookup(self, history):
        """Return ``(key, bonus_vector)`` for the newest state in ``history``."""
        key = self.pre.key(history)
        hit = self._cache.get(key)
        if hit is None:
            obs = self.pre.observe(history)
            out, fc = bonusnet.forward(self.spec, self.theta, obs)
            hit = self._cache[key] = (obs, out, fc)
        return key, hit[1]

    def observation(self, key) -> np.ndarray:
        return self._cache[key][0]

    def forward_cache(self, key) -> bonusnet.ForwardCache:
        return self._cache[key][2]


@dataclass
class NodeStats:
    n: int
    counts: np.ndarray
    return_sums: np.ndarray

    @classmethod
    def empty(cls, num_actions: int) -> "NodeStats":
        return cls(0, np.zeros(num_actions, dtype=int), np.zeros(num_actions))

    def q(self, a: int) -> float:
        return self.return_sums[a] / self.counts[a]


@dataclass
class RewardTape:
    """Every internal-reward evaluation made during one plan.

    Entries are stored column-wise. ``root_actions[i]`` is the first action
    of trajectory ``i`` and ``root_counts[b]`` is n(root, b, 0).
    ``observations`` maps observation keys to arrays.
    """

    num_actions: int
    gamma: float
    traj: list = field(default_factory=list)
    depth: list = field(default_factory=list)
    obs_key: list = field(default_factory=list)
    action: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    bonus: list = field(default_factory=list)
    root_actions: list = field(default_factory=list)
    observations: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.traj)

    def append(self, i, h, key, a, objective, bonus):
        self.traj.append(i)
        self.depth.append(h)
        self.obs_key.append(key)
        self.action.append(a)
        self.objective.append(objective)
        self.bonus.append(bonus)

    @property
    def root_counts(self) -> np.ndarray:
        return np.bincount(np.asarray(self.root_actions, dtype=int), minlength=self.num_actions)

    @property
    def n_trajectories(self) -> int:
        return len(self.root_actions)


@dataclass
class PlanResult:
    root_q: np.ndarray
    tape: RewardTape
    nodes: dict
    trajectories: list


def internal_reward(bonus_vector, action: int, clipped_objective: float) -> float:
    """Objective reward plus the network bonus for ``action``."""
    return float(bonus_vector[action]) + clipped_objective


def ucb_score(node: NodeStats, a: int, c: float) -> float:
    return node.q(a) + c * math.sqrt(math.log(node.n) / node.counts[a])


def _pick(rng: np.random.Generator, candidates):
    if len(candidates) == 1:
        return candidates[0]
    return candidates[int(rng.integers(len(candidates)))]


def _select(node: NodeStats, c: float, rng) -> int:
    untried = np.flatnonzero(node.counts == 0)
    if len(untried):
        return int(_pick(rng, untried))
    scores = node.return_sums / node.counts + c * np.sqrt(math.log(node.n) / node.counts)
    return int(_pick(rng, np.flatnonzero(scores == scores.max())))


def plan(env: Env, root: SimState, history, bonus: RewardBonus | None,
         params: PlannerParams, rng: np.random.Generator) -> PlanResult:
    """Run ``params.n_trajectories`` UCT trajectories from ``root``.

    ``history`` is the sequence of real states ending with ``root`` (used for
    frame stacking). With ``bonus=None`` the planner uses objective rewards
    only and records nothing but objective rewards on the tape.
    """
    if root.game_over:
        raise ValueError("cannot plan from a game-over state")
    A = env.num_actions
    gamma = params.gamma
    nodes: dict = {}
    tape = RewardTape(A, gamma)
    trajectories = []
    history = tuple(history)
    if not history or history[-1] != root:
        history = history + (root,)
    keep = bonus.pre.frame_stack if bonus is not None else 1
    history = history[-keep:]
    for i in range(params.n_trajectories):
        s = root
        hist = history
        path = []
        rewards = []
        for h in range(params.max_depth):
            node = nodes.get((s, h))
            if node is None:
                node = nodes[(s, h)] = NodeStats.empty(A)
            a = _select(node, params.c, rng)
            out = env.step(s, a, rng)
            if bonus is not None:
                key, bvec = bonus.lookup(hist)
                b = float(bvec[a])
                if key not in tape.observations:
                    tape.observations[key] = bonus.observation(key)
            else:
                key, b = None, 0.0
            r = b + out.clipped_reward
            tape.append(i, h, key, a, out.clipped_reward, b)
            path.append((node, a))
            rewards.append(r)
            if out.planning_terminal:
                break
            s = out.next_state
            hist = (hist + (s,))[-keep:]
        tape.root_actions.append(path[0][1])
        trajectories.append([a for _, a in path])
        g = 0.0
        for (node, a), r in zip(reversed(path), reversed(rewards)):
            g = r + gamma * g
            node.n += 1
            node.counts[a] += 1
            node.return_sums[a] += g
    root_node = nodes[(root, 0)]
    with np.errstate(invalid="ignore", divide="ignore"):
        root_q = np.where(root_node.counts > 0, root_node.return_sums / root_node.counts, np.nan)
    return PlanResult(root_q, tape, nodes, trajectories)


def softmax_policy(root_q, temperature: float = 1.0) -> np.ndarray:
    """Softmax over visited actions; unvisited (NaN) actions get probability 0."""
    q = np.asarray(root_q, dtype=float)
    visited = ~np.isnan(q)
    if not visited.any():
        raise ValueError("no visited root action")
    z = np.where(visited, q / temperature, -np.inf)
    z = z - z[visited].max()
    p = np.exp(z)
    return p / p.sum()


def select_greedy(root_q, rng: np.random.Generator) -> int:
    """Argmax over visited actions, ties broken uniformly at random."""
    q = np.asarray(root_q, dtype=float)
    visited = ~np.isnan(q)
    if not visited.any():
        raise ValueError("no visited root action")
    best = q[visited].max()
    return int(_pick(rng, np.flatnonzero(visited & (q == best))))


def root_q_from_tape(tape: RewardTape, spec: bonusnet.NetworkSpec | None, theta) -> np.ndarray:
    """Root action values under ``theta`` with the search tree held fixed."""
    bonus = {}
    if spec is not None:
        for key, obs in tape.observations.items():
            bonus[key] = bonusnet.forward(spec, theta, obs)[0]
    returns = np.zeros(tape.n_trajectories)
    for i, h, key, a, r in zip(tape.traj, tape.depth, tape.obs_key, tape.action, tape.objective):
        b = bonus[key][a] if key is not None and spec is not None else 0.0
        returns[i] += tape.gamma ** h * (b + r)
    roots = np.asarray(tape.root_actions, dtype=int)
    counts = tape.root_counts
    sums = np.bincount(roots, weights=returns, minlength=tape.num_actions)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / counts, np.nan)


def dump_tree(result: PlanResult, fh) -> None:
    """Write node statistics and tape entries as JSON lines."""
    for (state, depth), node in result.nodes.items():
        fh.write(json.dumps({
            "type": "node", "state": repr(state.payload), "depth": depth, "n": node.n,
            "counts": node.counts.tolist(), "return_sums": node.return_sums.tolist(),
        }) + "\n")
    t = result.tape
    for row in zip(t.traj, t.depth, t.obs_key, t.action, t.objective, t.bonus):
        i, h, key, a, r, b = row
        fh.write(json.dumps({"type": "tape", "traj": i, "depth": h, "obs": repr(key),
                             "action": a, "objective": r, "bonus": b}) + "\n")
