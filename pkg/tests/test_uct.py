import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgrd_uct import bonusnet, envsim, oracles, uct
from pgrd_uct.uct import NodeStats, PlannerParams


def corridor_bonus(L=8, A=3, stack=2, seed=0, output_scale=0.0):
    env = envsim.DelayedCorridor(length=L, num_actions=A)
    pre = envsim.Preprocessor(env, np.zeros(env.frame_shape), stack)
    spec = bonusnet.NetworkSpec([bonusnet.Dense(6), bonusnet.Rectifier(), bonusnet.Dense(A)], pre.obs_shape, A)
    rng = np.random.default_rng(seed)
    theta = bonusnet.init_params(spec, rng)
    sl = spec.output_slice()
    theta[sl] = output_scale * rng.normal(size=sl.stop - sl.start)
    return env, pre, spec, theta


def test_internal_reward_examples():
    assert uct.internal_reward(np.zeros(3), 1, 1) == 1
    assert uct.internal_reward([0.0, 0.3], 1, 1) == pytest.approx(1.3)
    assert uct.internal_reward([-0.2, 0.0], 0, 0) == pytest.approx(-0.2)


def test_ucb_score_examples():
    node = NodeStats(0, np.array([1, 1]), np.array([0.0, 0.0]))
    node.n = math.e
    assert uct.ucb_score(node, 0, 0.1) == pytest.approx(0.1)
    node = NodeStats(4, np.array([4]), np.array([2.0]))
    assert uct.ucb_score(node, 0, 0.3) == pytest.approx(0.5 + 0.3 * math.sqrt(math.log(4) / 4))
    node = NodeStats(5, np.array([2, 3]), np.array([1.0, 0.3]))
    assert (uct.ucb_score(node, 0, 0.0) > uct.ucb_score(node, 1, 0.0)) == (node.q(0) > node.q(1))


def test_one_step_mdp_root_q_is_exact():
    env = envsim.TabularEnv([[1, 1, 1], [1, 1, 1]], [[3, 0, -2], [0, 0, 0]], terminal=[1])
    res = uct.plan(env, env.reset(), (), None, PlannerParams(6, 5, 0.1, 0.99), np.random.default_rng(0))
    assert np.array_equal(res.root_q, [1.0, 0.0, -1.0])


def test_action_independent_chain_matches_dp():
    # every action moves forward, so all continuations share one return
    S = 5
    trans = [[min(s + 1, S - 1)] * 2 for s in range(S)]
    rewards = [[0, 0], [0, 0], [1, 1], [0, 0], [1, 1]]
    env = envsim.TabularEnv(trans, rewards)
    mdp = oracles.TabularMDP.from_env(env, 0.5)
    Q = oracles.dp_q(mdp, 4)
    res = uct.plan(env, env.reset(), (), None, PlannerParams(16, 4, 0.1, 0.5), np.random.default_rng(1))
    assert np.max(np.abs(res.root_q - Q[0, :, 0])) <= 1e-9


def test_root_q_approaches_dp_with_budget():
    env = envsim.random_mdp(6, 2, seed=1)
    Q = oracles.dp_q(oracles.TabularMDP.from_env(env, 0.5), 3)
    gaps = []
    for n in (10, 100, 1000):
        res = uct.plan(env, env.reset(), (), None, PlannerParams(n, 3, 0.1, 0.5), np.random.default_rng(0))
        best = int(np.nanargmax(res.root_q))
        gaps.append(abs(res.root_q[best] - Q[0, best, 0]))
    assert gaps[0] > gaps[1] > gaps[2]


def _plan_corridor(n=20, depth=4, seed=0, scale=0.3):
    env, pre, spec, theta = corridor_bonus(output_scale=scale)
    bonus = uct.RewardBonus(spec, theta, pre)
    s = env.reset()
    return uct.plan(env, s, (s,), bonus, PlannerParams(n, depth, 0.1, 0.9), np.random.default_rng(seed)), spec, theta


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 40), depth=st.integers(1, 6), seed=st.integers(0, 1000))
def test_count_conservation_and_tape_completeness(n, depth, seed):
    res, spec, theta = _plan_corridor(n, depth, seed)
    root = res.nodes[(envsim.SimState((0,)), 0)]
    assert root.counts.sum() == n == root.n
    for node in res.nodes.values():
        assert node.n == node.counts.sum()
    again = uct.root_q_from_tape(res.tape, spec, theta)
    visited = ~np.isnan(res.root_q)
    assert np.array_equal(visited, ~np.isnan(again))
    assert np.max(np.abs(again[visited] - res.root_q[visited])) <= 1e-12
    assert len(res.tape) == sum(len(t) for t in res.trajectories)


def test_node_q_matches_raw_trajectory_average():
    res, _, _ = _plan_corridor(30, 5, 3)
    tape = res.tape
    # rebuild every (state, depth, action) average from the trajectory log
    env = envsim.DelayedCorridor(length=8, num_actions=3)
    sums, counts = {}, {}
    by_traj = {}
    for i, h, a, r, b in zip(tape.traj, tape.depth, tape.action, tape.objective, tape.bonus):
        by_traj.setdefault(i, []).append((h, a, r + b))
    for steps in by_traj.values():
        s = env.reset()
        states = []
        for h, a, _ in steps:
            states.append(s)
            s = env.step(s, a).next_state
        for k, (h, a, _) in enumerate(steps):
            ret = sum(0.9 ** (j - k) * steps[j][2] for j in range(k, len(steps)))
            key = (states[k], h, a)
            sums[key] = sums.get(key, 0.0) + ret
            counts[key] = counts.get(key, 0) + 1
    for (s, h, a), total in sums.items():
        node = res.nodes[(s, h)]
        assert node.counts[a] == counts[(s, h, a)]
        assert abs(node.q(a) - total / counts[(s, h, a)]) <= 1e-12


def test_life_loss_truncates_planning():
    env = envsim.TrapGrid(size=3, traps=[(0, 1)], goal=(2, 2), lives=3, fall_steps=1)
    res = uct.plan(env, env.reset(), (), None, PlannerParams(30, 6, 0.1, 0.9), np.random.default_rng(0))
    for traj in res.trajectories:
        s = env.reset()
        for k, a in enumerate(traj):
            out = env.step(s, a)
            assert not out.life_lost or k == len(traj) - 1
            s = out.next_state


def test_zero_theta_matches_bonus_free_planning():
    env, pre, spec, theta = corridor_bonus(output_scale=0.0)
    s = env.reset()
    a = uct.plan(env, s, (s,), uct.RewardBonus(spec, theta, pre), PlannerParams(25, 5), np.random.default_rng(9))
    b = uct.plan(env, s, (s,), None, PlannerParams(25, 5), np.random.default_rng(9))
    assert a.trajectories == b.trajectories
    assert np.array_equal(a.root_q, b.root_q, equal_nan=True)


def test_unvisited_root_action_is_absent():
    env = envsim.DelayedCorridor(length=5, num_actions=4)
    res = uct.plan(env, env.reset(), (), None, PlannerParams(2, 3), np.random.default_rng(0))
    assert np.isnan(res.root_q).sum() == 2
    mu = uct.softmax_policy(res.root_q)
    assert mu[np.isnan(res.root_q)].sum() == 0
    assert uct.select_greedy(res.root_q, np.random.default_rng(0)) in np.flatnonzero(~np.isnan(res.root_q))


def test_softmax_examples():
    assert np.allclose(uct.softmax_policy([0.3, 0.3, 0.3]), 1 / 3)
    assert np.allclose(uct.softmax_policy([1.0, 0.0]), [0.7311, 0.2689], atol=1e-4)
    q = np.array([0.2, -1.0, 3.0])
    assert np.max(np.abs(uct.softmax_policy(q + 5) - uct.softmax_policy(q))) <= 1e-12


def test_greedy_examples():
    rng = np.random.default_rng(0)
    assert uct.select_greedy([0.2, 0.9, 0.1], rng) == 1
    assert uct.select_greedy([np.nan, 0.4, np.nan], rng) == 1
    picks = [uct.select_greedy([0.5, 0.5, 0.1], rng) for _ in range(10_000)]
    assert abs(np.mean(np.array(picks) == 0) - 0.5) <= 0.05
    assert set(picks) == {0, 1}


@settings(max_examples=50)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=6))
def test_softmax_argmax_matches_greedy_candidates(values):
    q = np.array(values, dtype=float)
    mu = uct.softmax_policy(q)
    assert set(np.flatnonzero(mu == mu.max())) == set(np.flatnonzero(q == q.max()))


def test_root_q_from_tape_output_shift():
    res, spec, theta = _plan_corridor(20, 4, 2)
    tape = res.tape
    shifted = theta.copy()
    a, eps = 1, 1e-3
    # output bias of action a is the last A entries of the vector
    shifted[spec.n_params - spec.num_actions + a] += eps
    expected = np.zeros(tape.num_actions)
    for i, h, act in zip(tape.traj, tape.depth, tape.action):
        if act == a:
            expected[tape.root_actions[i]] += eps * tape.gamma ** h
    counts = tape.root_counts
    expected = np.where(counts > 0, expected / np.maximum(counts, 1), np.nan)
    diff = uct.root_q_from_tape(tape, spec, shifted) - uct.root_q_from_tape(tape, spec, theta)
    assert np.allclose(diff, expected, atol=1e-12, equal_nan=True)


def test_root_q_from_tape_zero_output_is_objective_only():
    res, spec, theta = _plan_corridor(20, 4, 2)
    zero = theta.copy()
    zero[spec.output_slice()] = 0
    q = uct.root_q_from_tape(res.tape, spec, zero)
    q_obj = uct.root_q_from_tape(res.tape, None, None)
    assert np.array_equal(q, q_obj, equal_nan=True)


def test_dump_tree_is_json_lines():
    res, _, _ = _plan_corridor(5, 3, 0)
    buf = io.StringIO()
    uct.dump_tree(res, buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert {r["type"] for r in rows} == {"node", "tape"}
    assert sum(r["type"] == "tape" for r in rows) == len(res.tape)


def test_planner_params_validation():
    with pytest.raises(ValueError):
        PlannerParams(0, 1)
    with pytest.raises(ValueError):
        PlannerParams(1, 1, gamma=1.0)
