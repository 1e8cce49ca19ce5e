"""Random gradient-check instances and the ``gradcheck`` command body."""

from __future__ import annotations

import numpy as np

from . import bonusnet, oracles, pgrd
from .uct import RewardTape, root_q_from_tape, softmax_policy


def random_spec(rng: np.random.Generator, num_actions: int | None = None) -> bonusnet.NetworkSpec:
    """Small conv/dense/rectifier network with at most 2000 parameters."""
    A = num_actions or int(rng.integers(2, 5))
    while True:
        c, h, w = int(rng.integers(1, 4)), int(rng.integers(5, 9)), int(rng.integers(5, 9))
        k = int(rng.integers(2, 4))
        layers = [bonusnet.Conv(int(rng.integers(2, 5)), (k, k), int(rng.integers(1, 3))), bonusnet.Rectifier()]
        if rng.random() < 0.5:
            layers += [bonusnet.Conv(int(rng.integers(2, 4)), (2, 2), 1), bonusnet.Rectifier()]
        layers += [bonusnet.Dense(int(rng.integers(4, 12))), bonusnet.Rectifier(), bonusnet.Dense(A)]
        try:
            spec = bonusnet.NetworkSpec(layers, (c, h, w), A)
        except bonusnet.ShapeError:
            continue
        if spec.n_params <= 2000:
            return spec


def random_theta(spec, rng, scale: float = 0.5) -> np.ndarray:
    """He-initialised hidden weights, random biases and a random output layer.

    Zero biases would put units exactly on the rectifier kink whenever their
    input is all zero, where finite differences are meaningless.
    """
    theta = bonusnet.init_params(spec, rng)
    for s, wb in zip(spec.slots, spec.views(theta)):
        if wb is not None:
            wb[1][...] = rng.normal(0.0, 0.1, size=s.n_bias)
    sl = spec.output_slice()
    theta[sl] = rng.normal(0.0, scale, size=sl.stop - sl.start)
    return theta


def near_kink(spec, theta, obs, margin: float = 1e-3) -> bool:
    """True if any rectifier input lies within ``margin`` of zero."""
    _, cache = bonusnet.forward(spec, theta, obs)
    return any(s.kind == "relu" and np.min(np.abs(x)) < margin
               for s, x in zip(spec.slots, cache.inputs))


def smooth_observation(spec, theta, rng, margin: float = 1e-3) -> np.ndarray:
    """Random observation away from rectifier kinks, where finite differences are valid."""
    while True:
        obs = rng.normal(size=spec.input_shape)
        if not near_kink(spec, theta, obs, margin):
            return obs


def synthetic_tape(spec, rng, max_entries: int = 50, n_obs: int = 6, gamma: float = 0.9,
                   theta=None) -> RewardTape:
    """Random tape: trajectories of random length over a small pool of observations.

    With ``theta`` given, observations are drawn away from rectifier kinks.
    """
    A = spec.num_actions
    tape = RewardTape(A, gamma)
    if theta is None:
        pool = [rng.normal(size=spec.input_shape) for _ in range(n_obs)]
    else:
        pool = [smooth_observation(spec, theta, rng) for _ in range(n_obs)]
    for j, obs in enumerate(pool):
        tape.observations[("obs", j)] = obs
    i = 0
    while True:
        length = int(rng.integers(1, 6))
        if len(tape) + length > max_entries:
            break
        for h in range(length):
            a = int(rng.integers(A))
            tape.append(i, h, ("obs", int(rng.integers(n_obs))), a, float(rng.integers(-1, 2)), 0.0)
            if h == 0:
                tape.root_actions.append(a)
        i += 1
    return tape


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Max-norm relative error ``max|a - b| / max(max|a|, max|b|)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def policy_gradient_instance(seed: int, eps: float = 1e-5):
    """Analytic vs finite-difference log-policy gradient on one random instance.

    Returns ``(relative_error, n_params, tape_length)``.
    """
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    theta = random_theta(spec, rng)
    tape = synthetic_tape(spec, rng, theta=theta)
    q = root_q_from_tape(tape, spec, theta)
    mu = softmax_policy(q)
    chosen = int(rng.choice(len(mu), p=mu))
    delta = pgrd.reward_sensitivities(tape, chosen, mu)
    analytic = pgrd.logpolicy_gradient(spec, theta, tape, delta)
    numeric = oracles.fd_log_policy_grad(tape, spec, theta, chosen, eps)
    return rel_error(analytic, numeric), spec.n_params, len(tape)


def backprop_instance(seed: int, eps: float = 1e-5):
    """``backward`` vs central differences of ``output_grad . forward``."""
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    theta = random_theta(spec, rng)
    obs = smooth_observation(spec, theta, rng)
    og = rng.normal(size=spec.num_actions)
    _, cache = bonusnet.forward(spec, theta, obs)
    analytic = bonusnet.backward(spec, theta, cache, og)
    numeric = np.zeros_like(theta)
    for k in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += eps
        tm[k] -= eps
        numeric[k] = (og @ bonusnet.forward(spec, tp, obs)[0] - og @ bonusnet.forward(spec, tm, obs)[0]) / (2 * eps)
    return rel_error(analytic, numeric), spec.n_params


def run_gradchecks(seed: int = 0, n: int = 5) -> bool:
    ok = True
    for k in range(n):
        err, n_params = backprop_instance(seed * 1000 + k)
        passed = err <= 1e-6
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} backprop instance {k}: {n_params} params, rel err {err:.2e}")
    for k in range(n):
        err, n_params, n_entries = policy_gradient_instance(seed * 1000 + k)
        passed = err <= 1e-5
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} log-policy gradient instance {k}: {n_params} params, "
              f"{n_entries} tape entries, rel err {err:.2e}")
    return ok
