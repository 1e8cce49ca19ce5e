import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgrd_uct import bonusnet, checks
from pgrd_uct.bonusnet import Conv, Dense, NetworkSpec, Rectifier, ShapeError


def small_spec(A=3):
    return NetworkSpec([Conv(3, 2, 1), Rectifier(), Dense(5), Rectifier(), Dense(A)], (2, 4, 4), A)


def test_output_layer_starts_at_zero():
    spec = small_spec()
    theta = bonusnet.init_params(spec, np.random.default_rng(0))
    assert not theta[spec.output_slice()].any()
    assert theta[: spec.output_slice().start].any()
    out, _ = bonusnet.forward(spec, theta, np.random.default_rng(1).normal(size=spec.input_shape))
    assert np.array_equal(out, np.zeros(3))


def test_init_is_deterministic():
    spec = small_spec()
    a = bonusnet.init_params(spec, np.random.default_rng(4))
    b = bonusnet.init_params(spec, np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_hidden_init_variance():
    fan_in = 200
    spec = NetworkSpec([Dense(100), Rectifier(), Dense(2)], (1, 1, fan_in), 2)
    theta = bonusnet.init_params(spec, np.random.default_rng(0))
    w, _ = spec.views(theta)[0]
    assert w.size >= 10_000
    assert abs(w.var() / (2.0 / fan_in) - 1.0) < 0.2


def test_atari_architecture_shapes():
    A = 18
    spec = bonusnet.atari_network(A)
    assert [s.out_shape for s in spec.slots if s.kind != "relu"] == [(16, 20, 20), (32, 9, 9), (256,), (A,)]
    expected = (16 * 4 * 8 * 8 + 16) + (32 * 16 * 4 * 4 + 32) + (256 * 32 * 9 * 9 + 256) + (A * 256 + A)
    assert spec.n_params == expected


def test_dense_on_one_hot_selects_column():
    A, n = 3, 4
    spec = NetworkSpec([Dense(A)], (1, 1, n), A)
    table = np.arange(A * n, dtype=float).reshape(A, n)
    theta = np.concatenate([table.ravel(), np.zeros(A)])
    x = np.zeros((1, 1, n))
    x[0, 0, 2] = 1
    out, _ = bonusnet.forward(spec, theta, x)
    assert np.array_equal(out, table[:, 2])


def test_shape_checks():
    with pytest.raises(ShapeError):
        NetworkSpec([Dense(3), Rectifier()], (1, 2, 2), 3)
    with pytest.raises(ShapeError):
        NetworkSpec([Conv(2, 5, 1), Dense(3)], (1, 4, 4), 3)
    spec = small_spec()
    with pytest.raises(ShapeError):
        bonusnet.forward(spec, np.zeros(spec.n_params), np.zeros((1, 4, 4)))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 12), k=st.integers(1, 12), stride=st.integers(1, 4))
def test_conv_shape_algebra(h, k, stride):
    if k > h:
        with pytest.raises(ShapeError):
            NetworkSpec([Conv(2, k, stride), Dense(2)], (1, h, h), 2)
        return
    spec = NetworkSpec([Conv(2, k, stride), Dense(2)], (1, h, h), 2)
    n_out = (h - k) // stride + 1
    assert spec.slots[0].out_shape == (2, n_out, n_out)
    theta = np.random.default_rng(0).normal(size=spec.n_params)
    out, cache = bonusnet.forward(spec, theta, np.ones((1, h, h)))
    assert cache.outputs[0].shape == (2, n_out, n_out)


def _setup(seed):
    rng = np.random.default_rng(seed)
    spec = checks.random_spec(rng)
    theta = checks.random_theta(spec, rng)
    obs = rng.normal(size=spec.input_shape)
    return spec, theta, obs, rng


def test_zero_output_grad_gives_zero_gradient():
    spec, theta, obs, _ = _setup(0)
    _, cache = bonusnet.forward(spec, theta, obs)
    assert not bonusnet.backward(spec, theta, cache, np.zeros(spec.num_actions)).any()


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_finite_differences(seed):
    err, _ = checks.backprop_instance(100 + seed)
    assert err <= 1e-6


def test_backward_is_linear_in_output_grad():
    spec, theta, obs, rng = _setup(3)
    _, cache = bonusnet.forward(spec, theta, obs)
    g1, g2 = rng.normal(size=(2, spec.num_actions))
    lhs = bonusnet.backward(spec, theta, cache, g1 + g2)
    rhs = bonusnet.backward(spec, theta, cache, g1) + bonusnet.backward(spec, theta, cache, g2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_stale_cache_is_rejected():
    spec, theta, obs, _ = _setup(4)
    _, cache = bonusnet.forward(spec, theta, obs)
    with pytest.raises(bonusnet.StaleCacheError):
        bonusnet.backward(spec, theta.copy(), cache, np.ones(spec.num_actions))


def test_forward_is_deterministic():
    spec, theta, obs, _ = _setup(5)
    a, _ = bonusnet.forward(spec, theta, obs)
    b, _ = bonusnet.forward(spec, theta, obs)
    assert a.tobytes() == b.tobytes()


def test_checkpoint_round_trip(tmp_path):
    spec, theta, _, _ = _setup(6)
    theta = theta * np.pi
    path = tmp_path / "ckpt.npz"
    bonusnet.save_checkpoint(path, spec, theta, episode=7)
    spec2, theta2, meta = bonusnet.load_checkpoint(path)
    assert spec2 == spec
    assert theta2.tobytes() == theta.tobytes()
    assert meta == {"episode": 7}


def test_parse_layers():
    layers = bonusnet.parse_layers([{"conv": [16, 8, 4]}, "relu", {"conv": [32, [4, 4], 2]}, "relu", {"dense": 256}])
    assert layers == [Conv(16, (8, 8), 4), Rectifier(), Conv(32, (4, 4), 2), Rectifier(), Dense(256)]
    with pytest.raises(ShapeError):
        bonusnet.parse_layers(["pool"])
