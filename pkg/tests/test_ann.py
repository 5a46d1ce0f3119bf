import numpy as np
import pytest

from orthoaug.ann import (
    MlpArchitecture,
    MlpParams,
    flatten,
    init_mlp,
    mlp_forward,
    mlp_forward_cached,
    mlp_vjp,
    unflatten,
)
from orthoaug.errors import InvalidInputError
from orthoaug.linalg import finite_diff_gradient, make_rng


def test_zero_params_give_zero_output():
    arch = MlpArchitecture(3, (8,), 2)
    params = unflatten(arch, np.zeros(arch.n_params))
    z = make_rng(0).standard_normal((5, 3))
    assert np.array_equal(mlp_forward(params, z), np.zeros((5, 2)))


def test_single_hidden_hand_evaluation():
    params = MlpParams([np.array([[1.0]]), np.array([[2.0]])], [np.zeros(1), np.zeros(1)])
    out = mlp_forward(params, np.array([0.5]))
    assert np.allclose(out, 2.0 * np.tanh(0.5), atol=1e-15)


def test_zero_last_layer_output_is_zero():
    arch = MlpArchitecture(4, (16, 16), 3)
    params = init_mlp(arch, seed=11)
    z = make_rng(1).standard_normal((20, 4)) * 3.0
    out = mlp_forward(params, z)
    assert np.array_equal(out, np.zeros((20, 3)))
    assert np.array_equal(params.weights[-1], np.zeros((3, 16)))
    assert np.array_equal(params.biases[-1], np.zeros(3))


def test_init_deterministic_per_seed():
    arch = MlpArchitecture(5, (32,), 2)
    a, b = init_mlp(arch, seed=7), init_mlp(arch, seed=7)
    assert a == b
    c = init_mlp(arch, seed=8)
    assert not (a == c)


def test_xavier_bound():
    arch = MlpArchitecture(8, (64,), 6)
    params = init_mlp(arch, seed=3)
    bound = np.sqrt(6.0 / (8 + 64))
    w0 = params.weights[0]
    assert np.all(np.abs(w0) <= bound)
    # values actually fill the range, not degenerate
    assert np.max(np.abs(w0)) > 0.5 * bound


def test_param_count_example():
    arch = MlpArchitecture(8, (64, 64), 6)
    assert arch.n_params == 8 * 64 + 64 + 64 * 64 + 64 + 64 * 6 + 6 == 5126


def test_flatten_roundtrip_exact():
    arch = MlpArchitecture(3, (7, 5), 2)
    params = init_mlp(arch, seed=2)
    params.weights[-1][:] = make_rng(5).standard_normal((2, 5))
    again = unflatten(arch, flatten(params))
    assert params == again


def test_flatten_length_mismatch():
    arch = MlpArchitecture(3, (7,), 2)
    with pytest.raises(InvalidInputError):
        unflatten(arch, np.zeros(arch.n_params + 1))


def test_forward_shape_mismatch():
    arch = MlpArchitecture(3, (4,), 1)
    params = init_mlp(arch, seed=0)
    with pytest.raises(InvalidInputError):
        mlp_forward(params, np.zeros((2, 5)))


def test_hidden_activations_bounded():
    arch = MlpArchitecture(2, (16, 16), 1)
    params = init_mlp(arch, seed=9)
    _, acts = mlp_forward_cached(params, make_rng(4).standard_normal((50, 2)) * 10)
    for h in acts[1:]:
        # mathematically in (-1, 1); float64 tanh saturates to exactly 1.0
        assert np.all(np.abs(h) <= 1.0)


def _random_net(seed):
    arch = MlpArchitecture(3, (6, 5), 2)
    rng = make_rng(seed)
    eta = rng.standard_normal(arch.n_params) * 0.5
    return arch, unflatten(arch, eta), eta


def test_vjp_matches_finite_differences_params():
    arch, params, eta = _random_net(12)
    rng = make_rng(13)
    z = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, 2))  # fixed weighting of outputs

    def scalar(eta_vec):
        out = mlp_forward(unflatten(arch, eta_vec), z)
        return float(np.sum(w * out))

    _, acts = mlp_forward_cached(params, z)
    g_params, _ = mlp_vjp(params, acts, w)
    fd = finite_diff_gradient(scalar, eta, h=1e-6)
    assert np.max(np.abs(flatten(g_params) - fd)) < 1e-7


def test_vjp_matches_finite_differences_input():
    arch, params, _ = _random_net(21)
    rng = make_rng(22)
    z0 = rng.standard_normal(3)
    w = rng.standard_normal(2)

    def scalar(z_vec):
        return float(w @ mlp_forward(params, z_vec))

    _, acts = mlp_forward_cached(params, z0)
    _, g_in = mlp_vjp(params, acts, w)
    fd = finite_diff_gradient(scalar, z0, h=1e-6)
    assert np.max(np.abs(g_in[0] - fd)) < 1e-7
