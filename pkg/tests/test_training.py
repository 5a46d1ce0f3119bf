import numpy as np
import pytest

from orthoaug.ann import MlpArchitecture, flatten, unflatten
from orthoaug.augmented import compute_normalization, fp_only, init_augmented
from orthoaug.data import Dataset, split_train_val
from orthoaug.dynamics import (
    ScalarLinearModel,
    SingleTrackModel,
    SingleTrackParams,
    TruthConfig,
    design_excitation,
    simulate_truth,
)
from orthoaug.errors import InsufficientDataError, InvalidInputError
from orthoaug.linalg import make_rng
from orthoaug.projection import refresh_basis, stacked_net_output, subspace_penalty
from orthoaug.training import (
    AdamState,
    TrainConfig,
    adam_step,
    cost_and_gradient,
    prediction_cost,
    regularized_cost,
    sample_subsections,
    train,
)


# ---------------------------------------------------------------------------
# subsection sampling

def test_sample_subsections_single_choice():
    starts = sample_subsections(15, 15, 4, make_rng(0))
    assert np.all(starts == 0)


def test_sample_subsections_bounds_and_uniqueness():
    starts = sample_subsections(100, 15, 86, make_rng(1))
    assert starts.min() >= 0 and starts.max() <= 85
    assert np.unique(starts).size == 86  # without replacement


def test_sample_subsections_reproducible():
    a = sample_subsections(500, 20, 64, make_rng(7))
    b = sample_subsections(500, 20, 64, make_rng(7))
    assert np.array_equal(a, b)


def test_sample_subsections_insufficient():
    with pytest.raises(InsufficientDataError):
        sample_subsections(10, 11, 1, make_rng(0))


# ---------------------------------------------------------------------------
# fixtures

def toy_truth_dataset(n=400, seed=0, theta_true=0.8):
    rng = make_rng(seed)
    u = rng.standard_normal((n, 1))
    truth = ScalarLinearModel(theta0=theta_true, input_gain=1.0)
    y = truth.simulate(np.array([0.0]), u, np.array([theta_true]))
    return Dataset(sample_time=1.0, u=u, y=y)


def toy_model(ds, theta0=0.6, hidden=(8,), seed=0):
    fp = ScalarLinearModel(theta0=theta0, input_gain=1.0)
    arch = MlpArchitecture(2, hidden, 1)
    return init_augmented(fp, arch, compute_normalization(ds), np.array([0]), seed=seed)


def vehicle_fixture(n=240, seed=5):
    cfg = TruthConfig(substeps=4)
    u = design_excitation(n, cfg.sample_time, 0.25, 0.3, seed=seed)
    ds = simulate_truth(cfg, u, np.array([0.0, 0.0, 0.0, 2.0, 0.0, 0.0]))
    fp = SingleTrackModel(SingleTrackParams())
    arch = MlpArchitecture(8, (16, 16), 3)
    model = init_augmented(fp, arch, compute_normalization(ds), np.array([3, 4, 5]), seed=seed)
    return model, ds


# ---------------------------------------------------------------------------
# cost values

def test_cost_zero_on_generating_model():
    ds = toy_truth_dataset()
    model = toy_model(ds, theta0=0.8)  # same map as the generator, zero net
    starts = ds.admissible_starts(10)
    assert prediction_cost(model, ds, starts, 10) == 0.0


def test_cost_t1_collapses_to_seed_term():
    # with measured seeds the single-sample window has zero residual
    ds = toy_truth_dataset()
    model = toy_model(ds, theta0=0.3)
    assert prediction_cost(model, ds, np.array([4, 9]), 1) == 0.0


def test_cost_matches_hand_rollout():
    ds = toy_truth_dataset(n=30, seed=3)
    model = toy_model(ds, theta0=0.5)
    starts = np.array([2, 11, 20])
    horizon = 3
    # independent evaluation: explicit loops, scalar arithmetic
    total = 0.0
    for k in starts:
        xhat = ds.y[k, 0]
        err = 0.0  # l = 0 term vanishes by construction
        for l in range(1, horizon):
            xhat = 0.5 * xhat + ds.u[k + l - 1, 0]
            err += (ds.y[k + l, 0] - xhat) ** 2
        total += err / horizon
    expected = total / starts.size
    got = prediction_cost(model, ds, starts, horizon)
    assert np.isclose(got, expected, rtol=1e-12)


def test_regularized_cost_beta_zero_bit_equal():
    ds = toy_truth_dataset()
    model = toy_model(ds, theta0=0.45)
    model.net = unflatten(model.arch, make_rng(2).standard_normal(model.arch.n_params))
    starts = ds.admissible_starts(8)
    a = prediction_cost(model, ds, starts, 8)
    b = regularized_cost(model, ds, starts, 8, basis=None, beta=0.0)
    assert a == b  # bitwise


def test_regularized_cost_zero_net_penalty_free():
    ds = toy_truth_dataset()
    model = toy_model(ds, theta0=0.45)
    basis = refresh_basis(model, ds, "precomputed_theta0", {})
    starts = ds.admissible_starts(8)
    v = prediction_cost(model, ds, starts, 8)
    assert regularized_cost(model, ds, starts, 8, basis, beta=1e-3) == v


def test_regularized_cost_affine_in_beta():
    ds = toy_truth_dataset()
    model = toy_model(ds, theta0=0.45)
    model.net = unflatten(model.arch, make_rng(4).standard_normal(model.arch.n_params) * 0.5)
    basis = refresh_basis(model, ds, "precomputed_theta0", {})
    starts = ds.admissible_starts(8)
    v0 = prediction_cost(model, ds, starts, 8)
    pen = subspace_penalty(basis, stacked_net_output(model, basis=basis))
    for beta in (1e-6, 1e-3, 0.5):
        v = regularized_cost(model, ds, starts, 8, basis, beta)
        assert np.isclose(v, v0 + beta * pen, rtol=1e-12)


# ---------------------------------------------------------------------------
# gradients

def test_gradient_symbolic_single_section():
    # horizon 2, one section: cost = (1/2) (y[k+1] - xhat1)^2 with
    # xhat1 = theta*y[k] + u[k] + net(...); net is zero here, so
    # d cost / d theta = -(y[k+1] - xhat1) * y[k]
    ds = toy_truth_dataset(n=20, seed=6)
    model = toy_model(ds, theta0=0.5)
    k = 7
    value, d_theta, d_eta = cost_and_gradient(model, ds, np.array([k]), 2)
    xhat1 = 0.5 * ds.y[k, 0] + ds.u[k, 0]
    resid = ds.y[k + 1, 0] - xhat1
    assert np.isclose(value, 0.5 * resid**2, rtol=1e-12)
    assert np.isclose(d_theta[0], -resid * ds.y[k, 0], rtol=1e-12)


def test_gradient_zero_at_perfect_fit():
    ds = toy_truth_dataset()
    model = toy_model(ds, theta0=0.8)
    basis = refresh_basis(model, ds, "precomputed_theta0", {})
    value, d_theta, d_eta = cost_and_gradient(
        model, ds, ds.admissible_starts(6), 6, basis, beta=1e-4
    )
    assert value == 0.0
    assert np.array_equal(d_theta, np.zeros(1))
    # network gradient vanishes except through the (zero) residuals and the
    # (zero) stacked output; final-layer weights see exactly zero
    assert np.allclose(d_eta, 0.0)


def _fd_directional(cost_fn, p0, direction, h=1e-6):
    return (cost_fn(p0 + h * direction) - cost_fn(p0 - h * direction)) / (2.0 * h)


def _pack(model):
    return np.concatenate([model.theta, flatten(model.net)])


def _cost_closure(model, ds, starts, horizon, basis, beta):
    n_theta = model.fp.n_theta

    def fn(p):
        trial = model.copy()
        trial.theta = p[:n_theta]
        trial.net = unflatten(model.arch, p[n_theta:])
        return regularized_cost(trial, ds, starts, horizon, basis, beta)

    return fn


def test_gradient_matches_fd_toy():
    ds = toy_truth_dataset(n=120, seed=8)
    model = toy_model(ds, theta0=0.55, seed=1)
    rng = make_rng(9)
    model.net = unflatten(model.arch, rng.standard_normal(model.arch.n_params) * 0.4)
    basis = refresh_basis(model, ds, "precomputed_theta0", {})
    starts = np.array([3, 40, 77, 100])
    fn = _cost_closure(model, ds, starts, 5, basis, beta=1e-3)
    p0 = _pack(model)
    _, d_theta, d_eta = cost_and_gradient(model, ds, starts, 5, basis, beta=1e-3)
    grad = np.concatenate([d_theta, d_eta])
    for _ in range(5):
        direction = rng.standard_normal(p0.size)
        direction /= np.linalg.norm(direction)
        fd = _fd_directional(fn, p0, direction)
        assert abs(fd - grad @ direction) <= 1e-5 * max(abs(fd), 1e-10)


def test_gradient_matches_fd_vehicle():
    model, ds = vehicle_fixture()
    rng = make_rng(10)
    model.net = unflatten(model.arch, rng.standard_normal(model.arch.n_params) * 0.2)
    model.theta = model.fp.theta0 * rng.uniform(0.9, 1.1, size=9)
    basis = refresh_basis(model, ds, "precomputed_theta0", {})
    starts = np.array([0, 50, 120, 200])
    horizon = 8
    fn = _cost_closure(model, ds, starts, horizon, basis, beta=1e-5)
    p0 = _pack(model)
    _, d_theta, d_eta = cost_and_gradient(model, ds, starts, horizon, basis, beta=1e-5)
    grad = np.concatenate([d_theta, d_eta])
    # physical parameters coordinate-wise
    for i in range(9):
        e = np.zeros_like(p0)
        e[i] = max(1.0, abs(p0[i]))
        fd = _fd_directional(fn, p0, e, h=1e-6)
        assert abs(fd - grad @ e) <= 1e-5 * max(abs(fd), 1e-8), f"theta[{i}]"
    # network directions
    for _ in range(3):
        direction = np.zeros_like(p0)
        direction[9:] = rng.standard_normal(p0.size - 9)
        direction /= np.linalg.norm(direction)
        fd = _fd_directional(fn, p0, direction)
        assert abs(fd - grad @ direction) <= 1e-5 * max(abs(fd), 1e-8)


def test_gradient_batch_penalty_scope():
    ds = toy_truth_dataset(n=60, seed=11)
    model = toy_model(ds, theta0=0.5, seed=2)
    model.net = unflatten(model.arch, make_rng(12).standard_normal(model.arch.n_params) * 0.3)
    basis = refresh_basis(model, ds, "precomputed_theta0", {})
    starts = np.array([5, 20])
    rows = np.unique((starts[:, None] + np.arange(4)[None, :]).ravel())
    v_full, _, _ = cost_and_gradient(model, ds, starts, 4, basis, 1e-2)
    v_rows, _, _ = cost_and_gradient(model, ds, starts, 4, basis, 1e-2, penalty_rows=rows)
    assert v_rows != v_full  # slice penalty differs from full-set penalty


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState.zeros(3)
    state.m[:] = 0.0
    p1, s1 = adam_step(p, np.zeros(3), state, lr=1e-2)
    assert np.array_equal(p1, p)
    assert s1.t == 1
    # moments decay from a nonzero state
    s1.m[:] = 1.0
    s1.v[:] = 1.0
    _, s2 = adam_step(p, np.zeros(3), s1, lr=1e-2)
    assert np.all(s2.m < s1.m) and np.all(s2.v < s1.v)


def test_adam_first_step_magnitude():
    g = np.array([10.0, -0.3, 1e-4])
    p, _ = adam_step(np.zeros(3), g, AdamState.zeros(3), lr=1e-3)
    # first bias-corrected step is -lr * g/(|g| + eps), magnitude ~ lr
    assert np.allclose(np.abs(p), 1e-3 * np.abs(g) / (np.abs(g) + 1e-8), rtol=1e-9)
    assert np.all(np.sign(p) == -np.sign(g))


def test_adam_deterministic():
    g = make_rng(13).standard_normal(5)
    a1, s1 = adam_step(np.ones(5), g, AdamState.zeros(5), lr=1e-2)
    a2, s2 = adam_step(np.ones(5), g, AdamState.zeros(5), lr=1e-2)
    assert np.array_equal(a1, a2) and np.array_equal(s1.m, s2.m)


def test_adam_shape_check():
    with pytest.raises(InvalidInputError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3), lr=1e-3)


# ---------------------------------------------------------------------------
# training loop

def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(horizon=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(beta=-1e-9)
    with pytest.raises(InvalidInputError):
        TrainConfig(learning_rate=0.0)


def test_train_zero_epochs_returns_init():
    ds = toy_truth_dataset(n=300, seed=14)
    train_ds, val_ds = split_train_val(ds, 0.2, make_rng(15), min_window=5)
    fp = ScalarLinearModel(theta0=0.6, input_gain=1.0)
    arch = MlpArchitecture(2, (8,), 1)
    cfg = TrainConfig(horizon=5, epochs=0, seed=3)
    model, history = train(cfg, train_ds, val_ds, fp, arch, np.array([0]))
    assert np.array_equal(model.theta, np.array([0.6]))
    # validation loss equals the physics-only cost of the fresh model
    bare = fp_only(model)
    expected = prediction_cost(bare, val_ds, val_ds.admissible_starts(5), 5)
    assert np.isclose(history.val_loss[0], expected, rtol=1e-12)
    assert history.best_epoch == 0


def test_train_deterministic_histories():
    ds = toy_truth_dataset(n=300, seed=16)
    train_ds, val_ds = split_train_val(ds, 0.2, make_rng(17), min_window=5)
    fp = ScalarLinearModel(theta0=0.6, input_gain=1.0)
    arch = MlpArchitecture(2, (8,), 1)
    cfg = TrainConfig(horizon=5, epochs=4, batch_size=64, seed=4)
    m1, h1 = train(cfg, train_ds, val_ds, fp, arch, np.array([0]))
    m2, h2 = train(cfg, train_ds, val_ds, fp, arch, np.array([0]))
    assert h1.train_loss == h2.train_loss
    assert h1.val_loss == h2.val_loss
    assert np.array_equal(np.array(h1.theta), np.array(h2.theta))
    assert np.array_equal(m1.theta, m2.theta)


def test_train_frozen_theta_mode():
    ds = toy_truth_dataset(n=300, seed=18)
    train_ds, val_ds = split_train_val(ds, 0.2, make_rng(19), min_window=5)
    fp = ScalarLinearModel(theta0=0.6, input_gain=1.0)
    arch = MlpArchitecture(2, (8,), 1)
    cfg = TrainConfig(horizon=5, epochs=5, batch_size=64, seed=5, co_estimate_theta=False)
    model, history = train(cfg, train_ds, val_ds, fp, arch, np.array([0]))
    assert np.array_equal(model.theta, np.array([0.6]))
    for th in history.theta:
        assert np.array_equal(th, np.array([0.6]))
    # the network must have moved
    assert np.any(flatten(model.net) != 0.0)


def test_train_reduces_validation_loss():
    ds = toy_truth_dataset(n=500, seed=20)
    train_ds, val_ds = split_train_val(ds, 0.2, make_rng(21), min_window=5)
    fp = ScalarLinearModel(theta0=0.5, input_gain=1.0)
    arch = MlpArchitecture(2, (8,), 1)
    cfg = TrainConfig(horizon=5, epochs=30, batch_size=128, learning_rate=5e-3, seed=6)
    model, history = train(cfg, train_ds, val_ds, fp, arch, np.array([0]))
    assert history.val_loss[history.best_epoch] < history.val_loss[0] * 0.2


def test_train_abort_on_divergence():
    ds = toy_truth_dataset(n=200, seed=22)
    train_ds, val_ds = split_train_val(ds, 0.2, make_rng(23), min_window=5)
    fp = ScalarLinearModel(theta0=0.6, input_gain=1.0)
    arch = MlpArchitecture(2, (4,), 1)
    cfg = TrainConfig(horizon=8, epochs=50, batch_size=64, learning_rate=50.0, seed=7)
    model, history = train(cfg, train_ds, val_ds, fp, arch, np.array([0]))
    assert history.aborted
    assert history.abort_reason
    assert np.all(np.isfinite(model.theta))  # best snapshot survives


def test_train_per_epoch_basis_modes():
    ds = toy_truth_dataset(n=260, seed=26)
    train_ds, val_ds = split_train_val(ds, 0.2, make_rng(27), min_window=5)
    fp = ScalarLinearModel(theta0=0.6, input_gain=1.0)
    arch = MlpArchitecture(2, (4,), 1)
    for mode in ("per_epoch_theta_hat", "per_epoch_simulated_states"):
        cfg = TrainConfig(
            horizon=5, epochs=3, batch_size=64, seed=9, beta=1e-3, basis_mode=mode
        )
        model, history = train(cfg, train_ds, val_ds, fp, arch, np.array([0]))
        assert not history.aborted
        assert np.all(np.isfinite(history.train_loss))


def test_train_history_csv(tmp_path):
    ds = toy_truth_dataset(n=200, seed=24)
    train_ds, val_ds = split_train_val(ds, 0.2, make_rng(25), min_window=5)
    fp = ScalarLinearModel(theta0=0.6, input_gain=1.0)
    cfg = TrainConfig(horizon=5, epochs=2, batch_size=64, seed=8, beta=1e-4)
    model, history = train(cfg, train_ds, val_ds, fp, MlpArchitecture(2, (4,), 1), np.array([0]))
    path = tmp_path / "history.csv"
    history.to_csv(path, theta_names=["gain"])
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,penalty,gain"
    assert len(lines) == len(history.epochs) + 1
