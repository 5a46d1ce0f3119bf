"""Subsection sampling, truncated prediction cost, adjoint gradients, Adam.

The training cost is the mean squared output error of short rollouts started
at measured states: windows of `horizon` samples are drawn from the training
record, each window is re-simulated from its first measured sample, and the
per-window mean squared error is averaged over windows. The regularized cost
adds beta times the subspace penalty of the network contribution stacked over
the basis sample set.

Gradients are computed with a hand-derived adjoint sweep (backpropagation
through time over the rollout, chaining the analytic model Jacobians and the
network VJPs); they are exact for the smoothed-sign dynamics and validated
against central finite differences in the test suite. Physical and network
parameters live in one flat vector [theta, eta] updated by a single Adam
instance; accumulation happens in a fixed order so repeated runs with the
same seed produce identical histories.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ann
from .augmented import compute_normalization, init_augmented
from .data import FLOAT_FMT
from .errors import InsufficientDataError, InvalidInputError, NumericalError, SimulationDivergedError
from .dynamics import OVERFLOW_GUARD
from .linalg import make_rng
from .projection import refresh_basis, stacked_net_output, subspace_penalty


@dataclass
class TrainConfig:
    horizon: int = 15                 # truncated prediction length
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta: float = 0.0                 # orthogonality penalty coefficient
    epochs: int = 2000
    patience: int = 50
    seed: int = 0
    basis_mode: str = "precomputed_theta0"
    co_estimate_theta: bool = True
    normalization_source: str = "measured"
    penalty_scope: str = "full"       # "full" or "batch"
    rank_tol: float = 1e-12

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.beta < 0:
            raise InvalidInputError("beta must be nonnegative")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.epochs < 0 or self.patience < 1:
            raise InvalidInputError("bad epochs/patience")
        if self.penalty_scope not in ("full", "batch"):
            raise InvalidInputError(f"unknown penalty scope {self.penalty_scope!r}")


def sample_subsections(n, window, n_sec, rng):
    """Starting indices of n_sec windows of the given length inside n samples.

    Draws uniformly without replacement while enough distinct starts exist
    (0-based starts, 0..n-window inclusive); falls back to replacement
    otherwise.
    """
    if window < 1 or n_sec < 1:
        raise InvalidInputError("window and n_sec must be >= 1")
    if n < window:
        raise InsufficientDataError(f"record of {n} samples cannot hold a window of {window}")
    avail = n - window + 1
    return rng.choice(avail, size=n_sec, replace=n_sec > avail)


# ---------------------------------------------------------------------------
# cost and adjoint gradients

def _forward_sections(model, data, starts, horizon, keep_caches):
    """Rollout of all sections at once; states indexed l = 0..horizon-1."""
    starts = np.asarray(starts, dtype=int)
    b = starts.size
    n_x = model.fp.n_x
    xs = np.empty((horizon, b, n_x))
    xs[0] = data.y[starts]
    caches = [] if keep_caches else None
    aug = model.augmented_idx
    aug_scale = model.aug_scale
    for l in range(horizon - 1):
        x = xs[l]
        u = data.u[starts + l]
        z = model.net_input(x, u)
        out, acts = ann.mlp_forward_cached(model.net, z)
        contrib = np.zeros((b, n_x))
        contrib[:, aug] = out / aug_scale
        nxt = model.fp.step(x, u, model.theta) + contrib
        if not np.all(np.isfinite(nxt)) or np.any(np.abs(nxt) > OVERFLOW_GUARD):
            bad = int(np.argmax(np.any(~np.isfinite(nxt) | (np.abs(nxt) > OVERFLOW_GUARD), axis=1)))
            raise SimulationDivergedError(
                f"section starting at sample {int(starts[bad])} diverged at step {l + 1}",
                step=l + 1,
            )
        xs[l + 1] = nxt
        if keep_caches:
            caches.append(acts)
    return xs, caches


def prediction_cost(model, data, starts, horizon):
    """Mean-over-sections, mean-over-window squared output error.

    Each window is seeded with its first measured sample, so the l=0 term of
    the inner sum is identically zero and contributes only through the 1/T
    normalization.
    """
    starts = np.asarray(starts, dtype=int)
    if starts.size == 0:
        raise InsufficientDataError("no sections to evaluate")
    xs, _ = _forward_sections(model, data, starts, horizon, keep_caches=False)
    total = 0.0
    for l in range(horizon):
        r = xs[l] - data.y[starts + l]
        total += float(np.sum(r * r))
    return total / (starts.size * horizon)


def regularized_cost(model, data, starts, horizon, basis=None, beta=0.0):
    """Prediction cost plus beta times the subspace penalty of the stacked
    network contribution. With beta == 0 this returns the prediction cost
    bit-for-bit (no penalty arithmetic happens at all)."""
    v = prediction_cost(model, data, starts, horizon)
    if beta == 0.0:
        return v
    if basis is None:
        raise InvalidInputError("a basis is required when beta > 0")
    return v + beta * subspace_penalty(basis, stacked_net_output(model, basis=basis))


def _zero_grads_like(params):
    return (
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def cost_and_gradient(model, data, starts, horizon, basis=None, beta=0.0, penalty_rows=None):
    """Regularized cost and its exact gradients w.r.t. (theta, eta).

    Runs the batched rollout forward, then one adjoint sweep backward through
    time. The penalty term contributes only to the network gradient (the
    basis is held fixed during differentiation). `penalty_rows` optionally
    restricts the penalty to a subset of basis samples (per-batch scope).
    Returns (value, d_theta, d_eta_flat).
    """
    starts = np.asarray(starts, dtype=int)
    if starts.size == 0:
        raise InsufficientDataError("empty batch")
    b = starts.size
    n_x = model.fp.n_x
    aug = model.augmented_idx
    aug_scale = model.aug_scale
    theta = model.theta

    xs, caches = _forward_sections(model, data, starts, horizon, keep_caches=True)
    residuals = [xs[l] - data.y[starts + l] for l in range(horizon)]
    value = sum(float(np.sum(r * r)) for r in residuals) / (b * horizon)

    coeff = 2.0 / (b * horizon)
    d_theta = np.zeros(model.fp.n_theta)
    gw_acc, gb_acc = _zero_grads_like(model.net)
    lam = coeff * residuals[horizon - 1]
    for l in range(horizon - 2, -1, -1):
        x = xs[l]
        u = data.u[starts + l]
        jt = model.fp.jac_theta(x, u, theta)
        jx = model.fp.jac_state(x, u, theta)
        d_theta += np.einsum("bi,bio->o", lam, jt)
        g_out = lam[:, aug] / aug_scale
        g_params, g_in = ann.mlp_vjp(model.net, caches[l], g_out)
        for i in range(len(gw_acc)):
            gw_acc[i] += g_params.weights[i]
            gb_acc[i] += g_params.biases[i]
        lam = coeff * residuals[l] + np.einsum("bi,bij->bj", lam, jx)
        lam += g_in[:, :n_x] * model.norm.x_scale

    if beta > 0.0:
        if basis is None:
            raise InvalidInputError("a basis is required when beta > 0")
        states, inputs = basis.states, basis.inputs
        q = basis.q
        if penalty_rows is not None:
            states = states[penalty_rows]
            inputs = inputs[penalty_rows]
            q = basis.q.reshape(basis.states.shape[0], n_x, -1)[penalty_rows].reshape(
                states.shape[0] * n_x, -1
            )
        z = model.net_input(states, inputs)
        out, acts = ann.mlp_forward_cached(model.net, z)
        stacked = np.zeros((states.shape[0], n_x))
        stacked[:, aug] = out / aug_scale
        coeffs = q.T @ stacked.reshape(-1)
        value += beta * float(coeffs @ coeffs)
        g_stacked = (2.0 * beta) * (q @ coeffs)
        g_out = g_stacked.reshape(states.shape[0], n_x)[:, aug] / aug_scale
        g_params, _ = ann.mlp_vjp(model.net, acts, g_out)
        for i in range(len(gw_acc)):
            gw_acc[i] += g_params.weights[i]
            gb_acc[i] += g_params.biases[i]

    d_eta = ann.flatten(ann.MlpParams(gw_acc, gb_acc))
    if not (np.isfinite(value) and np.all(np.isfinite(d_theta)) and np.all(np.isfinite(d_eta))):
        raise NumericalError("non-finite cost or gradient in adjoint sweep")
    return value, d_theta, d_eta


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise InvalidInputError("parameter/gradient/state shapes do not match")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    aborted: bool = False
    abort_reason: str = ""

    def append(self, epoch, train_loss, val_loss, penalty, theta):
        self.epochs.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.penalty.append(float(penalty))
        self.theta.append(np.asarray(theta, dtype=float).copy())

    def to_csv(self, path, theta_names=None):
        names = theta_names or [f"theta_{i}" for i in range(len(self.theta[0]))]
        lines = ["epoch,train_loss,val_loss,penalty," + ",".join(names)]
        for i in range(len(self.epochs)):
            row = [str(self.epochs[i])] + [
                FLOAT_FMT % v for v in (self.train_loss[i], self.val_loss[i], self.penalty[i])
            ] + [FLOAT_FMT % v for v in self.theta[i]]
            lines.append(",".join(row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _epoch_metrics(model, train_data, val_data, starts_all, val_starts, horizon, basis, beta):
    train_loss = prediction_cost(model, train_data, starts_all, horizon)
    val_loss = (
        prediction_cost(model, val_data, val_starts, horizon)
        if val_starts.size
        else math.nan
    )
    pen = (
        subspace_penalty(basis, stacked_net_output(model, basis=basis))
        if beta > 0.0
        else 0.0
    )
    return train_loss, val_loss, pen


def train(config, train_data, val_data, fp_model, arch, augmented_idx=None):
    """Fit the augmented model; returns (best model snapshot, history).

    Every admissible window start is visited once per epoch in shuffled
    batches. The snapshot with the best validation loss is kept (training
    loss when no validation sections exist); an exploding rollout aborts the
    run and returns the best snapshot so far together with the history up to
    the failure.
    """
    rng = make_rng(config.seed)
    horizon = config.horizon
    norm = compute_normalization(
        train_data, source=config.normalization_source, fp_model=fp_model
    )
    model = init_augmented(fp_model, arch, norm, augmented_idx, seed=config.seed)
    if not config.co_estimate_theta:
        model.theta = fp_model.theta0.copy()

    starts_all = train_data.admissible_starts(horizon)
    if starts_all.size == 0:
        raise InsufficientDataError("training data admits no prediction windows")
    val_starts = val_data.admissible_starts(horizon) if val_data.n_samples else np.empty(0, dtype=int)

    basis_cache = {}
    basis = None
    if config.beta > 0.0:
        basis = refresh_basis(
            model, train_data, config.basis_mode, basis_cache, config.rank_tol
        )

    n_theta = model.fp.n_theta
    params = np.concatenate([model.theta, ann.flatten(model.net)])
    adam = AdamState.zeros(params.size)
    history = TrainHistory()

    def sync_model():
        model.theta = params[:n_theta].copy()
        model.net = ann.unflatten(arch, params[n_theta:])

    t_loss, v_loss, pen = _epoch_metrics(
        model, train_data, val_data, starts_all, val_starts, horizon, basis, config.beta
    )
    history.append(0, t_loss, v_loss, pen, model.theta)
    metric = v_loss if val_starts.size else t_loss
    best = {"metric": metric, "epoch": 0, "theta": model.theta.copy(), "net": model.net.copy()}
    stall = 0

    for epoch in range(1, config.epochs + 1):
        if config.beta > 0.0 and config.basis_mode != "precomputed_theta0":
            basis = refresh_basis(
                model, train_data, config.basis_mode, basis_cache, config.rank_tol
            )
        perm = rng.permutation(starts_all)
        batch_costs = []
        try:
            for i in range(0, perm.size, config.batch_size):
                batch = perm[i : i + config.batch_size]
                rows = None
                if config.beta > 0.0 and config.penalty_scope == "batch":
                    rows = np.unique(
                        (batch[:, None] + np.arange(horizon)[None, :]).ravel()
                    )
                value, d_theta, d_eta = cost_and_gradient(
                    model, train_data, batch, horizon, basis, config.beta, rows
                )
                if not config.co_estimate_theta:
                    d_theta = np.zeros_like(d_theta)
                grads = np.concatenate([d_theta, d_eta])
                params, adam = adam_step(params, grads, adam, config.learning_rate)
                sync_model()
                batch_costs.append(value)
        except (SimulationDivergedError, NumericalError) as exc:
            history.aborted = True
            history.abort_reason = f"epoch {epoch}: {exc}"
            break

        t_loss = float(np.mean(batch_costs))
        val_loss = (
            prediction_cost(model, val_data, val_starts, horizon)
            if val_starts.size
            else math.nan
        )
        pen = (
            subspace_penalty(basis, stacked_net_output(model, basis=basis))
            if config.beta > 0.0
            else 0.0
        )
        history.append(epoch, t_loss, val_loss, pen, model.theta)

        metric = val_loss if val_starts.size else t_loss
        if np.isfinite(metric) and metric < best["metric"]:
            best = {
                "metric": metric,
                "epoch": epoch,
                "theta": model.theta.copy(),
                "net": model.net.copy(),
            }
            stall = 0
        else:
            stall += 1
            if stall > config.patience:
                break

    history.best_epoch = best["epoch"]
    history.best_val = best["metric"]
    out = model.copy()
    out.theta = best["theta"]
    out.net = best["net"]
    return out, history
