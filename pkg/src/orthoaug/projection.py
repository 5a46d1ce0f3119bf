"""Response-subspace basis of the physics family and the orthogonality penalty.

Stacking the parameter Jacobian of the physics step over a set of samples
gives a tall regressor whose column space is (to first order in the
parameters) everything the physics family can change in its response on that
data. A thin SVD turns it into an orthonormal basis Q; the penalty is the
squared norm of the network contribution's component inside that span,
computed cheaply as |Q^T s|^2 instead of |Q Q^T s|^2.

For families that are exactly linear in the parameters the regressor is the
stacked coefficient blocks; the Jacobian-plus-offset form generalizes this to
families that are nonlinear in the parameters by linearizing around a chosen
parameter vector and absorbing the offset into one extra column.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .augmented import fp_only
from .errors import InsufficientDataError, InvalidInputError
from .linalg import reduced_svd

DEFAULT_RANK_TOL = 1e-12


def data_fingerprint(states, inputs):
    h = hashlib.sha256()
    for a in (states, inputs):
        a = np.ascontiguousarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class ProjectionBasis:
    """Orthonormal basis of the stacked physics-response subspace."""

    q: np.ndarray            # (M*n_x, r), orthonormal columns
    sigma: np.ndarray        # retained singular values, non-increasing
    source: str              # "linear" or "taylor"
    theta_bar: np.ndarray    # linearization point (taylor) or None
    states: np.ndarray       # (M, n_x) samples the basis was built from
    inputs: np.ndarray       # (M, n_u)
    fingerprint: str

    @property
    def r(self):
        return self.q.shape[1]


def linear_regressor(model, states, inputs):
    """Stacked coefficient blocks for a family that is linear in theta."""
    if not getattr(model, "is_linear_in_theta", False):
        raise InvalidInputError("model family is not linear in its parameters")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    blocks = model.regressor(states, inputs)            # (M, n_x, n_theta)
    m = blocks.shape[0] * blocks.shape[1]
    if m <= model.n_theta:
        raise InsufficientDataError(
            f"need more than n_theta={model.n_theta} stacked rows, got {m}"
        )
    return blocks.reshape(m, model.n_theta)


def taylor_regressor(fp_model, states, inputs, theta_bar=None):
    """Jacobian-plus-offset regressor linearized at theta_bar.

    Columns 1..n_theta stack the parameter Jacobians of the discrete step;
    the last column stacks step(x,u;theta_bar) - jac*theta_bar, so the whole
    response at the linearization point lies in the column span. For a family
    that is exactly linear in theta the offset column is identically zero.
    """
    theta_bar = fp_model.theta0 if theta_bar is None else np.asarray(theta_bar, dtype=float)
    if not np.all(np.isfinite(theta_bar)):
        raise InvalidInputError("theta_bar must be finite")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    jac = fp_model.jac_theta(states, inputs, theta_bar)   # (M, n_x, n_theta)
    step = fp_model.step(states, inputs, theta_bar)       # (M, n_x)
    offset = step - np.einsum("bij,j->bi", jac, theta_bar)
    m = jac.shape[0] * jac.shape[1]
    if m <= fp_model.n_theta:
        raise InsufficientDataError(
            f"need more than n_theta={fp_model.n_theta} stacked rows, got {m}"
        )
    return np.hstack([jac.reshape(m, fp_model.n_theta), offset.reshape(m, 1)])


def basis_from_regressor(
    regressor, states, inputs, source, theta_bar=None, rank_tol=DEFAULT_RANK_TOL
):
    """Thin SVD of the stacked regressor with zero directions dropped."""
    q, sigma, _ = reduced_svd(regressor, rank_tol=rank_tol)
    return ProjectionBasis(
        q=q,
        sigma=sigma,
        source=source,
        theta_bar=None if theta_bar is None else np.asarray(theta_bar, dtype=float),
        states=np.atleast_2d(np.asarray(states, dtype=float)),
        inputs=np.atleast_2d(np.asarray(inputs, dtype=float)),
        fingerprint=data_fingerprint(states, inputs),
    )


def stacked_net_output(model, states=None, inputs=None, basis=None):
    """Network contributions over a sample set, stacked sample-major.

    Rows outside the augmented state set are zero; entries are de-normalized,
    i.e. in the same units the physics step produces. Returns a flat vector
    of length M*n_x.
    """
    if basis is not None:
        states, inputs = basis.states, basis.inputs
    contrib = model.net_contribution(states, inputs)      # (M, n_x)
    return contrib.reshape(-1)


def subspace_penalty(basis, stacked):
    """Squared norm of the component of `stacked` inside the basis span."""
    stacked = np.asarray(stacked, dtype=float)
    if stacked.ndim != 1 or stacked.size != basis.q.shape[0]:
        raise InvalidInputError(
            f"stacked vector length {stacked.size} does not match basis rows {basis.q.shape[0]}"
        )
    coeffs = basis.q.T @ stacked
    return float(coeffs @ coeffs)


BASIS_MODES = ("precomputed_theta0", "per_epoch_theta_hat", "per_epoch_simulated_states")


def refresh_basis(model, train, mode="precomputed_theta0", cache=None, rank_tol=DEFAULT_RANK_TOL):
    """Return the basis for the configured mode, rebuilding when required.

    precomputed_theta0:
        built once at the nominal parameters from the measured states; the
        same object is returned on every later call (pass the same dict as
        `cache`).
    per_epoch_theta_hat:
        rebuilt at the current parameter estimate from the measured states.
    per_epoch_simulated_states:
        rebuilt at the current estimate from states obtained by simulating
        the physics-only model over each training segment.
    """
    if mode not in BASIS_MODES:
        raise InvalidInputError(f"unknown basis mode {mode!r}")
    if mode == "precomputed_theta0":
        if cache is not None and "basis" in cache:
            return cache["basis"]
        reg = taylor_regressor(model.fp, train.y, train.u, model.fp.theta0)
        basis = basis_from_regressor(
            reg, train.y, train.u, "taylor", model.fp.theta0, rank_tol
        )
        if cache is not None:
            cache["basis"] = basis
        return basis
    if mode == "per_epoch_theta_hat":
        states = train.y
    else:
        fp = fp_only(model)
        states = np.vstack([fp.free_run(train.y[a], train.u[a:b]) for a, b in train.segments])
    reg = taylor_regressor(model.fp, states, train.u, model.theta)
    return basis_from_regressor(reg, states, train.u, "taylor", model.theta, rank_tol)
