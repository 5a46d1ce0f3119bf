"""Additive augmentation of a physics model with a normalized network.

The augmented one-step map is

    x+ = f(x, u; theta) + unscale(net(scale_x * x, scale_u * u))

where scale_x/scale_u are per-channel inverse standard deviations computed
from training data, and the network output is written only into a chosen
subset of state rows (here: the velocity states of the vehicle). With the
network's final layer initialized to zero the augmented model reproduces the
physics-only model exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ann
from .errors import DegenerateChannelError, InsufficientDataError, InvalidInputError, SimulationDivergedError
from .dynamics import OVERFLOW_GUARD


@dataclass
class NormalizationMaps:
    """Diagonal input/state scalings, stored as the 1/std vectors."""

    x_scale: np.ndarray
    u_scale: np.ndarray

    def __post_init__(self):
        self.x_scale = np.asarray(self.x_scale, dtype=float)
        self.u_scale = np.asarray(self.u_scale, dtype=float)
        if np.any(self.x_scale <= 0) or np.any(self.u_scale <= 0):
            raise InvalidInputError("normalization scales must be strictly positive")

    @classmethod
    def identity(cls, n_x, n_u):
        return cls(np.ones(n_x), np.ones(n_u))


def compute_normalization(train, source="measured", fp_model=None, theta=None):
    """Per-channel 1/std scalings from the training data.

    Population standard deviation (divide by N) for determinism. With
    source="fp_simulated" the state scalings come from simulating the physics
    model over each training segment instead of from the measurements.
    """
    if train.n_samples < 2:
        raise InsufficientDataError("need at least 2 samples per channel")
    if source == "measured":
        states = train.y
    elif source == "fp_simulated":
        if fp_model is None:
            raise InvalidInputError("fp_simulated normalization needs the model family")
        th = fp_model.theta0 if theta is None else theta
        parts = [
            fp_model.simulate(train.y[a], train.u[a:b], th) for a, b in train.segments
        ]
        states = np.vstack(parts)
    else:
        raise InvalidInputError(f"unknown normalization source {source!r}")

    def inv_std(arr, kind):
        std = arr.std(axis=0)
        for ch, s in enumerate(std):
            if not np.isfinite(s) or s <= 0.0:
                raise DegenerateChannelError(
                    f"{kind} channel {ch} has zero variance", channel=ch
                )
        return 1.0 / std

    return NormalizationMaps(x_scale=inv_std(states, "state"), u_scale=inv_std(train.u, "input"))


@dataclass
class AugmentedModel:
    """Physics family + current parameter estimate + network + scalings."""

    fp: object                       # FirstPrinciplesModel family
    theta: np.ndarray                # current physical parameter estimate
    arch: ann.MlpArchitecture
    net: ann.MlpParams
    norm: NormalizationMaps
    augmented_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.augmented_idx is None:
            self.augmented_idx = np.arange(self.fp.n_x)
        self.augmented_idx = np.asarray(self.augmented_idx, dtype=int)
        if self.arch.n_in != self.fp.n_x + self.fp.n_u:
            raise InvalidInputError(
                f"network input must be n_x+n_u={self.fp.n_x + self.fp.n_u}, got {self.arch.n_in}"
            )
        if self.arch.n_out != self.augmented_idx.size:
            raise InvalidInputError(
                f"network output {self.arch.n_out} must match the {self.augmented_idx.size} augmented states"
            )
        if self.norm.x_scale.size != self.fp.n_x or self.norm.u_scale.size != self.fp.n_u:
            raise InvalidInputError("normalization dims do not match the model family")

    @property
    def aug_scale(self):
        """1/std of the augmented state rows (network output de-normalizer)."""
        return self.norm.x_scale[self.augmented_idx]

    def copy(self):
        return AugmentedModel(
            fp=self.fp,
            theta=self.theta.copy(),
            arch=self.arch,
            net=self.net.copy(),
            norm=NormalizationMaps(self.norm.x_scale.copy(), self.norm.u_scale.copy()),
            augmented_idx=self.augmented_idx.copy(),
        )

    def net_input(self, x, u):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return np.hstack([x * self.norm.x_scale, u * self.norm.u_scale])

    def net_contribution(self, x, u):
        """De-normalized network output placed into the full state vector."""
        x_b = np.atleast_2d(np.asarray(x, dtype=float))
        out = ann.mlp_forward(self.net, self.net_input(x_b, u))
        full = np.zeros((x_b.shape[0], self.fp.n_x))
        full[:, self.augmented_idx] = out / self.aug_scale
        return full

    def step(self, x, u):
        x_b = np.atleast_2d(np.asarray(x, dtype=float))
        u_b = np.atleast_2d(np.asarray(u, dtype=float))
        nxt = self.fp.step(x_b, u_b, self.theta) + self.net_contribution(x_b, u_b)
        return nxt[0] if np.asarray(x).ndim == 1 else nxt

    def rollout(self, x0, u_seq):
        """Iterated step from a measured initial state.

        Returns (states, outputs): states has len(u_seq)+1 rows starting at
        x0; outputs are the measured-equivalent outputs at the first
        len(u_seq) states (identity output map).
        """
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        if u_seq.shape[0] < 1:
            raise InvalidInputError("rollout needs at least one input sample")
        batched = np.asarray(x0).ndim > 1
        x0_b = np.atleast_2d(np.asarray(x0, dtype=float))
        n, b = u_seq.shape[0], x0_b.shape[0]
        states = np.empty((b, n + 1, self.fp.n_x))
        states[:, 0] = x0_b
        x = x0_b
        for k in range(n):
            x = self.step(x, np.broadcast_to(u_seq[k], (b, self.fp.n_u)))
            if np.any(np.abs(x) > OVERFLOW_GUARD) or not np.all(np.isfinite(x)):
                raise SimulationDivergedError(
                    f"rollout diverged at step {k + 1}", step=k + 1
                )
            states[:, k + 1] = x
        outputs = states[:, :n]
        if not batched:
            return states[0], outputs[0]
        return states, outputs

    def free_run(self, x0, u_seq):
        """Segment simulation for evaluation: row k is the state at sample k,
        row 0 equal to the seed; uses inputs 0..N-2."""
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        n = u_seq.shape[0]
        states = np.empty((n, self.fp.n_x))
        states[0] = np.asarray(x0, dtype=float)
        x = states[0][None, :]
        for k in range(n - 1):
            x = self.step(x, u_seq[k][None, :])
            if np.any(np.abs(x) > OVERFLOW_GUARD) or not np.all(np.isfinite(x)):
                raise SimulationDivergedError(
                    f"free run diverged at step {k + 1}", step=k + 1
                )
            states[k + 1] = x[0]
        return states


def init_augmented(fp_model, arch, norm, augmented_idx, seed):
    """Fresh augmented model at the nominal parameters with a zeroed final
    network layer, so it initially reproduces the physics-only model."""
    return AugmentedModel(
        fp=fp_model,
        theta=fp_model.theta0.copy(),
        arch=arch,
        net=ann.init_mlp(arch, seed),
        norm=norm,
        augmented_idx=augmented_idx,
    )


def fp_only(model):
    """Copy with the network zeroed out: the standalone physics model at the
    current parameter estimate."""
    out = model.copy()
    out.net = ann.MlpParams(
        [np.zeros_like(w) for w in out.net.weights],
        [np.zeros_like(b) for b in out.net.biases],
    )
    return out
