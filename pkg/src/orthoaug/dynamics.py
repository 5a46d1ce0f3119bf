"""Parametric discrete-time model families and the truth-plant simulator.

All model families share one interface: a discrete-time step map together
with its analytic Jacobians with respect to the physical parameters and the
state. Everything is batched: states are (B, n_x), inputs (B, n_u).

The vehicle family is a planar single-track model (both axles lumped into one
wheel each, front axle steered, drivetrain force applied at both axles) with
linear lateral tire forces, discretized with forward Euler. The truth plant
used to generate data shares the rigid-body structure but runs nonlinear
tire curves, a distorted drivetrain and a finer integration scheme, so the
vehicle family is genuinely misspecified against it.
"""

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InvalidInputError, SimulationDivergedError
from .linalg import make_rng

V_MIN = 0.3          # clamp for slip denominators [m/s]
SIGN_EPS = 0.05      # tanh width replacing sign() inside Jacobians
OVERFLOW_GUARD = 1e6


def _as_batch(a, width, name):
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise InvalidInputError(f"{name} must have {width} columns, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a, single


class FirstPrinciplesModel:
    """Interface shared by all physics-based model families.

    Subclasses define a parametric one-step state transition and its analytic
    Jacobians. The output map is the identity (all states measured).
    """

    n_x = None
    n_u = None
    n_theta = None
    theta_names = ()
    theta0 = None
    sample_time = None

    def step(self, x, u, theta):
        raise NotImplementedError

    def jac_theta(self, x, u, theta):
        raise NotImplementedError

    def jac_state(self, x, u, theta):
        raise NotImplementedError

    def output(self, x, u=None):
        return x

    def simulate(self, x0, u_seq, theta):
        """Open-loop rollout; returns (len(u_seq), n_x) states, row 0 = x0."""
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        n = u_seq.shape[0]
        states = np.empty((n, self.n_x))
        states[0] = np.asarray(x0, dtype=float)
        for k in range(n - 1):
            states[k + 1] = self.step(states[k], u_seq[k], theta)
            if np.any(np.abs(states[k + 1]) > OVERFLOW_GUARD):
                raise SimulationDivergedError(
                    f"state exceeded overflow guard at step {k + 1}", step=k + 1
                )
        return states


# ---------------------------------------------------------------------------
# single-track vehicle model

@dataclass
class SingleTrackParams:
    """Physical parameters: mass, yaw inertia, axle distances, drivetrain
    constants and the front/rear cornering stiffnesses."""

    m: float = 3.0
    j_z: float = 0.05
    l_r: float = 0.17
    l_f: float = 0.16
    c_m1: float = 40.0
    c_m2: float = 3.0
    c_m3: float = 0.5
    c_r: float = 40.0
    c_f: float = 35.0

    NAMES = ("m", "j_z", "l_r", "l_f", "c_m1", "c_m2", "c_m3", "c_r", "c_f")

    def to_vector(self):
        return np.array([getattr(self, n) for n in self.NAMES], dtype=float)

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (9,):
            raise InvalidInputError(f"parameter vector must have 9 entries, got {v.shape}")
        return cls(**dict(zip(cls.NAMES, v)))

    def validate(self):
        for n in self.NAMES:
            val = getattr(self, n)
            if not np.isfinite(val) or val <= 0.0:
                raise InvalidInputError(f"nominal parameter {n} must be positive, got {val}")


@dataclass
class VehicleState:
    """Planar pose plus body-frame velocities and yaw rate."""

    p_x: float = 0.0
    p_y: float = 0.0
    heading: float = 0.0
    v_xi: float = 0.0
    v_eta: float = 0.0
    omega: float = 0.0

    def to_vector(self):
        return np.array(
            [self.p_x, self.p_y, self.heading, self.v_xi, self.v_eta, self.omega]
        )

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (6,):
            raise InvalidInputError(f"state vector must have 6 entries, got {v.shape}")
        return cls(*v)


class SingleTrackModel(FirstPrinciplesModel):
    """Forward-Euler discretization of the single-track vehicle dynamics.

    State: [p_x, p_y, heading, v_xi, v_eta, omega]; input: [delta, d] where
    delta is the steering angle [rad] and d the motor PWM fraction.
    Slip denominators clamp the longitudinal speed at V_MIN (the model is
    meant for forward driving); inside Jacobians, sign(v_xi) is smoothed to
    tanh(v_xi / SIGN_EPS) so gradients stay defined.
    """

    n_x = 6
    n_u = 2
    n_theta = 9
    theta_names = SingleTrackParams.NAMES
    is_linear_in_theta = False

    def __init__(self, theta0=None, sample_time=0.025):
        if theta0 is None:
            theta0 = SingleTrackParams()
        if isinstance(theta0, SingleTrackParams):
            theta0.validate()
            theta0 = theta0.to_vector()
        self.theta0 = np.asarray(theta0, dtype=float)
        if self.theta0.shape != (9,):
            raise InvalidInputError("theta0 must have 9 entries")
        if sample_time <= 0:
            raise InvalidInputError("sample_time must be positive")
        self.sample_time = float(sample_time)

    @staticmethod
    def _forces(x, u, theta, smooth_sign):
        v_xi, v_eta, omega = x[:, 3], x[:, 4], x[:, 5]
        delta, d = u[:, 0], u[:, 1]
        m, j_z, l_r, l_f, c_m1, c_m2, c_m3, c_r, c_f = theta
        w = np.maximum(v_xi, V_MIN)
        s = np.tanh(v_xi / SIGN_EPS) if smooth_sign else np.sign(v_xi)
        f_long = c_m1 * d - c_m2 * v_xi - s * c_m3
        slip_r = (-v_eta + l_r * omega) / w
        slip_f = delta - (v_eta + l_f * omega) / w
        return f_long, c_r * slip_r, c_f * slip_f, slip_r, slip_f, w, s

    def ct_derivative(self, x, u, theta=None):
        """Continuous-time state derivative at (x, u)."""
        theta = self.theta0 if theta is None else np.asarray(theta, dtype=float)
        x, single = _as_batch(x, 6, "state")
        u, _ = _as_batch(u, 2, "input")
        m, j_z, l_r, l_f = theta[0], theta[1], theta[2], theta[3]
        f_long, f_r, f_f, _, _, _, _ = self._forces(x, u, theta, smooth_sign=False)
        heading, v_xi, v_eta, omega = x[:, 2], x[:, 3], x[:, 4], x[:, 5]
        cd, sd = np.cos(u[:, 0]), np.sin(u[:, 0])
        ch, sh = np.cos(heading), np.sin(heading)
        out = np.empty_like(x)
        out[:, 0] = v_xi * ch - v_eta * sh
        out[:, 1] = v_xi * sh + v_eta * ch
        out[:, 2] = omega
        out[:, 3] = (f_long * (1.0 + cd) - f_f * sd) / m + v_eta * omega
        out[:, 4] = (f_r + f_long * sd + f_f * cd) / m - v_xi * omega
        out[:, 5] = (f_f * l_f * cd + f_long * l_f * sd - f_r * l_r) / j_z
        return out[0] if single else out

    def step(self, x, u, theta):
        x_b, single = _as_batch(x, 6, "state")
        nxt = x_b + self.sample_time * self.ct_derivative(x_b, u, theta)
        return nxt[0] if single else nxt

    def jac_state(self, x, u, theta):
        """Jacobian of the discrete step w.r.t. the state, (B, 6, 6)."""
        theta = np.asarray(theta, dtype=float)
        x, single = _as_batch(x, 6, "state")
        u, _ = _as_batch(u, 2, "input")
        b = x.shape[0]
        m, j_z, l_r, l_f, c_m1, c_m2, c_m3, c_r, c_f = theta
        f_long, f_r, f_f, _, _, w, s = self._forces(x, u, theta, smooth_sign=True)
        heading, v_xi, v_eta, omega = x[:, 2], x[:, 3], x[:, 4], x[:, 5]
        cd, sd = np.cos(u[:, 0]), np.sin(u[:, 0])
        ch, sh = np.cos(heading), np.sin(heading)
        dw = (v_xi > V_MIN).astype(float)
        ds = (1.0 - s * s) / SIGN_EPS
        d_flong = -c_m2 - c_m3 * ds
        d_fr_vxi = -(f_r / w) * dw
        d_ff_vxi = c_f * (v_eta + l_f * omega) / (w * w) * dw

        a = np.zeros((b, 6, 6))
        a[:, 0, 2] = -v_xi * sh - v_eta * ch
        a[:, 0, 3] = ch
        a[:, 0, 4] = -sh
        a[:, 1, 2] = v_xi * ch - v_eta * sh
        a[:, 1, 3] = sh
        a[:, 1, 4] = ch
        a[:, 2, 5] = 1.0
        a[:, 3, 3] = (d_flong * (1.0 + cd) - d_ff_vxi * sd) / m
        a[:, 3, 4] = (c_f / w) * sd / m + omega
        a[:, 3, 5] = (c_f * l_f / w) * sd / m + v_eta
        a[:, 4, 3] = (d_fr_vxi + d_flong * sd + d_ff_vxi * cd) / m - omega
        a[:, 4, 4] = (-c_r / w - c_f * cd / w) / m
        a[:, 4, 5] = (c_r * l_r / w - c_f * l_f * cd / w) / m - v_xi
        a[:, 5, 3] = (l_f * cd * d_ff_vxi + l_f * sd * d_flong - l_r * d_fr_vxi) / j_z
        a[:, 5, 4] = (-l_f * cd * c_f / w + l_r * c_r / w) / j_z
        a[:, 5, 5] = (-l_f * l_f * cd * c_f / w - l_r * l_r * c_r / w) / j_z

        jac = np.eye(6)[None, :, :] + self.sample_time * a
        return jac[0] if single else jac

    def jac_theta(self, x, u, theta):
        """Jacobian of the discrete step w.r.t. the parameters, (B, 6, 9)."""
        theta = np.asarray(theta, dtype=float)
        x, single = _as_batch(x, 6, "state")
        u, _ = _as_batch(u, 2, "input")
        b = x.shape[0]
        m, j_z, l_r, l_f, c_m1, c_m2, c_m3, c_r, c_f = theta
        f_long, f_r, f_f, slip_r, slip_f, w, s = self._forces(x, u, theta, smooth_sign=True)
        v_xi, v_eta, omega = x[:, 3], x[:, 4], x[:, 5]
        delta, d = u[:, 0], u[:, 1]
        cd, sd = np.cos(delta), np.sin(delta)

        g4 = f_long * (1.0 + cd) - f_f * sd
        g5 = f_r + f_long * sd + f_f * cd
        g6 = l_f * (f_f * cd + f_long * sd) - l_r * f_r

        jb = np.zeros((b, 6, 9))
        # longitudinal velocity row
        jb[:, 3, 0] = -g4 / (m * m)
        jb[:, 3, 3] = sd * c_f * omega / (w * m)
        jb[:, 3, 4] = d * (1.0 + cd) / m
        jb[:, 3, 5] = -v_xi * (1.0 + cd) / m
        jb[:, 3, 6] = -s * (1.0 + cd) / m
        jb[:, 3, 8] = -sd * slip_f / m
        # lateral velocity row
        jb[:, 4, 0] = -g5 / (m * m)
        jb[:, 4, 2] = c_r * omega / (w * m)
        jb[:, 4, 3] = -cd * c_f * omega / (w * m)
        jb[:, 4, 4] = d * sd / m
        jb[:, 4, 5] = -v_xi * sd / m
        jb[:, 4, 6] = -s * sd / m
        jb[:, 4, 7] = slip_r / m
        jb[:, 4, 8] = cd * slip_f / m
        # yaw rate row
        jb[:, 5, 1] = -g6 / (j_z * j_z)
        jb[:, 5, 2] = (-f_r - l_r * c_r * omega / w) / j_z
        jb[:, 5, 3] = (f_f * cd + f_long * sd - l_f * cd * c_f * omega / w) / j_z
        jb[:, 5, 4] = l_f * sd * d / j_z
        jb[:, 5, 5] = -l_f * sd * v_xi / j_z
        jb[:, 5, 6] = -l_f * sd * s / j_z
        jb[:, 5, 7] = -l_r * slip_r / j_z
        jb[:, 5, 8] = l_f * cd * slip_f / j_z

        jac = self.sample_time * jb
        return jac[0] if single else jac


# ---------------------------------------------------------------------------
# small families used for identifiability experiments and regressor tests

class ScalarLinearModel(FirstPrinciplesModel):
    """Scalar map x+ = theta*x + input_gain*u with a single tunable gain."""

    n_x = 1
    n_u = 1
    n_theta = 1
    theta_names = ("gain",)

    def __init__(self, theta0=0.5, input_gain=1.0, sample_time=1.0):
        self.theta0 = np.array([float(theta0)])
        self.input_gain = float(input_gain)
        self.sample_time = float(sample_time)

    @property
    def is_linear_in_theta(self):
        return self.input_gain == 0.0

    def step(self, x, u, theta):
        x_b, single = _as_batch(x, 1, "state")
        u_b, _ = _as_batch(u, 1, "input")
        nxt = theta[0] * x_b + self.input_gain * u_b
        return nxt[0] if single else nxt

    def jac_theta(self, x, u, theta):
        x_b, single = _as_batch(x, 1, "state")
        jac = x_b[:, :, None]
        return jac[0] if single else jac

    def jac_state(self, x, u, theta):
        x_b, single = _as_batch(x, 1, "state")
        jac = np.full((x_b.shape[0], 1, 1), float(theta[0]))
        return jac[0] if single else jac

    def regressor(self, x, u):
        """Per-sample coefficient block of theta, (B, 1, 1)."""
        x_b, _ = _as_batch(x, 1, "state")
        return x_b[:, :, None]


class LinearInParamsModel(FirstPrinciplesModel):
    """Family x+ = regressor(x, u) @ theta for a user-supplied regressor map.

    Used where the step is exactly linear in theta; no state Jacobian is
    provided, so this family is for regressor construction and testing, not
    for gradient-based training.
    """

    is_linear_in_theta = True

    def __init__(self, n_x, n_u, theta0, regressor_fn, sample_time=1.0):
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.theta0 = np.asarray(theta0, dtype=float)
        self.n_theta = self.theta0.size
        self.theta_names = tuple(f"theta_{i}" for i in range(self.n_theta))
        self._regressor_fn = regressor_fn
        self.sample_time = float(sample_time)

    def regressor(self, x, u):
        x_b, _ = _as_batch(x, self.n_x, "state")
        u_b, _ = _as_batch(u, self.n_u, "input")
        out = np.asarray(self._regressor_fn(x_b, u_b), dtype=float)
        if out.shape != (x_b.shape[0], self.n_x, self.n_theta):
            raise InvalidInputError(
                f"regressor must return (B, {self.n_x}, {self.n_theta}), got {out.shape}"
            )
        return out

    def step(self, x, u, theta):
        x_b, single = _as_batch(x, self.n_x, "state")
        nxt = np.einsum("bij,j->bi", self.regressor(x_b, u), theta)
        return nxt[0] if single else nxt

    def jac_theta(self, x, u, theta):
        x_b, single = _as_batch(x, self.n_x, "state")
        jac = self.regressor(x_b, u)
        return jac[0] if single else jac


# ---------------------------------------------------------------------------
# truth plant

@dataclass
class TruthConfig:
    """Configuration of the data-generating plant.

    The plant shares the single-track rigid-body equations but uses curved
    tire characteristics F = d_peak*sin(c_shape*atan(b_stiff*slip)), a
    drivetrain with its own constants plus quadratic drag, and RK4 substeps
    per sample. All coefficients were fixed by calibration runs so that the
    nominal model family above is plausibly but clearly misspecified.
    """

    tire_model: str = "magic"          # "magic" or "linear"
    b_front: float = 5.0
    c_front: float = 1.5
    d_front: float = 5.25
    b_rear: float = 5.0
    c_rear: float = 1.5
    d_rear: float = 5.9
    c_m1: float = 40.5
    c_m2: float = 3.05
    c_m3: float = 0.52
    drag2: float = 0.05
    mass: float = 3.02
    inertia: float = 0.052
    l_r: float = 0.17
    l_f: float = 0.16
    substeps: int = 10
    sample_time: float = 0.025

    def __post_init__(self):
        if self.tire_model not in ("magic", "linear"):
            raise InvalidInputError(f"unknown tire model {self.tire_model!r}")
        if self.substeps < 1:
            raise InvalidInputError("substeps must be >= 1")
        if min(self.d_front, self.d_rear) <= 0:
            raise InvalidInputError("tire peak forces must be positive")
        if self.sample_time <= 0:
            raise InvalidInputError("sample_time must be positive")


def magic_formula(slip, b_stiff, c_shape, d_peak):
    """Empirical lateral tire curve with slope b*c*d at zero slip."""
    return d_peak * np.sin(c_shape * np.arctan(b_stiff * slip))


def _truth_derivative(x, u, cfg):
    v_xi, v_eta, omega = x[:, 3], x[:, 4], x[:, 5]
    delta, d = u[:, 0], u[:, 1]
    w = np.maximum(v_xi, V_MIN)
    f_long = (
        cfg.c_m1 * d
        - cfg.c_m2 * v_xi
        - np.sign(v_xi) * cfg.c_m3
        - cfg.drag2 * v_xi * np.abs(v_xi)
    )
    if cfg.tire_model == "magic":
        slip_r = np.arctan((-v_eta + cfg.l_r * omega) / w)
        slip_f = delta - np.arctan((v_eta + cfg.l_f * omega) / w)
        f_r = magic_formula(slip_r, cfg.b_rear, cfg.c_rear, cfg.d_rear)
        f_f = magic_formula(slip_f, cfg.b_front, cfg.c_front, cfg.d_front)
    else:
        f_r = (cfg.b_rear * cfg.c_rear * cfg.d_rear) * (-v_eta + cfg.l_r * omega) / w
        f_f = (cfg.b_front * cfg.c_front * cfg.d_front) * (
            delta - (v_eta + cfg.l_f * omega) / w
        )
    heading = x[:, 2]
    cd, sd = np.cos(delta), np.sin(delta)
    ch, sh = np.cos(heading), np.sin(heading)
    out = np.empty_like(x)
    out[:, 0] = v_xi * ch - v_eta * sh
    out[:, 1] = v_xi * sh + v_eta * ch
    out[:, 2] = omega
    out[:, 3] = (f_long * (1.0 + cd) - f_f * sd) / cfg.mass + v_eta * omega
    out[:, 4] = (f_r + f_long * sd + f_f * cd) / cfg.mass - v_xi * omega
    out[:, 5] = (f_f * cfg.l_f * cd + f_long * cfg.l_f * sd - f_r * cfg.l_r) / cfg.inertia
    return out


def _rk4_sample_step(x, u, cfg):
    h = cfg.sample_time / cfg.substeps
    for _ in range(cfg.substeps):
        k1 = _truth_derivative(x, u, cfg)
        k2 = _truth_derivative(x + 0.5 * h * k1, u, cfg)
        k3 = _truth_derivative(x + 0.5 * h * k2, u, cfg)
        k4 = _truth_derivative(x + h * k3, u, cfg)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def simulate_truth_batch(config, excitations, x0s, role="train"):
    """Simulate several equally long trajectories side by side.

    excitations: (S, N, 2); x0s: (S, 6). Returns one Dataset per trajectory
    with noise-free outputs equal to the states.
    """
    excitations = np.asarray(excitations, dtype=float)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if excitations.ndim != 3 or excitations.shape[2] != 2:
        raise InvalidInputError("excitations must be (S, N, 2)")
    s, n = excitations.shape[0], excitations.shape[1]
    if n < 2:
        raise InvalidInputError("excitation must contain at least 2 samples")
    if not np.all(np.isfinite(excitations)) or not np.all(np.isfinite(x0s)):
        raise InvalidInputError("non-finite excitation or initial state")
    states = np.empty((s, n, 6))
    states[:, 0] = x0s
    x = x0s.copy()
    for k in range(n - 1):
        x = _rk4_sample_step(x, excitations[:, k], config)
        if np.any(np.abs(x) > OVERFLOW_GUARD) or not np.all(np.isfinite(x)):
            bad = int(np.argmax(np.any(~np.isfinite(x) | (np.abs(x) > OVERFLOW_GUARD), axis=1)))
            raise SimulationDivergedError(
                f"truth simulation diverged at step {k + 1} (trajectory {bad})",
                step=k + 1,
            )
        states[:, k + 1] = x
    return [
        Dataset(
            sample_time=config.sample_time,
            u=excitations[i],
            y=states[i].copy(),
            x=states[i].copy(),
            segments=[(0, n)],
            role=role,
        )
        for i in range(s)
    ]


def simulate_truth(config, excitation, x0, role="train"):
    """Single-trajectory version of simulate_truth_batch."""
    excitation = np.atleast_2d(np.asarray(excitation, dtype=float))
    return simulate_truth_batch(config, excitation[None], np.asarray(x0)[None], role)[0]


def truth_equilibrium_speed(config, pwm):
    """Straight-line speed where drivetrain force balances drag (one Newton
    refinement of the drag-free estimate)."""
    v = max((config.c_m1 * pwm - config.c_m3) / config.c_m2, V_MIN)
    for _ in range(20):
        f = config.c_m1 * pwm - config.c_m2 * v - config.c_m3 - config.drag2 * v * v
        df = -config.c_m2 - 2.0 * config.drag2 * v
        v_new = v - f / df
        if abs(v_new - v) < 1e-12:
            v = v_new
            break
        v = v_new
    return max(v, V_MIN)


def design_excitation(
    n_samples,
    sample_time,
    pwm_level,
    steer_amplitude,
    seed,
    n_sines=8,
    f_min=0.08,
    f_max=1.2,
    pwm_dither=0.08,
    dither_period_s=1.8,
):
    """Open-loop excitation: looping multisine steering plus PWM steps.

    The steering angle mixes one dominant slow sinusoid (the vehicle traces
    figure-eight-like loops, keeping position and heading bounded) with a
    zero-mean random-phase multisine for frequency coverage, scaled to the
    given amplitude. The throttle holds pwm_level with piecewise-constant
    random steps. Deterministic for a fixed seed.
    """
    if n_samples < 2:
        raise InvalidInputError("need at least 2 samples")
    rng = make_rng(seed)
    t = np.arange(n_samples) * sample_time
    freqs = rng.uniform(f_min, f_max, size=n_sines)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_sines)
    multi = np.sum(
        np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]), axis=0
    )
    peak = np.max(np.abs(multi))
    if peak > 0:
        multi /= peak
    f_loop = rng.uniform(0.08, 0.15)
    phase_loop = rng.uniform(0.0, 2.0 * np.pi)
    loop = np.sin(2.0 * np.pi * f_loop * t + phase_loop)
    steer = steer_amplitude * (0.55 * loop + 0.45 * multi)
    period = max(1, int(round(dither_period_s / sample_time)))
    n_blocks = int(np.ceil(n_samples / period))
    levels = rng.uniform(-pwm_dither, pwm_dither, size=n_blocks)
    pwm = pwm_level + np.repeat(levels, period)[:n_samples]
    pwm = np.clip(pwm, 0.10, 0.95)
    return np.column_stack([steer, pwm])
