"""Command-line entry point: data generation, training, evaluation, sweeps.

Commands
--------
generate    simulate the truth plant over the excitation protocol and write
            train/val/test CSVs (noiseless plus one noisy variant per SNR)
train       fit an augmented model on a generated data directory
eval        free-run NRMS reports for an artifact (augmented and physics-only)
sweep-beta  train/evaluate across a list of penalty coefficients

Configs are flat `key = value` text files; anything not set falls back to the
defaults below. Model artifacts are structured text with 17-significant-digit
floats so they round-trip bit-for-bit. Every run writes a manifest
(resolved config + seed + version) into its output directory.

Exit codes: 0 success, 2 config/usage, 3 data/IO, 4 simulation/training,
5 artifact, 1 unexpected.
"""

import argparse
import hashlib
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__, ann
from .augmented import AugmentedModel, NormalizationMaps, fp_only
from .data import (
    FLOAT_FMT,
    concat_datasets,
    load_csv,
    nrms,
    save_csv,
    split_train_val,
    with_noise,
)
from .dynamics import (
    ScalarLinearModel,
    SingleTrackModel,
    SingleTrackParams,
    TruthConfig,
    design_excitation,
    simulate_truth_batch,
    truth_equilibrium_speed,
)
from .errors import (
    ArtifactError,
    DegenerateChannelError,
    InsufficientDataError,
    InvalidInputError,
    NumericalError,
    OrthoaugError,
    ParseError,
    SimulationDivergedError,
)
from .linalg import make_rng
from .projection import refresh_basis
from .training import TrainConfig, train

TRAIN_MODES = ("fixed-theta0", "coestim-noreg", "coestim-orthreg")


# ---------------------------------------------------------------------------
# experiment configuration

def _parse_list_float(text):
    return tuple(float(v) for v in str(text).split(",") if v != "")


def _parse_list_int(text):
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _fmt_list(values):
    return ",".join(f"{v:g}" for v in values)


@dataclass
class ExperimentConfig:
    # data generation
    seed: int = 0
    sample_time: float = 0.025
    segment_samples: int = 666
    velocity_levels: int = 12
    pwm_min: float = 0.24
    pwm_max: float = 0.48
    steer_amplitude: float = 0.35
    lat_accel_demand: float = 2.2
    snr_db_list: tuple = (30.0, 25.0)
    val_fraction: float = 0.2
    # truth plant
    truth_tire_model: str = "magic"
    truth_b_front: float = 5.0
    truth_c_front: float = 1.5
    truth_d_front: float = 5.25
    truth_b_rear: float = 5.0
    truth_c_rear: float = 1.5
    truth_d_rear: float = 5.9
    truth_c_m1: float = 40.5
    truth_c_m2: float = 3.05
    truth_c_m3: float = 0.52
    truth_drag2: float = 0.05
    truth_mass: float = 3.02
    truth_inertia: float = 0.052
    truth_l_r: float = 0.17
    truth_l_f: float = 0.16
    truth_substeps: int = 10
    # nominal model parameters
    theta0_m: float = 3.0
    theta0_j_z: float = 0.05
    theta0_l_r: float = 0.17
    theta0_l_f: float = 0.16
    theta0_c_m1: float = 40.0
    theta0_c_m2: float = 3.0
    theta0_c_m3: float = 0.5
    theta0_c_r: float = 40.0
    theta0_c_f: float = 35.0
    # network
    hidden: tuple = (64, 64)
    # training
    horizon: int = 15
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta: float = 1e-4
    epochs: int = 250
    patience: int = 60
    basis_mode: str = "precomputed_theta0"
    normalization_source: str = "measured"
    penalty_scope: str = "full"

    _LIST_INT_FIELDS = ("hidden",)
    _LIST_FLOAT_FIELDS = ("snr_db_list",)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            text = fh.read()
        return cls.from_text(text, origin=str(path))

    @classmethod
    def from_text(cls, text, origin="<config>"):
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{origin}:{lineno}: expected 'key = value'", line=lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ParseError(f"{origin}:{lineno}: unknown config key {key!r}", line=lineno)
            try:
                if key in cls._LIST_INT_FIELDS:
                    setattr(cfg, key, _parse_list_int(value))
                elif key in cls._LIST_FLOAT_FIELDS:
                    setattr(cfg, key, _parse_list_float(value))
                else:
                    setattr(cfg, key, known[key].type(value) if known[key].type is not tuple else value)
            except ValueError as exc:
                raise ParseError(f"{origin}:{lineno}: bad value for {key} ({exc})", line=lineno)
        return cfg

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                lines.append(f"{f.name} = {_fmt_list(value)}")
            elif isinstance(value, float):
                lines.append(f"{f.name} = {value:.17g}")
            else:
                lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def fingerprint(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def truth_config(self):
        return TruthConfig(
            tire_model=self.truth_tire_model,
            b_front=self.truth_b_front,
            c_front=self.truth_c_front,
            d_front=self.truth_d_front,
            b_rear=self.truth_b_rear,
            c_rear=self.truth_c_rear,
            d_rear=self.truth_d_rear,
            c_m1=self.truth_c_m1,
            c_m2=self.truth_c_m2,
            c_m3=self.truth_c_m3,
            drag2=self.truth_drag2,
            mass=self.truth_mass,
            inertia=self.truth_inertia,
            l_r=self.truth_l_r,
            l_f=self.truth_l_f,
            substeps=self.truth_substeps,
            sample_time=self.sample_time,
        )

    def nominal_params(self):
        return SingleTrackParams(
            m=self.theta0_m,
            j_z=self.theta0_j_z,
            l_r=self.theta0_l_r,
            l_f=self.theta0_l_f,
            c_m1=self.theta0_c_m1,
            c_m2=self.theta0_c_m2,
            c_m3=self.theta0_c_m3,
            c_r=self.theta0_c_r,
            c_f=self.theta0_c_f,
        )

    def train_config(self, mode, beta=None, seed=None):
        if mode not in TRAIN_MODES:
            raise InvalidInputError(f"unknown training mode {mode!r}")
        if mode == "coestim-orthreg":
            eff_beta = self.beta if beta is None else beta
        else:
            eff_beta = 0.0
        return TrainConfig(
            horizon=self.horizon,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta=eff_beta,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.seed if seed is None else seed,
            basis_mode=self.basis_mode,
            co_estimate_theta=mode != "fixed-theta0",
            normalization_source=self.normalization_source,
            penalty_scope=self.penalty_scope,
        )


def write_manifest(out_dir, command, cfg, extra=None):
    lines = [
        f"command = {command}",
        f"package_version = {__version__}",
    ]
    for key in sorted(extra or {}):
        lines.append(f"{key} = {extra[key]}")
    body = "\n".join(lines) + "\n# resolved configuration\n" + (cfg.to_text() if cfg else "")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(body)


# ---------------------------------------------------------------------------
# model artifact

_FAMILIES = ("single_track", "scalar_linear")


@dataclass
class ModelArtifact:
    """Serializable snapshot of a fitted model plus provenance."""

    model: AugmentedModel
    family: str
    train_mode: str = "coestim-orthreg"
    beta: float = 0.0
    basis_mode: str = "precomputed_theta0"
    config_fingerprint: str = ""
    history_ref: str = ""
    basis_fingerprint: str = ""
    basis_sigma: tuple = ()
    extra: dict = field(default_factory=dict)

    def save(self, path):
        m = self.model
        fam_lines = []
        if self.family == "scalar_linear":
            fam_lines.append(f"input_gain = {FLOAT_FMT % m.fp.input_gain}")
        lines = [
            "format = orthoaug-model-v1",
            f"family = {self.family}",
            f"train_mode = {self.train_mode}",
            f"beta = {FLOAT_FMT % self.beta}",
            f"basis_mode = {self.basis_mode}",
            f"config_fingerprint = {self.config_fingerprint}",
            f"history_ref = {self.history_ref}",
            f"basis_fingerprint = {self.basis_fingerprint}",
            "basis_sigma = " + ",".join(FLOAT_FMT % v for v in self.basis_sigma),
            f"sample_time = {FLOAT_FMT % m.fp.sample_time}",
            *fam_lines,
            "theta = " + ",".join(FLOAT_FMT % v for v in m.theta),
            "theta0 = " + ",".join(FLOAT_FMT % v for v in m.fp.theta0),
            f"arch_in = {m.arch.n_in}",
            "arch_hidden = " + ",".join(str(h) for h in m.arch.hidden),
            f"arch_out = {m.arch.n_out}",
            "augmented_idx = " + ",".join(str(i) for i in m.augmented_idx),
            "x_scale = " + ",".join(FLOAT_FMT % v for v in m.norm.x_scale),
            "u_scale = " + ",".join(FLOAT_FMT % v for v in m.norm.u_scale),
            "eta = " + ",".join(FLOAT_FMT % v for v in ann.flatten(m.net)),
        ]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ArtifactError(f"cannot read artifact {path}: {exc}") from exc
        kv = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ArtifactError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            kv[key] = value
        try:
            if kv["format"] != "orthoaug-model-v1":
                raise ArtifactError(f"unsupported artifact format {kv.get('format')!r}")
            family = kv["family"]
            if family not in _FAMILIES:
                raise ArtifactError(f"unknown model family {family!r}")
            sample_time = float(kv["sample_time"])
            theta = np.array(_parse_list_float(kv["theta"]))
            theta0 = np.array(_parse_list_float(kv["theta0"]))
            if family == "single_track":
                fp = SingleTrackModel(theta0, sample_time=sample_time)
            else:
                fp = ScalarLinearModel(
                    theta0=theta0[0],
                    input_gain=float(kv.get("input_gain", "1")),
                    sample_time=sample_time,
                )
            arch = ann.MlpArchitecture(
                int(kv["arch_in"]), _parse_list_int(kv["arch_hidden"]), int(kv["arch_out"])
            )
            model = AugmentedModel(
                fp=fp,
                theta=theta,
                arch=arch,
                net=ann.unflatten(arch, np.array(_parse_list_float(kv["eta"]))),
                norm=NormalizationMaps(
                    np.array(_parse_list_float(kv["x_scale"])),
                    np.array(_parse_list_float(kv["u_scale"])),
                ),
                augmented_idx=np.array(_parse_list_int(kv["augmented_idx"])),
            )
            return cls(
                model=model,
                family=family,
                train_mode=kv.get("train_mode", ""),
                beta=float(kv.get("beta", "0")),
                basis_mode=kv.get("basis_mode", ""),
                config_fingerprint=kv.get("config_fingerprint", ""),
                history_ref=kv.get("history_ref", ""),
                basis_fingerprint=kv.get("basis_fingerprint", ""),
                basis_sigma=_parse_list_float(kv.get("basis_sigma", "")),
            )
        except ArtifactError:
            raise
        except (KeyError, ValueError, IndexError, InvalidInputError) as exc:
            raise ArtifactError(f"malformed artifact {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    truth = cfg.truth_config()
    levels = np.linspace(cfg.pwm_min, cfg.pwm_max, cfg.velocity_levels)
    wheelbase = cfg.theta0_l_r + cfg.theta0_l_f
    shape_bands = ((0.08, 0.8), (0.2, 1.4))  # two excitation characters
    excitations, x0s = [], []
    for li, level in enumerate(levels):
        v0 = truth_equilibrium_speed(truth, level)
        # cap the steering so the lateral-acceleration demand stays constant
        # across velocity levels (a tracking controller would do the same)
        steer_amp = min(cfg.steer_amplitude, cfg.lat_accel_demand * wheelbase / v0**2)
        for si, (f_min, f_max) in enumerate(shape_bands):
            exc_seed = cfg.seed * 10000 + li * 10 + si
            excitations.append(
                design_excitation(
                    cfg.segment_samples,
                    cfg.sample_time,
                    pwm_level=level,
                    steer_amplitude=steer_amp,
                    seed=exc_seed,
                    f_min=f_min,
                    f_max=f_max,
                )
            )
            x0s.append(np.array([0.0, 0.0, 0.0, v0, 0.0, 0.0]))
    segments = simulate_truth_batch(truth, np.stack(excitations), np.stack(x0s))

    # alternate velocity levels between the identification and test halves
    train_pool = concat_datasets(segments[0::2], role="train")
    test_set = concat_datasets(segments[1::2], role="test")
    train_set, val_set = split_train_val(
        train_pool,
        fraction=cfg.val_fraction,
        rng=make_rng([cfg.seed, 11]),
        min_window=cfg.horizon,
    )
    val_set.role = "val"

    save_csv(train_set, os.path.join(out_dir, "train.csv"))
    save_csv(val_set, os.path.join(out_dir, "val.csv"))
    save_csv(test_set, os.path.join(out_dir, "test.csv"))
    for snr in cfg.snr_db_list:
        tag = f"snr{snr:g}"
        rng = make_rng([cfg.seed, 77, int(round(snr * 100))])
        save_csv(with_noise(train_set, snr, rng), os.path.join(out_dir, f"train_{tag}.csv"))
        save_csv(with_noise(val_set, snr, rng), os.path.join(out_dir, f"val_{tag}.csv"))
    write_manifest(
        out_dir,
        "generate",
        cfg,
        {
            "n_total": sum(s.n_samples for s in segments),
            "n_train": train_set.n_samples,
            "n_val": val_set.n_samples,
            "n_test": test_set.n_samples,
        },
    )
    return 0


def _data_paths(data_dir, snr):
    if snr in (None, "", "none"):
        return os.path.join(data_dir, "train.csv"), os.path.join(data_dir, "val.csv")
    tag = f"snr{float(snr):g}"
    return (
        os.path.join(data_dir, f"train_{tag}.csv"),
        os.path.join(data_dir, f"val_{tag}.csv"),
    )


def cmd_train(cfg, data_dir, out_dir, mode, beta=None, seed=None, snr=None):
    os.makedirs(out_dir, exist_ok=True)
    train_path, val_path = _data_paths(data_dir, snr)
    train_data = load_csv(train_path)
    val_data = load_csv(val_path)
    fp = SingleTrackModel(cfg.nominal_params(), sample_time=cfg.sample_time)
    arch = ann.MlpArchitecture(fp.n_x + fp.n_u, cfg.hidden, 3)
    tc = cfg.train_config(mode, beta=beta, seed=seed)
    model, history = train(tc, train_data, val_data, fp, arch, np.array([3, 4, 5]))

    history_name = "history.csv"
    history.to_csv(os.path.join(out_dir, history_name), theta_names=list(fp.theta_names))
    artifact = ModelArtifact(
        model=model,
        family="single_track",
        train_mode=mode,
        beta=tc.beta,
        basis_mode=tc.basis_mode,
        config_fingerprint=cfg.fingerprint(),
        history_ref=history_name,
    )
    if tc.beta > 0.0 and tc.basis_mode == "precomputed_theta0":
        basis = refresh_basis(model, train_data, "precomputed_theta0", {})
        artifact.basis_fingerprint = basis.fingerprint
        artifact.basis_sigma = tuple(basis.sigma)
    artifact.save(os.path.join(out_dir, "model.txt"))
    write_manifest(
        out_dir,
        "train",
        cfg,
        {
            "mode": mode,
            "data_dir": data_dir,
            "snr": snr if snr else "none",
            "effective_beta": f"{tc.beta:.17g}",
            "effective_seed": tc.seed,
            "best_epoch": history.best_epoch,
            "aborted": int(history.aborted),
        },
    )
    return 0


def cmd_eval(artifact_path, data_dir, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    artifact = ModelArtifact.load(artifact_path)
    test = load_csv(os.path.join(data_dir, "test.csv"))
    model = artifact.model
    if test.n_u != model.fp.n_u or test.n_y != model.fp.n_x:
        raise ArtifactError(
            f"artifact expects {model.fp.n_u} inputs / {model.fp.n_x} outputs, "
            f"test data has {test.n_u} / {test.n_y}"
        )
    report_aug = nrms(model, test)
    report_fp = nrms(fp_only(model), test)
    with open(os.path.join(out_dir, "eval_augmented.txt"), "w") as fh:
        fh.write(report_aug.to_text())
    with open(os.path.join(out_dir, "eval_fp_only.txt"), "w") as fh:
        fh.write(report_fp.to_text())
    write_manifest(
        out_dir,
        "eval",
        None,
        {
            "artifact": artifact_path,
            "data_dir": data_dir,
            "mean_nrms_augmented": f"{report_aug.mean:.17g}",
            "mean_nrms_fp_only": f"{report_fp.mean:.17g}",
        },
    )
    return 0


def cmd_sweep_beta(cfg, data_dir, out_dir, betas, seed=None, snr=None):
    if len(betas) < 1:
        raise InvalidInputError("sweep needs at least one beta value")
    os.makedirs(out_dir, exist_ok=True)
    rows = ["beta,mean_nrms_augmented,mean_nrms_fp_only,aborted,error"]
    for beta in betas:
        run_dir = os.path.join(out_dir, f"beta_{beta:g}")
        mode = "coestim-orthreg" if beta > 0 else "coestim-noreg"
        try:
            cmd_train(cfg, data_dir, run_dir, mode, beta=beta, seed=seed, snr=snr)
            artifact = ModelArtifact.load(os.path.join(run_dir, "model.txt"))
            test = load_csv(os.path.join(data_dir, "test.csv"))
            r_aug = nrms(artifact.model, test)
            r_fp = nrms(fp_only(artifact.model), test)
            rows.append(
                f"{beta:.17g},{r_aug.mean:.17g},{r_fp.mean:.17g},0,"
            )
        except (OrthoaugError, OSError) as exc:
            rows.append(f"{beta:.17g},nan,nan,1,{type(exc).__name__}: {exc}")
    with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    write_manifest(
        out_dir,
        "sweep-beta",
        cfg,
        {"data_dir": data_dir, "betas": _fmt_list(betas), "snr": snr if snr else "none"},
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="orthoaug",
        description="Identify physics models augmented with neural networks.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="simulate the truth plant and write datasets")
    p_gen.add_argument("--config", help="experiment config file")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--seed", type=int, help="override the config seed")

    p_train = sub.add_parser("train", help="fit an augmented model")
    p_train.add_argument("--config", help="experiment config file")
    p_train.add_argument("--data", required=True, help="directory from `generate`")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--mode", choices=TRAIN_MODES, default="coestim-orthreg")
    p_train.add_argument("--beta", type=float, help="override the penalty coefficient")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--snr", help="train on the noisy variant (e.g. 30), or 'none'")

    p_eval = sub.add_parser("eval", help="write NRMS reports for an artifact")
    p_eval.add_argument("--artifact", required=True, help="model.txt from `train`")
    p_eval.add_argument("--data", required=True, help="directory containing test.csv")
    p_eval.add_argument("--out", required=True, help="output directory")

    p_sweep = sub.add_parser("sweep-beta", help="train/evaluate across beta values")
    p_sweep.add_argument("--config", help="experiment config file")
    p_sweep.add_argument("--data", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--beta", required=True, help="comma-separated beta list")
    p_sweep.add_argument("--seed", type=int, help="override the config seed")
    p_sweep.add_argument("--snr", help="train on the noisy variant")
    return parser


def _load_config(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(_load_config(args), args.out)
        if args.command == "train":
            return cmd_train(
                _load_config(args),
                args.data,
                args.out,
                args.mode,
                beta=args.beta,
                seed=args.seed,
                snr=args.snr,
            )
        if args.command == "eval":
            return cmd_eval(args.artifact, args.data, args.out)
        if args.command == "sweep-beta":
            return cmd_sweep_beta(
                _load_config(args),
                args.data,
                args.out,
                list(_parse_list_float(args.beta)),
                seed=args.seed,
                snr=args.snr,
            )
        raise InvalidInputError(f"unknown command {args.command!r}")
    except (ParseError, InvalidInputError) as exc:
        print(f"error (config/usage): {exc}", file=sys.stderr)
        return 2
    except (InsufficientDataError, DegenerateChannelError, OSError) as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return 3
    except (SimulationDivergedError, NumericalError) as exc:
        print(f"error (numerics): {exc}", file=sys.stderr)
        return 4
    except ArtifactError as exc:
        print(f"error (artifact): {exc}", file=sys.stderr)
        return 5
    except OrthoaugError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
