"""Dataset container, CSV persistence, noise injection, splitting, NRMS.

A Dataset is a set of concatenated trajectory segments sampled at a fixed
rate. Outputs are full state measurements here (n_y == n_x), optionally with
the noise-free states kept alongside for reference. Files are written as a
CSV plus a small key-value sidecar carrying the segment boundaries and
metadata, so everything round-trips losslessly.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateChannelError,
    InsufficientDataError,
    InvalidInputError,
    ParseError,
    SimulationDivergedError,
)

FLOAT_FMT = "%.17g"  # round-trips float64 exactly


@dataclass
class Dataset:
    sample_time: float
    u: np.ndarray                 # (N, n_u) inputs
    y: np.ndarray                 # (N, n_y) measured outputs
    x: np.ndarray = None          # (N, n_x) noise-free states, when known
    segments: list = None         # half-open (start, end) index ranges
    role: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.x is not None:
            self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        n = self.y.shape[0]
        if self.u.shape[0] != n or (self.x is not None and self.x.shape[0] != n):
            raise InvalidInputError("u, y and x must have the same number of samples")
        if self.sample_time <= 0:
            raise InvalidInputError("sample_time must be positive")
        if self.segments is None:
            self.segments = [(0, n)] if n else []
        self.segments = [(int(a), int(b)) for a, b in self.segments]
        prev = 0
        for a, b in self.segments:
            if not (0 <= a < b <= n) or a < prev:
                raise InvalidInputError(f"bad segment ({a}, {b}) for N={n}")
            prev = b

    @property
    def n_samples(self):
        return self.y.shape[0]

    @property
    def n_u(self):
        return self.u.shape[1]

    @property
    def n_y(self):
        return self.y.shape[1]

    def admissible_starts(self, window):
        """Global indices k such that samples k..k+window-1 lie in one segment."""
        if window < 1:
            raise InvalidInputError("window must be >= 1")
        starts = []
        for a, b in self.segments:
            starts.extend(range(a, b - window + 1))
        return np.asarray(starts, dtype=int)

    def segment_slices(self):
        return [slice(a, b) for a, b in self.segments]

    def copy(self):
        return Dataset(
            sample_time=self.sample_time,
            u=self.u.copy(),
            y=self.y.copy(),
            x=None if self.x is None else self.x.copy(),
            segments=list(self.segments),
            role=self.role,
            meta=dict(self.meta),
        )


def concat_datasets(parts, role="train"):
    """Stack datasets end to end, keeping each one's segments separate."""
    if not parts:
        raise InsufficientDataError("nothing to concatenate")
    dt = parts[0].sample_time
    if any(abs(p.sample_time - dt) > 0 for p in parts):
        raise InvalidInputError("sample times differ between parts")
    has_x = all(p.x is not None for p in parts)
    segs, offset = [], 0
    for p in parts:
        segs.extend((a + offset, b + offset) for a, b in p.segments)
        offset += p.n_samples
    return Dataset(
        sample_time=dt,
        u=np.vstack([p.u for p in parts]),
        y=np.vstack([p.y for p in parts]),
        x=np.vstack([p.x for p in parts]) if has_x else None,
        segments=segs,
        role=role,
    )


# ---------------------------------------------------------------------------
# persistence

def _sidecar_path(path):
    base, _ = os.path.splitext(str(path))
    return base + ".meta"


def save_csv(dataset, path):
    """Write the samples as CSV plus a key-value sidecar (<stem>.meta)."""
    path = str(path)
    n = dataset.n_samples
    cols = [np.arange(n) * dataset.sample_time, *dataset.u.T, *dataset.y.T]
    header = ["t"] + [f"u_{i + 1}" for i in range(dataset.n_u)] + [
        f"y_{i + 1}" for i in range(dataset.n_y)
    ]
    if dataset.x is not None:
        cols.extend(dataset.x.T)
        header.extend(f"x_{i + 1}" for i in range(dataset.x.shape[1]))
    lines = [",".join(header)]
    table = np.column_stack(cols)
    for row in table:
        lines.append(",".join(FLOAT_FMT % v for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    meta_lines = [
        f"sample_time = {FLOAT_FMT % dataset.sample_time}",
        f"role = {dataset.role}",
        f"n_u = {dataset.n_u}",
        f"n_y = {dataset.n_y}",
        f"has_states = {int(dataset.x is not None)}",
        "segments = " + ",".join(f"{a}:{b}" for a, b in dataset.segments),
    ]
    for key in sorted(dataset.meta):
        meta_lines.append(f"meta.{key} = {dataset.meta[key]}")
    with open(_sidecar_path(path), "w") as fh:
        fh.write("\n".join(meta_lines) + "\n")


def _parse_kv_lines(text, path):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = value'", line=lineno)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_csv(path):
    path = str(path)
    meta_path = _sidecar_path(path)
    if not os.path.exists(meta_path):
        raise ParseError(f"missing sidecar metadata file {meta_path}")
    with open(meta_path) as fh:
        kv = _parse_kv_lines(fh.read(), meta_path)
    try:
        dt = float(kv["sample_time"])
        n_u = int(kv["n_u"])
        n_y = int(kv["n_y"])
        has_states = bool(int(kv["has_states"]))
        role = kv["role"]
        segments = []
        if kv["segments"]:
            for part in kv["segments"].split(","):
                a, b = part.split(":")
                segments.append((int(a), int(b)))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{meta_path}: bad or missing key ({exc})") from exc
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}

    with open(path) as fh:
        header_line = fh.readline().rstrip("\n")
        expected = ["t"] + [f"u_{i + 1}" for i in range(n_u)] + [
            f"y_{i + 1}" for i in range(n_y)
        ]
        if has_states:
            # state count equals remaining columns; validated below
            pass
        names = header_line.split(",")
        if names[: len(expected)] != expected:
            missing = [c for c in expected if c not in names]
            raise ParseError(
                f"{path}:1: header mismatch, missing columns {missing or expected}", line=1
            )
        n_cols = len(names)
        try:
            table = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError:
            # slow path: locate the offending line for the error message
            fh.seek(0)
            fh.readline()
            for lineno, raw in enumerate(fh, start=2):
                fields = raw.rstrip("\n").split(",")
                if len(fields) != n_cols:
                    raise ParseError(
                        f"{path}:{lineno}: expected {n_cols} fields, got {len(fields)}",
                        line=lineno,
                    )
                try:
                    [float(v) for v in fields]
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: non-numeric field", line=lineno)
            raise ParseError(f"{path}: malformed CSV body")
    if table.shape[1] != n_cols:
        raise ParseError(f"{path}: ragged rows")
    u = table[:, 1 : 1 + n_u]
    y = table[:, 1 + n_u : 1 + n_u + n_y]
    x = None
    if has_states:
        x = table[:, 1 + n_u + n_y :]
        if x.shape[1] == 0:
            raise ParseError(f"{path}: sidecar promises states but CSV has none")
    return Dataset(
        sample_time=dt, u=u, y=y, x=x, segments=segments, role=role, meta=meta
    )


# ---------------------------------------------------------------------------
# noise injection

def add_noise_snr(y, snr_db, rng):
    """Add i.i.d. zero-mean Gaussian noise per channel at a target SNR.

    The noise variance is set from the sample mean signal power of each
    channel: var = mean(y_ch^2) / 10^(snr_db/10). For the record lengths used
    here the realized SNR then lands well inside +-0.5 dB of the target.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if not np.isfinite(snr_db):
        raise InvalidInputError("snr_db must be finite")
    power = np.mean(y * y, axis=0)
    if np.any(power <= 0.0):
        ch = int(np.argmin(power))
        raise DegenerateChannelError(f"channel {ch} has zero power", channel=ch)
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return y + rng.normal(0.0, 1.0, size=y.shape) * sigma


def with_noise(dataset, snr_db, rng):
    """Copy of the dataset with noisy outputs; inputs and states untouched."""
    if dataset.role == "test":
        raise InvalidInputError("test data is kept noise-free")
    out = dataset.copy()
    out.y = add_noise_snr(dataset.y, snr_db, rng)
    out.meta["snr_db"] = f"{snr_db:g}"
    return out


# ---------------------------------------------------------------------------
# train/validation split

def split_train_val(dataset, fraction=0.2, rng=None, min_window=15):
    """Cut one contiguous validation window out of every segment.

    The window length is about `fraction` of the segment (never shorter than
    min_window), its position is uniform random, and the leftover pieces stay
    in the training set as separate segments. Index bookkeeping is recorded in
    meta["source_ranges"] for both halves.
    """
    if not 0.0 <= fraction < 1.0:
        raise InvalidInputError("fraction must be in [0, 1)")
    if fraction == 0.0:
        train = dataset.copy()
        train.role = "train"
        train.meta["source_ranges"] = ",".join(f"{a}:{b}" for a, b in dataset.segments)
        empty = Dataset(
            sample_time=dataset.sample_time,
            u=np.zeros((0, dataset.n_u)),
            y=np.zeros((0, dataset.n_y)),
            x=None,
            segments=[],
            role="val",
            meta={"source_ranges": ""},
        )
        return train, empty
    if rng is None:
        raise InvalidInputError("rng is required for a nonzero split fraction")

    train_ranges, val_ranges = [], []
    for idx, (a, b) in enumerate(dataset.segments):
        length = b - a
        w = max(min_window, int(round(fraction * length)))
        if length - w < min_window:
            raise InsufficientDataError(
                f"segment {idx} (length {length}) too short to donate a "
                f"validation window of {w} with min_window={min_window}"
            )
        s = a + int(rng.integers(0, length - w + 1))
        val_ranges.append((s, s + w))
        if s > a:
            train_ranges.append((a, s))
        if s + w < b:
            train_ranges.append((s + w, b))

    def gather(ranges, role):
        if ranges:
            u = np.vstack([dataset.u[a:b] for a, b in ranges])
            y = np.vstack([dataset.y[a:b] for a, b in ranges])
            x = (
                np.vstack([dataset.x[a:b] for a, b in ranges])
                if dataset.x is not None
                else None
            )
        else:
            u = np.zeros((0, dataset.n_u))
            y = np.zeros((0, dataset.n_y))
            x = None
        segs, pos = [], 0
        for a, b in ranges:
            segs.append((pos, pos + (b - a)))
            pos += b - a
        meta = dict(dataset.meta)
        meta["source_ranges"] = ",".join(f"{a}:{b}" for a, b in ranges)
        return Dataset(
            sample_time=dataset.sample_time,
            u=u,
            y=y,
            x=x,
            segments=segs,
            role=role,
            meta=meta,
        )

    return gather(train_ranges, "train"), gather(val_ranges, "val")


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class NrmsReport:
    per_channel: np.ndarray     # percent, length n_y
    mean: float                 # percent
    horizon: str = "free-run"
    diverged: bool = False

    def to_text(self):
        lines = [
            f"horizon = {self.horizon}",
            f"diverged = {int(self.diverged)}",
            f"mean_nrms_percent = {FLOAT_FMT % self.mean}",
        ]
        for i, v in enumerate(self.per_channel):
            lines.append(f"nrms_percent_y{i + 1} = {FLOAT_FMT % v}")
        lines.append("normalizer = per-channel population std of the true test output")
        return "\n".join(lines) + "\n"


def nrms(model, test):
    """Free-run NRMS of a model against a (noise-free) test dataset.

    Every segment is simulated open loop from its first measured sample using
    the recorded inputs; per-channel errors are normalized by the channel's
    std within the segment and aggregated across segments weighted by length.
    A diverging simulation marks the report as diverged with infinite error.
    """
    if test.n_samples == 0:
        raise InsufficientDataError("empty test set")
    n_y = test.n_y
    acc = np.zeros(n_y)
    total = 0
    diverged = False
    for a, b in test.segments:
        y = test.y[a:b]
        u = test.u[a:b]
        length = b - a
        try:
            states = model.free_run(y[0], u)
        except SimulationDivergedError:
            diverged = True
            acc[:] = np.inf
            total += length
            continue
        err = states - y
        std = y.std(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            seg_nrms = np.sqrt(np.mean(err * err, axis=0)) / std
        seg_nrms = np.where(std > 0.0, seg_nrms, np.inf)
        acc += length * seg_nrms
        total += length
    per_channel = 100.0 * acc / total
    return NrmsReport(
        per_channel=per_channel,
        mean=float(np.mean(per_channel)),
        diverged=diverged or not np.all(np.isfinite(per_channel)),
    )
