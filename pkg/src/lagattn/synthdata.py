"""Deterministic synthetic multivariate series with planted lagged couplings.

Base features are AR(1) processes (coefficient 0.8) plus a sinusoid of
random frequency and phase, standardized per feature. A planted coupling
(i -> j, lag L, weight w) blends the circularly delayed source into the
target: w * roll(base_i, L) + sqrt(1 - w^2) * base_j, so unit weight at
zero noise makes the target an exact shifted copy. The circular delay is a
deliberate idealization matching the roll semantics of the scoring path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import ParameterError


class DatasetSpecError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


@dataclass
class SeriesSample:
    values: np.ndarray                 # T x d
    mask: np.ndarray | None = None     # T x d of {0,1}; 1 = observed
    label: int | None = None
    anomaly_flags: np.ndarray | None = None   # length T of {0,1}
    planted_lags: list = field(default_factory=list)  # (src, dst, lag, weight)

    def __eq__(self, other):
        if not isinstance(other, SeriesSample):
            return NotImplemented
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(np.asarray(a), np.asarray(b))
        return (eq(self.values, other.values) and eq(self.mask, other.mask)
                and self.label == other.label
                and eq(self.anomaly_flags, other.anomaly_flags)
                and [tuple(p) for p in self.planted_lags]
                == [tuple(p) for p in other.planted_lags])


@dataclass
class DatasetSpec:
    task: str = "imputation"
    t: int = 96
    d: int = 8
    n_samples: int = 32
    mask_ratio: float = 0.25
    planted_lags: list = field(default_factory=list)  # (src, dst, lag, weight)
    noise: float = 0.0
    seed: int = 0
    splits: tuple = (0.6, 0.2, 0.2)
    n_classes: int = 2
    ar_coef: float = 0.8
    sin_amp: float = 0.5

    def validate(self):
        if abs(sum(self.splits) - 1.0) > 1e-12:
            raise DatasetSpecError(f"split ratios {self.splits} must sum to 1")
        for src, dst, lag, w in self.planted_lags:
            if not 1 <= lag <= self.t - 1:
                raise DatasetSpecError(f"planted lag {lag} outside [1, {self.t - 1}]")
            if not (0 <= src < self.d and 0 <= dst < self.d):
                raise DatasetSpecError(f"planted features ({src}, {dst}) outside "
                                       f"[0, {self.d})")


def _base_feature(rng, t: int, ar_coef: float, sin_amp: float) -> np.ndarray:
    e = rng.normal(size=t)
    x = np.empty(t)
    x[0] = e[0]
    for i in range(1, t):
        x[i] = ar_coef * x[i - 1] + e[i]
    freq = rng.integers(1, max(t // 4, 2))
    phase = rng.uniform(0.0, 2.0 * math.pi)
    x = x + sin_amp * math.sqrt(t) * np.sin(2.0 * math.pi * freq *
                                            np.arange(t) / t + phase) / math.sqrt(t)
    x = x - x.mean()
    return x / max(x.std(), 1e-12)


def gen_lagged_series(spec: DatasetSpec) -> list:
    """Pure function of the spec: same spec (incl. seed) -> identical samples.

    For classification, the sample's class index shifts every planted lag by
    the class index (wrapped into [1, T-1]) so classes differ only in lag
    structure.
    """
    spec.validate()
    samples = []
    for idx in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, idx])
        base = np.stack([_base_feature(rng, spec.t, spec.ar_coef, spec.sin_amp)
                         for _ in range(spec.d)], axis=1)
        label = None
        lags = [tuple(p) for p in spec.planted_lags]
        if spec.task == "classification":
            label = int(rng.integers(spec.n_classes))
            lags = [(s, djj, 1 + (lag - 1 + label) % (spec.t - 1), w)
                    for (s, djj, lag, w) in lags]
        values = base.copy()
        for src, dst, lag, w in lags:
            coupled = (w * np.roll(base[:, src], lag)
                       + math.sqrt(max(0.0, 1.0 - w * w)) * base[:, dst])
            values[:, dst] = coupled
        if spec.noise > 0:
            values = values + spec.noise * rng.normal(size=values.shape)
        samples.append(SeriesSample(values=values, label=label,
                                    planted_lags=lags))
    return samples


def apply_mask(sample: SeriesSample, ratio: float, seed: int) -> SeriesSample:
    """Hide exactly round(ratio * T * d) uniformly random entries."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"mask ratio {ratio} outside (0, 1)")
    values = sample.values
    n_total = values.size
    n_masked = int(round(ratio * n_total))
    rng = np.random.default_rng(seed)
    flat = rng.choice(n_total, size=n_masked, replace=False)
    mask = np.ones(n_total, dtype=np.int64)
    mask[flat] = 0
    return replace(sample, mask=mask.reshape(values.shape))


def inject_anomalies(sample: SeriesSample, count: int, magnitude: float,
                     seed: int) -> SeriesSample:
    """Additive spikes of magnitude * sigma at ``count`` random time steps."""
    t, d = sample.values.shape
    if count >= t:
        raise ParameterError(f"count {count} must be < T {t}")
    flags = np.zeros(t, dtype=np.int64)
    values = sample.values.copy()
    if count > 0:
        rng = np.random.default_rng(seed)
        steps = rng.choice(t, size=count, replace=False)
        sigma = values.std(axis=0)
        for step in steps:
            j = int(rng.integers(d))
            values[step, j] += magnitude * max(sigma[j], 1e-12) * \
                (1.0 if rng.random() < 0.5 else -1.0)
        flags[steps] = 1
    return replace(sample, values=values, anomaly_flags=flags)


def split_dataset(samples: list, splits=(0.6, 0.2, 0.2)) -> tuple:
    n = len(samples)
    n_train = int(round(splits[0] * n))
    n_val = int(round(splits[1] * n))
    return samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:]


def to_training_sample(sample: SeriesSample, task: str):
    """(input, target, mask, label) tuple as consumed by the model layer."""
    if task == "imputation":
        if sample.mask is None:
            raise DegenerateMaskError("imputation sample has no mask")
        x_in = sample.values * sample.mask
        return (x_in, sample.values, sample.mask, None)
    if task == "anomaly":
        return (sample.values, sample.values, None, sample.anomaly_flags)
    return (sample.values, None, None, sample.label)


class DegenerateMaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# file format: textual, diff-able, lossless (repr round-trips float64)

DATASET_TAG = "lagattn-dataset v1"


def _fmt_row(row) -> str:
    return ",".join(repr(float(v)) for v in row)


def write_dataset(path, samples: list, task: str = "imputation") -> None:
    with open(path, "w") as fh:
        fh.write(DATASET_TAG + "\n")
        if samples:
            t, d = samples[0].values.shape
        else:
            t, d = 0, 0
        fh.write(f"T {t} d {d} task {task} samples {len(samples)}\n")
        for i, s in enumerate(samples):
            label = "-" if s.label is None else str(int(s.label))
            fh.write(f"sample {i} mask {int(s.mask is not None)} label {label} "
                     f"flags {int(s.anomaly_flags is not None)} "
                     f"planted {len(s.planted_lags)}\n")
            for src, dst, lag, w in s.planted_lags:
                fh.write(f"{int(src)} {int(dst)} {int(lag)} {repr(float(w))}\n")
            for row in s.values:
                fh.write(_fmt_row(row) + "\n")
            if s.mask is not None:
                for row in s.mask:
                    fh.write(",".join(str(int(v)) for v in row) + "\n")
            if s.anomaly_flags is not None:
                fh.write(",".join(str(int(v)) for v in s.anomaly_flags) + "\n")


def read_dataset(path) -> tuple:
    """Returns (samples, task). Raises DatasetParseError with the offending
    line number on malformed input."""
    with open(path) as fh:
        lines = fh.read().splitlines()

    def fail(lineno, msg):
        raise DatasetParseError(f"{path}:{lineno + 1}: {msg}")

    if not lines or lines[0] != DATASET_TAG:
        fail(0, f"bad or missing format tag (expected {DATASET_TAG!r})")
    header = lines[1].split() if len(lines) > 1 else []
    if len(header) != 8 or header[0] != "T" or header[2] != "d" \
            or header[4] != "task" or header[6] != "samples":
        fail(1, "malformed header: expected 'T <t> d <d> task <task> samples <n>'")
    try:
        t, d, n = int(header[1]), int(header[3]), int(header[7])
    except ValueError:
        fail(1, "header fields T/d/samples must be integers")
    task = header[5]

    samples = []
    ln = 2
    for i in range(n):
        if ln >= len(lines):
            fail(len(lines) - 1, f"unexpected end of file before sample {i}")
        head = lines[ln].split()
        if len(head) != 10 or head[0] != "sample":
            fail(ln, "malformed sample header")
        has_mask, label_s, has_flags, n_planted = head[3], head[5], head[7], head[9]
        try:
            has_mask = bool(int(has_mask))
            has_flags = bool(int(has_flags))
            n_planted = int(n_planted)
        except ValueError:
            fail(ln, "sample header flags must be integers")
        label = None if label_s == "-" else int(label_s)
        ln += 1
        planted = []
        for _ in range(n_planted):
            parts = lines[ln].split()
            if len(parts) != 4:
                fail(ln, "planted lag record needs 'src dst lag weight'")
            planted.append((int(parts[0]), int(parts[1]), int(parts[2]),
                            float(parts[3])))
            ln += 1

        def read_block(rows, cast, what):
            nonlocal ln
            block = []
            for _ in range(rows):
                if ln >= len(lines):
                    fail(len(lines) - 1, f"unexpected end of file in {what}")
                try:
                    row = [cast(v) for v in lines[ln].split(",")]
                except ValueError:
                    fail(ln, f"non-numeric value in {what}")
                if len(row) != d:
                    fail(ln, f"{what} row has {len(row)} values, expected {d}")
                block.append(row)
                ln += 1
            return np.array(block)

        values = read_block(t, float, "values")
        mask = read_block(t, int, "mask") if has_mask else None
        flags = None
        if has_flags:
            try:
                flags = np.array([int(v) for v in lines[ln].split(",")])
            except (ValueError, IndexError):
                fail(ln, "malformed anomaly flags")
            if flags.size != t:
                fail(ln, f"anomaly flags have {flags.size} entries, expected {t}")
            ln += 1
        samples.append(SeriesSample(values=values, mask=mask, label=label,
                                    anomaly_flags=flags, planted_lags=planted))
    return samples, task
