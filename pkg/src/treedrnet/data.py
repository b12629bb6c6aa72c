"""Dataset loading, chronological splitting, scaling and window construction.

Channels are modelled independently: :func:`make_windows` cuts univariate
(lookback, horizon) pairs out of every column and pools them into one
:class:`WindowSet`.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Input data is missing, malformed or too short."""


@dataclass
class TimeSeriesDataset:
    name: str
    values: np.ndarray  # (len, dim)
    feature_names: list
    timestamps: list = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"{self.name}: values must be a non-empty (len, dim) matrix")
        if len(self.feature_names) != self.values.shape[1]:
            raise DataError(f"{self.name}: {len(self.feature_names)} names for {self.values.shape[1]} features")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.name}: values contain NaN or Inf")

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def slice(self, start, stop, suffix=""):
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return TimeSeriesDataset(self.name + suffix, self.values[start:stop], list(self.feature_names), ts,
                                 dict(self.meta))


def load_csv(path, date_column=None):
    """Read a header-first CSV; every non-date column must be numeric."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        if date_column is not None and date_column not in header:
            raise DataError(f"{path}: date column {date_column!r} not in header")
        date_idx = header.index(date_column) if date_column is not None else None
        feat_idx = [k for k in range(len(header)) if k != date_idx]
        if not feat_idx:
            raise DataError(f"{path}: no numeric columns")
        rows, stamps = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line_no} has {len(row)} fields, header has {len(header)}")
            try:
                rows.append([float(row[k]) for k in feat_idx])
            except ValueError:
                bad = next(k for k in feat_idx if not _is_float(row[k]))
                raise DataError(f"{path}: line {line_no}, column {header[bad]!r}: "
                                f"non-numeric value {row[bad]!r}") from None
            if date_idx is not None:
                stamps.append(row[date_idx])
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        line = int(np.argwhere(~np.isfinite(values))[0, 0]) + 2
        raise DataError(f"{path}: line {line} has a missing or non-finite value")
    name = str(path).replace("\\", "/").rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return TimeSeriesDataset(name, values, [header[k] for k in feat_idx], stamps if date_idx is not None else None)


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise DataError(f"split fractions must be non-negative and sum to 1, got {fracs}")

    def boundaries(self, n):
        """``(train_end, val_end)``; the remainder after flooring goes to test."""
        n_train = int(math.floor(self.train_frac * n + 1e-9))
        n_val = int(math.floor(self.val_frac * n + 1e-9))
        return n_train, n_train + n_val


def chrono_split(ds, spec=SplitSpec(), min_len=10):
    if len(ds) < min_len:
        raise DataError(f"{ds.name}: series of length {len(ds)} is too short to split (need >= {min_len})")
    a, b = spec.boundaries(len(ds))
    return ds.slice(0, a, ":train"), ds.slice(a, b, ":val"), ds.slice(b, len(ds), ":test")


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # columns whose std was forced to 1

    @classmethod
    def fit(cls, values):
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        constant = ~(std > 0.0)
        std = np.where(constant, 1.0, std)
        return cls(mean, std, constant)

    def transform(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, values, channels=None):
        """Undo scaling; ``channels`` maps rows of a window matrix to feature indices."""
        values = np.asarray(values, dtype=np.float64)
        if channels is None:
            return values * self.std + self.mean
        ch = np.asarray(channels)
        return values * self.std[ch][:, None] + self.mean[ch][:, None]


def fit_apply_scaler(train, *others):
    """Fit per-feature standardization on ``train`` and apply it to every dataset."""
    if len(train) == 0:
        raise DataError("cannot fit a scaler on an empty training split")
    scaler = Scaler.fit(train.values)
    out = []
    for ds in (train,) + others:
        scaled = ds.slice(0, len(ds))
        scaled.values = scaler.transform(ds.values)
        out.append(scaled)
    return out, scaler


@dataclass(frozen=True)
class WindowSample:
    channel: int
    input: np.ndarray
    target: np.ndarray
    origin: int
    covariates: np.ndarray = None


@dataclass
class WindowSet:
    """Pooled windows stored as stacked arrays; indexing yields :class:`WindowSample`."""

    inputs: np.ndarray  # (N, input_len)
    targets: np.ndarray  # (N, output_len)
    channels: np.ndarray  # (N,)
    origins: np.ndarray  # (N,) start index of the input within the source series
    covariates: np.ndarray = None  # (N, input_len, d) or None

    def __len__(self):
        return self.inputs.shape[0]

    def __getitem__(self, k):
        cov = None if self.covariates is None else self.covariates[k]
        return WindowSample(int(self.channels[k]), self.inputs[k], self.targets[k], int(self.origins[k]), cov)

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def take(self, index):
        cov = None if self.covariates is None else self.covariates[index]
        return WindowSet(self.inputs[index], self.targets[index], self.channels[index], self.origins[index], cov)


def _windows_1d(series, input_len, output_len, stride, origin_offset=0):
    total = input_len + output_len
    view = np.lib.stride_tricks.sliding_window_view(series, total)[::stride]
    starts = np.arange(0, len(series) - total + 1, stride) + origin_offset
    return view[:, :input_len], view[:, input_len:], starts


def make_windows(ds, input_len, output_len, stride=1, channels=None):
    """Every contiguous (input, target) pair of every channel, pooled channel-major."""
    if input_len < 1 or output_len < 1 or stride < 1:
        raise DataError("input_len, output_len and stride must be >= 1")
    need = input_len + output_len
    if len(ds) < need:
        raise DataError(f"{ds.name}: length {len(ds)} < input_len + output_len = {need}")
    chans = range(ds.dim) if channels is None else channels
    ins, tgs, chs, ors = [], [], [], []
    for c in chans:
        x, y, starts = _windows_1d(ds.values[:, c], input_len, output_len, stride)
        ins.append(x)
        tgs.append(y)
        chs.append(np.full(len(starts), c))
        ors.append(starts)
    return WindowSet(np.concatenate(ins).copy(), np.concatenate(tgs).copy(),
                     np.concatenate(chs), np.concatenate(ors))


def make_covariate_windows(ds, target, input_len, output_len, stride=1):
    """Windows of one target column with the remaining columns as covariates."""
    need = input_len + output_len
    if len(ds) < need:
        raise DataError(f"{ds.name}: length {len(ds)} < input_len + output_len = {need}")
    t = ds.feature_names.index(target) if isinstance(target, str) else int(target)
    x, y, starts = _windows_1d(ds.values[:, t], input_len, output_len, stride)
    others = [k for k in range(ds.dim) if k != t]
    if not others:
        raise DataError(f"{ds.name}: no covariate columns besides the target")
    cov = np.stack([ds.values[s:s + input_len][:, others] for s in starts])
    return WindowSet(x.copy(), y.copy(), np.full(len(starts), t), starts, cov)


def make_context_windows(values, input_len, output_len, target_start, target_end=None):
    """Windows whose *targets* start in ``[target_start, target_end - output_len]``.

    Inputs may reach back before ``target_start`` (history, never targets), so
    windows for different ``input_len`` share an identical target span.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    target_end = n if target_end is None else target_end
    if target_start < input_len:
        raise DataError(f"need {input_len} history steps before index {target_start}")
    if target_end - target_start < output_len:
        raise DataError(f"target span [{target_start}, {target_end}) shorter than output_len {output_len}")
    ins, tgs, chs, ors = [], [], [], []
    for c in range(values.shape[1]):
        series = values[target_start - input_len:target_end, c]
        x, y, starts = _windows_1d(series, input_len, output_len, 1, origin_offset=target_start - input_len)
        ins.append(x)
        tgs.append(y)
        chs.append(np.full(len(starts), c))
        ors.append(starts)
    return WindowSet(np.concatenate(ins).copy(), np.concatenate(tgs).copy(),
                     np.concatenate(chs), np.concatenate(ors))


SEASONAL_PERIODS = (24, 12)  # fundamental period 24; harmonics keep it exact
SYNTH_KINDS = ("seasonal", "trend_seasonal", "random_walk")


def synth_dataset(kind, length, dim=1, noise_std=0.1, seed=0):
    """Deterministic synthetic series for desk-scale experiments.

    ``seasonal``: per channel, a sum of sinusoids with periods 24 and 12 and
    random amplitudes/phases; the noiseless series satisfies
    ``x[t] == x[t + 24]`` exactly. ``trend_seasonal`` adds a linear trend.
    ``random_walk`` is the cumulative sum of a seeded N(0, noise_std^2) stream.
    """
    if length < 1 or dim < 1:
        raise DataError("length and dim must be >= 1")
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    period = SEASONAL_PERIODS[0]
    meta = {"kind": kind, "seed": seed, "noise_std": noise_std}
    if kind == "random_walk":
        values = np.cumsum(rng.normal(0.0, noise_std, size=(length, dim)), axis=0)
    else:
        amps = rng.uniform(0.5, 1.5, size=(len(SEASONAL_PERIODS), dim))
        phases = rng.uniform(0.0, 2 * np.pi, size=(len(SEASONAL_PERIODS), dim))
        values = np.zeros((length, dim))
        for k, p in enumerate(SEASONAL_PERIODS):
            # phase taken modulo the period so equal phases give bit-identical values
            angle = 2 * np.pi * (t % p)[:, None] / p
            values += amps[k] * np.sin(angle + phases[k])
        if kind == "trend_seasonal":
            values += np.outer(t / length, rng.uniform(-2.0, 2.0, size=dim))
        if noise_std > 0:
            values += rng.normal(0.0, noise_std, size=(length, dim))
        meta["period"] = period
        meta["periods"] = list(SEASONAL_PERIODS)
    names = [f"x{c}" for c in range(dim)]
    return TimeSeriesDataset(f"synthetic_{kind}", values, names, None, meta)


@dataclass
class PreparedData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    scaler: Scaler
    boundaries: tuple  # (train_end, val_end) on the raw index


def prepare_windows(ds, input_len, output_len, split=SplitSpec(), scale=True, target=None):
    """Split chronologically, scale with train statistics, window each split separately.

    With ``target`` only that column is forecast and the other columns become
    its covariates; otherwise all channels are pooled.
    """
    train, val, test = chrono_split(ds, split)
    if scale:
        (train, val, test), scaler = fit_apply_scaler(train, val, test)
    else:
        scaler = Scaler(np.zeros(ds.dim), np.ones(ds.dim), np.zeros(ds.dim, dtype=bool))
    if target is None:
        cut = [make_windows(part, input_len, output_len) for part in (train, val, test)]
    else:
        cut = [make_covariate_windows(part, target, input_len, output_len) for part in (train, val, test)]
    return PreparedData(*cut, scaler, split.boundaries(len(ds)))
