"""Dataset ingestion, min-max scaling, window slicing, sines and batching.

Batches are plain ``(N, T, F)`` float64 arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-7


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    values: np.ndarray  # T_total x F
    names: list[str]
    source: str = "custom"

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]


@dataclass
class NormalizerState:
    minimum: np.ndarray
    maximum: np.ndarray
    eps: float = NORM_EPS

    @property
    def n_features(self):
        return len(self.minimum)

    def to_dict(self):
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist(), "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["min"], dtype=float), np.asarray(d["max"], dtype=float), float(d["eps"]))


def load_csv(path, source="custom") -> RawSeries:
    """Read a header + numeric rows CSV; rows are time steps in file order."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            parsed = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell.strip())
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col + 1} ({header[col]})"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: missing or non-finite value at row {lineno}, column {col + 1}")
                parsed.append(v)
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return RawSeries(np.array(rows, dtype=np.float64), header, source)


def minmax_normalize(series):
    """Scale each feature by ``(x - min) / (max - min + eps)``; returns ``(array, state)``."""
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=float)
    flat = values.reshape(-1, values.shape[-1])
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    state = NormalizerState(lo, hi)
    return (values - lo) / (hi - lo + NORM_EPS), state


def apply_normalizer(batch, state: NormalizerState):
    """Scale new data with statistics fitted elsewhere (values may leave [0, 1])."""
    batch = np.asarray(batch, dtype=float)
    if batch.shape[-1] != state.n_features:
        raise DataError(f"normalize: batch has {batch.shape[-1]} features, state has {state.n_features}")
    return (batch - state.minimum) / (state.maximum - state.minimum + state.eps)


def denormalize(batch, state: NormalizerState):
    batch = np.asarray(batch, dtype=float)
    if batch.shape[-1] != state.n_features:
        raise DataError(f"denormalize: batch has {batch.shape[-1]} features, state has {state.n_features}")
    return batch * (state.maximum - state.minimum + state.eps) + state.minimum


def slice_windows(series, window=24, stride=1):
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    total = values.shape[0]
    if window < 1 or stride < 1:
        raise DataError("window and stride must be positive")
    if window > total:
        raise DataError(f"window {window} is longer than the series ({total} steps)")
    starts = range(0, total - window + 1, stride)
    return np.stack([values[s : s + window] for s in starts])


@dataclass
class SineParams:
    freq: np.ndarray  # n x dims
    phase: np.ndarray  # n x dims


def generate_sines(n, T, dims, rng, return_params=False):
    """Sinusoids ``sin(2 pi eta t + theta)`` rescaled to [0, 1], one (eta, theta) per sample and dim."""
    if min(n, T, dims) < 1:
        raise DataError("n, T and dims must be at least 1")
    freq = np.empty((n, dims))
    phase = np.empty((n, dims))
    for i in range(n):
        for d in range(dims):
            freq[i, d] = rng.uniform(0.0, 1.0)
            phase[i, d] = rng.uniform(-np.pi, np.pi)
    t = np.arange(T, dtype=float)[None, :, None]
    raw = np.sin(2.0 * np.pi * freq[:, None, :] * t + phase[:, None, :])
    data = (raw + 1.0) / 2.0
    if return_params:
        return data, SineParams(freq, phase)
    return data


@dataclass
class Split:
    train: np.ndarray
    test: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray


def train_test_split(data, train_frac, rng) -> Split:
    if not 0.0 < train_frac < 1.0:
        raise DataError("train_frac must lie strictly between 0 and 1")
    n = len(data)
    perm = rng.permutation(n)
    n_train = int(round(n * train_frac))
    if n_train == 0 or n_train == n:
        raise DataError(f"split of {n} samples at {train_frac} leaves an empty side")
    tr, te = perm[:n_train], perm[n_train:]
    return Split(data[tr], data[te], tr, te)


def sample_batch(data, batch_size, rng):
    """Uniform draw with replacement."""
    return data[rng.integers(0, len(data), size=batch_size)]


@dataclass
class BatchStream:
    """Seeded train/test split plus an endless mini-batch iterator over the train side."""

    data: np.ndarray
    train_frac: float
    batch_size: int
    rng: object
    split: Split = field(init=False)

    def __post_init__(self):
        self.split = train_test_split(self.data, self.train_frac, self.rng)
        if self.batch_size > len(self.split.train):
            raise DataError(f"batch size {self.batch_size} exceeds train count {len(self.split.train)}")

    def __iter__(self):
        return self

    def __next__(self):
        return sample_batch(self.split.train, self.batch_size, self.rng)


def split_shuffle_batch(data, train_frac, batch_size, rng) -> BatchStream:
    return BatchStream(np.asarray(data), train_frac, batch_size, rng)


# ---------------------------------------------------------------------------
# sample files: one row per (sample, step)


SAMPLE_HEADER = ("sample_id", "t")


def write_samples_csv(path, batch):
    """Write an ``(N, T, F)`` batch as ``sample_id,t,f0,...,f{F-1}`` rows."""
    batch = np.asarray(batch, dtype=float)
    N, T, F = batch.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(SAMPLE_HEADER) + [f"f{j}" for j in range(F)])
        for n in range(N):
            for t in range(T):
                w.writerow([n, t] + [repr(float(v)) for v in batch[n, t]])


def is_samples_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    return tuple(h.strip() for h in header[:2]) == SAMPLE_HEADER


def read_samples_csv(path):
    """Inverse of :func:`write_samples_csv`; samples must be complete and in order."""
    series = load_csv(path)
    if tuple(series.names[:2]) != SAMPLE_HEADER:
        raise DataError(f"{path}: expected header starting with sample_id,t")
    ids = series.values[:, 0].astype(int)
    steps = series.values[:, 1].astype(int)
    T = int(steps.max()) + 1
    N = int(ids.max()) + 1
    if len(ids) != N * T:
        raise DataError(f"{path}: {len(ids)} rows do not form {N} complete samples of length {T}")
    if np.any(ids != np.repeat(np.arange(N), T)) or np.any(steps != np.tile(np.arange(T), N)):
        raise DataError(f"{path}: rows must be ordered by sample_id then t")
    return series.values[:, 2:].reshape(N, T, -1)
