"""Cause-effect pair files, benchmark metadata and the synthetic
post-nonlinear example."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

X_TO_Y = "x_to_y"
Y_TO_X = "y_to_x"

# mixture of two unit-rate exponentials: (weight, left edge)
NOISE_COMPONENTS = ((0.7, -3.0), (0.3, 7.0))


class PairFormatError(ValueError):
    pass


class NonScalarPair(ValueError):
    """Pair whose cause or effect spans more than one column."""


@dataclass(frozen=True, eq=False)
class DataPair:
    raw_x: np.ndarray
    raw_y: np.ndarray
    norm_x: Optional[np.ndarray] = None
    norm_y: Optional[np.ndarray] = None
    pair_id: Optional[int] = None
    true_direction: Optional[str] = None
    weight: Optional[float] = None

    def __post_init__(self):
        raw_x = np.array(self.raw_x, dtype=float).reshape(-1)
        raw_y = np.array(self.raw_y, dtype=float).reshape(-1)
        if raw_x.size != raw_y.size:
            raise ValueError("x and y must have equal length")
        object.__setattr__(self, "raw_x", raw_x)
        object.__setattr__(self, "raw_y", raw_y)
        for name in ("norm_x", "norm_y"):
            value = getattr(self, name)
            if value is not None:
                value = np.array(value, dtype=float).reshape(-1)
                if value.size != raw_x.size:
                    raise ValueError(f"{name} length differs from raw data")
                object.__setattr__(self, name, value)
        if self.true_direction not in (None, X_TO_Y, Y_TO_X):
            raise ValueError(f"bad direction {self.true_direction!r}")
        if self.weight is not None and not 0 < self.weight <= 1:
            raise ValueError("weight must lie in (0, 1]")

    def __len__(self) -> int:
        return self.raw_x.size

    @property
    def is_normalised(self) -> bool:
        return self.norm_x is not None and self.norm_y is not None

    @property
    def x(self) -> np.ndarray:
        return self.norm_x if self.norm_x is not None else self.raw_x

    @property
    def y(self) -> np.ndarray:
        return self.norm_y if self.norm_y is not None else self.raw_y

    def swapped(self) -> "DataPair":
        flip = {X_TO_Y: Y_TO_X, Y_TO_X: X_TO_Y, None: None}[self.true_direction]
        return DataPair(self.raw_y, self.raw_x, self.norm_y, self.norm_x,
                        self.pair_id, flip, self.weight)

    def subsample(self, max_samples: int, seed: int = 0) -> "DataPair":
        """Deterministic random subset of at most ``max_samples`` rows (0 = all)."""
        if max_samples <= 0 or len(self) <= max_samples:
            return self
        rng = np.random.default_rng([seed, self.pair_id or 0])
        idx = np.sort(rng.choice(len(self), size=max_samples, replace=False))
        norm_x = None if self.norm_x is None else self.norm_x[idx]
        norm_y = None if self.norm_y is None else self.norm_y[idx]
        return replace(self, raw_x=self.raw_x[idx], raw_y=self.raw_y[idx],
                       norm_x=norm_x, norm_y=norm_y)


def _standardise(v: np.ndarray, name: str) -> np.ndarray:
    if np.unique(v).size < 2:
        raise ValueError(f"constant column {name}: cannot normalise")
    out = (v - v.mean()) / v.std()
    # second pass removes the residual rounding of the first
    return (out - out.mean()) / out.std()


def normalise(pair: DataPair) -> DataPair:
    """Zero mean, unit (population) variance for both variables; raw data kept."""
    return replace(pair, norm_x=_standardise(pair.raw_x, "x"), norm_y=_standardise(pair.raw_y, "y"))


# ---------------------------------------------------------------------------
# benchmark files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairMeta:
    pair_id: int
    cause: Tuple[int, int]   # 1-based inclusive column range
    effect: Tuple[int, int]
    weight: float

    @property
    def is_scalar(self) -> bool:
        return self.cause[0] == self.cause[1] and self.effect[0] == self.effect[1]


def read_metadata(path) -> Dict[int, PairMeta]:
    """One line per pair: id, cause first/last column, effect first/last column, weight."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 6:
                raise PairFormatError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
            try:
                pid, c0, c1, e0, e1 = (int(float(f)) for f in fields[:5])
                weight = float(fields[5])
            except ValueError as exc:
                raise PairFormatError(f"{path}:{lineno}: {exc}") from None
            out[pid] = PairMeta(pid, (c0, c1), (e0, e1), weight)
    return out


def read_columns(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise PairFormatError(f"{path}:{lineno}: non-numeric field") from None
            if len(rows[-1]) != len(rows[0]):
                raise PairFormatError(f"{path}:{lineno}: expected {len(rows[0])} columns")
    if not rows:
        raise PairFormatError(f"{path}: no data")
    data = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(data)):
        raise PairFormatError(f"{path}: non-finite value")
    return data


def load_pair(path, meta: Optional[PairMeta] = None) -> DataPair:
    """Read a pair file; with metadata, relabel so that x is the cause."""
    data = read_columns(path)
    if meta is None:
        if data.shape[1] != 2:
            raise NonScalarPair(f"skipped: non-scalar ({data.shape[1]} columns, no metadata)")
        return DataPair(data[:, 0], data[:, 1])
    if not meta.is_scalar:
        raise NonScalarPair("skipped: non-scalar")
    c, e = meta.cause[0] - 1, meta.effect[0] - 1
    if max(c, e) >= data.shape[1]:
        raise PairFormatError(f"{path}: metadata refers to missing column")
    return DataPair(data[:, c], data[:, e], pair_id=meta.pair_id,
                    true_direction=X_TO_Y, weight=meta.weight)


def write_pair(pair: DataPair, path, normalised: bool = False) -> None:
    x, y = (pair.x, pair.y) if normalised else (pair.raw_x, pair.raw_y)
    with open(path, "w") as fh:
        for a, b in zip(x, y):
            fh.write(f"{float(a)!r} {float(b)!r}\n")


def pair_file(pairs_dir, pair_id: int) -> Path:
    return Path(pairs_dir) / f"pair{pair_id:04d}.txt"


def find_metadata(pairs_dir) -> Path:
    for name in ("pairmeta.txt", "pairmeta.dat", "meta.txt"):
        path = Path(pairs_dir) / name
        if path.exists():
            return path
    raise FileNotFoundError(f"no pairmeta.txt in {pairs_dir}")


def iter_pairs(pairs_dir) -> Iterator[Tuple[int, object]]:
    """Yield ``(pair_id, DataPair or exception)`` for every metadata entry."""
    meta = read_metadata(find_metadata(pairs_dir))
    for pid in sorted(meta):
        try:
            yield pid, load_pair(pair_file(pairs_dir, pid), meta[pid])
        except (OSError, ValueError) as exc:
            yield pid, exc


# ---------------------------------------------------------------------------
# synthetic post-nonlinear example
# ---------------------------------------------------------------------------

def noise_density(e) -> np.ndarray:
    """Two shifted unit exponentials, weights 0.7 (edge -3) and 0.3 (edge 7)."""
    e = np.asarray(e, dtype=float)
    out = np.zeros_like(e)
    for weight, edge in NOISE_COMPONENTS:
        out = out + np.where(e >= edge, weight * np.exp(-(e - edge)), 0.0)
    return out


def sample_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    weights = np.array([w for w, _ in NOISE_COMPONENTS])
    edges = np.array([e for _, e in NOISE_COMPONENTS])
    comp = rng.choice(len(weights), size=n, p=weights)
    return edges[comp] + rng.exponential(1.0, size=n)


def generate_synthetic(n: int = 500, rng_seed: int = 0) -> DataPair:
    """x ~ N(2, 1); s = x^2 + eps; y = log(s + 4)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    x = rng.normal(2.0, 1.0, size=n)
    eps = sample_noise(n, rng)
    s = x ** 2 + eps
    assert np.all(s + 4 > 0)
    return DataPair(x, np.log(s + 4), true_direction=X_TO_Y)
