"""Cluster-structured data model, validation and treatment lattices."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_N_MAX = 20


class DataError(ValueError):
    """Base class for dataset problems."""


class RaggedCluster(DataError):
    pass


class NonBinaryTreatment(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ClusterTooLarge(DataError):
    pass


class MissingColumn(DataError):
    pass


class UnparsableCell(DataError):
    pass


@dataclass(frozen=True, eq=False)
class ClusterObservation:
    """One cluster (Y, A, X, N).

    Cluster-level covariates are replicated into every unit row of ``x``.
    Arrays are stored read-only so instances can be shared freely.
    """

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    cluster_id: str | int | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        a = np.array(self.a)
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size == y.size else x.reshape(y.size, -1)
        for arr in (y, a, x):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def ybar(self) -> float:
        return float(self.y.mean())

    @property
    def abar(self) -> float:
        return float(self.a.mean())

    def abar_others(self) -> np.ndarray:
        """Leave-one-out treated proportion; 0 for singleton clusters."""
        if self.n == 1:
            return np.zeros(1)
        s = self.a.sum()
        return (s - self.a) / (self.n - 1)

    def permuted(self, order: Sequence[int]) -> "ClusterObservation":
        order = np.asarray(order)
        return ClusterObservation(self.y[order], self.a[order], self.x[order], self.cluster_id)


@dataclass(frozen=True, eq=False)
class Dataset:
    clusters: tuple
    column_names: tuple = ()
    n_max: int = DEFAULT_N_MAX
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if not self.column_names and self.clusters:
            names = tuple(f"x{k + 1}" for k in range(self.clusters[0].p))
            object.__setattr__(self, "column_names", names)
        else:
            object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return len(self.column_names)

    def __len__(self):
        return self.m

    def __iter__(self):
        return iter(self.clusters)

    def __getitem__(self, idx):
        return self.clusters[idx]

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.clusters[i] for i in indices), self.column_names, self.n_max)

    def sizes(self) -> np.ndarray:
        return np.array([c.n for c in self.clusters], dtype=int)

    def size_histogram(self) -> dict:
        return dict(sorted(Counter(int(n) for n in self.sizes()).items()))

    def has_singletons(self) -> bool:
        return bool(np.any(self.sizes() == 1))

    def column_index(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= int(name) < self.p:
                raise MissingColumn(f"covariate index {name} out of range (p={self.p})")
            return int(name)
        try:
            return self.column_names.index(name)
        except ValueError:
            raise MissingColumn(f"covariate column {name!r} not found; have {list(self.column_names)}") from None

    def unit_arrays(self):
        """Pooled unit-level (y, a, x, abar_others, n, cluster index)."""
        y = np.concatenate([c.y for c in self.clusters])
        a = np.concatenate([c.a for c in self.clusters]).astype(float)
        x = np.vstack([c.x for c in self.clusters])
        abar = np.concatenate([c.abar_others() for c in self.clusters])
        n = np.concatenate([np.full(c.n, c.n) for c in self.clusters])
        idx = np.concatenate([np.full(c.n, i) for i, c in enumerate(self.clusters)])
        return y, a, x, abar, n, idx


def validate_dataset(raw: Dataset, n_max: int | None = None) -> Dataset:
    """Check every cluster invariant and return a validated dataset.

    Treatments are normalised to an int8 array. Raises a ``DataError`` subclass
    on the first violation found.
    """
    n_max = raw.n_max if n_max is None else n_max
    if raw.m == 0:
        raise EmptyDataset("dataset has no clusters")
    p = None
    out = []
    for i, c in enumerate(raw.clusters):
        label = c.cluster_id if c.cluster_id is not None else i
        n = c.y.shape[0]
        if n < 1:
            raise RaggedCluster(f"cluster {label} is empty")
        if c.a.reshape(-1).shape[0] != n or c.x.shape[0] != n:
            raise RaggedCluster(
                f"cluster {label}: len(y)={n}, len(a)={c.a.size}, rows(x)={c.x.shape[0]}"
            )
        a = np.asarray(c.a, dtype=float).reshape(-1)
        if not np.all((a == 0) | (a == 1)):
            raise NonBinaryTreatment(f"cluster {label}: treatments must be 0/1, got {np.unique(a)}")
        if n > n_max:
            raise ClusterTooLarge(f"cluster {label} has {n} units; n_max={n_max}")
        if p is None:
            p = c.x.shape[1]
        elif c.x.shape[1] != p:
            raise RaggedCluster(f"cluster {label}: {c.x.shape[1]} covariates, expected {p}")
        if not (np.all(np.isfinite(c.y)) and np.all(np.isfinite(c.x))):
            raise DataError(f"cluster {label}: non-finite values")
        out.append(ClusterObservation(c.y, a.astype(np.int8), c.x, c.cluster_id))
    names = raw.column_names if raw.column_names else tuple(f"x{k + 1}" for k in range(p))
    if len(names) != p:
        raise DataError(f"{len(names)} column names for {p} covariates")
    return Dataset(tuple(out), names, n_max)


def enumerate_treatments(n: int) -> np.ndarray:
    """All 2**n treatment vectors as a (2**n, n) int8 array.

    Row ``k`` holds the bits of the integer ``k`` with unit 0 as the least
    significant bit.
    """
    codes = np.arange(1 << n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(np.int8)


def pack_treatments(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    return (bits << np.arange(bits.shape[-1])).sum(axis=-1)


def subsample_treatments(n: int, r: int, rng_seed) -> tuple[np.ndarray, float]:
    """Draw ``r`` vectors uniformly (with replacement) from the 2**n lattice.

    Returns the (r, n) array and the weight 2**n / r that turns the sum over
    draws into an unbiased estimate of the full lattice sum.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    bits = rng.integers(0, 2, size=(r, n), dtype=np.int8)
    return bits, float(2**n) / r
