"""Spatial weights, global Moran's I and local Getis-Ord Gi* hot spots."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import ArgumentError, DegenerateGeometry, UndefinedStatistic

EARTH_RADIUS_M = 6_371_008.8
D_FLOOR_M = 1.0
MAX_DENSE_POINTS = 20_000


@dataclass(frozen=True)
class PointPattern:
    lat: np.ndarray
    lon: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for name in ("lat", "lon", "values"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).ravel())
        if not len(self.lat) == len(self.lon) == len(self.values):
            raise ArgumentError("lat, lon and values differ in length")
        if len(self.values) < 2:
            raise ArgumentError("need at least two points")
        if not np.isfinite(self.values).all():
            raise ArgumentError("values must be finite")

    def __len__(self) -> int:
        return len(self.values)

    def with_values(self, values) -> "PointPattern":
        return PointPattern(self.lat, self.lon, values)


@dataclass(frozen=True)
class SpatialWeights:
    """Symmetric non-negative weights with zero diagonal (dense array or CSR)."""

    matrix: np.ndarray | sparse.csr_matrix
    scheme: str
    d_floor: float = D_FLOOR_M
    band: float | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.matrix)

    def total(self) -> float:
        return float(self.matrix.sum())

    def dot(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def row_standardized(self) -> "SpatialWeights":
        rows = np.asarray(self.matrix.sum(axis=1)).ravel()
        inv = np.divide(1.0, rows, out=np.zeros_like(rows), where=rows > 0)
        if self.is_sparse:
            m = sparse.diags(inv) @ self.matrix
        else:
            m = self.matrix * inv[:, None]
        return SpatialWeights(m, self.scheme + "+row", self.d_floor, self.band)


def haversine(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Great-circle distance in meters."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0, 1)))


def distance_matrix(lat, lon) -> np.ndarray:
    lat = np.asarray(lat, float)
    lon = np.asarray(lon, float)
    return haversine(lat[:, None], lon[:, None], lat[None], lon[None])


def parse_scheme(text: str) -> tuple[str, float | None]:
    """``inverse-sq`` or ``band:<meters>``."""
    if text in ("inverse-sq", "inverse-distance-squared"):
        return "inverse-sq", None
    if text.startswith("band:"):
        try:
            d = float(text.split(":", 1)[1])
        except ValueError:
            raise ArgumentError(f"bad band distance in {text!r}") from None
        if d <= 0:
            raise ArgumentError("band distance must be positive")
        return "band", d
    raise ArgumentError(f"unknown weights scheme {text!r}")


def _unit_xyz(lat, lon) -> np.ndarray:
    p, l = np.radians(lat), np.radians(lon)
    return np.column_stack([np.cos(p) * np.cos(l), np.cos(p) * np.sin(l), np.sin(p)])


def build_weights(points: PointPattern, scheme: str = "inverse-sq", d_floor: float = D_FLOOR_M) -> SpatialWeights:
    """Pairwise weights from haversine distances.

    ``inverse-sq``: ``1 / max(d, d_floor)**2`` (dense, at most 20,000
    points). ``band:<m>``: 1 within ``m`` meters, else 0 (sparse).
    """
    kind, band = parse_scheme(scheme)
    lat, lon = points.lat, points.lon
    n = len(lat)
    if n < 2:
        raise ArgumentError("need at least two points")
    if np.ptp(lat) == 0 and np.ptp(lon) == 0:
        raise DegenerateGeometry("all points are coincident")
    if kind == "inverse-sq":
        if n > MAX_DENSE_POINTS:
            raise ArgumentError(f"{n} points exceed the dense limit {MAX_DENSE_POINTS}; use a band scheme")
        d = distance_matrix(lat, lon)
        w = 1.0 / np.maximum(d, d_floor) ** 2
        np.fill_diagonal(w, 0.0)
        return SpatialWeights(w, "inverse-sq", d_floor)

    xyz = _unit_xyz(lat, lon)
    chord = 2 * math.sin(min(band / (2 * EARTH_RADIUS_M), math.pi / 2))
    tree = cKDTree(xyz)
    pairs = tree.query_pairs(chord * (1 + 1e-9) + 1e-15, output_type="ndarray")
    if len(pairs):
        d = haversine(lat[pairs[:, 0]], lon[pairs[:, 0]], lat[pairs[:, 1]], lon[pairs[:, 1]])
        pairs = pairs[d <= band]
    if len(pairs) == 0:
        raise DegenerateGeometry(f"no point pairs within {band} m")
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    w = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    return SpatialWeights(w, f"band:{band:g}", d_floor, band)


def weights_from_matrix(matrix, scheme: str = "custom") -> SpatialWeights:
    """Wrap a user-supplied weight matrix after checking the invariants."""
    m = matrix if sparse.issparse(matrix) else np.asarray(matrix, float)
    dense = m.toarray() if sparse.issparse(m) else m
    if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
        raise ArgumentError("weights must be a square matrix")
    if (dense < 0).any() or not np.allclose(dense, dense.T) or np.any(np.diag(dense) != 0):
        raise ArgumentError("weights must be symmetric, non-negative, with zero diagonal")
    if not (dense > 0).any():
        raise DegenerateGeometry("weights have no positive entry")
    return SpatialWeights(sparse.csr_matrix(m) if sparse.issparse(m) else dense, scheme)


def _values(pattern) -> np.ndarray:
    return pattern.values if isinstance(pattern, PointPattern) else np.asarray(pattern, float).ravel()


def _check(x: np.ndarray, weights: SpatialWeights) -> None:
    if len(x) < 2:
        raise ArgumentError("need at least two points")
    if len(x) != weights.n:
        raise ArgumentError(f"{len(x)} values but weights are {weights.n}x{weights.n}")


def morans_i(pattern, weights: SpatialWeights) -> float:
    """Global Moran's I with the raw weights as given."""
    x = _values(pattern)
    _check(x, weights)
    z = x - x.mean()
    ss = float(z @ z)
    if ss <= 0 or ss <= 1e-30 * max(1.0, float(x @ x)):
        raise UndefinedStatistic("Moran's I undefined for constant values")
    return len(x) / weights.total() * float(z @ weights.dot(z)) / ss


def expected_morans_i(n: int) -> float:
    return -1.0 / (n - 1)


def _batch_moran(zs: np.ndarray, weights: SpatialWeights, s0: float, ss: float) -> np.ndarray:
    # zs: (p, n) permuted deviations; the sum of squares is permutation-invariant
    wz = (weights.matrix @ zs.T).T
    return zs.shape[1] / s0 * np.einsum("ij,ij->i", zs, wz) / ss


def morans_i_significance(pattern, weights: SpatialWeights, permutations: int = 999, seed: int = 0,
                          batch: int = 256) -> float:
    """Two-sided permutation pseudo p-value for Moran's I.

    Permutation ``k`` uses its own generator spawned from ``seed``, so
    results do not depend on batching. Ties in ``|I|`` within 1e-12
    relative count as extreme.
    """
    if permutations < 99:
        raise ArgumentError("at least 99 permutations required")
    x = _values(pattern)
    observed = morans_i(x, weights)
    z = x - x.mean()
    ss = float(z @ z)
    s0 = weights.total()
    n = len(x)
    children = np.random.SeedSequence(seed).spawn(permutations)
    cutoff = abs(observed) * (1 - 1e-12)
    extreme = 0
    for start in range(0, permutations, batch):
        chunk = children[start:start + batch]
        zs = np.stack([z[np.random.default_rng(c).permutation(n)] for c in chunk])
        extreme += int(np.count_nonzero(np.abs(_batch_moran(zs, weights, s0, ss)) >= cutoff))
    return (1 + extreme) / (1 + permutations)


def getis_ord_gistar(pattern, weights: SpatialWeights) -> np.ndarray:
    """Gi* z-score per point; NaN where the statistic is undefined.

    Each point is included in its own neighborhood with weight 1. Mean and
    standard deviation are global, population form.
    """
    x = _values(pattern)
    _check(x, weights)
    n = len(x)
    mean = x.mean()
    s = math.sqrt(max(float(np.mean(x * x)) - mean * mean, 0.0))
    if weights.is_sparse:
        w = weights.matrix.tolil(copy=True)
        w.setdiag(1.0)
        w = w.tocsr()
        sum_w = np.asarray(w.sum(axis=1)).ravel()
        sum_w2 = np.asarray(w.multiply(w).sum(axis=1)).ravel()
    else:
        w = weights.matrix.copy()
        np.fill_diagonal(w, 1.0)
        sum_w = w.sum(axis=1)
        sum_w2 = (w * w).sum(axis=1)
    num = w @ x - mean * sum_w
    spread = (n * sum_w2 - sum_w**2) / (n - 1)
    den = s * np.sqrt(np.clip(spread, 0, None))
    scale = max(abs(mean), s, 1e-300)
    ok = (den > 1e-12 * scale) & (spread > 1e-12 * sum_w2)
    out = np.full(n, np.nan)
    out[ok] = num[ok] / den[ok]
    return out


HOT, COLD, NONE = "hot", "cold", "none"


def classify_clusters(zscores, hot_threshold: float = 1.96, cold_threshold: float = -1.96) -> np.ndarray:
    if not hot_threshold > 0 > cold_threshold:
        raise ArgumentError("thresholds must satisfy hot > 0 > cold")
    z = np.asarray(zscores, float)
    out = np.full(z.shape, NONE, dtype=object)
    out[z >= hot_threshold] = HOT
    out[z <= cold_threshold] = COLD
    return out
