"""Region feature vectors and ridge regression on them."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .census import RegionStats
from .errors import ArgumentError, EmptyRegion, UndefinedStatistic
from .taxonomy import BODY_TYPES

N_DEFAULT_MAKES = 71
OTHER_MAKE = "__other__"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature layout.

    avg_mpg, avg_price, cars_per_image, pct_foreign, one share per body
    type, one share per configured make and a pooled share for every other
    make. With 71 makes this is 88 features.
    """

    makes: tuple[str, ...]
    body_types: tuple[str, ...] = BODY_TYPES

    @property
    def names(self) -> tuple[str, ...]:
        return (
            ("avg_mpg", "avg_price", "cars_per_image", "pct_foreign")
            + tuple(f"body:{b}" for b in self.body_types)
            + tuple(f"make:{m}" for m in self.makes)
            + (f"make:{OTHER_MAKE}",)
        )

    @property
    def dim(self) -> int:
        return len(self.names)

    @classmethod
    def from_stats(cls, stats: Sequence[RegionStats], n_makes: int = N_DEFAULT_MAKES) -> "FeatureSchema":
        """Configure the make list as the ``n_makes`` most common makes overall."""
        mass: dict[str, float] = {}
        for s in stats:
            for m, p in s.pct_by_make.items():
                mass[m] = mass.get(m, 0.0) + p * s.class_mass
        ranked = sorted(mass, key=lambda m: (-mass[m], m))[:n_makes]
        return cls(tuple(sorted(ranked)))

    def to_dict(self) -> dict:
        return {"makes": list(self.makes), "body_types": list(self.body_types)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(tuple(d["makes"]), tuple(d["body_types"]))


def build_features(stats: RegionStats, schema: FeatureSchema) -> np.ndarray:
    if not stats.total_expected_cars > 0 or not stats.class_mass > 0:
        raise EmptyRegion(f"region {stats.region} has no expected cars")
    known = set(schema.makes)
    other = math.fsum(p for m, p in stats.pct_by_make.items() if m not in known)
    vec = (
        [stats.avg_mpg, stats.avg_price, stats.cars_per_image, stats.pct_foreign]
        + [stats.pct_by_body_type.get(b, 0.0) for b in schema.body_types]
        + [stats.pct_by_make.get(m, 0.0) for m in schema.makes]
        + [other]
    )
    return np.array(vec, float)


def feature_matrix(stats: Sequence[RegionStats], schema: FeatureSchema) -> np.ndarray:
    return np.vstack([build_features(s, schema) for s in stats]) if stats else np.zeros((0, schema.dim))


# --------------------------------------------------------------------------- ridge


@dataclass(frozen=True)
class RidgeModel:
    """Ridge fit on standardized features; dropped columns carry zero weight."""

    weights: np.ndarray
    intercept: float
    lam: float
    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray
    feature_names: tuple[str, ...] = field(default=())
    schema: dict | None = None

    @property
    def dim(self) -> int:
        return len(self.mean)

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        if X.shape[-1] != self.dim:
            raise ArgumentError(f"expected {self.dim} features, got {X.shape[-1]}")
        return (X[..., self.kept] - self.mean[self.kept]) / self.scale[self.kept]

    def predict(self, X) -> np.ndarray | float:
        out = self.intercept + self.standardize(X) @ self.weights
        return float(out) if np.ndim(out) == 0 else out

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "ridge",
                "feature_names": list(self.feature_names),
                "schema": self.schema,
                "mean": self.mean.tolist(),
                "scale": self.scale.tolist(),
                "kept": self.kept.tolist(),
                "weights": self.weights.tolist(),
                "intercept": self.intercept,
                "lambda": self.lam,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "RidgeModel":
        d = json.loads(text)
        if d.get("kind") != "ridge":
            raise ArgumentError("not a ridge model file")
        return cls(
            np.array(d["weights"], float), float(d["intercept"]), float(d["lambda"]),
            np.array(d["mean"], float), np.array(d["scale"], float), np.array(d["kept"], bool),
            tuple(d.get("feature_names", ())), d.get("schema"),
        )


def _design(X, y):
    X = np.asarray(X, float)
    y = np.asarray(y, float).ravel()
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ArgumentError(f"X shape {X.shape} does not match y length {len(y)}")
    if len(y) < 2:
        raise ArgumentError("ridge regression needs at least two samples")
    return X, y


def fit_ridge(X, y, lam: float, feature_names: Sequence[str] = (), schema: dict | None = None) -> RidgeModel:
    """Minimize ``||y - b - Z w||^2 + lam ||w||^2`` on standardized ``Z``.

    Columns are centered and scaled to unit (population) variance; constant
    columns are dropped. The intercept is unpenalized and equals mean(y).
    """
    if lam < 0:
        raise ArgumentError(f"lambda must be non-negative, got {lam}")
    X, y = _design(X, y)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    kept = scale > 1e-12 * np.maximum(1.0, np.abs(mean))
    safe = np.where(kept, scale, 1.0)
    Z = (X[:, kept] - mean[kept]) / safe[kept]
    yc = y - y.mean()
    d = Z.shape[1]
    if d == 0:
        w = np.zeros(0)
    else:
        A = Z.T @ Z + lam * np.eye(d)
        b = Z.T @ yc
        try:
            w = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            w = np.linalg.lstsq(A, b, rcond=None)[0]
        # one step of iterative refinement keeps the normal-equation residual tiny
        w = w + np.linalg.lstsq(A, b - A @ w, rcond=None)[0]
    return RidgeModel(w, float(y.mean()), float(lam), mean, safe, kept, tuple(feature_names), schema)


def ridge_gradient(model: RidgeModel, X, y) -> np.ndarray:
    """Gradient of the penalized objective w.r.t. the standardized weights."""
    X, y = _design(X, y)
    Z = model.standardize(X)
    r = Z @ model.weights - (y - y.mean())
    return 2 * (Z.T @ r + model.lam * model.weights)


def predict(model: RidgeModel, x) -> float | np.ndarray:
    return model.predict(x)


def _folds(n: int, folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def cv_rmse(X, y, grid: Sequence[float], folds: int = 5, seed: int = 0) -> np.ndarray:
    X, y = _design(X, y)
    if folds < 2:
        raise ArgumentError("need at least two folds")
    if len(y) < folds:
        raise ArgumentError(f"{len(y)} samples fewer than {folds} folds")
    parts = _folds(len(y), folds, seed)
    err = np.zeros((len(grid), folds))
    for k, test in enumerate(parts):
        train = np.setdiff1d(np.arange(len(y)), test)
        for g, lam in enumerate(grid):
            model = fit_ridge(X[train], y[train], lam)
            resid = model.predict(X[test]) - y[test]
            err[g, k] = math.sqrt(float(np.mean(resid**2)))
    return err.mean(axis=1)


def select_lambda(X, y, grid: Sequence[float], folds: int = 5, seed: int = 0) -> float:
    """Grid value with the lowest mean fold RMSE; ties go to the larger lambda."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ArgumentError("empty lambda grid")
    if len(grid) == 1:
        _design(X, y)
        return grid[0]
    rmse = cv_rmse(X, y, grid, folds, seed)
    best = None
    for lam, e in sorted(zip(grid, rmse), key=lambda t: -t[0]):
        if best is None or e < best[1] * (1 - 1e-12):
            best = (lam, e)
    return best[0]


def train_test_split(n: int, train_fraction: float = 0.18, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split; at least two samples land on each side when possible."""
    if not 0 < train_fraction < 1:
        raise ArgumentError("train_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    k = min(max(2, int(round(train_fraction * n))), n - 1)
    return np.sort(perm[:k]), np.sort(perm[k:])


# --------------------------------------------------------------------------- correlation


def pearson_r(a, b) -> float:
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    if len(a) != len(b) or len(a) < 2:
        raise ArgumentError("pearson_r needs two equal-length vectors of length >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise UndefinedStatistic("correlation undefined for a constant vector")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


@dataclass(frozen=True)
class Correlation:
    feature: str
    r: float
    p: float


def correlation_p_value(r: float, n: int) -> float:
    if abs(r) >= 1:
        return 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return float(2 * stats.t.sf(abs(t), n - 2))


def correlate_attributes(X, target, names: Sequence[str]) -> list[Correlation]:
    """Per-column Pearson r against ``target`` with a two-sided t-test p-value.

    Constant columns come back with NaN r and p. Order follows ``names``.
    """
    X = np.asarray(X, float)
    target = np.asarray(target, float).ravel()
    if X.shape[0] != len(target):
        raise ArgumentError("feature rows and target length differ")
    if len(target) < 3:
        raise ArgumentError("need at least three regions")
    out = []
    for j, name in enumerate(names):
        try:
            r = pearson_r(X[:, j], target)
        except UndefinedStatistic:
            out.append(Correlation(name, math.nan, math.nan))
            continue
        out.append(Correlation(name, r, correlation_p_value(r, len(target))))
    return out


def rank_correlations(corrs: Sequence[Correlation]) -> list[Correlation]:
    """Defined correlations sorted by descending |r|."""
    return sorted((c for c in corrs if not math.isnan(c.r)), key=lambda c: -abs(c.r))


def city_features(stats_by_zip: Mapping[str, RegionStats], zip_city: Mapping[str, str],
                  schema: FeatureSchema) -> dict[str, np.ndarray]:
    """Image-count weighted average of zip feature vectors per city."""
    acc: dict[str, list] = {}
    for z, s in stats_by_zip.items():
        if z not in zip_city or not s.class_mass > 0:
            continue
        acc.setdefault(zip_city[z], []).append((s.image_count, build_features(s, schema)))
    out = {}
    for city, rows in acc.items():
        w = np.array([r[0] for r in rows], float)
        out[city] = (w[:, None] * np.vstack([r[1] for r in rows])).sum(axis=0) / w.sum()
    return out
