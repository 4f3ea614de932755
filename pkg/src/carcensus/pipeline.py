"""End-to-end glue used by the CLI and the experiment scripts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import calibrate as cal
from .census import RegionAccumulator, RegionStats, truncate_topk  # noqa: F401 (re-export)
from .demographics import (
    FeatureSchema,
    RidgeModel,
    correlate_attributes,
    feature_matrix,
    fit_ridge,
    pearson_r,
    rank_correlations,
    select_lambda,
    train_test_split,
)
from .ingest import BBox, DetectionBatch, GeoImage
from .spatial import PointPattern, build_weights, morans_i, morans_i_significance
from .synth import SyntheticCity, SyntheticCityConfig, synth_city
from .taxonomy import ClassTable

DEFAULT_LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)


def image_dims(images: Iterable[GeoImage]) -> dict[str, tuple[int, int]]:
    return {im.image_id: (im.width_px, im.height_px) for im in images}


def batch_dims(batch: DetectionBatch, dims: Mapping[str, tuple[int, int]]) -> np.ndarray:
    return np.array([dims[i] for i in batch.image_ids], float).reshape(-1, 2)


def batch_boxes(batch: DetectionBatch) -> np.ndarray:
    return np.column_stack([batch.x, batch.y, batch.w, batch.h])


def scored(batch: DetectionBatch, scores: np.ndarray) -> dict[str, list[tuple[float, BBox]]]:
    out: dict[str, list] = {}
    for iid, s, x, y, w, h in zip(batch.image_ids, scores.tolist(), batch.x.tolist(), batch.y.tolist(),
                                  batch.w.tolist(), batch.h.tolist()):
        out.setdefault(iid, []).append((s, BBox(x, y, w, h)))
    return out


def effective_scores(batch: DetectionBatch, prior: cal.LocationPrior | None,
                     dims: Mapping[str, tuple[int, int]] | None) -> np.ndarray:
    if prior is None or prior.alpha == 0:
        return batch.raw_score.copy()
    return cal.augment_scores(prior, batch.raw_score, batch_boxes(batch), batch_dims(batch, dims))


def fit_calibration(batch: DetectionBatch, truths: Mapping[str, Sequence[BBox]],
                    prior: cal.LocationPrior | None = None, dims=None,
                    iou_threshold: float = 0.5) -> cal.IsotonicModel:
    scores = effective_scores(batch, prior, dims)
    labels = cal.label_detections(batch.image_ids, scores, batch_boxes(batch), truths, iou_threshold)
    return cal.fit_isotonic(scores, labels)


def apply_calibration(batch: DetectionBatch, model: cal.IsotonicModel,
                      prior: cal.LocationPrior | None = None, dims=None) -> DetectionBatch:
    scores = effective_scores(batch, prior, dims)
    out = DetectionBatch(**{k: getattr(batch, k) for k in batch.__dataclass_fields__})
    out.car_prob = np.asarray(cal.apply_isotonic(model, scores), float)
    return out


def point_regions(images: Iterable[GeoImage]) -> tuple[dict[str, str], dict[str, tuple[float, float]]]:
    """Group images by GPS point; region ids are ``lat,lon`` strings."""
    regions, coords = {}, {}
    for im in images:
        key = f"{im.latitude:.7f},{im.longitude:.7f}"
        regions[im.image_id] = key
        coords[key] = (im.latitude, im.longitude)
    return regions, coords


def region_map(images: Iterable[GeoImage], by: str) -> dict[str, str]:
    if by == "zip":
        return {im.image_id: im.zip_code for im in images}
    if by == "city":
        return {im.image_id: im.city_id for im in images}
    if by == "point":
        return point_regions(images)[0]
    raise ValueError(f"unknown grouping {by!r}")


def aggregate(batch_iter: Iterable[DetectionBatch], images: Sequence[GeoImage], table: ClassTable,
              by: str = "zip") -> dict[str, RegionStats]:
    acc = RegionAccumulator(region_map(images, by), len(table))
    for b in batch_iter:
        acc.add_batch(b)
    return acc.finalize(table)


def price_pattern(point_stats: Mapping[str, RegionStats], coords: Mapping[str, tuple[float, float]]) -> PointPattern:
    keys = [k for k in sorted(point_stats) if k in coords and not math.isnan(point_stats[k].avg_price)]
    lat = [coords[k][0] for k in keys]
    lon = [coords[k][1] for k in keys]
    return PointPattern(lat, lon, [point_stats[k].avg_price for k in keys])


@dataclass
class DemoResult:
    alpha: float
    ap_raw: float
    ap_augmented: float
    zip_price_rel_error: float
    moran_i: float
    moran_p: float
    moran_shuffle_exceed: int
    lam: float
    heldout_r: float
    city_r: float
    top_features: list[str]
    avg_price_rank: int
    zip_stats: dict[str, RegionStats] = field(repr=False, default_factory=dict)

    def lines(self) -> list[str]:
        return [
            f"alpha={self.alpha:g} ap_raw={self.ap_raw:.4f} ap_augmented={self.ap_augmented:.4f}",
            f"zip_avg_price_median_rel_error={self.zip_price_rel_error:.4f}",
            f"moran_i={self.moran_i:.4f} moran_p={self.moran_p:.4g} shuffles_below={self.moran_shuffle_exceed}/100",
            f"lambda={self.lam:g} heldout_income_r={self.heldout_r:.4f} city_r={self.city_r:.4f}",
            f"top_features={','.join(self.top_features)} avg_price_rank={self.avg_price_rank}",
        ]


def demo_config(seed: int = 1) -> SyntheticCityConfig:
    return SyntheticCityConfig(n_zips=100, images_per_zip=120, price_income_coupling=1.5, seed=seed)


def split_images(images: Sequence[GeoImage], seed: int, fit_fraction: float = 0.2) -> set[str]:
    """Seeded subset of GPS points (all rotations) used to fit detector-side models."""
    _, coords = point_regions(images)
    keys = sorted(coords)
    rng = np.random.default_rng(seed)
    chosen = set(np.asarray(keys, dtype=object)[rng.random(len(keys)) < fit_fraction].tolist())
    return {im.image_id for im in images if f"{im.latitude:.7f},{im.longitude:.7f}" in chosen}


def run_demo(seed: int = 1, city: SyntheticCity | None = None, permutations: int = 999,
             lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID, topk: int = 20) -> DemoResult:
    city = city or synth_city(demo_config(seed))
    table, images, det = city.table, city.images, city.detections
    dims = image_dims(images)

    fit_ids = split_images(images, seed)
    in_fit = np.array([i in fit_ids for i in det.image_ids])
    prior_boxes = [(b, dims[iid]) for iid, bs in sorted(city.truth_boxes.items()) if iid in fit_ids for b in bs]
    prior = cal.fit_location_prior(prior_boxes)
    val = det.take(in_fit)
    val_truth = {k: v for k, v in city.truth_boxes.items() if k in fit_ids}
    val_dims = batch_dims(val, dims)
    search = cal.alpha_search(prior, scored(val, val.raw_score), val_truth,
                              {k: dims[k] for k in set(val.image_ids)})
    prior = prior.with_alpha(search.alpha)
    model = fit_calibration(val, val_truth, prior, dims)
    calibrated = apply_calibration(det, model, prior, dims)

    zip_stats = aggregate([calibrated], images, table, "zip")
    truth = {r["zip_code"]: r for r in city.ground_truth}
    rel = [abs(zip_stats[z].avg_price / truth[z]["avg_price"] - 1) for z in truth]

    pt_regions, coords = point_regions(images)
    acc = RegionAccumulator(pt_regions, len(table))
    acc.add_batch(calibrated)
    pattern = price_pattern(acc.finalize(table), coords)
    weights = build_weights(pattern, "inverse-sq")
    moran = morans_i(pattern, weights)
    p = morans_i_significance(pattern, weights, permutations, seed)
    rng = np.random.default_rng(seed)
    below = sum(morans_i(rng.permutation(pattern.values), weights) < moran for _ in range(100))

    zips = sorted(z for z in zip_stats if z in truth and zip_stats[z].class_mass > 0)
    stats = [zip_stats[z] for z in zips]
    schema = FeatureSchema.from_stats(stats)
    X = feature_matrix(stats, schema)
    y = np.array([truth[z]["median_income"] for z in zips])
    train, test = train_test_split(len(zips), 0.18, seed)
    lam = select_lambda(X[train], y[train], lambda_grid, folds=min(5, len(train)), seed=seed)
    ridge: RidgeModel = fit_ridge(X[train], y[train], lam, schema.names, schema.to_dict())
    heldout_r = pearson_r(ridge.predict(X[test]), y[test])
    corrs = rank_correlations(correlate_attributes(X, y, schema.names))
    names = [c.feature for c in corrs]

    # single synthetic city: city-level r is over coarse blocks of held-out zips
    blocks = _zip_blocks(zips, test, city)
    if len(blocks) >= 3:
        bx = np.vstack([X[idx].mean(axis=0) for idx in blocks])
        by = np.array([y[idx].mean() for idx in blocks])
        city_r = pearson_r(ridge.predict(bx), by)
    else:
        city_r = math.nan
    return DemoResult(
        alpha=search.alpha,
        ap_raw=search.ap[0] if search.grid[0] == 0 else math.nan,
        ap_augmented=max(search.ap),
        zip_price_rel_error=float(np.median(rel)),
        moran_i=moran,
        moran_p=p,
        moran_shuffle_exceed=below,
        lam=lam,
        heldout_r=heldout_r,
        city_r=city_r,
        top_features=names[:5],
        avg_price_rank=names.index("avg_price") + 1 if "avg_price" in names else -1,
        zip_stats=zip_stats,
    )


def _zip_blocks(zips: Sequence[str], test: np.ndarray, city: SyntheticCity, side: int = 3) -> list[np.ndarray]:
    zside = math.ceil(math.sqrt(city.config.n_zips))
    groups: dict[tuple[int, int], list[int]] = {}
    for i in test.tolist():
        z = int(zips[i][1:])
        groups.setdefault(((z % zside) // side, (z // zside) // side), []).append(i)
    return [np.array(v) for _, v in sorted(groups.items())]
