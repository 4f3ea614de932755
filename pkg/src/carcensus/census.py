"""Expected car counts per image and their roll-up into region statistics.

For an image, the expected number of cars of class ``c`` is the sum over
detected boxes of ``P(car | box) * P(c | car, box)``. Region statistics sum
those expectations over the region's images and derive attribute averages
and shares from the summed per-class counts.

Top-k class distributions are aggregated as stored (not renormalized), so
the per-class mass of a region is generally below its expected car count.
Shares (make, body type, foreign) are taken relative to the class mass;
``cars_per_image`` is relative to the expected car count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, LookupFailure, StateError
from .ingest import DetectionBatch, DetectionRecord
from .taxonomy import BODY_TYPES, AttributeKind, ClassTable

UNASSIGNED = "__unassigned__"


def truncate_topk(distribution, k: int = 20, renormalize: bool = False) -> tuple[tuple[int, float], ...]:
    """Keep the ``k`` largest non-zero entries of a full class distribution.

    Ties at the cutoff go to the smaller class id. Retained probabilities
    are left as-is unless ``renormalize`` is set.
    """
    if k <= 0:
        raise ArgumentError(f"k must be positive, got {k}")
    p = np.asarray(distribution, float).ravel()
    if abs(p.sum() - 1.0) > 1e-6:
        raise ArgumentError(f"distribution sums to {p.sum()}, expected 1")
    order = np.argsort(-p, kind="stable")[:k]
    order = order[p[order] > 0]
    kept = p[order]
    if renormalize:
        kept = kept / kept.sum()
    return tuple(zip(order.tolist(), kept.tolist()))


@dataclass
class ClassExpectation:
    counts: dict[int, float] = field(default_factory=dict)
    car_mass: float = 0.0
    n_boxes: int = 0

    @property
    def class_mass(self) -> float:
        return math.fsum(self.counts.values())

    def __getitem__(self, class_id: int) -> float:
        return self.counts.get(class_id, 0.0)


def expected_class_count(detections: Iterable[DetectionRecord]) -> ClassExpectation:
    out = ClassExpectation()
    counts = out.counts
    car = []
    for det in detections:
        p_car = det.car_probability
        if p_car is None:
            raise StateError(f"detection in image {det.image_id} has no calibrated car probability")
        car.append(p_car)
        out.n_boxes += 1
        for cid, p in det.class_probs:
            counts[cid] = counts.get(cid, 0.0) + p_car * p
    out.car_mass = math.fsum(car)
    return out


def expected_attribute(expectation: ClassExpectation | Mapping[int, float], table: ClassTable, kind):
    """Expectation-weighted attribute.

    Numeric kinds give the weighted mean over classes with a known value
    (NaN when no such mass exists); categorical kinds give the expected mass
    per category.
    """
    kind = AttributeKind(kind)
    counts = expectation.counts if isinstance(expectation, ClassExpectation) else expectation
    ids = np.fromiter(counts.keys(), np.int64, len(counts))
    mass = np.fromiter(counts.values(), float, len(counts))
    table.check_ids(ids)
    if kind.numeric:
        vals = (table.price if kind is AttributeKind.PRICE else table.mpg)[ids]
        return _weighted_mean(vals, mass)
    hist: dict = {}
    for cid, m in zip(ids.tolist(), mass.tolist()):
        label = table.classes[cid].attribute(kind)
        hist[label] = hist.get(label, 0.0) + m
    return hist


def _weighted_mean(values: np.ndarray, weights: np.ndarray) -> float:
    known = ~np.isnan(values)
    den = math.fsum(weights[known])
    if den <= 0:
        return math.nan
    return math.fsum(values[known] * weights[known]) / den


# --------------------------------------------------------------------------- accumulation


class _Compensated:
    """Sparse Neumaier-compensated sums over sorted integer keys."""

    __slots__ = ("keys", "s", "c")

    def __init__(self):
        self.keys = np.zeros(0, np.int64)
        self.s = np.zeros(0)
        self.c = np.zeros(0)

    def add(self, keys: np.ndarray, values: np.ndarray) -> None:
        """Add ``values`` at unique, sorted ``keys``."""
        if len(keys) == 0:
            return
        pos = np.searchsorted(self.keys, keys)
        present = pos < len(self.keys)
        present[present] = self.keys[pos[present]] == keys[present]
        if not present.all():
            merged = np.union1d(self.keys, keys)
            s = np.zeros(len(merged))
            c = np.zeros(len(merged))
            old = np.searchsorted(merged, self.keys)
            s[old] = self.s
            c[old] = self.c
            self.keys, self.s, self.c = merged, s, c
            pos = np.searchsorted(self.keys, keys)
        s = self.s[pos]
        t = s + values
        big = np.abs(s) >= np.abs(values)
        self.c[pos] += np.where(big, (s - t) + values, (values - t) + s)
        self.s[pos] = t

    def merge(self, other: "_Compensated") -> None:
        self.add(other.keys, other.s)
        self.add(other.keys, other.c)

    def total(self) -> np.ndarray:
        return self.s + self.c


def _sum_by_key(keys: np.ndarray, weights: np.ndarray, key_space: int) -> tuple[np.ndarray, np.ndarray]:
    if key_space <= 1 << 23:
        sums = np.bincount(keys, weights=weights, minlength=key_space)
        hit = np.flatnonzero(np.bincount(keys, minlength=key_space))
        return hit, sums[hit]
    uniq, inv = np.unique(keys, return_inverse=True)
    return uniq, np.bincount(inv, weights=weights)


@dataclass
class RegionStats:
    region: str
    image_count: int
    detections: int
    total_expected_cars: float
    class_counts: dict[int, float]
    class_mass: float
    avg_price: float
    avg_mpg: float
    pct_foreign: float
    pct_by_make: dict[str, float]
    pct_by_body_type: dict[str, float]

    @property
    def cars_per_image(self) -> float:
        return self.total_expected_cars / self.image_count if self.image_count else math.nan

    def row(self, makes: Sequence[str]) -> dict:
        out = {
            "region": self.region,
            "image_count": self.image_count,
            "detections": self.detections,
            "total_expected_cars": self.total_expected_cars,
            "class_mass": self.class_mass,
            "cars_per_image": self.cars_per_image,
            "avg_price": self.avg_price,
            "avg_mpg": self.avg_mpg,
            "pct_foreign": self.pct_foreign,
        }
        for b in BODY_TYPES:
            out[f"body:{b}"] = self.pct_by_body_type.get(b, 0.0)
        for m in makes:
            out[f"make:{m}"] = self.pct_by_make.get(m, 0.0)
        return out


class RegionAccumulator:
    """Streaming per-region sums of expected class counts.

    ``image_regions`` maps every known image id to its region; detections of
    unknown images land in the ``UNASSIGNED`` bucket. Region rows are fixed
    at construction (sorted region ids), so accumulators built from the same
    metadata are mergeable regardless of which shard saw which records.
    """

    def __init__(self, image_regions: Mapping[str, str], n_classes: int):
        self.n_classes = int(n_classes)
        self.regions = sorted(set(image_regions.values()) | {UNASSIGNED})
        index = {r: i for i, r in enumerate(self.regions)}
        self.image_region = {iid: index[r] for iid, r in image_regions.items()}
        self.unassigned = index[UNASSIGNED]
        self.image_counts = np.bincount(
            np.fromiter(self.image_region.values(), np.int64, len(self.image_region)), minlength=len(self.regions)
        )
        self.classes = _Compensated()
        self.cars = _Compensated()
        self.det_counts = np.zeros(len(self.regions), np.int64)
        self.unassigned_images: set[str] = set()

    def _region_of(self, image_ids: np.ndarray) -> np.ndarray:
        get = self.image_region.get
        u = self.unassigned
        return np.fromiter((get(i, u) for i in image_ids), np.int64, len(image_ids))

    def add_batch(self, batch: DetectionBatch) -> None:
        n = len(batch)
        if n == 0:
            return
        car = batch.car_prob
        if np.isnan(car).any():
            i = int(np.flatnonzero(np.isnan(car))[0])
            raise StateError(f"detection in image {batch.image_ids[i]} has no calibrated car probability")
        region = self._region_of(batch.image_ids)
        if (region == self.unassigned).any():
            self.unassigned_images.update(batch.image_ids[region == self.unassigned].tolist())
        self.add_arrays(region, car, batch.offsets, batch.class_ids, batch.class_probs)

    def add_arrays(self, region: np.ndarray, car_prob: np.ndarray, offsets: np.ndarray,
                   class_ids: np.ndarray, class_probs: np.ndarray) -> None:
        """Columnar entry point: one region index and car probability per record."""
        n_reg = len(self.regions)
        if len(class_ids) and (class_ids.min() < 0 or class_ids.max() >= self.n_classes):
            bad = class_ids[(class_ids < 0) | (class_ids >= self.n_classes)][0]
            raise LookupFailure(f"class_id {bad} outside [0, {self.n_classes})")
        self.det_counts += np.bincount(region, minlength=n_reg)
        rk, rv = _sum_by_key(region, car_prob, n_reg)
        self.cars.add(rk, rv)
        counts = np.diff(offsets)
        owner = np.repeat(np.arange(len(region)), counts)
        keys = region[owner] * self.n_classes + class_ids
        ck, cv = _sum_by_key(keys, car_prob[owner] * class_probs, n_reg * self.n_classes)
        self.classes.add(ck, cv)

    def add_expectation(self, region: str, expectation: ClassExpectation) -> None:
        idx = self.regions.index(region) if region in self.regions else self.unassigned
        if expectation.counts:
            ids = np.array(sorted(expectation.counts), np.int64)
            vals = np.array([expectation.counts[i] for i in ids.tolist()])
            self.classes.add(idx * self.n_classes + ids, vals)
        self.cars.add(np.array([idx]), np.array([expectation.car_mass]))
        self.det_counts[idx] += expectation.n_boxes

    def merge(self, other: "RegionAccumulator") -> None:
        if other.regions != self.regions or other.n_classes != self.n_classes:
            raise ArgumentError("cannot merge accumulators built from different region sets")
        self.classes.merge(other.classes)
        self.cars.merge(other.cars)
        self.det_counts += other.det_counts
        self.unassigned_images |= other.unassigned_images

    def finalize(self, table: ClassTable, include_empty: bool = True) -> dict[str, RegionStats]:
        if self.n_classes != len(table):
            raise ArgumentError(f"accumulator has {self.n_classes} classes, table has {len(table)}")
        totals = self.classes.total()
        region_of_key = self.classes.keys // self.n_classes
        class_of_key = self.classes.keys % self.n_classes
        bounds = np.searchsorted(region_of_key, np.arange(len(self.regions) + 1))
        cars = np.zeros(len(self.regions))
        cars[self.cars.keys] = self.cars.total()
        out = {}
        for r, name in enumerate(self.regions):
            lo, hi = bounds[r], bounds[r + 1]
            if name == UNASSIGNED and hi == lo and self.det_counts[r] == 0:
                continue
            if not include_empty and self.image_counts[r] == 0 and self.det_counts[r] == 0:
                continue
            out[name] = _region_stats(
                name, int(self.image_counts[r]), int(self.det_counts[r]), float(cars[r]),
                class_of_key[lo:hi], totals[lo:hi], table,
            )
        return out


def _shares(codes: np.ndarray, mass: np.ndarray, labels: Sequence[str], total: float) -> dict[str, float]:
    if total <= 0:
        return {}
    sums = np.bincount(codes, weights=mass, minlength=len(labels))
    return {labels[i]: float(sums[i] / total) for i in np.flatnonzero(sums > 0)}


def _region_stats(name, n_images, n_dets, cars, ids, mass, table: ClassTable) -> RegionStats:
    class_mass = math.fsum(mass)
    return RegionStats(
        region=name,
        image_count=n_images,
        detections=n_dets,
        total_expected_cars=cars,
        class_counts=dict(zip(ids.tolist(), mass.tolist())),
        class_mass=class_mass,
        avg_price=_weighted_mean(table.price[ids], mass),
        avg_mpg=_weighted_mean(table.mpg[ids], mass),
        pct_foreign=math.fsum(mass[table.foreign[ids]]) / class_mass if class_mass > 0 else math.nan,
        pct_by_make=_shares(table.make_index[ids], mass, table.makes, class_mass),
        pct_by_body_type=_shares(table.body_index[ids], mass, BODY_TYPES, class_mass),
    )


def aggregate_region(
    expectations: Mapping[str, Iterable[ClassExpectation]], table: ClassTable
) -> dict[str, RegionStats]:
    """Roll per-image expectations, keyed by region, into region statistics.

    Every expectation counts as one image of its region, including empty
    ones. A key equal to ``UNASSIGNED`` collects images without a region.
    """
    groups = {r: list(v) for r, v in expectations.items()}
    fake_images = {f"{r}\x00{i}": r for r, v in groups.items() for i in range(len(v)) if r != UNASSIGNED}
    acc = RegionAccumulator(fake_images, len(table))
    for r, exps in groups.items():
        for e in exps:
            table.check_ids(np.fromiter(e.counts.keys(), np.int64, len(e.counts)))
            acc.add_expectation(r, e)
    if UNASSIGNED in groups:
        acc.image_counts[acc.unassigned] = len(groups[UNASSIGNED])
    return acc.finalize(table)


def aggregate_batches(
    batches: Iterable[DetectionBatch], image_regions: Mapping[str, str], table: ClassTable
) -> dict[str, RegionStats]:
    acc = RegionAccumulator(image_regions, len(table))
    for b in batches:
        acc.add_batch(b)
    return acc.finalize(table)


def aggregate_shards(
    shards: Sequence[Iterable[DetectionBatch]], image_regions: Mapping[str, str], table: ClassTable
) -> dict[str, RegionStats]:
    """Aggregate disjoint shards independently, then merge in shard order."""
    accs = []
    for shard in shards:
        acc = RegionAccumulator(image_regions, len(table))
        for b in shard:
            acc.add_batch(b)
        accs.append(acc)
    if not accs:
        return RegionAccumulator(image_regions, len(table)).finalize(table)
    head = accs[0]
    for acc in accs[1:]:
        head.merge(acc)
    return head.finalize(table)
