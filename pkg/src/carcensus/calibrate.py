"""Detector score calibration.

Three pieces live here:

* box overlap (IOU) and all-points average precision with greedy matching,
* a location/size histogram prior whose log-probability is added to the raw
  detector score with a learned weight ``alpha``,
* isotonic regression (pool adjacent violators) turning scores into
  probabilities.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ArgumentError, UndefinedStatistic
from .ingest import BBox

DEFAULT_BINS = 20
DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 10) for i in range(21))


# --------------------------------------------------------------------------- overlap


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between rows of ``a`` and ``b`` given as (x, y, w, h) centers."""
    a = np.asarray(a, float).reshape(-1, 4)
    b = np.asarray(b, float).reshape(-1, 4)
    ax0, ax1 = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    ay0, ay1 = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bx0, bx1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by0, by1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None])
    ih = np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return inter / union


def _box_array(boxes: Sequence[BBox]) -> np.ndarray:
    return np.array([(b.x_center, b.y_center, b.width, b.height) for b in boxes], float).reshape(-1, 4)


class DetectionMatcher:
    """Greedy detection-to-truth matching with cached per-image IOU matrices.

    Detections are given flat (``image_ids``, ``boxes``); scores are supplied
    per call so the same matcher can evaluate many re-scorings cheaply.
    Within an image, detections are visited by descending score (ties by
    input order) and each claims the unmatched truth with the highest IOU
    if that IOU reaches the threshold.
    """

    def __init__(self, image_ids: Sequence[str], boxes: np.ndarray, truths: Mapping[str, Sequence[BBox]],
                 iou_threshold: float = 0.5):
        if not 0 < iou_threshold < 1:
            raise ArgumentError(f"iou_threshold {iou_threshold} not in (0, 1)")
        self.threshold = iou_threshold
        self.n_truth = sum(len(v) for v in truths.values())
        image_ids = np.asarray(image_ids, dtype=object)
        boxes = np.asarray(boxes, float).reshape(-1, 4)
        self.n = len(image_ids)
        order = sorted(range(self.n), key=lambda i: image_ids[i])
        self.groups: list[tuple[np.ndarray, np.ndarray | None]] = []
        start = 0
        while start < self.n:
            key = image_ids[order[start]]
            stop = start
            while stop < self.n and image_ids[order[stop]] == key:
                stop += 1
            idx = np.array(order[start:stop], np.int64)
            t = truths.get(key, ())
            self.groups.append((idx, iou_matrix(boxes[idx], _box_array(t)) if len(t) else None))
            start = stop
        # image-id order of detections, used to make the global sort deterministic
        self.flat_order = np.array(order, np.int64)

    def match(self, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return per-detection (is_true_positive, matched IOU or NaN)."""
        scores = np.asarray(scores, float)
        tp = np.zeros(self.n, bool)
        matched_iou = np.full(self.n, np.nan)
        thr = self.threshold
        for idx, ious in self.groups:
            if ious is None:
                continue
            local = np.argsort(-scores[idx], kind="stable")
            taken = np.zeros(ious.shape[1], bool)
            for d in local:
                row = np.where(taken, -1.0, ious[d])
                j = int(np.argmax(row))
                if row[j] >= thr:
                    taken[j] = True
                    tp[idx[d]] = True
                    matched_iou[idx[d]] = row[j]
                    if taken.all():
                        break
        return tp, matched_iou

    def average_precision(self, scores: np.ndarray) -> float:
        if self.n_truth == 0:
            raise UndefinedStatistic("average precision undefined without ground-truth boxes")
        scores = np.asarray(scores, float)
        tp, _ = self.match(scores)
        order = self.flat_order[np.argsort(-scores[self.flat_order], kind="stable")]
        return _ap_from_sorted(tp[order], self.n_truth)


def _ap_from_sorted(tp: np.ndarray, n_truth: int) -> float:
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_truth
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _flatten(detections: Mapping[str, Sequence[tuple[float, BBox]]]):
    ids, scores, boxes = [], [], []
    for key in sorted(detections):
        for score, box in detections[key]:
            ids.append(key)
            scores.append(score)
            boxes.append((box.x_center, box.y_center, box.width, box.height))
    return ids, np.array(scores, float), np.array(boxes, float).reshape(-1, 4)


def average_precision(
    detections: Mapping[str, Sequence[tuple[float, BBox]]],
    truths: Mapping[str, Sequence[BBox]],
    iou_threshold: float = 0.5,
) -> float:
    """All-points interpolated AP.

    ``detections`` maps image id to ``(score, box)`` pairs, ``truths`` maps
    image id to ground-truth boxes.
    """
    ids, scores, boxes = _flatten(detections)
    return DetectionMatcher(ids, boxes, truths, iou_threshold).average_precision(scores)


# --------------------------------------------------------------------------- location prior


@dataclass(frozen=True)
class LocationPrior:
    counts: np.ndarray
    log_area_min: float
    log_area_max: float
    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ArgumentError("alpha must be non-negative")
        counts = np.array(self.counts, float)
        if counts.ndim != 3 or len(set(counts.shape)) != 1:
            raise ArgumentError(f"prior counts must be a cube, got shape {counts.shape}")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def with_alpha(self, alpha: float) -> "LocationPrior":
        return LocationPrior(self.counts, self.log_area_min, self.log_area_max, alpha)

    def bin_index(self, x, y, w, h, width_px, height_px) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        b = self.bins
        xn = np.asarray(x, float) / width_px
        yn = np.asarray(y, float) / height_px
        la = np.log(np.asarray(w, float) * np.asarray(h, float))
        ix = np.clip(np.floor(xn * b), 0, b - 1).astype(np.int64)
        iy = np.clip(np.floor(yn * b), 0, b - 1).astype(np.int64)
        span = self.log_area_max - self.log_area_min
        if span > 0:
            ia = np.clip(np.floor((la - self.log_area_min) / span * b), 0, b - 1).astype(np.int64)
        else:
            ia = np.zeros(np.shape(la), np.int64)
        return ix, iy, ia

    def log_prob(self, x, y, w, h, width_px, height_px) -> np.ndarray:
        ix, iy, ia = self.bin_index(x, y, w, h, width_px, height_px)
        return np.log(self.counts[ix, iy, ia] / self.counts.sum())

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "location_prior",
                "bins": self.bins,
                "log_area_min": self.log_area_min,
                "log_area_max": self.log_area_max,
                "alpha": self.alpha,
                "counts": self.counts.ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LocationPrior":
        d = json.loads(text)
        if d.get("kind") != "location_prior":
            raise ArgumentError("not a location prior file")
        b = int(d["bins"])
        return cls(np.array(d["counts"], float).reshape(b, b, b), d["log_area_min"], d["log_area_max"], d["alpha"])


def fit_location_prior(
    boxes: Sequence[tuple[BBox, tuple[int, int]]], bins_per_axis: int = DEFAULT_BINS, pseudo_count: float = 1.0
) -> LocationPrior:
    """Histogram of normalized box centers and log-area, one pseudo count per bin.

    ``boxes`` holds ``(box, (width_px, height_px))`` pairs. The log-area range
    is taken from the training boxes; values outside it clamp to edge bins.
    """
    if not isinstance(bins_per_axis, (int, np.integer)) or bins_per_axis <= 0:
        raise ArgumentError(f"bins_per_axis must be a positive integer, got {bins_per_axis}")
    b = int(bins_per_axis)
    counts = np.full((b, b, b), float(pseudo_count))
    if not boxes:
        return LocationPrior(counts, 0.0, 0.0)
    arr = np.array([(bx.x_center, bx.y_center, bx.width, bx.height, d[0], d[1]) for bx, d in boxes], float)
    la = np.log(arr[:, 2] * arr[:, 3])
    prior = LocationPrior(counts, float(la.min()), float(la.max()))
    ix, iy, ia = prior.bin_index(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5])
    np.add.at(counts, (ix, iy, ia), 1.0)
    return LocationPrior(counts, prior.log_area_min, prior.log_area_max)


def prior_log_prob(prior: LocationPrior, bbox: BBox, image_dims: tuple[int, int]) -> float:
    return float(prior.log_prob(bbox.x_center, bbox.y_center, bbox.width, bbox.height, *image_dims))


def augment_score(prior: LocationPrior, raw_score: float, bbox: BBox, image_dims: tuple[int, int]) -> float:
    return raw_score + prior.alpha * prior_log_prob(prior, bbox, image_dims)


def augment_scores(prior: LocationPrior, raw_scores, boxes: np.ndarray, dims: np.ndarray, alpha=None) -> np.ndarray:
    """Vectorized score augmentation; ``boxes`` is (n, 4) centers, ``dims`` (n, 2)."""
    boxes = np.asarray(boxes, float).reshape(-1, 4)
    dims = np.broadcast_to(np.asarray(dims, float), (len(boxes), 2))
    a = prior.alpha if alpha is None else alpha
    lp = prior.log_prob(boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3], dims[:, 0], dims[:, 1])
    return np.asarray(raw_scores, float) + a * lp


@dataclass
class AlphaSearch:
    alpha: float
    grid: tuple[float, ...]
    ap: tuple[float, ...] = field(default=())


def alpha_search(
    prior: LocationPrior,
    detections: Mapping[str, Sequence[tuple[float, BBox]]],
    truths: Mapping[str, Sequence[BBox]],
    image_dims: Mapping[str, tuple[int, int]] | tuple[int, int],
    iou_threshold: float = 0.5,
    alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
) -> AlphaSearch:
    """Grid search for the prior weight maximizing validation AP.

    Ties go to the smaller alpha. ``image_dims`` is one ``(w, h)`` for all
    images or a per-image mapping.
    """
    grid = tuple(sorted(float(a) for a in alpha_grid))
    if not grid:
        raise ArgumentError("empty alpha grid")
    if any(a < 0 for a in grid):
        raise ArgumentError("alpha grid values must be non-negative")
    ids, scores, boxes = _flatten(detections)
    if isinstance(image_dims, Mapping):
        dims = np.array([image_dims[i] for i in ids], float).reshape(-1, 2)
    else:
        dims = np.tile(np.asarray(image_dims, float), (len(ids), 1))
    matcher = DetectionMatcher(ids, boxes, truths, iou_threshold)
    if len(grid) == 1:
        return AlphaSearch(grid[0], grid, (matcher.average_precision(augment_scores(prior, scores, boxes, dims, grid[0])),))
    aps = tuple(matcher.average_precision(augment_scores(prior, scores, boxes, dims, a)) for a in grid)
    best = 0
    for i, ap in enumerate(aps):
        if ap > aps[best]:
            best = i
    return AlphaSearch(grid[best], grid, aps)


def learn_alpha(prior, detections, truths, image_dims, iou_threshold=0.5, alpha_grid=DEFAULT_ALPHA_GRID) -> float:
    return alpha_search(prior, detections, truths, image_dims, iou_threshold, alpha_grid).alpha


# --------------------------------------------------------------------------- isotonic


@dataclass(frozen=True)
class IsotonicModel:
    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, float)
        v = np.asarray(self.values, float)
        if bp.shape != v.shape or bp.ndim != 1 or len(bp) == 0:
            raise ArgumentError("breakpoints and values must be equal-length non-empty vectors")
        if np.any(np.diff(bp) <= 0):
            raise ArgumentError("breakpoints must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise ArgumentError("values must be non-decreasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", v)

    def __call__(self, scores):
        return apply_isotonic(self, scores)

    def to_json(self) -> str:
        return json.dumps({"kind": "isotonic", "breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "IsotonicModel":
        d = json.loads(text)
        if d.get("kind") != "isotonic":
            raise ArgumentError("not an isotonic model file")
        return cls(np.array(d["breakpoints"], float), np.array(d["values"], float))


def pava(y: np.ndarray, w: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pool adjacent violators on an ordered sequence.

    Returns ``(block_starts, block_values, block_weights)``; the fitted value
    of element ``i`` is the value of the block containing it.
    """
    y = np.asarray(y, float)
    w = np.ones_like(y) if w is None else np.asarray(w, float)
    starts: list[int] = []
    vals: list[float] = []
    wts: list[float] = []
    for i in range(len(y)):
        starts.append(i)
        vals.append(y[i])
        wts.append(w[i])
        while len(vals) > 1 and vals[-2] > vals[-1]:
            wt = wts[-2] + wts[-1]
            v = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / wt
            starts.pop()
            vals.pop()
            wts.pop()
            vals[-1] = v
            wts[-1] = wt
    return np.array(starts, np.int64), np.array(vals), np.array(wts)


def fit_isotonic(scores, labels) -> IsotonicModel:
    """Least-squares non-decreasing fit of labels on scores.

    Equal scores are merged first (label mean, weighted by multiplicity);
    each resulting block is keyed by its smallest score.
    """
    scores = np.asarray(scores, float).ravel()
    labels = np.asarray(labels, float).ravel()
    if len(scores) == 0:
        raise ArgumentError("isotonic fit needs at least one (score, label) pair")
    if len(scores) != len(labels):
        raise ArgumentError("scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ArgumentError("labels must be 0 or 1")
    uniq, inverse = np.unique(scores, return_inverse=True)
    weight = np.bincount(inverse).astype(float)
    mean = np.bincount(inverse, weights=labels) / weight
    starts, vals, _ = pava(mean, weight)
    return IsotonicModel(uniq[starts], vals)


def apply_isotonic(model: IsotonicModel, score):
    """Step-function evaluation with clamping at both ends."""
    idx = np.searchsorted(model.breakpoints, np.asarray(score, float), side="right") - 1
    out = model.values[np.clip(idx, 0, len(model.values) - 1)]
    return float(out) if np.ndim(out) == 0 else out


def label_detections(
    image_ids: Sequence[str], scores, boxes: np.ndarray, truths: Mapping[str, Sequence[BBox]],
    iou_threshold: float = 0.5,
) -> np.ndarray:
    """Binary car/no-car labels for calibration from greedy IOU matching."""
    tp, _ = DetectionMatcher(image_ids, boxes, truths, iou_threshold).match(np.asarray(scores, float))
    return tp.astype(np.int64)

