"""Training-set samplers for matching product shots to street-level crops.

Resolution of a box is the geometric mean of its width and height.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .calibrate import DetectionMatcher, iou_matrix
from .errors import ArgumentError, SamplingError
from .ingest import BBox

CROP_BUDGET = 10_000
_POINT_TOL = 1e-9


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, float)
        probs = np.asarray(self.probs, float)
        if len(edges) != len(probs) + 1:
            raise ArgumentError("need one more edge than probabilities")
        if np.any(np.diff(edges) <= 0):
            raise ArgumentError("bin edges must be strictly increasing")
        if (probs < 0).any() or abs(probs.sum() - 1) > 1e-9:
            raise ArgumentError("bin probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "probs", probs)

    @property
    def bins(self) -> int:
        return len(self.probs)

    def bin_of(self, values) -> np.ndarray:
        """Bin index per value; the last bin is closed on the right."""
        idx = np.searchsorted(self.edges, np.asarray(values, float), side="right") - 1
        return np.clip(idx, 0, self.bins - 1)

    def frequencies(self, values) -> np.ndarray:
        return np.bincount(self.bin_of(values), minlength=self.bins) / len(values)

    def to_json(self) -> str:
        return json.dumps({"kind": type(self).__name__, "pairs": [[e, p] for e, p in zip(self.edges.tolist(), self.probs.tolist() + [0.0])]})

    @classmethod
    def from_json(cls, text: str):
        d = json.loads(text)
        if d.get("kind") != cls.__name__:
            raise ArgumentError(f"not a {cls.__name__} file")
        pairs = np.array(d["pairs"], float)
        return cls(pairs[:, 0], pairs[:-1, 1])


class ResolutionHistogram(Histogram):
    pass


class IouHistogram(Histogram):
    pass


def box_resolution(boxes: Sequence[BBox]) -> np.ndarray:
    return np.array([math.sqrt(b.width * b.height) for b in boxes], float)


def fit_resolution_hist(boxes: Sequence[BBox], bins: int = 35) -> ResolutionHistogram:
    """Equal-width histogram over [min r, max r].

    Identical resolutions get a 1-pixel-wide range around the value.
    """
    if len(boxes) == 0:
        raise ArgumentError("resolution histogram needs at least one box")
    if bins <= 0:
        raise ArgumentError("bins must be positive")
    r = box_resolution(boxes)
    lo, hi = float(r.min()), float(r.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.bincount(np.clip(np.searchsorted(edges, r, side="right") - 1, 0, bins - 1), minlength=bins)
    return ResolutionHistogram(edges, counts / counts.sum())


def sample_resolution(hist: Histogram, seed=None, size: int | None = None):
    """Pick a bin by probability, then a value uniformly within it."""
    rng = _rng(seed)
    n = 1 if size is None else size
    b = rng.choice(hist.bins, size=n, p=hist.probs)
    lo, hi = hist.edges[b], hist.edges[b + 1]
    out = lo + rng.random(n) * (hi - lo)
    return float(out[0]) if size is None else out


def fit_iou_hist(
    detections: Mapping[str, Sequence[tuple[float, BBox]]],
    truths: Mapping[str, Sequence[BBox]],
    threshold: float = 0.5,
    bins: int = 10,
) -> IouHistogram:
    """Histogram over [0, 1] of IOUs between greedily matched detections and truths."""
    ids, scores, boxes = [], [], []
    for key in sorted(detections):
        for s, b in detections[key]:
            ids.append(key)
            scores.append(s)
            boxes.append((b.x_center, b.y_center, b.width, b.height))
    matcher = DetectionMatcher(ids, np.array(boxes, float).reshape(-1, 4), truths, threshold)
    tp, matched = matcher.match(np.array(scores, float))
    vals = matched[tp]
    if len(vals) == 0:
        raise ArgumentError("no matched detection/truth pairs")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.bincount(np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, bins - 1), minlength=bins)
    return IouHistogram(edges, counts / counts.sum())


def _in_bin(v: np.ndarray, lo: float, hi: float, last: bool) -> np.ndarray:
    return (v >= lo) & ((v <= hi) if last else (v < hi))


def sample_crop(
    truth: BBox, image_dims: tuple[int, int], hist: IouHistogram, seed=None, budget: int = CROP_BUDGET
) -> BBox:
    """Jitter ``truth`` until its IOU with the truth lands in a sampled bin.

    Proposals shift the center by up to half the box size and rescale each
    side log-uniformly in [0.5, 2]; a per-proposal magnitude drawn from
    U(0, 1) shrinks both so near-identity crops are reachable. Proposals are
    clamped to the image before their IOU is measured. A bin that is
    effectively the point IOU = 1 can only be met by the truth itself, which
    is returned directly.
    """
    rng = _rng(seed)
    width_px, height_px = image_dims
    truth = truth.clamp(width_px, height_px)
    b = int(rng.choice(hist.bins, p=hist.probs))
    lo, hi = float(hist.edges[b]), float(hist.edges[b + 1])
    last = b == hist.bins - 1
    if last and lo >= 1.0 - _POINT_TOL:
        return truth
    ref = np.array([[truth.x_center, truth.y_center, truth.width, truth.height]])
    used = 0
    batch = 512
    while used < budget:
        n = min(batch, budget - used)
        used += n
        t = rng.random(n)
        dx = t * rng.uniform(-0.5, 0.5, n) * truth.width
        dy = t * rng.uniform(-0.5, 0.5, n) * truth.height
        sw = np.exp(t * rng.uniform(math.log(0.5), math.log(2.0), n))
        sh = np.exp(t * rng.uniform(math.log(0.5), math.log(2.0), n))
        cx, cy = truth.x_center + dx, truth.y_center + dy
        w, h = truth.width * sw, truth.height * sh
        x0 = np.clip(cx - w / 2, 0, width_px)
        x1 = np.clip(cx + w / 2, 0, width_px)
        y0 = np.clip(cy - h / 2, 0, height_px)
        y1 = np.clip(cy + h / 2, 0, height_px)
        valid = (x1 > x0) & (y1 > y0)
        props = np.column_stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0])
        ious = iou_matrix(props, ref)[:, 0]
        ok = np.flatnonzero(valid & _in_bin(ious, lo, hi, last))
        if len(ok):
            i = ok[0]
            return BBox.from_corners(float(x0[i]), float(y0[i]), float(x1[i]), float(y1[i]))
    raise SamplingError(f"no crop with IOU in [{lo:g}, {hi:g}{']' if last else ')'} after {budget} proposals")


def rebalance(streetview_ids: Sequence, product_ids: Sequence, factor: int = 10, seed=None) -> list:
    """Repeat each street-level id ``factor`` times and append product ids once.

    Without a seed the result is the plain concatenation; with one it is a
    seeded shuffle of that multiset.
    """
    if factor < 1:
        raise ArgumentError("factor must be >= 1")
    out = [i for i in streetview_ids for _ in range(factor)] + list(product_ids)
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(out))
        out = [out[i] for i in perm]
    return out
