"""Seeded synthetic city with planted car-income relationships.

Zips tile a square grid; each zip holds GPS points on a 25 m lattice with
six camera rotations per point. Every image receives a Poisson number of
parked cars whose classes are drawn from a zip-specific mixture tilted by
the zip's income. A noisy detector then reports most true cars plus some
spurious boxes, each with a raw score and a top-k class distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .ingest import BBox, DetectionBatch, GeoImage
from .spatial import EARTH_RADIUS_M
from .taxonomy import BODY_TYPES, CarClass, ClassTable

M_PER_DEG_LAT = math.pi * EARTH_RADIUS_M / 180.0
ROTATIONS = 6

_SYLLABLES = ("ka", "lo", "mi", "ra", "to", "ve", "su", "ne", "di", "zo", "pa", "ce")
_COUNTRIES = ("Japan", "Germany", "Korea", "Italy", "Sweden", "UK")
# rough body-type frequencies on the street, same order as BODY_TYPES
_BODY_FREQ = np.array([30, 8, 22, 10, 2, 4, 5, 3, 4, 6, 2, 4], float)
_BODY_PRICE = np.array([0, 0.25, 0.2, -0.2, 0.4, 0, -0.05, -0.1, 0, 0.1, -0.15, 0], float)
_BODY_MPG = np.array([29, 26, 22, 31, 25, 27, 21, 17, 18, 17, 19, 24], float)


@dataclass(frozen=True)
class SyntheticCityConfig:
    n_zips: int = 100
    images_per_zip: int = 120
    incomes: tuple[float, ...] | None = None
    price_income_coupling: float = 1.5
    # foreign-make preference for low/middle/high income terciles
    make_band_tilt: tuple[float, float, float] = (-0.3, 0.0, 0.3)
    cars_per_image: float = 2.0
    miss_rate: float = 0.1
    true_score_mean: float = 1.0
    true_score_sd: float = 0.8
    false_score_mean: float = -1.0
    false_score_sd: float = 0.8
    false_per_image: float = 1.0
    class_confidence: float = 7.0
    topk: int = 20
    n_classes: int = 400
    n_makes: int = 71
    image_size: tuple[int, int] = (640, 480)
    spacing_m: float = 25.0
    origin: tuple[float, float] = (41.8781, -87.6298)
    city_id: str = "synth"
    seed: int = 0

    def validate(self) -> None:
        if self.n_zips <= 0:
            raise ConfigError("n_zips must be positive")
        if self.images_per_zip <= 0:
            raise ConfigError("images_per_zip must be positive")
        if self.images_per_zip % ROTATIONS:
            raise ConfigError(f"images_per_zip must be a multiple of {ROTATIONS} camera rotations")
        if self.incomes is not None and len(self.incomes) != self.n_zips:
            raise ConfigError("incomes must give one value per zip")
        if self.n_classes <= 0 or not 0 < self.n_makes <= self.n_classes:
            raise ConfigError("need 0 < n_makes <= n_classes")
        if self.cars_per_image <= 0 or self.false_per_image < 0:
            raise ConfigError("car and false-box rates must be positive")
        if not 0 <= self.miss_rate < 1:
            raise ConfigError("miss_rate must be in [0, 1)")
        if self.topk <= 0 or self.true_score_sd <= 0 or self.false_score_sd <= 0:
            raise ConfigError("topk and score spreads must be positive")


@dataclass
class SyntheticCity:
    config: SyntheticCityConfig
    table: ClassTable
    images: list[GeoImage]
    detections: DetectionBatch
    is_true: np.ndarray
    truth_boxes: dict[str, list[BBox]]
    planted: dict[str, np.ndarray]
    ground_truth: list[dict] = field(default_factory=list)

    @property
    def zip_codes(self) -> list[str]:
        return [row["zip_code"] for row in self.ground_truth]


def synth_taxonomy(n_classes: int, n_makes: int, rng: np.random.Generator) -> ClassTable:
    """Random class table: makes with a country and price level, classes under them."""
    makes = []
    seen = set()
    while len(makes) < n_makes:
        name = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4)))).capitalize()
        if name not in seen:
            seen.add(name)
            makes.append(name)
    foreign = rng.random(n_makes) < 0.55
    country = [str(rng.choice(_COUNTRIES)) if f else "USA" for f in foreign]
    make_level = rng.normal(0, 0.35, n_makes)
    # every make gets at least one class, the rest are spread at random
    owner = np.concatenate([np.arange(n_makes), rng.integers(0, n_makes, n_classes - n_makes)])
    owner = np.sort(owner)
    body = rng.choice(len(BODY_TYPES), size=n_classes, p=_BODY_FREQ / _BODY_FREQ.sum())
    log_price = math.log(24_000) + make_level[owner] + _BODY_PRICE[body] + rng.normal(0, 0.3, n_classes)
    price = np.round(np.exp(log_price), 2)
    mpg = np.round(np.clip(_BODY_MPG[body] - 2.5 * (log_price - math.log(24_000)) + rng.normal(0, 1.5, n_classes), 10, 60), 1)
    start = rng.integers(1995, 2016, n_classes)
    classes = []
    per_make: dict[int, int] = {}
    for c in range(n_classes):
        m = int(owner[c])
        k = per_make.get(m, 0)
        per_make[m] = k + 1
        classes.append(
            CarClass(
                class_id=c,
                make=makes[m],
                model=f"{makes[m]} M{k}",
                submodel=f"{makes[m]} M{k} {BODY_TYPES[body[c]]}",
                year_range=(int(start[c]), int(start[c] + rng.integers(0, 5))),
                trim=("base", "LX", "EX", "sport")[int(rng.integers(0, 4))],
                body_type=BODY_TYPES[body[c]],
                price_usd=float(price[c]),
                mpg=float(mpg[c]),
                country=country[m],
                is_foreign=bool(foreign[m]),
            )
        )
    return ClassTable(tuple(classes))


def _zip_layout(cfg: SyntheticCityConfig):
    points = cfg.images_per_zip // ROTATIONS
    side = math.ceil(math.sqrt(points))
    zside = math.ceil(math.sqrt(cfg.n_zips))
    gap = side + 1
    zx = np.arange(cfg.n_zips) % zside
    zy = np.arange(cfg.n_zips) // zside
    px = np.arange(points) % side
    py = np.arange(points) // side
    gx = (zx[:, None] * gap + px[None]).ravel()
    gy = (zy[:, None] * gap + py[None]).ravel()
    return points, zside, gx, gy


def _incomes(cfg: SyntheticCityConfig, zside: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.incomes is not None:
        return np.asarray(cfg.incomes, float)
    zx = np.arange(cfg.n_zips) % zside
    zy = np.arange(cfg.n_zips) // zside
    # smooth east-west gradient plus a bump, so rich and poor zips cluster
    u = (zx + 0.5) / zside
    v = (zy + 0.5) / zside
    field_ = 1.2 * (u - 0.5) + 0.8 * np.exp(-((u - 0.3) ** 2 + (v - 0.7) ** 2) / 0.05)
    log_income = math.log(55_000) + 0.45 * field_ / field_.std() + rng.normal(0, 0.12, cfg.n_zips)
    return np.round(np.exp(log_income), 0)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def synth_city(config: SyntheticCityConfig) -> SyntheticCity:
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    table = synth_taxonomy(cfg.n_classes, cfg.n_makes, rng)
    points_per_zip, zside, gx, gy = _zip_layout(cfg)
    incomes = _incomes(cfg, zside, rng)
    W, H = cfg.image_size

    # class mixture per zip
    lp = np.log(table.price)
    zprice = (lp - lp.mean()) / lp.std()
    zinc = (np.log(incomes) - np.log(incomes).mean()) / (np.log(incomes).std() or 1.0)
    terciles = np.quantile(incomes, [1 / 3, 2 / 3]) if cfg.n_zips >= 3 else np.array([np.inf, np.inf])
    band = np.searchsorted(terciles, incomes, side="right")
    tilt = np.asarray(cfg.make_band_tilt, float)[band]
    base = np.log(rng.dirichlet(np.full(cfg.n_classes, 2.0)))
    logits = (base[None] + cfg.price_income_coupling * zinc[:, None] * zprice[None]
              + tilt[:, None] * table.foreign[None])
    mix = _softmax_rows(logits)

    # images
    lat0, lon0 = cfg.origin
    coslat = math.cos(math.radians(lat0))
    n_points = cfg.n_zips * points_per_zip
    point_zip = np.repeat(np.arange(cfg.n_zips), points_per_zip)
    lat = lat0 + gy * cfg.spacing_m / M_PER_DEG_LAT
    lon = lon0 + gx * cfg.spacing_m / (M_PER_DEG_LAT * coslat)
    zip_codes = [f"Z{z:05d}" for z in range(cfg.n_zips)]
    images = []
    for p in range(n_points):
        z = point_zip[p]
        for r in range(ROTATIONS):
            images.append(GeoImage(f"{zip_codes[z]}-P{p:06d}-R{r}", float(lat[p]), float(lon[p]), r,
                                   cfg.city_id, zip_codes[z], W, H))
    n_img = len(images)
    img_zip = np.repeat(point_zip, ROTATIONS)

    # planted cars
    density = cfg.cars_per_image * np.exp(rng.normal(0, 0.25, cfg.n_zips))
    n_cars = rng.poisson(density[img_zip])
    car_img = np.repeat(np.arange(n_img), n_cars)
    car_zip = img_zip[car_img]
    cum = np.cumsum(mix, axis=1)
    u = rng.random(len(car_img))
    car_class = np.minimum((cum[car_zip] < u[:, None]).sum(axis=1), cfg.n_classes - 1)

    # truth boxes: cars parked along the lower half of the frame
    tw = np.exp(rng.normal(math.log(0.16 * W), 0.3, len(car_img)))
    th = tw * np.clip(rng.normal(0.6, 0.08, len(car_img)), 0.35, 0.9)
    tx = rng.uniform(0.08 * W, 0.92 * W, len(car_img))
    ty = np.clip(rng.normal(0.66 * H, 0.05 * H, len(car_img)), th / 2 + 1, H - th / 2 - 1)

    # detector output for true cars
    seen = rng.random(len(car_img)) >= cfg.miss_rate
    d_img = car_img[seen]
    jit = lambda s: rng.normal(0, 0.04, seen.sum()) * s  # noqa: E731
    dw = tw[seen] * np.exp(rng.normal(0, 0.05, seen.sum()))
    dh = th[seen] * np.exp(rng.normal(0, 0.05, seen.sum()))
    dx = tx[seen] + jit(tw[seen])
    dy = ty[seen] + jit(th[seen])
    d_score = rng.normal(cfg.true_score_mean, cfg.true_score_sd, seen.sum())
    d_class = car_class[seen]

    # spurious boxes anywhere in the frame
    n_false = rng.poisson(cfg.false_per_image, n_img)
    f_img = np.repeat(np.arange(n_img), n_false)
    fw = np.exp(rng.uniform(math.log(20), math.log(0.5 * W), len(f_img)))
    fh = fw * rng.uniform(0.4, 1.2, len(f_img))
    fh = np.minimum(fh, H - 2)
    fx = rng.uniform(fw / 2, W - fw / 2)
    fy = rng.uniform(fh / 2, H - fh / 2)
    f_score = rng.normal(cfg.false_score_mean, cfg.false_score_sd, len(f_img))

    all_img = np.concatenate([d_img, f_img])
    is_true = np.concatenate([np.ones(len(d_img), bool), np.zeros(len(f_img), bool)])
    order = np.lexsort((np.arange(len(all_img)), all_img))
    all_img, is_true = all_img[order], is_true[order]
    x = np.concatenate([dx, fx])[order]
    y = np.concatenate([dy, fy])[order]
    w = np.concatenate([dw, fw])[order]
    h = np.concatenate([dh, fh])[order]
    score = np.concatenate([d_score, f_score])[order]
    true_class = np.concatenate([d_class, np.full(len(f_img), -1)])[order]
    # clamp boxes into the image
    x0, x1 = np.clip(x - w / 2, 0, W), np.clip(x + w / 2, 0, W)
    y0, y1 = np.clip(y - h / 2, 0, H), np.clip(y + h / 2, 0, H)
    x, y, w, h = (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0

    class_ids, class_probs, offsets = _classifier_output(true_class, cfg, rng)
    ids = np.array([images[i].image_id for i in all_img], dtype=object)
    detections = DetectionBatch(ids, x, y, w, h, score, np.full(len(ids), np.nan), offsets, class_ids, class_probs)

    truth_boxes: dict[str, list[BBox]] = {}
    for i, cx, cy, bw, bh in zip(car_img.tolist(), tx.tolist(), ty.tolist(), tw.tolist(), th.tolist()):
        truth_boxes.setdefault(images[i].image_id, []).append(BBox(cx, cy, bw, bh))

    planted = {"car_image": car_img, "car_class": car_class, "image_zip": img_zip, "point_zip": point_zip}
    truth = _ground_truth(table, zip_codes, incomes, density, car_zip, car_class, n_cars, img_zip, rng)
    return SyntheticCity(cfg, table, images, detections, is_true, truth_boxes, planted, truth)


def _classifier_output(true_class: np.ndarray, cfg: SyntheticCityConfig, rng: np.random.Generator):
    """Top-k softmax rows: a boost on the true class over Gumbel-ish noise."""
    n, C, k = len(true_class), cfg.n_classes, min(cfg.topk, cfg.n_classes)
    ids_out = np.empty((n, k), np.int64)
    probs_out = np.empty((n, k))
    step = 4096
    for s in range(0, n, step):
        tc = true_class[s:s + step]
        logits = rng.normal(0, 1.0, (len(tc), C))
        real = tc >= 0
        logits[np.flatnonzero(real), tc[real]] += cfg.class_confidence
        p = _softmax_rows(logits)
        top = np.argsort(-p, axis=1, kind="stable")[:, :k]
        ids_out[s:s + step] = top
        probs_out[s:s + step] = np.take_along_axis(p, top, axis=1)
    offsets = np.arange(n + 1, dtype=np.int64) * k
    return ids_out.ravel(), probs_out.ravel(), offsets


def _ground_truth(table, zip_codes, incomes, density, car_zip, car_class, n_cars, img_zip, rng):
    n_zips = len(zip_codes)
    rows = []
    images_per_zip = np.bincount(img_zip, minlength=n_zips)
    cars_per_zip = np.bincount(img_zip, weights=n_cars, minlength=n_zips)
    zinc = (np.log(incomes) - np.log(incomes).mean()) / (np.log(incomes).std() or 1.0)
    zden = (density - density.mean()) / (density.std() or 1.0)
    burglary = np.round(8.0 * np.exp(-0.45 * zinc + 0.25 * zden + rng.normal(0, 0.15, n_zips)), 4)
    crime = np.round(30.0 * np.exp(-0.35 * zinc + 0.3 * zden + rng.normal(0, 0.15, n_zips)), 4)
    for z in range(n_zips):
        cls = car_class[car_zip == z]
        if len(cls):
            avg_price = float(np.mean(table.price[cls]))
            avg_mpg = float(np.mean(table.mpg[cls]))
            pct_foreign = float(np.mean(table.foreign[cls]))
        else:
            avg_price = avg_mpg = pct_foreign = math.nan
        rows.append(
            {
                "zip_code": zip_codes[z],
                "median_income": float(incomes[z]),
                "burglary_rate": float(burglary[z]),
                "total_crime_rate": float(crime[z]),
                "avg_price": avg_price,
                "avg_mpg": avg_mpg,
                "pct_foreign": pct_foreign,
                "cars_per_image": float(cars_per_zip[z] / images_per_zip[z]),
                "n_cars": int(len(cls)),
            }
        )
    return rows


def synth_detections(n_records: int, n_images: int, n_classes: int = 400, topk: int = 20, seed: int = 0,
                     image_size: tuple[int, int] = (640, 480)) -> DetectionBatch:
    """Bulk calibrated detections with random boxes and top-k class rows.

    For load and determinism checks only; nothing is planted. Image ids are
    ``I0000000``-style and records arrive grouped by image.
    """
    if n_records <= 0 or n_images <= 0:
        raise ConfigError("need positive record and image counts")
    k = min(topk, n_classes)
    rng = np.random.default_rng(seed)
    W, H = image_size
    img = np.sort(rng.integers(0, n_images, n_records))
    names = np.array([f"I{i:07d}" for i in range(n_images)], dtype=object)
    w = rng.uniform(20, 0.4 * W, n_records)
    h = rng.uniform(20, 0.4 * H, n_records)
    x = rng.uniform(w / 2, W - w / 2)
    y = rng.uniform(h / 2, H - h / 2)
    # k distinct ids per row: an arithmetic walk with a stride coprime to n_classes
    strides = np.array([s for s in range(1, n_classes + 1) if math.gcd(s, n_classes) == 1])
    stride = rng.choice(strides, n_records)
    start = rng.integers(0, n_classes, n_records)
    ids = (start[:, None] + np.arange(k)[None] * stride[:, None]) % n_classes
    p = -np.sort(-rng.random((n_records, k)) ** 3, axis=1)
    p *= rng.uniform(0.5, 0.999, n_records)[:, None] / p.sum(axis=1, keepdims=True)
    offsets = np.arange(n_records + 1, dtype=np.int64) * k
    return DetectionBatch(names[img], x, y, w, h, rng.normal(0, 1, n_records), rng.random(n_records), offsets,
                          ids.ravel().astype(np.int64), p.ravel())
