"""Command-line entry point: ``carcensus <subcommand> ...``.

Every successful run writes its outputs atomically and a
``<output>.manifest.json`` next to each one. Failures print a single
``error=<kind> command=<cmd> message="..."`` line on stderr and exit 1;
usage errors exit 2.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import adapt, calibrate as cal, census, demographics as demo, ingest, pipeline, spatial
from .errors import ArgumentError, CensusError
from .synth import SyntheticCityConfig, synth_city
from .taxonomy import BODY_TYPES, dump_taxonomy, load_taxonomy

TARGETS = {"income": "median_income", "burglary": "burglary_rate", "crime": "total_crime_rate"}


# --------------------------------------------------------------------------- io helpers


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@contextlib.contextmanager
def atomic_write(path, mode: str = "w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8", newline=None if "b" in mode else "") as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    with atomic_write(path) as f:
        f.write(text)


class Run:
    """Collects inputs/outputs of one subcommand and writes the manifests."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.start = time.perf_counter()

    def input(self, path):
        if path is not None:
            self.inputs.append(str(path))
        return path

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def finish(self) -> None:
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        base = {
            "command": self.args.command,
            "argv": self.argv,
            "inputs": {p: sha256(p) for p in self.inputs},
            "config": config,
            "seed": config.get("seed"),
            "version": __version__,
        }
        outputs = {p: sha256(p) for p in self.outputs}
        duration = time.perf_counter() - self.start
        for p in self.outputs:
            manifest = dict(base, outputs=outputs, duration_s=round(duration, 6))
            write_text(f"{p}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _table_text(rows, columns=None) -> str:
    buf = io.StringIO()
    ingest.write_table(rows, buf, columns)
    return buf.getvalue()


def _load_table(path):
    with open(path, encoding="utf-8") as f:
        return load_taxonomy(f)


def _images(path) -> list[ingest.GeoImage]:
    return list(ingest.read_images(path))


def _read_batch(path) -> ingest.DetectionBatch:
    return ingest.DetectionBatch.concat(list(ingest.read_detection_batches(path)))


def _dims(args, run) -> dict | None:
    if getattr(args, "images", None):
        return pipeline.image_dims(_images(run.input(args.images)))
    return None


def _prior(args, run) -> cal.LocationPrior | None:
    if getattr(args, "prior", None):
        return cal.LocationPrior.from_json(Path(run.input(args.prior)).read_text())
    return None


def _need(value, flag: str):
    if value is None:
        raise ArgumentError(f"{flag} is required")
    return value


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ArgumentError(f"bad number list {text!r}") from None


def _stats_from_row(row: dict) -> census.RegionStats:
    f = lambda k: float(row[k]) if row.get(k, "") != "" else math.nan  # noqa: E731
    return census.RegionStats(
        region=row["region"],
        image_count=int(row["image_count"]),
        detections=int(row["detections"]),
        total_expected_cars=f("total_expected_cars"),
        class_counts={},
        class_mass=f("class_mass"),
        avg_price=f("avg_price"),
        avg_mpg=f("avg_mpg"),
        pct_foreign=f("pct_foreign"),
        pct_by_make={k[5:]: float(v) for k, v in row.items() if k.startswith("make:") and v and float(v) > 0},
        pct_by_body_type={k[5:]: float(v) for k, v in row.items() if k.startswith("body:") and v and float(v) > 0},
    )


def _features_file(path) -> tuple[list[str], list[str], np.ndarray]:
    rows = ingest.read_table(path)
    if not rows:
        raise ArgumentError(f"{path}: no feature rows")
    names = [c for c in rows[0] if c != "region"]
    X = np.array([[float(r[c]) if r[c] != "" else math.nan for c in names] for r in rows], float)
    return [r["region"] for r in rows], names, X


def _truth_map(path, target: str) -> dict[str, float]:
    col = TARGETS[target]
    out = {}
    for row in ingest.read_table(path):
        key = row.get("region") or row.get("zip_code") or row.get("city_id")
        if key is None or col not in row:
            raise ArgumentError(f"{path}: needs a region/zip_code column and {col}")
        if row[col] != "":
            out[key] = float(row[col])
    return out


def _join(regions, X, truth: dict[str, float]):
    keep = [i for i, r in enumerate(regions) if r in truth and np.isfinite(X[i]).all()]
    return [regions[i] for i in keep], X[keep], np.array([truth[regions[i]] for i in keep])


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


# --------------------------------------------------------------------------- commands


def cmd_synth(args, run):
    cfg = SyntheticCityConfig(
        n_zips=args.zips,
        images_per_zip=args.images_per_zip,
        price_income_coupling=args.coupling,
        class_confidence=args.class_confidence,
        false_per_image=args.false_per_image,
        topk=args.topk,
        seed=args.seed,
    )
    city = synth_city(cfg)
    out = Path(args.output)
    files = {}
    buf = io.StringIO()
    dump_taxonomy(city.table, buf)
    files["taxonomy.tsv"] = buf.getvalue()
    buf = io.StringIO()
    ingest.write_images(city.images, buf)
    files["images.tsv"] = buf.getvalue()
    buf = io.StringIO()
    ingest.write_detections(city.detections, buf)
    files["detections.tsv"] = buf.getvalue()
    buf = io.StringIO()
    ingest.write_truth_boxes(city.truth_boxes, buf)
    files["truth_boxes.tsv"] = buf.getvalue()
    files["ground_truth.tsv"] = _table_text(city.ground_truth)
    for name, text in files.items():
        write_text(run.output(out / name), text)
    print(f"images={len(city.images)} detections={len(city.detections)} zips={cfg.n_zips}")


def cmd_fit_prior(args, run):
    truths = ingest.read_truth_boxes(run.input(args.input))
    dims = _need(_dims(args, run), "--images")
    boxes = [(b, dims[iid]) for iid in sorted(truths) for b in truths[iid]]
    prior = cal.fit_location_prior(boxes, args.bins)
    write_text(run.output(args.output), prior.to_json() + "\n")
    print(f"boxes={len(boxes)} bins={prior.bins ** 3} log_area=[{prior.log_area_min:.4f},{prior.log_area_max:.4f}]")


def cmd_learn_alpha(args, run):
    prior = _need(_prior(args, run), "--prior")
    dims = _need(_dims(args, run), "--images")
    batch = _read_batch(run.input(args.input))
    truths = ingest.read_truth_boxes(run.input(_need(args.truths, "--truths")))
    grid = _floats(args.alpha_grid) if args.alpha_grid else cal.DEFAULT_ALPHA_GRID
    search = cal.alpha_search(prior, pipeline.scored(batch, batch.raw_score), truths,
                              {k: dims[k] for k in set(batch.image_ids)}, args.iou, grid)
    write_text(run.output(args.output), prior.with_alpha(search.alpha).to_json() + "\n")
    for a, ap in zip(search.grid, search.ap):
        print(f"alpha={a:g} ap={ap:.6f}")
    print(f"selected_alpha={search.alpha:g}")


def cmd_fit_calibration(args, run):
    batch = _read_batch(run.input(args.input))
    truths = ingest.read_truth_boxes(run.input(_need(args.truths, "--truths")))
    model = pipeline.fit_calibration(batch, truths, _prior(args, run), _dims(args, run), args.iou)
    write_text(run.output(args.output), model.to_json() + "\n")
    print(f"pairs={len(batch)} blocks={len(model.values)}")


def cmd_calibrate(args, run):
    model = cal.IsotonicModel.from_json(Path(run.input(_need(args.model, "--model"))).read_text())
    prior = _prior(args, run)
    dims = _dims(args, run)
    if prior is not None and prior.alpha > 0 and dims is None:
        raise ArgumentError("--images is required with a non-zero prior weight")
    n = 0
    with atomic_write(run.output(args.output)) as out:
        for batch in ingest.read_detection_batches(run.input(args.input)):
            calibrated = pipeline.apply_calibration(batch, model, prior, dims)
            if args.topk < ingest.MAX_TOPK:
                calibrated = _truncate_batch(calibrated, args.topk)
            n += ingest.write_detections(calibrated, out)
    print(f"records={n}")


def _truncate_batch(batch: ingest.DetectionBatch, k: int) -> ingest.DetectionBatch:
    recs = []
    for r in batch.records():
        pairs = sorted(r.class_probs, key=lambda t: (-t[1], t[0]))[:k]
        recs.append(ingest.DetectionRecord(r.image_id, r.bbox, r.raw_score, r.car_probability, tuple(pairs)))
    return ingest.DetectionBatch.from_records(recs)


def cmd_eval_ap(args, run):
    batch = _read_batch(run.input(args.input))
    truths = ingest.read_truth_boxes(run.input(_need(args.truths, "--truths")))
    prior = _prior(args, run)
    scores = pipeline.effective_scores(batch, prior, _dims(args, run))
    matcher = cal.DetectionMatcher(batch.image_ids, pipeline.batch_boxes(batch), truths, args.iou)
    ap = matcher.average_precision(scores)
    text = f"ap={ap:.10g}\niou_threshold={args.iou:g}\ndetections={len(batch)}\ntruths={matcher.n_truth}\n"
    if args.output:
        write_text(run.output(args.output), text)
    print(text, end="")


def _aggregate_shard(path, start, stop, regions, n_classes):
    acc = census.RegionAccumulator(regions, n_classes)
    for batch in ingest.read_detection_batches(path, start=start, stop=stop):
        acc.add_batch(batch)
    return acc


def aggregate_file(path, regions: dict[str, str], table, threads: int = 1) -> dict[str, census.RegionStats]:
    """Aggregate a detection file, sharded over processes by byte range."""
    shards = ingest.shard_offsets(path, max(1, threads))
    if len(shards) <= 1:
        return census.aggregate_batches(ingest.read_detection_batches(path), regions, table)
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_aggregate_shard, str(path), a, b, regions, len(table)) for a, b in shards]
        accs = [f.result() for f in futures]
    head = accs[0]
    for acc in accs[1:]:
        head.merge(acc)
    return head.finalize(table)


def cmd_aggregate(args, run):
    table = _load_table(run.input(_need(args.taxonomy, "--taxonomy")))
    images = _images(run.input(_need(args.images, "--images")))
    regions = pipeline.region_map(images, args.by)
    stats = aggregate_file(run.input(args.input), regions, table, args.threads)
    makes = table.makes
    rows = []
    coords = pipeline.point_regions(images)[1] if args.by == "point" else {}
    for name in sorted(stats):
        row = stats[name].row(makes)
        if args.by == "point" and name in coords:
            row["lat"], row["lon"] = coords[name]
            row["value"] = row["avg_price"]
        rows.append(row)
    columns = list(rows[0]) if rows else ["region"]
    if args.by == "point":
        columns = ["region", "lat", "lon", "value"] + [c for c in columns if c not in ("region", "lat", "lon", "value")]
    write_text(run.output(args.output), _table_text(rows, columns))
    unassigned = stats.get(census.UNASSIGNED)
    print(f"regions={len([r for r in stats if r != census.UNASSIGNED])} "
          f"unassigned_detections={unassigned.detections if unassigned else 0}")


def _pattern(path, value_column: str | None) -> spatial.PointPattern:
    rows = ingest.read_table(path)
    if not rows:
        raise ArgumentError(f"{path}: no points")
    col = value_column or ("value" if "value" in rows[0] else "avg_price")
    rows = [r for r in rows if r.get(col, "") not in ("", "nan")]
    return spatial.PointPattern([float(r["lat"]) for r in rows], [float(r["lon"]) for r in rows],
                                [float(r[col]) for r in rows])


def cmd_moran(args, run):
    pattern = _pattern(run.input(args.input), args.value_column)
    weights = spatial.build_weights(pattern, args.weights)
    if args.row_standardize:
        weights = weights.row_standardized()
    result = {
        "n": len(pattern),
        "weights": weights.scheme,
        "morans_i": spatial.morans_i(pattern, weights),
        "expected_i": spatial.expected_morans_i(len(pattern)),
    }
    if args.permutations:
        if args.seed is None:
            raise ArgumentError("--seed is required with --permutations")
        result["permutations"] = args.permutations
        result["seed"] = args.seed
        result["p_value"] = spatial.morans_i_significance(pattern, weights, args.permutations, args.seed)
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in result.items())
    if args.output:
        write_text(run.output(args.output), text)
    print(text, end="")


def cmd_gistar(args, run):
    pattern = _pattern(run.input(args.input), args.value_column)
    weights = spatial.build_weights(pattern, args.weights)
    z = spatial.getis_ord_gistar(pattern, weights)
    labels = spatial.classify_clusters(z, args.hot, args.cold)
    rows = [{"lat": la, "lon": lo, "value": v, "z": zz, "label": lab}
            for la, lo, v, zz, lab in zip(pattern.lat.tolist(), pattern.lon.tolist(), pattern.values.tolist(),
                                          z.tolist(), labels.tolist())]
    write_text(run.output(args.output), _table_text(rows, ["lat", "lon", "value", "z", "label"]))
    counts = {k: int(np.sum(labels == k)) for k in (spatial.HOT, spatial.COLD, spatial.NONE)}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_features(args, run):
    rows = [r for r in ingest.read_table(run.input(args.input)) if r["region"] != census.UNASSIGNED]
    stats = [_stats_from_row(r) for r in rows]
    stats = [s for s in stats if s.class_mass > 0 and s.total_expected_cars > 0]
    schema = demo.FeatureSchema.from_stats(stats, args.makes)
    X = demo.feature_matrix(stats, schema)
    out = [{"region": s.region, **dict(zip(schema.names, x.tolist()))} for s, x in zip(stats, X)]
    write_text(run.output(args.output), _table_text(out, ["region", *schema.names]))
    print(f"regions={len(stats)} dim={schema.dim}")


def _schema_from_names(names: Sequence[str]) -> dict:
    makes = [n[5:] for n in names if n.startswith("make:") and n != f"make:{demo.OTHER_MAKE}"]
    bodies = [n[5:] for n in names if n.startswith("body:")]
    return {"makes": makes, "body_types": bodies or list(BODY_TYPES)}


def cmd_train(args, run):
    regions, names, X = _features_file(run.input(args.input))
    truth = _truth_map(run.input(_need(args.truth, "--truth")), args.target)
    regions, X, y = _join(regions, X, truth)
    train, test = demo.train_test_split(len(y), args.train_fraction, args.seed)
    grid = _floats(args.lambda_grid) if args.lambda_grid else list(pipeline.DEFAULT_LAMBDA_GRID)
    lam = demo.select_lambda(X[train], y[train], grid, folds=min(args.folds, len(train)), seed=args.seed)
    model = demo.fit_ridge(X[train], y[train], lam, names, _schema_from_names(names))
    payload = json.loads(model.to_json())
    payload["target"] = args.target
    payload["train_regions"] = [regions[i] for i in train]
    write_text(run.output(args.output), json.dumps(payload) + "\n")
    print(f"train={len(train)} heldout={len(test)} lambda={lam:g}")


def _model(path) -> tuple[demo.RidgeModel, dict]:
    text = Path(path).read_text()
    return demo.RidgeModel.from_json(text), json.loads(text)


def cmd_predict(args, run):
    model, _ = _model(run.input(_need(args.model, "--model")))
    regions, names, X = _features_file(run.input(args.input))
    if tuple(names) != model.feature_names:
        raise ArgumentError("feature columns do not match the model schema")
    pred = model.predict(X)
    rows = [{"region": r, "prediction": float(p)} for r, p in zip(regions, np.atleast_1d(pred))]
    write_text(run.output(args.output), _table_text(rows, ["region", "prediction"]))
    print(f"regions={len(rows)}")


def cmd_evaluate(args, run):
    model, payload = _model(run.input(_need(args.model, "--model")))
    regions, names, X = _features_file(run.input(args.input))
    target = args.target or payload.get("target", "income")
    truth = _truth_map(run.input(_need(args.truth, "--truth")), target)
    regions, X, y = _join(regions, X, truth)
    held = [i for i, r in enumerate(regions) if r not in set(payload.get("train_regions", []))]
    if len(held) < 3:
        raise ArgumentError("fewer than three held-out regions")
    pred = model.predict(X[held])
    r = demo.pearson_r(pred, y[held])
    result = {"target": target, "heldout": len(held), "r": r, "p_value": demo.correlation_p_value(r, len(held)),
              "rmse": float(np.sqrt(np.mean((pred - y[held]) ** 2)))}
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in result.items())
    if args.output:
        write_text(run.output(args.output), text)
    print(text, end="")


def cmd_correlate(args, run):
    regions, names, X = _features_file(run.input(args.input))
    truth = _truth_map(run.input(_need(args.truth, "--truth")), args.target)
    regions, X, y = _join(regions, X, truth)
    corrs = demo.correlate_attributes(X, y, names)
    ranked = demo.rank_correlations(corrs)
    rank = {c.feature: i + 1 for i, c in enumerate(ranked)}
    rows = [{"feature": c.feature, "r": c.r, "p_value": c.p, "rank": rank.get(c.feature, "")} for c in corrs]
    rows.sort(key=lambda row: (row["rank"] == "", row["rank"] if row["rank"] != "" else 0))
    write_text(run.output(args.output), _table_text(rows, ["feature", "r", "p_value", "rank"]))
    for c in ranked[:5]:
        print(f"{c.feature} r={c.r:.4f} p={c.p:.3g}")


def cmd_fit_res_hist(args, run):
    truths = ingest.read_truth_boxes(run.input(args.input))
    boxes = [b for k in sorted(truths) for b in truths[k]]
    hist = adapt.fit_resolution_hist(boxes, args.bins)
    write_text(run.output(args.output), hist.to_json() + "\n")
    print(f"boxes={len(boxes)} bins={hist.bins} range=[{hist.edges[0]:.3f},{hist.edges[-1]:.3f}]")


def cmd_fit_iou_hist(args, run):
    batch = _read_batch(run.input(args.input))
    truths = ingest.read_truth_boxes(run.input(_need(args.truths, "--truths")))
    hist = adapt.fit_iou_hist(pipeline.scored(batch, batch.raw_score), truths, args.iou, args.bins)
    write_text(run.output(args.output), hist.to_json() + "\n")
    print(" ".join(f"{p:.4f}" for p in hist.probs))


def cmd_sample_crops(args, run):
    truths = ingest.read_truth_boxes(run.input(args.input))
    dims = _need(_dims(args, run), "--images")
    hist = adapt.IouHistogram.from_json(Path(run.input(_need(args.hist, "--hist"))).read_text())
    rng = np.random.default_rng(args.seed)
    rows = []
    for iid in sorted(truths):
        for t in truths[iid]:
            for _ in range(args.per_box):
                crop = adapt.sample_crop(t, dims[iid], hist, rng)
                rows.append({"image_id": iid, "x_center": crop.x_center, "y_center": crop.y_center,
                             "width": crop.width, "height": crop.height, "iou": cal.iou(crop, t.clamp(*dims[iid]))})
    write_text(run.output(args.output), _table_text(rows, ["image_id", "x_center", "y_center", "width", "height", "iou"]))
    print(f"crops={len(rows)}")


def cmd_demo(args, run):
    cfg = SyntheticCityConfig(n_zips=args.zips, images_per_zip=args.images_per_zip,
                              price_income_coupling=args.coupling, seed=args.seed)
    result = pipeline.run_demo(args.seed, synth_city(cfg), permutations=args.permutations)
    text = "\n".join(result.lines()) + "\n"
    if args.output:
        out = Path(args.output)
        write_text(run.output(out / "summary.txt"), text)
        makes = sorted({m for s in result.zip_stats.values() for m in s.pct_by_make})
        rows = [result.zip_stats[k].row(makes) for k in sorted(result.zip_stats)]
        write_text(run.output(out / "zip_stats.tsv"), _table_text(rows))
    print(text, end="")
    print(f"income_r={result.heldout_r:.4f}")


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error=usage command={self.prog.split()[-1]} message={json.dumps(message)}\n")
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carcensus", description="Car-based visual census toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_, io_=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        if io_:
            sp.add_argument("--input", required=True)
            sp.add_argument("--output", required=True)
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic city", io_=False)
    sp.add_argument("--output", required=True, help="output directory")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--zips", type=int, default=100)
    sp.add_argument("--images-per-zip", type=int, default=120)
    sp.add_argument("--coupling", type=float, default=1.5)
    sp.add_argument("--class-confidence", type=float, default=7.0)
    sp.add_argument("--false-per-image", type=float, default=1.0)
    sp.add_argument("--topk", type=int, default=20)

    sp = add("fit-prior", cmd_fit_prior, "fit the location/size prior from truth boxes")
    sp.add_argument("--images", required=True)
    sp.add_argument("--bins", type=int, default=cal.DEFAULT_BINS)

    sp = add("learn-alpha", cmd_learn_alpha, "grid-search the prior weight on validation detections")
    sp.add_argument("--prior", required=True)
    sp.add_argument("--truths", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--alpha-grid")
    sp.add_argument("--iou", type=float, default=0.5)

    sp = add("fit-calibration", cmd_fit_calibration, "fit isotonic score calibration")
    sp.add_argument("--truths", required=True)
    sp.add_argument("--prior")
    sp.add_argument("--images")
    sp.add_argument("--iou", type=float, default=0.5)

    sp = add("calibrate", cmd_calibrate, "attach calibrated car probabilities to detections")
    sp.add_argument("--model", required=True)
    sp.add_argument("--prior")
    sp.add_argument("--images")
    sp.add_argument("--topk", type=int, default=20)

    sp = add("eval-ap", cmd_eval_ap, "average precision of detections", io_=False)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output")
    sp.add_argument("--truths", required=True)
    sp.add_argument("--prior")
    sp.add_argument("--images")
    sp.add_argument("--iou", type=float, default=0.5)

    sp = add("aggregate", cmd_aggregate, "roll calibrated detections up into region statistics")
    sp.add_argument("--by", choices=("city", "zip", "point"), default="zip")
    sp.add_argument("--taxonomy", required=True)
    sp.add_argument("--images", required=True)

    for name, func in (("moran", cmd_moran), ("gistar", cmd_gistar)):
        sp = add(name, func, f"{name} statistic over per-point values", io_=False)
        sp.add_argument("--input", required=True)
        sp.add_argument("--output", required=name == "gistar")
        sp.add_argument("--weights", default="inverse-sq" if name == "moran" else "band:100")
        sp.add_argument("--value-column")
        sp.add_argument("--permutations", type=int, default=0)
        sp.add_argument("--seed", type=int)
        if name == "moran":
            sp.add_argument("--row-standardize", action="store_true")
        else:
            sp.add_argument("--hot", type=float, default=1.96)
            sp.add_argument("--cold", type=float, default=-1.96)

    sp = add("features", cmd_features, "build per-region feature vectors")
    sp.add_argument("--makes", type=int, default=demo.N_DEFAULT_MAKES)

    sp = add("train", cmd_train, "fit a ridge model on a seeded training split")
    sp.add_argument("--truth", required=True)
    sp.add_argument("--target", choices=tuple(TARGETS), default="income")
    sp.add_argument("--lambda-grid")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--train-fraction", type=float, default=0.18)
    sp.add_argument("--seed", type=int, required=True)

    sp = add("predict", cmd_predict, "predict with a trained ridge model")
    sp.add_argument("--model", required=True)

    sp = add("evaluate", cmd_evaluate, "held-out Pearson r of a trained model", io_=False)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output")
    sp.add_argument("--model", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--target", choices=tuple(TARGETS))

    sp = add("correlate", cmd_correlate, "per-feature correlation with a target")
    sp.add_argument("--truth", required=True)
    sp.add_argument("--target", choices=tuple(TARGETS), default="income")

    sp = add("fit-res-hist", cmd_fit_res_hist, "resolution histogram of truth boxes")
    sp.add_argument("--bins", type=int, default=35)

    sp = add("fit-iou-hist", cmd_fit_iou_hist, "IOU histogram of matched detections")
    sp.add_argument("--truths", required=True)
    sp.add_argument("--iou", type=float, default=0.5)
    sp.add_argument("--bins", type=int, default=10)

    sp = add("sample-crops", cmd_sample_crops, "sample jittered crops per truth box")
    sp.add_argument("--images", required=True)
    sp.add_argument("--hist", required=True)
    sp.add_argument("--per-box", type=int, default=1)
    sp.add_argument("--seed", type=int, required=True)

    sp = add("demo", cmd_demo, "synthetic end-to-end run", io_=False)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--output")
    sp.add_argument("--zips", type=int, default=100)
    sp.add_argument("--images-per-zip", type=int, default=120)
    sp.add_argument("--coupling", type=float, default=1.5)
    sp.add_argument("--permutations", type=int, default=999)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        args.threads = 1
    run = Run(args, argv)
    try:
        args.func(args, run)
        if run.outputs:
            run.finish()
    except CensusError as exc:
        sys.stderr.write(f"error={exc.kind} command={args.command} message={json.dumps(str(exc))}\n")
        return 1
    except (OSError, KeyError, ValueError) as exc:
        sys.stderr.write(f"error={type(exc).__name__} command={args.command} message={json.dumps(str(exc))}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
