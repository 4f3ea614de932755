"""Record types, streaming readers/writers and the file formats they use.

Detection file: one record per line, tab separated::

    image_id  x_center  y_center  width  height  raw_score  car_probability  [class_id:prob ...]

``car_probability`` is an empty field until calibration. Up to ``MAX_TOPK``
``class_id:prob`` pairs follow, one per field. Lines starting with ``#`` are
comments. Files are expected sorted by ``image_id`` so aggregation can
stream without an index.

Image metadata file: header row, then
``image_id lat lon rotation city_id zip_code width_px height_px``.

Truth-box file: ``image_id x_center y_center width height`` per line.
"""
from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
import pyarrow as pa
import pyarrow.compute as pc

from .errors import ParseError, ValidationError
from .taxonomy import ClassTable

MAX_TOPK = 20
PROB_TOL = 1e-9

IMAGE_COLUMNS = ("image_id", "lat", "lon", "rotation", "city_id", "zip_code", "width_px", "height_px")


@dataclass(frozen=True)
class BBox:
    x_center: float
    y_center: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"box width/height must be positive, got {self.width}x{self.height}")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.width / 2, self.height / 2
        return self.x_center - hw, self.y_center - hh, self.x_center + hw, self.y_center + hh

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def clamp(self, width_px: float, height_px: float) -> "BBox":
        x0, y0, x1, y1 = self.corners
        x0, x1 = max(0.0, x0), min(float(width_px), x1)
        y0, y1 = max(0.0, y0), min(float(height_px), y1)
        if x1 <= x0 or y1 <= y0:
            raise ValidationError("box lies entirely outside the image")
        return BBox.from_corners(x0, y0, x1, y1)


@dataclass(frozen=True)
class GeoImage:
    image_id: str
    latitude: float
    longitude: float
    rotation: int
    city_id: str
    zip_code: str
    width_px: int = 640
    height_px: int = 480

    def __post_init__(self):
        if not -90 <= self.latitude <= 90 or not -180 <= self.longitude <= 180:
            raise ValidationError(f"{self.image_id}: coordinates out of range")
        if not 0 <= self.rotation < 6:
            raise ValidationError(f"{self.image_id}: rotation {self.rotation} not in [0, 6)")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValidationError(f"{self.image_id}: non-positive image size")


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    bbox: BBox
    raw_score: float
    car_probability: float | None = None
    class_probs: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        _check_record(self.car_probability, self.class_probs)

    def with_probability(self, p: float) -> "DetectionRecord":
        return DetectionRecord(self.image_id, self.bbox, self.raw_score, p, self.class_probs)


def _check_record(car_probability, class_probs) -> None:
    if car_probability is not None and not 0.0 <= car_probability <= 1.0:
        raise ValidationError(f"car_probability {car_probability} outside [0, 1]")
    if len(class_probs) > MAX_TOPK:
        raise ValidationError(f"{len(class_probs)} class probabilities, at most {MAX_TOPK} allowed")
    total = 0.0
    for _, p in class_probs:
        if not 0.0 < p <= 1.0:
            raise ValidationError(f"class probability {p} outside (0, 1]")
        total += p
    if total > 1.0 + PROB_TOL:
        raise ValidationError(f"class probabilities sum to {total} > 1")


@dataclass
class DetectionBatch:
    """Columnar block of detection records.

    Class distributions are stored CSR-style: record ``i`` owns
    ``class_ids[offsets[i]:offsets[i+1]]``. ``car_prob`` is NaN where the
    record is uncalibrated.
    """

    image_ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    h: np.ndarray
    raw_score: np.ndarray
    car_prob: np.ndarray
    offsets: np.ndarray
    class_ids: np.ndarray
    class_probs: np.ndarray
    byte_offsets: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.raw_score)

    @classmethod
    def from_records(cls, records: Iterable[DetectionRecord]) -> "DetectionBatch":
        records = list(records)
        counts = [len(r.class_probs) for r in records]
        offsets = np.zeros(len(records) + 1, np.int64)
        np.cumsum(counts, out=offsets[1:])
        pairs = [pc for r in records for pc in r.class_probs]
        return cls(
            image_ids=np.array([r.image_id for r in records], dtype=object),
            x=np.array([r.bbox.x_center for r in records], float),
            y=np.array([r.bbox.y_center for r in records], float),
            w=np.array([r.bbox.width for r in records], float),
            h=np.array([r.bbox.height for r in records], float),
            raw_score=np.array([r.raw_score for r in records], float),
            car_prob=np.array([math.nan if r.car_probability is None else r.car_probability for r in records], float),
            offsets=offsets,
            class_ids=np.array([c for c, _ in pairs], np.int64),
            class_probs=np.array([p for _, p in pairs], float),
        )

    def records(self) -> Iterator[DetectionRecord]:
        for i in range(len(self)):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            cp = self.car_prob[i]
            yield DetectionRecord(
                str(self.image_ids[i]),
                BBox(float(self.x[i]), float(self.y[i]), float(self.w[i]), float(self.h[i])),
                float(self.raw_score[i]),
                None if math.isnan(cp) else float(cp),
                tuple(zip(self.class_ids[lo:hi].tolist(), self.class_probs[lo:hi].tolist())),
            )

    def take(self, index: np.ndarray) -> "DetectionBatch":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        lo, hi = self.offsets[index], self.offsets[index + 1]
        counts = hi - lo
        offsets = np.zeros(len(index) + 1, np.int64)
        np.cumsum(counts, out=offsets[1:])
        flat = np.repeat(lo - offsets[:-1], counts) + np.arange(offsets[-1])
        return DetectionBatch(
            self.image_ids[index], self.x[index], self.y[index], self.w[index], self.h[index],
            self.raw_score[index], self.car_prob[index], offsets,
            self.class_ids[flat], self.class_probs[flat],
        )

    @staticmethod
    def concat(batches: Sequence["DetectionBatch"]) -> "DetectionBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return empty_batch()
        offsets = [np.zeros(1, np.int64)]
        base = 0
        for b in batches:
            offsets.append(b.offsets[1:] + base)
            base += b.offsets[-1]
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])  # noqa: E731
        return DetectionBatch(
            cat("image_ids"), cat("x"), cat("y"), cat("w"), cat("h"), cat("raw_score"), cat("car_prob"),
            np.concatenate(offsets), cat("class_ids"), cat("class_probs"),
        )


def empty_batch() -> DetectionBatch:
    z = np.zeros(0)
    return DetectionBatch(
        np.zeros(0, dtype=object), z, z, z, z, z, z, np.zeros(1, np.int64), np.zeros(0, np.int64), z
    )


# --------------------------------------------------------------------------- detections


def _open_binary(source) -> tuple[IO[bytes], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb"), True
    if isinstance(source, io.TextIOBase):
        return io.BytesIO(source.read().encode()), False
    return source, False


def parse_detection_line(line: bytes | str, offset: int = 0) -> DetectionRecord:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) < 7:
        raise ParseError(f"byte {offset}: expected at least 7 fields, got {len(fields)}", offset=offset)
    try:
        x, y, w, h, score = (float(f) for f in fields[1:6])
        cp = float(fields[6]) if fields[6].strip() else None
        pairs = []
        for tok in fields[7:]:
            if not tok:
                continue
            cid, _, p = tok.partition(":")
            pairs.append((int(cid), float(p)))
    except ValueError as exc:
        raise ParseError(f"byte {offset}: {exc}", offset=offset) from None
    try:
        return DetectionRecord(fields[0], BBox(x, y, w, h), score, cp, tuple(pairs))
    except ValidationError as exc:
        raise ValidationError(f"byte {offset}: {exc}") from None


def read_detections(source, table: ClassTable | None = None) -> Iterator[DetectionRecord]:
    """Lazily yield records in file order.

    ``source`` is a path or a binary/text stream. Memory use is one line at a
    time. Passing ``table`` validates every class id against it.
    """
    f, owned = _open_binary(source)
    try:
        offset = 0
        for raw in f:
            start = offset
            offset += len(raw)
            if not raw.strip() or raw.startswith(b"#"):
                continue
            rec = parse_detection_line(raw, start)
            if table is not None:
                for cid, _ in rec.class_probs:
                    if not 0 <= cid < len(table):
                        raise ValidationError(f"byte {start}: unknown class_id {cid}")
            yield rec
    finally:
        if owned:
            f.close()


def _floats(buf: bytes) -> np.ndarray | None:
    with warnings.catch_warnings():
        warnings.simplefilter("error", DeprecationWarning)
        try:
            return np.fromstring(buf, sep=" ")
        except (DeprecationWarning, ValueError):
            return None


def _bad_line(lines: list[bytes], starts: np.ndarray, index: int):
    # re-parse the offending line to get a precise error message
    parse_detection_line(lines[index], int(starts[index]))
    raise ParseError(f"byte {int(starts[index])}: malformed record", offset=int(starts[index]))


def _parse_block(lines: list[bytes], base_offset: int, table: ClassTable | None) -> DetectionBatch:
    lengths = np.fromiter((len(l) for l in lines), np.int64, len(lines))
    starts = np.empty(len(lines), np.int64)
    starts[0] = base_offset
    np.cumsum(lengths[:-1], out=starts[1:])
    starts[1:] += base_offset
    keep = [i for i, l in enumerate(lines) if l.strip() and not l.startswith(b"#")]
    if len(keep) != len(lines):
        lines = [lines[i] for i in keep]
        starts = starts[keep]
    n = len(lines)
    if n == 0:
        return empty_batch()

    ids: list[bytes] = []
    heads: list[bytes] = []
    cps: list[bytes] = []
    counts = np.empty(n, np.int64)
    tokens: list[bytes] = []
    for i, line in enumerate(lines):
        parts = line.rstrip(b"\r\n").split(b"\t")
        if len(parts) < 7:
            _bad_line(lines, starts, i)
        ids.append(parts[0])
        heads.append(b" ".join(parts[1:6]))
        cps.append(parts[6] or b"nan")
        pairs = parts[7:]
        if pairs and not pairs[-1]:
            pairs = [p for p in pairs if p]
        counts[i] = len(pairs)
        tokens.extend(pairs)

    head = _floats(b" ".join(heads))
    if head is None or head.size != 5 * n:
        for i in range(n):
            _check_numeric(lines, starts, i)
    head = head.reshape(n, 5)
    try:
        car_prob = np.array(cps, dtype=np.float64)
    except ValueError:
        for i in range(n):
            _check_numeric(lines, starts, i)
        raise
    if tokens:
        flat = _floats(b" ".join(tokens).replace(b":", b" "))
        if flat is None or flat.size != 2 * len(tokens):
            for i in range(n):
                _check_numeric(lines, starts, i)
        flat = flat.reshape(-1, 2)
        class_ids = flat[:, 0].astype(np.int64)
        probs = flat[:, 1]
        if not np.array_equal(class_ids, flat[:, 0]):
            _bad_line(lines, starts, int(np.repeat(np.arange(n), counts)[np.flatnonzero(class_ids != flat[:, 0])[0]]))
    else:
        class_ids = np.zeros(0, np.int64)
        probs = np.zeros(0)
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    batch = DetectionBatch(
        image_ids=np.array([i.decode() for i in ids], dtype=object),
        x=head[:, 0], y=head[:, 1], w=head[:, 2], h=head[:, 3], raw_score=head[:, 4],
        car_prob=car_prob, offsets=offsets, class_ids=class_ids, class_probs=probs,
        byte_offsets=starts,
    )
    _validate_batch(batch, table)
    return batch


_TAB, _NL, _COLON = 9, 10, 58


def _parse_fast(buf: bytes, base_offset: int) -> DetectionBatch | None:
    """Vectorized parse of a block of complete, well-formed lines.

    Returns None when anything looks irregular (comments, blank lines,
    CRLF, wrong field layout, non-numeric tokens) so the caller can fall
    back to the line-by-line parser, which produces precise errors.
    """
    if not buf or buf[-1] != _NL or len(buf) >= 2**31 - 1:
        return None
    if buf[0] in b"#\n" or b"\n#" in buf or b"\n\n" in buf or b"\r" in buf:
        return None
    a = np.frombuffer(buf, np.uint8)
    sep = np.flatnonzero((a == _TAB) | (a == _NL) | (a == _COLON))
    kind = a[sep]
    ntok = len(sep)
    starts = np.empty(ntok + 1, np.int32)
    starts[0] = 0
    starts[1:] = sep + 1
    line_last = np.flatnonzero(kind == _NL)
    line_first = np.empty_like(line_last)
    line_first[0] = 0
    line_first[1:] = line_last[:-1] + 1
    per_line = line_last - line_first + 1
    n = len(line_last)
    if (per_line < 7).any() or ((per_line - 7) % 2).any():
        return None
    counts = (per_line - 7) // 2
    # layout: 6 tabs after the fixed fields, then alternating ':' and tab/newline
    pos = np.arange(ntok) - np.repeat(line_first, per_line)
    expect_colon = (pos >= 7) & ((pos - 7) % 2 == 0)
    if not np.array_equal(kind == _COLON, expect_colon):
        return None

    tokens = pa.StringArray.from_buffers(ntok, pa.py_buffer(starts), pa.py_buffer(buf))
    tokens = pc.utf8_rtrim(tokens, characters="\t\n:")
    head_idx = (line_first[:, None] + np.arange(1, 7)).ravel()
    total = int(counts.sum())
    pair_first = np.repeat(line_first + 7, counts) + 2 * (np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts))
    try:
        head_tok = tokens.take(pa.array(head_idx))
        head_tok = pc.if_else(pc.equal(head_tok, ""), pa.scalar(None, pa.string()), head_tok)
        head = pc.cast(head_tok, pa.float64()).to_numpy(zero_copy_only=False).reshape(n, 6)
        class_ids = pc.cast(tokens.take(pa.array(pair_first)), pa.int64()).to_numpy()
        probs = pc.cast(tokens.take(pa.array(pair_first + 1)), pa.float64()).to_numpy(zero_copy_only=False)
    except (pa.ArrowInvalid, pa.ArrowNotImplementedError):
        return None
    if np.isnan(head[:, :5]).any() or np.isnan(probs).any():
        return None
    id_tok = tokens.take(pa.array(line_first))
    if pc.any(pc.equal(id_tok, "")).as_py():
        return None
    ids = id_tok.to_numpy(zero_copy_only=False)
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    return DetectionBatch(
        image_ids=ids.astype(object), x=head[:, 0].copy(), y=head[:, 1].copy(), w=head[:, 2].copy(),
        h=head[:, 3].copy(), raw_score=head[:, 4].copy(), car_prob=head[:, 5].copy(), offsets=offsets,
        class_ids=class_ids, class_probs=probs,
        byte_offsets=starts[line_first].astype(np.int64) + base_offset,
    )


def _parse_bytes(buf: bytes, base_offset: int, table: ClassTable | None) -> DetectionBatch:
    batch = _parse_fast(buf, base_offset)
    if batch is None:
        return _parse_block(buf.splitlines(keepends=True), base_offset, table)
    _validate_batch(batch, table)
    return batch


def _check_numeric(lines, starts, i):
    parse_detection_line(lines[i], int(starts[i]))


def _validate_batch(batch: DetectionBatch, table: ClassTable | None) -> None:
    def fail(mask: np.ndarray, what: str):
        i = int(np.flatnonzero(mask)[0])
        raise ValidationError(f"byte {int(batch.byte_offsets[i])}: {what}")

    counts = np.diff(batch.offsets)
    if (counts > MAX_TOPK).any():
        fail(counts > MAX_TOPK, f"more than {MAX_TOPK} class probabilities")
    if not ((batch.w > 0) & (batch.h > 0)).all():
        fail(~((batch.w > 0) & (batch.h > 0)), "non-positive box size")
    cp = batch.car_prob
    bad = ~np.isnan(cp) & ((cp < 0) | (cp > 1))
    if bad.any():
        fail(bad, f"car_probability {cp[bad][0]} outside [0, 1]")
    if len(batch.class_probs):
        owner = np.repeat(np.arange(len(batch)), counts)
        p = batch.class_probs
        bad_p = ~((p > 0) & (p <= 1))
        if bad_p.any():
            fail(np.isin(np.arange(len(batch)), owner[bad_p]), f"class probability {p[bad_p][0]} outside (0, 1]")
        sums = np.add.reduceat(p, batch.offsets[:-1][counts > 0])
        over = np.zeros(len(batch), bool)
        over[counts > 0] = sums > 1 + PROB_TOL
        if over.any():
            fail(over, "class probabilities sum to more than 1")
        if table is not None:
            c = batch.class_ids
            bad_c = (c < 0) | (c >= len(table))
            if bad_c.any():
                fail(np.isin(np.arange(len(batch)), owner[bad_c]), f"unknown class_id {c[bad_c][0]}")


def read_detection_batches(
    source, block_bytes: int = 1 << 22, table: ClassTable | None = None, start: int = 0, stop: int | None = None
) -> Iterator[DetectionBatch]:
    """Stream the detection file as columnar blocks of roughly ``block_bytes``.

    ``start``/``stop`` restrict reading to a byte range; both must sit on
    line boundaries (see :func:`shard_offsets`).
    """
    f, owned = _open_binary(source)
    try:
        f.seek(start)
        offset = start
        remaining = None if stop is None else stop - start
        tail = b""
        while True:
            want = block_bytes if remaining is None else min(block_bytes, remaining)
            chunk = f.read(want) if want > 0 else b""
            if remaining is not None:
                remaining -= len(chunk)
            buf = tail + chunk
            if not chunk:
                if buf:
                    batch = _parse_bytes(buf, offset, table)
                    if len(batch):
                        yield batch
                break
            cut = buf.rfind(b"\n") + 1
            if cut == 0:
                tail = buf
                continue
            body, tail = buf[:cut], buf[cut:]
            batch = _parse_bytes(body, offset, table)
            offset += len(body)
            if len(batch):
                yield batch
    finally:
        if owned:
            f.close()


def shard_offsets(path, shards: int) -> list[tuple[int, int]]:
    """Split a file into ``shards`` contiguous byte ranges aligned to line starts."""
    size = os.path.getsize(path)
    cuts = [0]
    with open(path, "rb") as f:
        for k in range(1, shards):
            f.seek(max(size * k // shards, cuts[-1]))
            if f.tell() > 0:
                f.seek(f.tell() - 1)
                f.readline()
            cuts.append(min(max(f.tell(), cuts[-1]), size))
    cuts.append(size)
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def format_detection(image_id, x, y, w, h, score, car_prob, pairs) -> str:
    cp = "" if car_prob is None or (isinstance(car_prob, float) and math.isnan(car_prob)) else repr(float(car_prob))
    head = f"{image_id}\t{float(x)!r}\t{float(y)!r}\t{float(w)!r}\t{float(h)!r}\t{float(score)!r}\t{cp}"
    if pairs:
        return head + "\t" + "\t".join(f"{int(c)}:{float(p)!r}" for c, p in pairs) + "\n"
    return head + "\n"


def write_detections(records: Iterable[DetectionRecord] | DetectionBatch, out: IO[str]) -> int:
    n = 0
    if isinstance(records, DetectionBatch):
        b = records
        ids = b.class_ids.tolist()
        ps = b.class_probs.tolist()
        off = b.offsets.tolist()
        for i in range(len(b)):
            out.write(
                format_detection(
                    b.image_ids[i], b.x[i], b.y[i], b.w[i], b.h[i], b.raw_score[i], b.car_prob[i],
                    list(zip(ids[off[i]:off[i + 1]], ps[off[i]:off[i + 1]])),
                )
            )
            n += 1
        return n
    for r in records:
        bb = r.bbox
        out.write(format_detection(r.image_id, bb.x_center, bb.y_center, bb.width, bb.height,
                                   r.raw_score, r.car_probability, r.class_probs))
        n += 1
    return n


# --------------------------------------------------------------------------- images / truths


def write_images(images: Iterable[GeoImage], out: IO[str]) -> None:
    w = csv.writer(out, delimiter="\t", lineterminator="\n")
    w.writerow(IMAGE_COLUMNS)
    for im in images:
        w.writerow([im.image_id, repr(im.latitude), repr(im.longitude), im.rotation,
                    im.city_id, im.zip_code, im.width_px, im.height_px])


def read_images(source) -> Iterator[GeoImage]:
    f = open(source, encoding="utf-8", newline="") if isinstance(source, (str, os.PathLike)) else source
    try:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader, None)
        if header is None:
            return
        missing = [c for c in IMAGE_COLUMNS if c not in header]
        if missing:
            from .errors import SchemaError

            raise SchemaError(f"image metadata missing column(s): {', '.join(missing)}")
        pos = [header.index(c) for c in IMAGE_COLUMNS]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                iid, lat, lon, rot, city, zc, wpx, hpx = (row[p] for p in pos)
                yield GeoImage(iid, float(lat), float(lon), int(rot), city, zc, int(wpx), int(hpx))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"line {lineno}: {exc}", line=lineno) from None
    finally:
        if f is not source:
            f.close()


def write_truth_boxes(truths: dict[str, list[BBox]], out: IO[str]) -> None:
    for iid in sorted(truths):
        for b in truths[iid]:
            out.write(f"{iid}\t{b.x_center!r}\t{b.y_center!r}\t{b.width!r}\t{b.height!r}\n")


def read_truth_boxes(source) -> dict[str, list[BBox]]:
    f = open(source, encoding="utf-8") if isinstance(source, (str, os.PathLike)) else source
    out: dict[str, list[BBox]] = {}
    try:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                out.setdefault(parts[0], []).append(BBox(*(float(v) for v in parts[1:5])))
            except (ValueError, TypeError) as exc:
                raise ParseError(f"line {lineno}: {exc}", line=lineno) from None
    finally:
        if f is not source:
            f.close()
    return out


def write_table(rows: Sequence[dict], out: IO[str], columns: Sequence[str] | None = None) -> None:
    """Write dict rows as a tab-separated table with a header."""
    if columns is None:
        columns = list(rows[0]) if rows else []
    w = csv.writer(out, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def read_table(source) -> list[dict[str, str]]:
    f = open(source, encoding="utf-8", newline="") if isinstance(source, (str, os.PathLike)) else source
    try:
        text = f.read()
    finally:
        if f is not source:
            f.close()
    delim = "\t" if "\t" in text.split("\n", 1)[0] else ","
    return list(csv.DictReader(io.StringIO(text), delimiter=delim))
