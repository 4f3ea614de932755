"""Fine-grained car class table and attribute lookups.

A taxonomy file is UTF-8 delimited text with a header row and the columns
listed in ``COLUMNS``. Missing price/MPG values are empty fields and are
carried as NaN.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import ArgumentError, LookupFailure, ParseError, SchemaError, ValidationError

log = logging.getLogger(__name__)

BODY_TYPES = (
    "sedan",
    "coupe",
    "SUV",
    "hatchback",
    "convertible",
    "wagon",
    "minivan",
    "van",
    "extended-cab truck",
    "crew-cab truck",
    "regular-cab truck",
    "other",
)
_BODY_LOOKUP = {b.lower(): b for b in BODY_TYPES}

COLUMNS = (
    "class_id",
    "make",
    "model",
    "submodel",
    "year_start",
    "year_end",
    "trim",
    "body_type",
    "price_usd",
    "mpg",
    "country",
    "is_foreign",
)
REQUIRED = tuple(c for c in COLUMNS if c != "class_id")


class AttributeKind(str, Enum):
    MAKE = "make"
    MODEL = "model"
    SUBMODEL = "submodel"
    YEAR = "year"
    TRIM = "trim"
    BODY_TYPE = "body_type"
    PRICE = "price"
    MPG = "mpg"
    COUNTRY = "country"
    FOREIGN = "is_foreign"

    @property
    def numeric(self) -> bool:
        return self in (AttributeKind.PRICE, AttributeKind.MPG)


def normalize_body_type(label: str) -> str:
    body = _BODY_LOOKUP.get(label.strip().lower())
    if body is None:
        log.warning("unknown body type %r mapped to 'other'", label)
        return "other"
    return body


@dataclass(frozen=True)
class CarClass:
    class_id: int
    make: str
    model: str
    submodel: str
    year_range: tuple[int, int]
    trim: str
    body_type: str
    price_usd: float = math.nan
    mpg: float = math.nan
    country: str = "USA"
    is_foreign: bool = False

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"negative class_id {self.class_id}")
        if self.year_range[0] > self.year_range[1]:
            raise ValidationError(f"class {self.class_id}: year_start > year_end")
        if not math.isnan(self.price_usd) and self.price_usd < 0:
            raise ValidationError(f"class {self.class_id}: negative price")
        if not math.isnan(self.mpg) and self.mpg <= 0:
            raise ValidationError(f"class {self.class_id}: non-positive mpg")
        if self.body_type not in BODY_TYPES:
            raise ValidationError(f"class {self.class_id}: body type {self.body_type!r}")
        if self.is_foreign != (self.country != "USA"):
            raise ValidationError(
                f"class {self.class_id}: is_foreign={self.is_foreign} inconsistent with country {self.country!r}"
            )

    def attribute(self, kind: AttributeKind):
        kind = AttributeKind(kind)
        if kind is AttributeKind.PRICE:
            return self.price_usd
        if kind is AttributeKind.MPG:
            return self.mpg
        if kind is AttributeKind.YEAR:
            return self.year_range
        if kind is AttributeKind.FOREIGN:
            return self.is_foreign
        return getattr(self, kind.value)


@dataclass(frozen=True)
class ClassTable:
    """Immutable class table with precomputed per-attribute arrays.

    ``classes[i].class_id == i`` always holds.  The numpy views (``price``,
    ``mpg``, ``foreign`` and the integer codes for makes and body types)
    back the vectorized census aggregation.
    """

    classes: tuple[CarClass, ...]
    makes: tuple[str, ...] = field(init=False)
    make_index: np.ndarray = field(init=False, repr=False)
    body_index: np.ndarray = field(init=False, repr=False)
    price: np.ndarray = field(init=False, repr=False)
    mpg: np.ndarray = field(init=False, repr=False)
    foreign: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for i, c in enumerate(self.classes):
            if c.class_id != i:
                raise ValidationError(f"class ids must be dense: position {i} holds id {c.class_id}")
        makes = tuple(sorted({c.make for c in self.classes}))
        lookup = {m: i for i, m in enumerate(makes)}
        body = {b: i for i, b in enumerate(BODY_TYPES)}
        n = len(self.classes)
        set_ = object.__setattr__
        set_(self, "makes", makes)
        set_(self, "make_index", np.fromiter((lookup[c.make] for c in self.classes), np.int64, n))
        set_(self, "body_index", np.fromiter((body[c.body_type] for c in self.classes), np.int64, n))
        set_(self, "price", np.fromiter((c.price_usd for c in self.classes), float, n))
        set_(self, "mpg", np.fromiter((c.mpg for c in self.classes), float, n))
        set_(self, "foreign", np.fromiter((c.is_foreign for c in self.classes), bool, n))
        for arr in (self.make_index, self.body_index, self.price, self.mpg, self.foreign):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.classes)

    def __getitem__(self, class_id: int) -> CarClass:
        if not isinstance(class_id, (int, np.integer)) or not 0 <= class_id < len(self.classes):
            raise LookupFailure(f"class_id {class_id} outside [0, {len(self.classes)})")
        return self.classes[int(class_id)]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def check_ids(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.classes)):
            bad = ids[(ids < 0) | (ids >= len(self.classes))][0]
            raise LookupFailure(f"class_id {bad} outside [0, {len(self.classes)})")


def _parse_float(text: str, line: int, column: str) -> float:
    text = text.strip()
    if not text:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {line}: column {column}: not a number: {text!r}", line=line) from None


def _parse_int(text: str, line: int, column: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"line {line}: column {column}: not an integer: {text!r}", line=line) from None


def _parse_bool(text: str, line: int) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "y", "t"):
        return True
    if t in ("0", "false", "no", "n", "f"):
        return False
    raise ParseError(f"line {line}: column is_foreign: not a boolean: {text!r}", line=line)


def load_taxonomy(source: TextIO | str, delimiter: str | None = None) -> ClassTable:
    """Parse a taxonomy stream into a :class:`ClassTable`.

    ``source`` is an open text stream or the text itself. The delimiter is
    sniffed from the header (tab or comma) unless given. When the
    ``class_id`` column is absent, ids follow file order.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    header_line = source.readline()
    if not header_line.strip():
        raise SchemaError("taxonomy stream has no header row")
    if delimiter is None:
        delimiter = "\t" if "\t" in header_line else ","
    header = [h.strip() for h in next(csv.reader([header_line], delimiter=delimiter))]
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    pos = {name: i for i, name in enumerate(header)}
    has_id = "class_id" in pos

    rows: list[CarClass] = []
    seen: dict[int, int] = {}
    reader = csv.reader(source, delimiter=delimiter)
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}", line=lineno)
        get = lambda name: row[pos[name]]  # noqa: E731
        cid = _parse_int(get("class_id"), lineno, "class_id") if has_id else len(rows)
        if cid in seen:
            raise ValidationError(f"duplicate class_id {cid} (lines {seen[cid]} and {lineno})")
        seen[cid] = lineno
        try:
            rows.append(
                CarClass(
                    class_id=cid,
                    make=get("make").strip(),
                    model=get("model").strip(),
                    submodel=get("submodel").strip(),
                    year_range=(
                        _parse_int(get("year_start"), lineno, "year_start"),
                        _parse_int(get("year_end"), lineno, "year_end"),
                    ),
                    trim=get("trim").strip(),
                    body_type=normalize_body_type(get("body_type")),
                    price_usd=_parse_float(get("price_usd"), lineno, "price_usd"),
                    mpg=_parse_float(get("mpg"), lineno, "mpg"),
                    country=get("country").strip(),
                    is_foreign=_parse_bool(get("is_foreign"), lineno),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None

    rows.sort(key=lambda c: c.class_id)
    for i, c in enumerate(rows):
        if c.class_id != i:
            raise ValidationError(f"class ids are not dense: expected {i}, found {c.class_id}")
    return ClassTable(tuple(rows))


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def dump_taxonomy(table: ClassTable, out: TextIO, delimiter: str = "\t") -> None:
    writer = csv.writer(out, delimiter=delimiter, lineterminator="\n")
    writer.writerow(COLUMNS)
    for c in table.classes:
        writer.writerow(
            [
                c.class_id,
                c.make,
                c.model,
                c.submodel,
                c.year_range[0],
                c.year_range[1],
                c.trim,
                c.body_type,
                _fmt(c.price_usd),
                _fmt(c.mpg),
                c.country,
                int(c.is_foreign),
            ]
        )


def attribute_of(table: ClassTable, class_id: int, kind: AttributeKind | str):
    return table[class_id].attribute(AttributeKind(kind))


def _attribute_pairs(predictions: Sequence[int], truths: Sequence[int], kind, table: ClassTable):
    if len(predictions) != len(truths):
        raise ArgumentError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    if len(predictions) == 0:
        raise ArgumentError("empty prediction sequence")
    kind = AttributeKind(kind)
    return [(attribute_of(table, p, kind), attribute_of(table, t, kind)) for p, t in zip(predictions, truths)]


def _same(a, b) -> bool:
    # NaN == NaN for missing numeric attributes
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def attribute_accuracy(
    predictions: Sequence[int], truths: Sequence[int], kind: AttributeKind | str, table: ClassTable
) -> float:
    """Fraction of positions whose predicted and true classes share ``kind``."""
    pairs = _attribute_pairs(predictions, truths, kind, table)
    return sum(_same(p, t) for p, t in pairs) / len(pairs)


@dataclass(frozen=True)
class Confusion:
    labels: tuple
    counts: np.ndarray
    matrix: np.ndarray

    def row(self, label) -> np.ndarray:
        return self.matrix[self.labels.index(label)]


def confusion_matrix(
    predictions: Sequence[int],
    truths: Sequence[int],
    kind: AttributeKind | str,
    table: ClassTable,
    labels: Iterable | None = None,
) -> Confusion:
    """Row-normalized confusion over attribute categories.

    Rows are true categories, columns predicted. Rows with no samples stay
    all-zero. ``labels`` defaults to the body-type vocabulary for
    ``body_type`` and to the sorted observed categories otherwise.
    """
    kind = AttributeKind(kind)
    pairs = _attribute_pairs(predictions, truths, kind, table)
    if labels is None:
        if kind is AttributeKind.BODY_TYPE:
            labels = BODY_TYPES
        else:
            labels = sorted({v for pair in pairs for v in pair}, key=repr)
    labels = tuple(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)))
    for pred, true in pairs:
        counts[index[true], index[pred]] += 1
    totals = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return Confusion(labels, counts, matrix)
