import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carcensus import ingest
from carcensus.errors import ConfigError, ParseError, ValidationError
from carcensus.ingest import (
    BBox,
    DetectionBatch,
    DetectionRecord,
    GeoImage,
    read_detection_batches,
    read_detections,
    shard_offsets,
    write_detections,
)
from carcensus.spatial import distance_matrix
from carcensus.synth import SyntheticCityConfig, synth_city

from conftest import make_table


def rec(iid="a", cp=None, pairs=((1, 0.6), (2, 0.3)), score=0.5):
    return DetectionRecord(iid, BBox(10.0, 20.0, 4.0, 3.0), score, cp, tuple(pairs))


def dump(records) -> bytes:
    out = io.StringIO()
    write_detections(records, out)
    return out.getvalue().encode()


def test_three_records_order_preserved():
    recs = [rec("a", 0.1), rec("b", None), rec("c", 1.0, ())]
    assert list(read_detections(io.BytesIO(dump(recs)))) == recs


def test_empty_file():
    assert list(read_detections(io.BytesIO(b""))) == []
    assert list(read_detection_batches(io.BytesIO(b""))) == []


def test_probability_out_of_range():
    line = b"a\t1\t1\t2\t2\t0.5\t1.2\n"
    with pytest.raises(ValidationError):
        list(read_detections(io.BytesIO(line)))
    with pytest.raises(ValidationError):
        list(read_detection_batches(io.BytesIO(line)))


def test_malformed_record_reports_byte_offset():
    good = dump([rec("a"), rec("b")])
    data = good + b"c\t1\tx\t2\t2\t0.5\t\n"
    with pytest.raises(ParseError) as err:
        list(read_detections(io.BytesIO(data)))
    assert err.value.offset == len(good)
    with pytest.raises(ParseError, match=f"byte {len(good)}"):
        list(read_detection_batches(io.BytesIO(data)))


def test_unknown_class_id_with_table():
    table = make_table([("A", "sedan", 1, 1, "USA")] * 2)
    data = dump([rec(pairs=((5, 0.5),))])
    with pytest.raises(ValidationError, match="class_id 5"):
        list(read_detections(io.BytesIO(data), table))
    with pytest.raises(ValidationError, match="class_id 5"):
        list(read_detection_batches(io.BytesIO(data), table=table))


def test_too_many_pairs_and_overfull_mass():
    many = "\t".join(f"{i}:0.01" for i in range(21))
    with pytest.raises(ValidationError):
        list(read_detection_batches(io.BytesIO(f"a\t1\t1\t2\t2\t0\t\t{many}\n".encode())))
    with pytest.raises(ValidationError):
        list(read_detection_batches(io.BytesIO(b"a\t1\t1\t2\t2\t0\t\t1:0.7\t2:0.4\n")))


def test_comments_blank_lines_and_crlf():
    data = b"# header\n\na\t1\t1\t2\t2\t0.5\t0.3\t4:0.5\r\n"
    (r,) = read_detections(io.BytesIO(data))
    (b,) = read_detection_batches(io.BytesIO(data))
    assert list(b.records()) == [r]
    assert b.byte_offsets.tolist() == [10]


def test_stream_is_rereadable(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_bytes(dump([rec(str(i), 0.5) for i in range(50)]))
    assert list(read_detections(path)) == list(read_detections(path))


finite = st.floats(-1e6, 1e6, allow_nan=False)
positive = st.floats(1e-3, 1e4, allow_nan=False)


@st.composite
def records(draw):
    k = draw(st.integers(0, 20))
    probs = draw(st.lists(st.floats(1e-6, 1.0), min_size=k, max_size=k))
    total = sum(probs)
    if total > 1:
        probs = [p / total * 0.999 for p in probs]
        probs = [p for p in probs if p > 0]
    ids = draw(st.lists(st.integers(0, 3000), min_size=len(probs), max_size=len(probs)))
    cp = draw(st.one_of(st.none(), st.floats(0, 1)))
    return DetectionRecord(
        draw(st.text("abcXYZ-_09", min_size=1, max_size=8)),
        BBox(draw(finite), draw(finite), draw(positive), draw(positive)),
        draw(finite), cp, tuple(zip(ids, probs)),
    )


@given(st.lists(records(), max_size=30), st.integers(64, 4096))
def test_block_reader_matches_line_reader(recs, block):
    data = dump(recs)
    lazy = list(read_detections(io.BytesIO(data)))
    batches = list(read_detection_batches(io.BytesIO(data), block_bytes=block))
    cols = DetectionBatch.concat(batches) if batches else ingest.empty_batch()
    assert list(cols.records()) == lazy == recs


@given(st.lists(records(), min_size=1, max_size=30))
def test_vectorized_parse_matches_fallback(recs):
    data = dump(recs)
    fast = ingest._parse_fast(data, 7)
    slow = ingest._parse_block(data.splitlines(keepends=True), 7, None)
    assert fast is not None
    for name in ("x", "y", "w", "h", "raw_score", "car_prob", "class_probs"):
        assert np.array_equal(getattr(fast, name), getattr(slow, name), equal_nan=True)
    for name in ("offsets", "class_ids", "byte_offsets"):
        assert np.array_equal(getattr(fast, name), getattr(slow, name))
    assert fast.image_ids.tolist() == slow.image_ids.tolist()


@pytest.mark.parametrize("shards", [1, 2, 3, 7, 50])
def test_shard_ranges_cover_file_on_line_boundaries(tmp_path, shards):
    recs = [rec(f"img{i:03d}", 0.25) for i in range(40)]
    path = tmp_path / "d.tsv"
    path.write_bytes(dump(recs))
    ranges = shard_offsets(path, shards)
    assert ranges[0][0] == 0 and ranges[-1][1] == path.stat().st_size
    assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
    parts = [r for a, b in ranges for bt in read_detection_batches(path, start=a, stop=b) for r in bt.records()]
    assert parts == recs


def test_batch_take_and_concat_round_trip():
    b = DetectionBatch.from_records([rec("a", 0.1), rec("b", 0.2, ()), rec("c", 0.3, ((7, 1.0),))])
    picked = b.take(np.array([2, 0]))
    assert [r.image_id for r in picked.records()] == ["c", "a"]
    whole = DetectionBatch.concat([b.take(np.array([0])), b.take(np.array([1, 2]))])
    assert list(whole.records()) == list(b.records())


def test_images_and_truths_round_trip(tmp_path):
    ims = [GeoImage("x", 41.5, -87.2, 3, "chi", "60601", 640, 480)]
    with open(tmp_path / "im.tsv", "w") as f:
        ingest.write_images(ims, f)
    assert list(ingest.read_images(tmp_path / "im.tsv")) == ims
    truths = {"x": [BBox(1.5, 2.5, 3.0, 4.0)], "y": [BBox(9.0, 9.0, 1.0, 1.0)]}
    with open(tmp_path / "t.tsv", "w") as f:
        ingest.write_truth_boxes(truths, f)
    assert ingest.read_truth_boxes(tmp_path / "t.tsv") == truths


def test_geo_image_invariants():
    with pytest.raises(ValidationError):
        GeoImage("x", 91, 0, 0, "c", "z")
    with pytest.raises(ValidationError):
        GeoImage("x", 0, 0, 6, "c", "z")


def test_bbox_clamp_stays_inside():
    b = BBox(5, 5, 20, 4).clamp(10, 8)
    x0, y0, x1, y1 = b.corners
    assert (x0, y0, x1, y1) == (0, 3, 10, 7)


# --------------------------------------------------------------------------- synthetic city

SMALL = dict(n_zips=9, images_per_zip=12, n_classes=60, n_makes=12)


def test_synth_deterministic():
    a = synth_city(SyntheticCityConfig(seed=1, **SMALL))
    b = synth_city(SyntheticCityConfig(seed=1, **SMALL))
    assert dump(a.detections) == dump(b.detections)
    assert a.ground_truth == b.ground_truth
    assert a.images == b.images


def test_synth_zero_images_rejected():
    with pytest.raises(ConfigError):
        synth_city(SyntheticCityConfig(images_per_zip=0))


def test_synth_grid_and_rotations():
    city = synth_city(SyntheticCityConfig(seed=3, **SMALL))
    assert len(city.images) == 9 * 12
    pts = {}
    for im in city.images:
        pts.setdefault((im.latitude, im.longitude), []).append(im.rotation)
    assert all(sorted(r) == list(range(6)) for r in pts.values())
    lat, lon = np.array(list(pts)).T
    d = distance_matrix(lat, lon)
    np.fill_diagonal(d, np.inf)
    # every point's nearest neighbour sits one grid step away
    assert np.allclose(d.min(axis=1), 25.0, rtol=1e-3)


def _income_price_r(coupling, tilt, seed):
    city = synth_city(SyntheticCityConfig(n_zips=64, images_per_zip=60, price_income_coupling=coupling,
                                          make_band_tilt=tilt, seed=seed))
    inc = [r["median_income"] for r in city.ground_truth]
    price = [r["avg_price"] for r in city.ground_truth]
    return np.corrcoef(inc, price)[0, 1]


def test_synth_coupling_zero_is_uncorrelated():
    assert abs(_income_price_r(0.0, (0.0, 0.0, 0.0), 1)) < 0.2


def test_synth_strong_coupling_is_correlated():
    assert _income_price_r(3.0, (-0.3, 0.0, 0.3), 1) > 0.9


def test_synth_ground_truth_matches_planted_and_ignores_noise():
    base = synth_city(SyntheticCityConfig(seed=5, **SMALL))
    noisy = synth_city(SyntheticCityConfig(seed=5, miss_rate=0.5, true_score_mean=0.0, false_per_image=3.0,
                                           class_confidence=1.0, **SMALL))
    assert np.array_equal(base.planted["car_class"], noisy.planted["car_class"])
    table = base.table
    cls, img_zip, car_img = (base.planted[k] for k in ("car_class", "image_zip", "car_image"))
    for z, row in enumerate(base.ground_truth):
        mine = cls[img_zip[car_img] == z]
        assert row["avg_price"] == pytest.approx(float(np.mean(table.price[mine])), rel=1e-15)
        assert row["avg_price"] == noisy.ground_truth[z]["avg_price"]
        assert row["pct_foreign"] == noisy.ground_truth[z]["pct_foreign"]
        assert not math.isnan(row["avg_mpg"])
