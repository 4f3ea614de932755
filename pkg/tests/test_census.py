import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carcensus.census import (
    UNASSIGNED,
    ClassExpectation,
    RegionAccumulator,
    aggregate_batches,
    aggregate_region,
    aggregate_shards,
    expected_attribute,
    expected_class_count,
    truncate_topk,
)
from carcensus.errors import ArgumentError, LookupFailure, StateError
from carcensus.ingest import BBox, DetectionBatch, DetectionRecord
from carcensus.synth import SyntheticCityConfig, synth_city
from carcensus import pipeline

from conftest import make_table
from oracles import expected_counts_oracle

BOX = BBox(10, 10, 5, 5)


def det(p_car, pairs, image="a"):
    return DetectionRecord(image, BOX, 0.0, p_car, tuple(pairs))


# --------------------------------------------------------------------------- top-k


def test_topk_small_support_unchanged():
    p = np.zeros(50)
    p[[3, 9, 20]] = [0.5, 0.3, 0.2]
    assert truncate_topk(p) == ((3, 0.5), (9, 0.3), (20, 0.2))


def test_topk_uniform_mass():
    kept = truncate_topk(np.full(2657, 1 / 2657))
    assert len(kept) == 20
    assert sum(p for _, p in kept) == pytest.approx(20 / 2657, rel=1e-12)
    # ties at the cutoff go to the smaller ids
    assert [c for c, _ in kept] == list(range(20))


def test_topk_concentrated_mass_coverage(rng):
    logits = rng.normal(0, 1, 2657)
    logits[:5] += 9
    p = np.exp(logits - logits.max())
    p /= p.sum()
    kept = truncate_topk(p)
    assert sum(v for _, v in kept) >= 0.855


def test_topk_errors_and_renormalize():
    with pytest.raises(ArgumentError):
        truncate_topk([1.0], k=0)
    with pytest.raises(ArgumentError):
        truncate_topk([0.5, 0.4])
    kept = truncate_topk([0.5, 0.3, 0.2], k=2, renormalize=True)
    assert sum(v for _, v in kept) == pytest.approx(1.0)


# --------------------------------------------------------------------------- expected counts


def test_expected_count_examples():
    assert expected_class_count([det(1.0, [(7, 1.0)])]).counts == {7: 1.0}
    two = expected_class_count([det(0.5, [(1, 0.6), (2, 0.4)])] * 2)
    assert two.counts == pytest.approx({1: 0.6, 2: 0.4}, abs=1e-15)
    assert expected_class_count([]).counts == {}


def test_uncalibrated_record_is_state_error():
    with pytest.raises(StateError):
        expected_class_count([det(None, [(1, 0.5)])])


@st.composite
def small_images(draw):
    boxes = []
    for _ in range(draw(st.integers(0, 10))):
        k = draw(st.integers(0, 20))
        ids = draw(st.lists(st.integers(0, 49), min_size=k, max_size=k, unique=True))
        raw = draw(st.lists(st.floats(0.01, 1.0), min_size=len(ids), max_size=len(ids)))
        s = sum(raw)
        probs = [r / s * 0.99 for r in raw] if s > 0.99 else raw
        boxes.append((draw(st.floats(0, 1)), list(zip(ids, probs))))
    return boxes


@given(small_images())
def test_expected_count_matches_double_loop(boxes):
    got = expected_class_count([det(p, pairs) for p, pairs in boxes])
    want = expected_counts_oracle(boxes)
    assert got.counts.keys() == want.keys()
    for c in want:
        assert abs(got.counts[c] - want[c]) <= 1e-12
    assert got.class_mass <= len(boxes) + 1e-12


def test_expected_attribute_examples(small_table):
    assert expected_attribute({0: 1.0}, small_table, "price") == 60000
    table = make_table([("A", "sedan", 10000, 30, "USA"), ("B", "sedan", 20000, 20, "USA"),
                        ("Hummer", "SUV", 1, 1, "USA"), ("Honda", "sedan", 1, 1, "Japan")])
    assert expected_attribute({0: 1.0, 1: 1.0}, table, "price") == 15000
    assert expected_attribute({2: 0.6, 3: 0.4}, table, "make") == {"Hummer": 0.6, "Honda": 0.4}
    with pytest.raises(LookupFailure):
        expected_attribute({99: 1.0}, table, "make")


def test_missing_price_excluded_from_mean():
    table = make_table([("A", "sedan", 10000, 30, "USA"), ("B", "sedan", math.nan, 20, "USA")])
    assert expected_attribute({0: 0.5, 1: 3.0}, table, "price") == 10000
    assert math.isnan(expected_attribute({1: 1.0}, table, "price"))


@given(st.dictionaries(st.integers(0, 5), st.floats(0, 3), max_size=6),
       st.sampled_from(["make", "body_type", "country", "is_foreign"]))
def test_categorical_mass_sums_to_class_mass(counts, kind):
    table = make_table([("Hummer", "SUV", 1, 1, "USA"), ("Honda", "sedan", 1, 1, "Japan"),
                        ("Honda", "coupe", 1, 1, "Japan"), ("Ford", "sedan", 1, 1, "USA"),
                        ("Ford", "van", 1, 1, "USA"), ("BMW", "sedan", 1, 1, "Germany")])
    hist = expected_attribute(ClassExpectation(counts), table, kind)
    assert math.fsum(hist.values()) == pytest.approx(math.fsum(counts.values()), abs=1e-12)


# --------------------------------------------------------------------------- regions


def test_single_image_region_equals_expectation(small_table):
    e = expected_class_count([det(0.5, [(1, 0.6), (5, 0.4)]), det(1.0, [(0, 1.0)])])
    (stats,) = aggregate_region({"z": [e]}, small_table).values()
    assert stats.class_counts == pytest.approx(e.counts)
    assert stats.total_expected_cars == 1.5
    assert stats.image_count == 1 and stats.cars_per_image == 1.5
    assert stats.avg_price == pytest.approx((0.3 * 20000 + 0.2 * 45000 + 60000) / 1.5)
    assert stats.pct_by_make == pytest.approx({"Honda": 0.2, "BMW": 0.2 / 1.5, "Hummer": 1 / 1.5})
    assert stats.pct_foreign == pytest.approx(0.5 / 1.5)


def test_unknown_image_goes_to_unassigned(small_table):
    batch = DetectionBatch.from_records([det(1.0, [(0, 1.0)], "known"), det(0.5, [(1, 1.0)], "stray")])
    stats = aggregate_batches([batch], {"known": "z1"}, small_table)
    assert stats[UNASSIGNED].total_expected_cars == 0.5
    assert stats["z1"].class_counts == {0: 1.0}


def test_uncalibrated_batch_rejected(small_table):
    batch = DetectionBatch.from_records([det(None, [(0, 1.0)], "a")])
    with pytest.raises(StateError):
        aggregate_batches([batch], {"a": "z"}, small_table)


@pytest.fixture(scope="module")
def calibrated_city():
    city = synth_city(SyntheticCityConfig(n_zips=16, images_per_zip=36, seed=4, class_confidence=12.0, miss_rate=0.0,
                                          false_per_image=0.1, true_score_mean=3.0, false_score_mean=-3.0))
    model = pipeline.fit_calibration(city.detections, city.truth_boxes)
    return city, pipeline.apply_calibration(city.detections, model)


def test_zip_price_matches_planted_at_low_noise(calibrated_city):
    city, cal = calibrated_city
    stats = pipeline.aggregate([cal], city.images, city.table, "zip")
    for row in city.ground_truth:
        assert stats[row["zip_code"]].avg_price == pytest.approx(row["avg_price"], rel=0.02)


def test_city_equals_sum_of_zips(calibrated_city):
    city, cal = calibrated_city
    zips = pipeline.aggregate([cal], city.images, city.table, "zip")
    (whole,) = pipeline.aggregate([cal], city.images, city.table, "city").values()
    total = {}
    for s in zips.values():
        for c, v in s.class_counts.items():
            total[c] = total.get(c, 0.0) + v
    assert whole.class_counts.keys() == total.keys()
    for c, v in total.items():
        assert whole.class_counts[c] == pytest.approx(v, rel=1e-12)
    assert whole.total_expected_cars == pytest.approx(sum(s.total_expected_cars for s in zips.values()), rel=1e-12)


def test_region_invariants(calibrated_city):
    city, cal = calibrated_city
    for s in pipeline.aggregate([cal], city.images, city.table, "zip").values():
        assert sum(s.pct_by_make.values()) == pytest.approx(1.0, abs=1e-6)
        assert sum(s.pct_by_body_type.values()) == pytest.approx(1.0, abs=1e-6)
        assert s.cars_per_image * s.image_count == pytest.approx(s.total_expected_cars, rel=1e-6)


@given(st.lists(st.integers(0, 9), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_partition_additivity(cuts, random):
    table = make_table([(f"M{i % 3}", "sedan", 1000 * (i + 1), 20 + i, "USA") for i in range(12)])
    rs = np.random.default_rng(random.randint(0, 2**32))
    recs = []
    for k in range(60):
        pairs = [(int(c), float(p)) for c, p in zip(rs.choice(12, 3, replace=False), rs.dirichlet([1, 1, 1]) * 0.9)]
        recs.append(det(float(rs.random()), pairs, f"img{k // 3:02d}"))
    regions = {f"img{k:02d}": f"r{k % 4}" for k in range(20)}
    batch = DetectionBatch.from_records(recs)
    whole = aggregate_batches([batch], regions, table)
    bounds = sorted({0, len(recs), *[c * 6 for c in cuts]})
    shards = [[batch.take(np.arange(a, b))] for a, b in zip(bounds, bounds[1:])]
    split = aggregate_shards(shards, regions, table)
    assert whole.keys() == split.keys()
    for r in whole:
        a, b = whole[r], split[r]
        assert a.class_counts.keys() == b.class_counts.keys()
        for c in a.class_counts:
            assert b.class_counts[c] == pytest.approx(a.class_counts[c], rel=1e-9, abs=1e-15)
        assert b.avg_price == pytest.approx(a.avg_price, rel=1e-9)


def test_adding_an_image_never_decreases_total(small_table):
    acc = RegionAccumulator({"a": "z", "b": "z"}, len(small_table))
    acc.add_batch(DetectionBatch.from_records([det(0.4, [(0, 0.5)], "a")]))
    before = acc.finalize(small_table)["z"].total_expected_cars
    acc.add_batch(DetectionBatch.from_records([det(0.0, [(1, 0.5)], "b")]))
    assert acc.finalize(small_table)["z"].total_expected_cars >= before


def test_merge_requires_same_regions(small_table):
    a = RegionAccumulator({"x": "z1"}, len(small_table))
    b = RegionAccumulator({"x": "z2"}, len(small_table))
    with pytest.raises(ArgumentError):
        a.merge(b)
