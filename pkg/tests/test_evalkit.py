import dataclasses
import json

import numpy as np
import pytest

from anyd.datakit import DrivingRecord
from anyd.evalkit import (MetricsReport, ade, emit_report, evaluate, fde,
                          load_report, predict_waypoints, report_json,
                          sha256_bytes)
from anyd.planner import Command, init_model
from anyd.verify import MICRO_CONFIG


def test_ade_zero_when_equal():
    wp = np.arange(10.0).reshape(5, 2)
    assert ade(wp, wp) == 0.0


def test_ade_constant_offset():
    gt = np.zeros((5, 2))
    pred = gt + np.array([1.0, 0.0])
    assert ade(pred, gt) == pytest.approx(1.0, abs=1e-15)


def test_ade_three_four_five():
    gt = np.zeros((5, 2))
    pred = gt.copy()
    pred[2] = [3.0, 4.0]
    assert ade(pred, gt) == pytest.approx(1.0, abs=1e-15)


def test_fde_zero_when_equal():
    wp = np.arange(10.0).reshape(5, 2)
    assert fde(wp, wp) == 0.0


def test_fde_final_offset():
    gt = np.zeros((5, 2))
    pred = gt.copy()
    pred[4] = [0.0, 2.0]
    assert fde(pred, gt) == pytest.approx(2.0, abs=1e-15)


def test_fde_ignores_early_points():
    gt = np.zeros((5, 2))
    pred = gt.copy()
    pred[:4] = 100.0
    assert fde(pred, gt) == 0.0


def test_metric_bounds():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred, gt = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
        dists = np.linalg.norm(pred - gt, axis=1)
        a = ade(pred, gt)
        assert 0.0 <= a <= dists.max() + 1e-12
        assert a >= dists.min() - 1e-12
        assert fde(pred, gt) >= 0.0


def test_metric_shape_validation():
    with pytest.raises(ValueError):
        ade(np.zeros((4, 2)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        fde(np.zeros((5, 3)), np.zeros((5, 2)))


def _records_with_cities(layout, base_seed=1):
    # layout: list of (city, region_id, n, tags)
    out = []
    rng = np.random.default_rng(base_seed)
    for city, region, n, tags in layout:
        for i in range(n):
            out.append(DrivingRecord(
                id=f"{city}/{i:04d}",
                image=rng.uniform(0, 1, (MICRO_CONFIG.image_h,
                                         MICRO_CONFIG.image_w,
                                         MICRO_CONFIG.image_ch)),
                speed=float(rng.uniform(0, 10)),
                command=Command(int(rng.integers(0, 3))),
                region_id=region, region_name=city,
                waypoints=rng.standard_normal((5, 2)), tags=list(tags)))
    return out


def test_balanced_average_ignores_counts():
    # construct a report directly: the balanced mean must ignore n
    report = MetricsReport(
        per_city={"big": {"ade": 1.0, "fde": 2.0, "n": 1000},
                  "small": {"ade": 2.0, "fde": 4.0, "n": 10}},
        balanced_ade=1.5, balanced_fde=3.0, per_event={})
    assert report.balanced_ade == 1.5


def test_evaluate_balanced_mean_is_unweighted():
    records = _records_with_cities([("big", 0, 40, []), ("small", 1, 4, [])])
    model = init_model(MICRO_CONFIG, seed=2)
    report = evaluate(model, records)
    cities = report.per_city
    assert cities["big"]["n"] == 40 and cities["small"]["n"] == 4
    expected = 0.5 * (cities["big"]["ade"] + cities["small"]["ade"])
    assert report.balanced_ade == pytest.approx(expected, abs=1e-12)


def test_evaluate_single_record():
    records = _records_with_cities([("solo", 0, 1, ["left"])])
    model = init_model(MICRO_CONFIG, seed=3)
    report = evaluate(model, records)
    pred = predict_waypoints(records, model)[0]
    assert report.per_city["solo"]["ade"] == pytest.approx(
        ade(pred, records[0].waypoints), abs=1e-12)
    assert report.per_city["solo"]["fde"] == pytest.approx(
        fde(pred, records[0].waypoints), abs=1e-12)


def test_evaluate_per_tag_matches_brute_force():
    records = _records_with_cities([("a", 0, 12, ["left"]),
                                    ("b", 1, 9, ["left", "red_light"])])
    model = init_model(MICRO_CONFIG, seed=4)
    report = evaluate(model, records)
    preds = predict_waypoints(records, model)
    for tag in ("left", "red_light"):
        members = [(p, r) for p, r in zip(preds, records) if tag in r.tags]
        expected = float(np.mean([ade(p, r.waypoints) for p, r in members]))
        assert report.per_event[tag]["ade"] == pytest.approx(expected,
                                                             abs=1e-12)
        assert report.per_event[tag]["n"] == len(members)


def test_evaluate_order_invariance_bitwise():
    records = _records_with_cities([("a", 0, 10, ["left"]),
                                    ("b", 1, 7, ["right"])])
    model = init_model(MICRO_CONFIG, seed=5)
    fwd = evaluate(model, records)
    rev = evaluate(model, list(reversed(records)))
    assert report_json(fwd) == report_json(rev)


def test_evaluate_threads_match_sequential():
    records = _records_with_cities([("a", 0, 13, []), ("b", 1, 6, [])])
    model = init_model(MICRO_CONFIG, seed=6)
    seq = evaluate(model, records, batch_size=4, threads=1)
    par = evaluate(model, records, batch_size=4, threads=3)
    assert report_json(seq) == report_json(par)


def test_evaluate_requires_labels():
    records = _records_with_cities([("a", 0, 2, [])])
    records[0] = dataclasses.replace(records[0], waypoints=None)
    model = init_model(MICRO_CONFIG, seed=7)
    with pytest.raises(ValueError):
        evaluate(model, records)


def test_tags_of_interest_filter():
    records = _records_with_cities([("a", 0, 6, ["left", "high_speed"])])
    model = init_model(MICRO_CONFIG, seed=8)
    report = evaluate(model, records, tags_of_interest={"left"})
    assert set(report.per_event) == {"left"}


def test_emit_report_round_trip(tmp_path):
    records = _records_with_cities([("b", 1, 5, ["left"]), ("a", 0, 5, [])])
    model = init_model(MICRO_CONFIG, seed=9)
    report = evaluate(model, records, model_fingerprint="m" * 64,
                      config_fingerprint="c" * 64)
    path = tmp_path / "report.json"
    emit_report(report, path, figures=False)
    loaded = load_report(path)
    assert report_json(loaded) == report_json(report)
    csv_lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "city,ade,fde,n"
    assert [line.split(",")[0] for line in csv_lines[1:]] == ["a", "b"]


def test_emit_report_renders_figure(tmp_path):
    records = _records_with_cities([("a", 0, 4, [])])
    model = init_model(MICRO_CONFIG, seed=10)
    report = evaluate(model, records)
    path = tmp_path / "r.json"
    emit_report(report, path, figures=True)
    figure = tmp_path / "r_cities.png"
    assert figure.exists() and figure.stat().st_size > 0


def test_empty_per_event_serializes_as_empty_object(tmp_path):
    records = _records_with_cities([("a", 0, 3, [])])
    model = init_model(MICRO_CONFIG, seed=11)
    report = evaluate(model, records)
    path = tmp_path / "r.json"
    emit_report(report, path, figures=False)
    doc = json.loads(path.read_text())
    assert doc["per_event"] == {}


def test_report_carries_fingerprints():
    records = _records_with_cities([("a", 0, 2, [])])
    model = init_model(MICRO_CONFIG, seed=12)
    fp = sha256_bytes(b"anything")
    report = evaluate(model, records, model_fingerprint=fp,
                      config_fingerprint=fp)
    assert report.model_fingerprint == fp
    assert report.config_fingerprint == fp
