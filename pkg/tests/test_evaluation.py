import math

import pytest

from conftest import StubTrafficModel, horizontal_segment, make_tile_data
from models.evaluation import compute_metrics, evaluate_macro, evaluate_micro
from utils.exceptions import NoSupervisionError

NORTHINGS = (2.7, 8.3, 13.9)


def build(truths_by_time, predictions, key=1):
    """每个路段一条水平线；truths_by_time: {(d, h): [y1, y2, ...]}"""
    n = len(next(iter(truths_by_time.values())))
    segments = []
    for i in range(n):
        observations = {t: (float(ys[i]), 3) for t, ys in truths_by_time.items()}
        segments.append(horizontal_segment(i + 1, NORTHINGS[i], observations))
    tile_data = make_tile_data(key, segments)
    speeds = {(key, d, h): {i + 1: float(v) for i, v in enumerate(values)}
              for (d, h), values in predictions.items()}
    return tile_data, StubTrafficModel({key: tile_data.masks.segment_raster}, speeds)


def test_hand_computed_two_pairs():
    tile_data, model = build({(0, 8): [12.0, 18.0]}, {(0, 8): [10.0, 20.0]})
    report = evaluate_micro(model, [tile_data], seed=0)
    assert report.rmse == pytest.approx(2.0)
    assert report.mae == pytest.approx(2.0)
    assert report.r2 == pytest.approx(1 - 8 / 18)
    assert report.n_pairs == 2


def test_three_segment_fixture():
    tile_data, model = build({(0, 8): [10.0, 20.0, 30.0]}, {(0, 8): [12.0, 18.0, 30.0]})
    report = evaluate_micro(model, [tile_data])
    assert report.rmse == pytest.approx(math.sqrt(8 / 3))
    assert report.mae == pytest.approx(4 / 3)
    assert report.r2 == pytest.approx(0.96)
    assert report.rmse >= report.mae >= 0
    assert report.road_f1 == pytest.approx(1.0)
    assert report.orientation_accuracy == pytest.approx(1.0)


def test_perfect_and_constant_predictors():
    tile_data, model = build({(0, 8): [10.0, 20.0, 30.0]}, {(0, 8): [10.0, 20.0, 30.0]})
    report = evaluate_micro(model, [tile_data])
    assert report.rmse == pytest.approx(0.0, abs=1e-9)
    assert report.mae == pytest.approx(0.0, abs=1e-9)
    assert report.r2 == pytest.approx(1.0)

    tile_data, model = build({(0, 8): [10.0, 20.0, 30.0]}, {(0, 8): [20.0, 20.0, 20.0]})
    assert evaluate_micro(model, [tile_data]).r2 == pytest.approx(0.0, abs=1e-12)


def test_zero_variance_r2_is_undefined():
    report = compute_metrics([1.0, 2.0], [5.0, 5.0])
    assert report.r2 is None
    assert report.rmse == pytest.approx(math.sqrt((16 + 9) / 2))


def test_micro_pools_across_tiles_and_is_reproducible():
    tile_a, model_a = build({(0, 8): [10.0, 20.0]}, {(0, 8): [12.0, 18.0]}, key=1)
    tile_b, model_b = build({(1, 9): [40.0]}, {(1, 9): [44.0]}, key=2)
    model = StubTrafficModel({**model_a.rasters, **model_b.rasters}, {**model_a.speeds, **model_b.speeds})
    report = evaluate_micro(model, [tile_a, tile_b], seed=3)
    assert report.n_pairs == 3
    assert report.rmse == pytest.approx(math.sqrt((4 + 4 + 16) / 3))
    again = evaluate_micro(model, [tile_a, tile_b], seed=3)
    assert again.to_dict() == report.to_dict()


def test_macro_weights_times_equally():
    truths = {(0, 8): [10.0, 20.0], (5, 17): [10.0, 20.0]}
    preds = {(0, 8): [12.0, 18.0], (5, 17): [14.0, 16.0]}
    tile_data, model = build(truths, preds)
    report = evaluate_macro(model, [tile_data], times=[(0, 8), (5, 17), (1, 1)])
    assert report.rmse == pytest.approx(3.0)
    assert report.mae == pytest.approx(3.0)
    assert report.dropped_times == [(1, 1)]
    table = report.per_time_table()
    assert len(table) == 2
    assert list(table["rmse"]) == pytest.approx([2.0, 4.0])


def test_macro_single_time_equals_micro():
    tile_data, model = build({(0, 8): [10.0, 20.0, 30.0]}, {(0, 8): [12.0, 18.0, 31.0]})
    micro = evaluate_micro(model, [tile_data])
    macro = evaluate_macro(model, [tile_data], times=[(0, 8)])
    assert macro.rmse == pytest.approx(micro.rmse)
    assert macro.mae == pytest.approx(micro.mae)
    assert macro.r2 == pytest.approx(micro.r2)


def test_no_observed_segments():
    tile_data = make_tile_data(1, [horizontal_segment(1, 8.3)])
    model = StubTrafficModel({1: tile_data.masks.segment_raster}, {})
    with pytest.raises(NoSupervisionError):
        evaluate_micro(model, [tile_data])
    with pytest.raises(NoSupervisionError):
        evaluate_macro(model, [tile_data], times=[(0, 8)])
    with pytest.raises(NoSupervisionError):
        evaluate_micro(model, [])
