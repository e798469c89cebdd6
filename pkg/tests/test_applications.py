import numpy as np
import pytest
import torch
from dataclasses import replace
from scipy import integrate, stats

from conftest import StubTrafficModel, horizontal_segment, make_tile_data
from models.applications import (DensePrediction, export_motion_model, export_travel_times, predict_dense,
                                 segment_timeseries, time_embedding_pca, travel_time_seconds, uncertainty_curve)
from models.traffic_model import TrafficModel
from utils.exceptions import ConfigError, DomainError, NoSupervisionError


@pytest.fixture
def toy_model(toy_model_config):
    torch.manual_seed(0)
    return TrafficModel(toy_model_config).eval()


def test_predict_dense_outputs(toy_model, tiny_splits):
    tile_data = tiny_splits["test"][0]
    pred = predict_dense(toy_model, tile_data, 2, 9, with_overlay=True)
    assert pred.mu.shape == pred.sigma.shape == pred.road_prob.shape == (64, 64)
    assert np.all(np.isfinite(pred.mu)) and np.all(pred.mu >= 0)
    assert np.all(pred.sigma > 0)
    assert np.all((pred.road_prob >= 0) & (pred.road_prob <= 1))
    assert pred.orientation_bins.min() >= 0 and pred.orientation_bins.max() < 16

    background = tile_data.masks.segment_raster == 0
    assert np.all(np.isnan(pred.aggregated_mu[background]))
    assert np.all(np.isfinite(pred.aggregated_mu[~background]))
    for seg_id, estimate in pred.segment_estimates.items():
        values = pred.aggregated_mu[tile_data.masks.segment_raster == seg_id]
        assert np.allclose(values, estimate.mu_bar)


def test_predict_dense_rejects_bad_time(toy_model, tiny_splits):
    with pytest.raises(DomainError):
        predict_dense(toy_model, tiny_splits["test"][0], 7, 0)


def test_segment_timeseries():
    segment = horizontal_segment(1, 8.3, {(2, 7): (70.0, 3)})
    tile_data = make_tile_data(1, [segment])
    model = StubTrafficModel({1: tile_data.masks.segment_raster}, {1: {1: 40.0}, (1, 2, 7): {1: 77.0}})
    table = segment_timeseries(model, tile_data, 1)
    assert len(table) == 168
    assert list(table.columns) == ["day", "hour", "mu_bar", "sigma_bar", "observed_speed", "count"]
    row = table[(table["day"] == 2) & (table["hour"] == 7)].iloc[0]
    assert row["mu_bar"] == pytest.approx(77.0)
    assert row["observed_speed"] == pytest.approx(70.0)
    assert row["count"] == 3
    assert table["observed_speed"].isna().sum() == 167
    assert np.allclose(table["mu_bar"].drop(row.name), 40.0)

    pred = predict_dense(model, tile_data, 4, 18, with_overlay=True)
    other = table[(table["day"] == 4) & (table["hour"] == 18)].iloc[0]
    assert other["mu_bar"] == pytest.approx(pred.segment_estimates[1].mu_bar)

    with pytest.raises(NoSupervisionError):
        segment_timeseries(model, tile_data, 99)


def grid_prediction(road_prob, bins, size=64):
    shape = (size, size)
    return DensePrediction("t0", 0, 8, np.full(shape, 30.0, dtype=np.float32), np.ones(shape, dtype=np.float32),
                           road_prob, bins)


def test_motion_model_without_roads_is_empty():
    tile = make_tile_data(1, [], size=64).tile
    pred = grid_prediction(np.zeros((64, 64)), np.zeros((64, 64), dtype=np.int64))
    collection = export_motion_model(pred, tile)
    assert collection["type"] == "FeatureCollection"
    assert collection["features"] == []


def test_motion_model_arrows():
    tile = make_tile_data(1, [], size=64).tile
    bins = np.arange(64 * 64).reshape(64, 64) % 16
    pred = grid_prediction(np.ones((64, 64)), bins)
    features = export_motion_model(pred, tile, stride=16)["features"]
    assert len(features) == 16
    for feature in features:
        props = feature["properties"]
        assert props["bearing"] / 22.5 == pytest.approx(round(props["bearing"] / 22.5))
        assert props["bearing"] == pytest.approx(bins[props["row"], props["col"]] * 22.5)
        (e0, n0), (e1, n1) = feature["geometry"]["coordinates"]
        assert np.hypot(e1 - e0, n1 - n0) == pytest.approx(0.8 * 16)
        assert props["color"].startswith("#")

    first = next(f for f in features if f["properties"]["row"] == 8 and f["properties"]["col"] == 8)
    (e0, n0), (e1, n1) = first["geometry"]["coordinates"]
    assert (e0, n0) == pytest.approx((8.5, 55.5))
    angle = np.radians(first["properties"]["bearing"])
    assert (e1 - e0, n1 - n0) == pytest.approx((12.8 * np.cos(angle), 12.8 * np.sin(angle)))


def test_motion_model_respects_threshold():
    tile = make_tile_data(1, [], size=64).tile
    road = np.zeros((64, 64))
    road[8, :] = 0.9
    road[24, :] = 0.5
    features = export_motion_model(grid_prediction(road, np.zeros((64, 64), dtype=np.int64)), tile)["features"]
    assert len(features) == 4
    assert {f["properties"]["row"] for f in features} == {8}
    assert {f["properties"]["bearing"] for f in features} == {0.0}


def test_travel_time_formula():
    assert travel_time_seconds(100.0, 36.0) == (pytest.approx(10.0), False)
    seconds, clamped = travel_time_seconds(100.0, 0.05)
    assert seconds == pytest.approx(3600.0)
    assert clamped


def test_travel_times_for_tile():
    segments = [horizontal_segment(1, 2.7, end=16.0), horizontal_segment(2, 8.3, end=10.0),
                horizontal_segment(3, 13.9, end=6.0)]
    tile_data = make_tile_data(1, segments)
    model = StubTrafficModel({1: tile_data.masks.segment_raster}, {1: {1: 36.0, 2: 18.0, 3: 72.0}})
    table = export_travel_times(predict_dense(model, tile_data, 0, 8), tile_data)
    assert list(table["segment_id"]) == [1, 2, 3]
    assert list(table["length_m"]) == pytest.approx([16.0, 10.0, 6.0])
    assert list(table["travel_seconds"]) == pytest.approx([1.6, 2.0, 0.3])
    assert table["travel_seconds"].sum() == pytest.approx(3.9)
    assert not table["clamped"].any()


def test_travel_times_clamp_stopped_segments():
    tile_data = make_tile_data(1, [horizontal_segment(1, 8.3)])
    model = StubTrafficModel({1: tile_data.masks.segment_raster}, {1: {1: 0.0}})
    table = export_travel_times(predict_dense(model, tile_data, 0, 8), tile_data)
    assert table["clamped"].all()
    assert table["travel_seconds"].iloc[0] == pytest.approx(3.6 * 16.0 / 0.1)


def test_time_embedding_pca(toy_model):
    pca = time_embedding_pca(toy_model)
    assert pca.scores.shape == (7, 24, 3)
    assert np.allclose(pca.components @ pca.components.T, np.eye(3), atol=1e-8)
    assert np.all(pca.components[:, 0] >= 0)
    assert np.all(np.diff(pca.explained_variance) <= 0)
    again = time_embedding_pca(toy_model)
    assert np.array_equal(pca.scores, again.scores)


def test_time_embedding_pca_needs_time_pathway(toy_model_config):
    with pytest.raises(ConfigError):
        time_embedding_pca(TrafficModel(replace(toy_model_config, context=("loc",))))
    with pytest.raises(ConfigError):
        time_embedding_pca(TrafficModel(replace(toy_model_config, context=())))


def uncertainty_fixture():
    tile_data = make_tile_data(1, [horizontal_segment(1, 8.3, {(0, 8): (52.0, 4)})])
    model = StubTrafficModel({1: tile_data.masks.segment_raster}, {1: {1: 50.0}}, sigma=5.0)
    return tile_data, model


def test_uncertainty_curve():
    tile_data, model = uncertainty_fixture()
    curve = uncertainty_curve(model, tile_data, 1, 0, 8)
    assert len(curve.x) == len(curve.density) == 241
    assert curve.density.dtype == np.float64
    assert np.allclose(curve.density, stats.t.pdf(curve.x, 4, curve.mu_bar, curve.sigma_bar), atol=1e-9)
    assert curve.x[0] == 0.0 and curve.x[-1] == pytest.approx(120.0)
    assert curve.x[int(np.argmax(curve.density))] == pytest.approx(50.0)
    assert curve.nu == 4
    assert curve.observed == pytest.approx(52.0)
    assert (curve.mu_bar, curve.sigma_bar) == pytest.approx((50.0, 5.0))

    mass = stats.t.cdf(120.0, 4, 50.0, 5.0) - stats.t.cdf(0.0, 4, 50.0, 5.0)
    assert integrate.trapezoid(curve.density, curve.x) == pytest.approx(mass, abs=1e-3)


def test_uncertainty_curve_for_unobserved_time():
    tile_data, model = uncertainty_fixture()
    with pytest.raises(NoSupervisionError):
        uncertainty_curve(model, tile_data, 1, 3, 3)
    curve = uncertainty_curve(model, tile_data, 1, 3, 3, nu=2)
    assert curve.nu == 2
    assert curve.observed is None
