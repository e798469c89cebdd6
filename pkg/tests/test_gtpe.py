import math

import pytest
import torch

from models.gtpe import (GeoTemporalEncoder, LocationEncoder, LocationTimeEncoder, Siren, TimeEncoder,
                         cyclic_time_features, param_loc, param_time)
from models.traffic_model import count_parameters
from utils.exceptions import ConfigError, DomainError


def test_param_time_values():
    feats = param_time(0, 0)
    assert feats.shape == (4,)
    assert torch.allclose(feats, torch.tensor([0.0, -1.0, 0.0, -1.0]), atol=1e-6)
    # h = 12 时小时相位为0
    feats = param_time(0, 12)
    assert float(feats[2]) == pytest.approx(0.0, abs=1e-6)
    assert float(feats[3]) == pytest.approx(1.0, abs=1e-6)


def test_param_time_batched():
    feats = param_time(torch.tensor([0, 3, 6]), torch.tensor([0, 8, 23]))
    assert feats.shape == (3, 4)
    assert torch.allclose(feats[:, 0] ** 2 + feats[:, 1] ** 2, torch.ones(3), atol=1e-6)


def test_time_features_are_periodic():
    assert torch.allclose(cyclic_time_features(7, 24), cyclic_time_features(0, 0), atol=1e-6)
    assert torch.allclose(cyclic_time_features(9, 30), cyclic_time_features(2, 6), atol=1e-5)


def test_param_time_rejects_bad_input():
    with pytest.raises(DomainError):
        param_time(7, 0)
    with pytest.raises(DomainError):
        param_time(0, 24)
    with pytest.raises(DomainError):
        param_time(0.5, 3)


def test_param_loc():
    location = torch.rand(2, 2, 4, 4) * 2 - 1
    feats = param_loc(location)
    assert feats.shape == (2, 3, 4, 4)
    assert torch.allclose(feats[:, 2], location[:, 0] * location[:, 1])


def test_siren_initialisation_bounds():
    first = Siren(3, 64, w0=30.0, is_first=True)
    assert first.linear.weight.abs().max() <= 1.0 / 3
    hidden = Siren(64, 64, w0=1.0)
    assert hidden.linear.weight.abs().max() <= math.sqrt(6.0 / 64)


def test_pathway_parameter_counts():
    assert count_parameters(LocationEncoder()) == 12_736
    assert count_parameters(TimeEncoder()) == 12_800
    assert count_parameters(LocationTimeEncoder()) == 42_304
    assert count_parameters(GeoTemporalEncoder()) == 67_840
    assert count_parameters(GeoTemporalEncoder(("loc",))) == 12_736


def test_encoding_is_sum_of_pathways():
    torch.manual_seed(0)
    gtpe = GeoTemporalEncoder()
    location = torch.rand(2, 2, 8, 8) * 2 - 1
    out = gtpe(location, torch.tensor([0, 5]), torch.tensor([8, 17]))
    assert out.encoding.shape == (2, 64, 8, 8)
    assert set(out.pathways) == {"loc", "time", "loctime"}
    total = out.pathways["loc"] + out.pathways["time"] + out.pathways["loctime"]
    assert torch.allclose(out.encoding, total, atol=1e-6)
    # 时间通路在空间上是常数
    time_map = out.pathways["time"]
    assert torch.allclose(time_map, time_map[:, :, :1, :1].expand_as(time_map))


def test_time_changes_encoding():
    torch.manual_seed(0)
    gtpe = GeoTemporalEncoder(("time",))
    location = torch.zeros(1, 2, 4, 4)
    a = gtpe(location, torch.tensor([0]), torch.tensor([4])).encoding
    b = gtpe(location, torch.tensor([0]), torch.tensor([8])).encoding
    assert not torch.allclose(a, b)


def test_disabled_pathways():
    gtpe = GeoTemporalEncoder(("loc", "loctime"))
    assert gtpe.time_encoder is None
    out = gtpe(torch.zeros(1, 2, 4, 4), torch.tensor([1]), torch.tensor([2]))
    assert set(out.pathways) == {"loc", "loctime"}
    with pytest.raises(ConfigError):
        GeoTemporalEncoder(())
