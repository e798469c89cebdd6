from dataclasses import replace

import pytest
import torch
import torch.nn as nn

from config import EncoderConfig, ModelConfig, MODEL_PRESETS
from models.encoder import ConvStem, HybridEncoder, MBConvBlock, MHSABlock, fuse_stage
from models.traffic_model import TrafficModel, count_parameters, model_summary
from utils.exceptions import ConfigError, ShapeError


@pytest.fixture(scope="module")
def full_model():
    return TrafficModel(ModelConfig())


def test_stem_and_mbconv_parameter_counts(full_model):
    enc = full_model.encoder
    assert count_parameters(enc.stem) == 66_160
    assert count_parameters(enc.stage1[0]) == 44_688
    assert count_parameters(enc.stage2[0]) == 61_200
    assert count_parameters(enc.stage2[1]) == 171_296
    assert count_parameters(MBConvBlock(64, 64)) == 44_688


def test_mhsa_parameter_counts(full_model):
    enc = full_model.encoder
    assert count_parameters(enc.stage3.blocks[0]) == 918_024
    assert count_parameters(enc.stage4.blocks[0]) == 3_182_600
    assert count_parameters(enc.stage3.embed) + count_parameters(enc.stage3.blocks[0]) == 1_213_704
    assert count_parameters(enc.stage4.embed) + count_parameters(enc.stage4.blocks[0]) == 4_363_784


def test_context_projection_parameter_counts(full_model):
    enc = full_model.encoder
    assert count_parameters(enc.stage3_context) == 147_712
    assert count_parameters(enc.stage4_context) == 295_424


def test_model_summary_total(full_model):
    summary = model_summary(full_model)
    assert summary["gtpe"] == 67_840
    assert summary["road_decoder"] == 1_543_681
    assert summary["total"] == sum(v for k, v in summary.items() if k != "total")
    # 约18.1M
    assert round(summary["total"] / 1e5) == 181


def test_pyramid_shapes_at_256():
    encoder = HybridEncoder(EncoderConfig(image_size=256)).eval()
    with torch.no_grad():
        pyramid = encoder(torch.rand(1, 3, 256, 256))
    shapes = [tuple(f.shape) for f in pyramid.as_list()]
    assert shapes == [(1, 64, 64, 64), (1, 128, 32, 32), (1, 256, 16, 16), (1, 512, 8, 8)]
    assert all(torch.isfinite(f).all() for f in pyramid.as_list())


def test_end_to_end_forward_at_256():
    model = TrafficModel(MODEL_PRESETS["desk"]).eval()
    image = torch.rand(1, 3, 256, 256)
    location = torch.rand(1, 2, 256, 256) * 2 - 1
    with torch.no_grad():
        out = model(image, location, torch.tensor([0]), torch.tensor([8]))
    assert out.speed.mu.shape == (1, 256, 256)
    assert out.speed.sigma.shape == (1, 256, 256)
    assert out.road_logits.shape == (1, 256, 256)
    assert out.orientation_logits.shape == (1, 16, 256, 256)
    for t in (out.speed.mu, out.speed.sigma, out.road_logits, out.orientation_logits):
        assert torch.isfinite(t).all()


def test_context_changes_features(toy_model_config):
    model = TrafficModel(toy_model_config).eval()
    image = torch.rand(1, 3, 64, 64)
    location = torch.zeros(1, 2, 64, 64)
    with torch.no_grad():
        a = model(image, location, torch.tensor([0]), torch.tensor([3])).speed.mu
        b = model(image, location, torch.tensor([0]), torch.tensor([15])).speed.mu
    assert not torch.equal(a, b)


def test_without_context_time_is_ignored(toy_model_config):
    model = TrafficModel(replace(toy_model_config, context=())).eval()
    image = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = model(image, day=torch.tensor([0]), hour=torch.tensor([3])).speed.mu
        b = model(image, day=torch.tensor([6]), hour=torch.tensor([20])).speed.mu
    assert torch.equal(a, b)


def test_fuse_stage_projects_and_resamples():
    projection = nn.Conv2d(64, 256, 3, padding=1)
    assert count_parameters(projection) == 147_712
    nn.init.zeros_(projection.weight)
    nn.init.constant_(projection.bias, 0.5)
    fused = fuse_stage(projection, torch.randn(2, 64, 64, 64), (4, 4))
    assert fused.shape == (2, 256, 4, 4)
    assert torch.allclose(fused, torch.full_like(fused, 0.5))


def test_shape_errors():
    encoder = HybridEncoder(EncoderConfig(image_size=64))
    with pytest.raises(ShapeError):
        encoder(torch.rand(1, 3, 96, 96))
    with pytest.raises(ShapeError):
        ConvStem()(torch.rand(1, 3, 50, 50))


def test_missing_context_is_config_error(toy_model_config):
    model = TrafficModel(toy_model_config)
    with pytest.raises(ConfigError):
        model(torch.rand(1, 3, 64, 64))


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=100)
    with pytest.raises(ConfigError):
        EncoderConfig(channels=(64, 128, 250, 512))
    with pytest.raises(ConfigError):
        EncoderConfig(mhsa_depths=(0, 2))


def test_mhsa_without_bias_is_permutation_equivariant():
    torch.manual_seed(0)
    block = MHSABlock(dim=32, grid_size=4, num_heads=4).eval()
    with torch.no_grad():
        block.attn.relative_position_bias_table.zero_()
    x = torch.randn(2, 16, 32)
    perm = torch.roll(torch.arange(16), 5)
    with torch.no_grad():
        expected = block(x)[:, perm]
        actual = block(x[:, perm])
    assert torch.allclose(actual, expected, atol=1e-5)


def test_relative_bias_breaks_equivariance():
    torch.manual_seed(0)
    block = MHSABlock(dim=32, grid_size=4, num_heads=4).eval()
    with torch.no_grad():
        block.attn.relative_position_bias_table.normal_(0.0, 1.0)
    x = torch.randn(1, 16, 32)
    perm = torch.roll(torch.arange(16), 5)
    with torch.no_grad():
        assert not torch.allclose(block(x[:, perm]), block(x)[:, perm], atol=1e-4)


def test_stage4_features_follow_one_stride_translation():
    torch.manual_seed(0)
    encoder = HybridEncoder(MODEL_PRESETS["toy"].encoder).eval()
    image = torch.zeros(1, 3, 256, 256)
    image[:, :, 96:128, 96:128] = torch.rand(1, 3, 32, 32)
    # 平移32像素 = stage4的一个token
    shifted = torch.roll(image, 32, dims=-1)
    with torch.no_grad():
        for stage in (encoder.stage3, encoder.stage4):
            for block in stage.blocks:
                block.attn.relative_position_bias_table.zero_()
        f4 = encoder(image).stage4
        g4 = encoder(shifted).stage4
    assert f4.shape == (1, 128, 8, 8)
    assert not torch.allclose(f4[..., 3], f4[..., 5], atol=1e-3)
    assert torch.allclose(g4[:, :, 2:6, 3:6], f4[:, :, 2:6, 2:5], atol=1e-4)
