import math
from dataclasses import replace

import pytest
import torch

from models import trainer as trainer_module
from models.traffic_model import TrafficModel, checkpoint_payload, count_parameters, load_checkpoint
from models.trainer import Trainer, adapt_location, seed_everything, train
from utils.exceptions import ConfigError, DivergenceError
from utils.session_manager import SessionManager


def session_in(tmp_path, command="train"):
    return SessionManager(command, runs_dir=str(tmp_path))


def states_equal(a, b, keys):
    return all(torch.equal(a[k], b[k]) for k in keys)


@pytest.fixture
def source_checkpoint(toy_model_config):
    seed_everything(0)
    return checkpoint_payload(TrafficModel(toy_model_config), epoch=3)


def test_one_epoch_writes_log_and_checkpoints(tmp_path, toy_model_config, fast_train_config, tiny_splits):
    session = session_in(tmp_path)
    result = train(toy_model_config, fast_train_config, tiny_splits["train"], tiny_splits["val"], session)
    assert len(result.history) == 1
    assert math.isfinite(result.history[0]["train_loss"])
    assert math.isfinite(result.best_val_rmse)
    log = session.read_train_log()
    assert list(log["epoch"]) == [1]
    for path in (result.best_checkpoint, result.last_checkpoint):
        checkpoint = load_checkpoint(path)
        assert checkpoint["epoch"] == 1
        assert checkpoint["model_config"]["encoder"]["image_size"] == 64


def test_speed_only_training_leaves_other_heads_untouched(tmp_path, toy_model_config, fast_train_config,
                                                          tiny_splits):
    config = replace(fast_train_config, tasks=("speed",))
    seed_everything(config.seed)
    initial = TrafficModel(toy_model_config).state_dict()
    result = train(toy_model_config, config, tiny_splits["train"], tiny_splits["val"], session_in(tmp_path))
    trained = load_checkpoint(result.last_checkpoint)["model_state"]

    head_keys = [k for k in initial if k.startswith(("road_head.", "orientation_head."))]
    assert head_keys
    assert states_equal(initial, trained, head_keys)
    speed_keys = [k for k in initial if k.startswith("speed_head.")]
    assert not states_equal(initial, trained, speed_keys)


def test_zero_epoch_adaptation_returns_input(tmp_path, source_checkpoint, fast_train_config, tiny_splits):
    config = replace(fast_train_config, epochs=0)
    result = adapt_location(source_checkpoint, tiny_splits["train"], tiny_splits["val"], config,
                            session_in(tmp_path, "adapt"))
    adapted = load_checkpoint(result.best_checkpoint)["model_state"]
    assert states_equal(source_checkpoint["model_state"], adapted, list(adapted))


def test_adaptation_only_changes_gtpe(tmp_path, source_checkpoint, fast_train_config, tiny_splits):
    result = adapt_location(source_checkpoint, tiny_splits["train"], tiny_splits["val"], fast_train_config,
                            session_in(tmp_path, "adapt"))
    assert result.trainable_parameters == 67_840
    adapted = load_checkpoint(result.last_checkpoint)
    assert adapted["adapted_from_epoch"] == 3

    source_state, adapted_state = source_checkpoint["model_state"], adapted["model_state"]
    frozen = [k for k in source_state if not k.startswith("gtpe.")]
    tuned = [k for k in source_state if k.startswith("gtpe.")]
    # 包括BN的running统计量
    assert states_equal(source_state, adapted_state, frozen)
    assert not states_equal(source_state, adapted_state, tuned)


def test_adaptation_requires_context(toy_model_config, fast_train_config, tiny_splits, tmp_path):
    model = TrafficModel(replace(toy_model_config, context=()))
    with pytest.raises(ConfigError):
        adapt_location(checkpoint_payload(model), tiny_splits["train"], tiny_splits["val"], fast_train_config,
                       session_in(tmp_path, "adapt"))


def test_resume_matches_uninterrupted_run(tmp_path, toy_model_config, fast_train_config, tiny_splits):
    two_epochs = replace(fast_train_config, epochs=2)
    full = train(toy_model_config, two_epochs, tiny_splits["train"], tiny_splits["val"],
                 session_in(tmp_path / "full"))

    first = train(toy_model_config, fast_train_config, tiny_splits["train"], tiny_splits["val"],
                  session_in(tmp_path / "part"))
    resumed = train(toy_model_config, two_epochs, tiny_splits["train"], tiny_splits["val"],
                    session_in(tmp_path / "resumed"), resume=first.last_checkpoint)

    assert [row["epoch"] for row in resumed.history] == [1, 2]
    for expected, actual in zip(full.history, resumed.history):
        assert actual["train_loss"] == pytest.approx(expected["train_loss"], rel=1e-5)
        assert actual["val_rmse"] == pytest.approx(expected["val_rmse"], rel=1e-5)
    assert resumed.best_val_rmse == pytest.approx(full.best_val_rmse, rel=1e-5)


def test_non_finite_loss_aborts(tmp_path, toy_model_config, fast_train_config, tiny_splits, monkeypatch):
    def diverged(model, batch, tasks, device):
        return torch.tensor(float("nan"), requires_grad=True), {}

    monkeypatch.setattr(trainer_module, "batch_losses", diverged)
    with pytest.raises(DivergenceError):
        train(toy_model_config, fast_train_config, tiny_splits["train"], tiny_splits["val"], session_in(tmp_path))


def test_empty_splits_are_rejected(toy_model_config, fast_train_config, tiny_splits):
    with pytest.raises(ConfigError):
        train(toy_model_config, fast_train_config, tiny_splits["train"], [])
    with pytest.raises(ConfigError):
        train(toy_model_config, fast_train_config, [], tiny_splits["val"])


def applied_gradients(tmp_path, model_config, train_config, train_tiles, state):
    model = TrafficModel(model_config)
    model.load_state_dict(state)
    trainer = Trainer(model, train_config, train_tiles, [], session_in(tmp_path), freeze_norm=True)
    steps = []

    def record():
        steps.append({n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None})

    trainer.optimizer.step = record
    trainer.train_epoch(0)
    return len(trainer.train_set), steps


def test_partial_accumulation_group_averages_its_batches(tmp_path, toy_model_config, fast_train_config,
                                                         tiny_splits):
    seed_everything(0)
    state = TrafficModel(toy_model_config).state_dict()
    n = sum(1 for tile in tiny_splits["train"] if tile.observed_times)
    full = replace(fast_train_config, batch_size=1, accumulation_steps=n)
    partial = replace(full, accumulation_steps=2 * n)

    batches, full_steps = applied_gradients(tmp_path, toy_model_config, full, tiny_splits["train"], state)
    _, partial_steps = applied_gradients(tmp_path, toy_model_config, partial, tiny_splits["train"], state)
    assert batches == n
    assert len(full_steps) == len(partial_steps) == 1
    assert full_steps[0].keys() == partial_steps[0].keys()
    for name, grad in full_steps[0].items():
        assert torch.allclose(partial_steps[0][name], grad, rtol=1e-5, atol=1e-8), name
