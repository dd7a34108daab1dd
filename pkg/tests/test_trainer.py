# Tests for the training loop, schedule, optimizer and run logs
import pytest
import csv
import numpy as np
import sys
import os
from unittest.mock import MagicMock, patch

# Add the parent directory to the path to import auif modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from auif.config import TrainConfig, load_run_config, write_config_echo
from auif.core.checkpoint import encode_checkpoint
from auif.core.errors import DatasetError, InvalidInputError, NonFiniteLossError
from auif.core.fusion import fuse
from auif.core.losses import LossValue
from auif.core.network import Ablation, init_network
from auif.core.trainer import (
    clip_gradients,
    layer_scalars,
    loss_weights,
    lr_at_epoch,
    repeat_training,
    sample_batch,
    sweep_layers,
    train,
    write_run_logs,
)


@pytest.fixture
def monitor():
    m = MagicMock()
    m.system.snapshot.return_value = {"rss_mb": 10.0, "cpu_percent": 0.0}
    return m


@pytest.fixture
def images():
    rng = np.random.default_rng(17)
    yy, xx = np.mgrid[0:24, 0:24] / 23.0
    out = []
    for k in range(4):
        smooth = 0.5 + 0.3 * np.sin(3 * xx + k) * np.cos(2 * yy - k)
        out.append(np.clip(smooth + 0.05 * rng.standard_normal((24, 24)), 0.0, 1.0))
    return out


@pytest.fixture
def small_cfg():
    return TrainConfig(epochs=4, batch_size=4, crop=16, layers=2, channels=4,
                       steps_per_epoch=15, phase_split=3, seed=0)


# --- schedule and batches ---

def test_lr_schedule_boundaries():
    cfg = TrainConfig()
    assert lr_at_epoch(0, cfg) == 1e-2
    assert lr_at_epoch(39, cfg) == 1e-2
    assert lr_at_epoch(40, cfg) == 1e-3
    assert lr_at_epoch(79, cfg) == 1e-3
    with pytest.raises(InvalidInputError):
        lr_at_epoch(80, cfg)
    with pytest.raises(InvalidInputError):
        lr_at_epoch(-1, cfg)


def test_sample_batch_shape_and_constant_image(small_cfg):
    rng = np.random.default_rng(0)
    batch = sample_batch([np.full((20, 20), 0.3)], small_cfg, rng)
    assert batch.shape == (4, 1, 16, 16)
    assert batch.dtype == np.float32
    np.testing.assert_array_equal(batch, np.float32(0.3))


def test_sample_batch_crops_are_windows_of_the_source(small_cfg):
    h, w = 20, 30
    img = np.arange(h * w, dtype=np.float64).reshape(h, w)
    batch = sample_batch([img], small_cfg, np.random.default_rng(1), dtype=np.float64)
    for crop in batch[:, 0]:
        top, left = divmod(int(crop[0, 0]), w)
        assert top + 16 <= h and left + 16 <= w
        np.testing.assert_array_equal(crop, img[top:top + 16, left:left + 16])


def test_sample_batch_is_seeded(small_cfg, images):
    a = sample_batch(images, small_cfg, np.random.default_rng(5))
    b = sample_batch(images, small_cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_sample_batch_rejects_bad_sets(small_cfg):
    with pytest.raises(DatasetError):
        sample_batch([], small_cfg, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        sample_batch([np.zeros((10, 40))], small_cfg, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        sample_batch([np.zeros((20, 20, 3))], small_cfg, np.random.default_rng(0))


# --- helpers ---

def test_loss_weights_follow_ablations():
    assert loss_weights(TrainConfig()) == (5.0, 1.0)
    assert loss_weights(TrainConfig(ablation=["l2_only"])) == (0.0, 1.0)
    assert loss_weights(TrainConfig(ablation="ssim_only")) == (5.0, 0.0)


def test_clip_gradients_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_gradients(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert grads["a"][0] == pytest.approx(0.6)
    assert grads["b"][0] == pytest.approx(0.8)
    untouched = {"a": np.array([0.1])}
    clip_gradients(untouched, 1.0)
    assert untouched["a"][0] == 0.1


def test_layer_scalars_keys():
    scalars = layer_scalars(init_network(layers=2, channels=4))
    assert set(scalars) == {f"{e}.{i}.{k}" for e in ("base", "detail") for i in range(2) for k in ("eta", "theta")}
    assert scalars["detail.1.theta"] == 1.0


# --- training ---

def test_training_reduces_loss(images, small_cfg, monitor):
    params, log = train(images, small_cfg, monitor=monitor)
    assert len(log.steps) == 4 * 15
    assert len(log.epoch_means) == 4
    assert all(np.isfinite(log.loss_trace()))
    assert log.final_epoch_loss < log.initial_loss
    assert [s.lr for s in log.steps[::15]] == [1e-2, 1e-2, 1e-2, 1e-3]
    assert all(len(v) == 5 for v in log.layer_trajectories.values())
    assert all(len(set(v)) > 1 for v in log.layer_trajectories.values())
    monitor.start_run.assert_called_once()
    monitor.finish_run.assert_called_once()
    assert monitor.log_step.call_count == 60
    assert monitor.log_epoch.call_count == 4


def test_training_is_reproducible(images, small_cfg, monitor):
    cfg = small_cfg.model_copy(update={"epochs": 2, "steps_per_epoch": 3, "phase_split": 1})
    p1, log1 = train(images, cfg, monitor=monitor)
    p2, log2 = train(images, cfg, monitor=monitor)
    assert log1.loss_trace() == log2.loss_trace()
    assert encode_checkpoint(p1) == encode_checkpoint(p2)


def test_zero_learning_rate_keeps_learnables(images, small_cfg, monitor):
    cfg = small_cfg.model_copy(update={"epochs": 1, "steps_per_epoch": 2, "lr_phase1": 0.0, "lr_phase2": 0.0})
    start = init_network(cfg.layers, cfg.channels, seed=cfg.seed)
    params, _ = train(images, cfg, monitor=monitor, params=start.copy())
    before, after = start.named_tensors(), params.named_tensors()
    for name in start.learnable_names():
        assert after[name].tobytes() == before[name].tobytes()


def test_sgd_and_clipping_run(images, small_cfg, monitor):
    cfg = small_cfg.model_copy(update={"epochs": 1, "steps_per_epoch": 2, "optimizer": "sgd", "grad_clip": 0.5})
    _, log = train(images, cfg, monitor=monitor)
    assert len(log.steps) == 2


def test_default_steps_per_epoch(images, small_cfg, monitor):
    cfg = small_cfg.model_copy(update={"epochs": 1, "steps_per_epoch": None, "batch_size": 3})
    _, log = train(images, cfg, monitor=monitor)
    assert len(log.steps) == 2


def test_non_finite_loss_writes_snapshot(images, small_cfg, monitor, tmp_path):
    cfg = small_cfg.model_copy(update={"epochs": 1, "steps_per_epoch": 2})
    bad = LossValue(total=float("nan"), l2_part=float("nan"), ssim_part=0.0, mu=5.0)
    with patch("auif.core.trainer.total_loss_and_grad", return_value=(bad, np.zeros((4, 1, 16, 16)))):
        with pytest.raises(NonFiniteLossError) as exc_info:
            train(images, cfg, monitor=monitor, snapshot_dir=tmp_path)
    assert "step 0" in str(exc_info.value)
    assert (tmp_path / "nonfinite_step0.auif").exists()
    assert (tmp_path / "nonfinite_step0_batch.npy").exists()
    monitor.finish_run.assert_called_once()


def test_run_logs_written_next_to_checkpoint(images, small_cfg, monitor, tmp_path):
    cfg = small_cfg.model_copy(update={"epochs": 2, "steps_per_epoch": 2, "phase_split": 1})
    _, log = train(images, cfg, monitor=monitor)
    with patch("auif.core.trainer.write_config_echo", wraps=write_config_echo) as echo:
        paths = write_run_logs(log, tmp_path / "model.auif")
    echo.assert_called_once_with(log.config_echo, f"{tmp_path / 'model'}.config.txt")
    assert paths["loss"].name == "model.loss.csv"
    with open(paths["loss"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "epoch", "lr", "l2", "ssim_part", "total"]
    assert len(rows) == 1 + 4
    with open(paths["layers"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "encoder", "layer", "eta", "theta"]
    assert len(rows) == 1 + 3 * 2 * 2
    assert rows[1][:3] == ["0", "base", "0"]
    assert "layers = 2" in paths["config"].read_text()
    assert load_run_config(paths["config"]).layers == 2


def test_repeat_training_summarizes_seeds(images, small_cfg, monitor):
    cfg = small_cfg.model_copy(update={"epochs": 1, "steps_per_epoch": 2, "seed": 7})
    report = repeat_training(images, cfg, repeats=2, monitor=monitor)
    assert report.seeds == [7, 8]
    assert len(report.final_losses) == 2
    assert report.mean == pytest.approx(np.mean(report.final_losses))
    assert report.cv == pytest.approx(report.std / report.mean)
    with pytest.raises(InvalidInputError):
        repeat_training(images, cfg, repeats=0, monitor=monitor)


def test_sweep_layers_scores_each_depth(images, small_cfg, monitor):
    rng = np.random.default_rng(6)
    val_pairs = [(rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32)))]
    cfg = small_cfg.model_copy(update={"epochs": 1, "steps_per_epoch": 1})
    entries = sweep_layers(images, val_pairs, cfg, layer_counts=[1, 2], monitor=monitor)
    assert [e.layers for e in entries] == [1, 2]
    assert all(np.isfinite(e.final_loss) for e in entries)
    assert set(entries[0].metric_means) == {"EN", "SD", "SF", "VIF", "AG", "SCD"}
    with pytest.raises(InvalidInputError):
        sweep_layers(images, [], cfg, layer_counts=[1], monitor=monitor)


@pytest.mark.parametrize("ablation", ["plain_conv", "no_init", "base_only", "detail_only",
                                      "l2_only", "ssim_only", "filter_decomp", "optim_decomp"])
def test_each_ablation_trains_and_fuses(images, small_cfg, monitor, ablation):
    cfg = small_cfg.model_copy(update={"epochs": 1, "steps_per_epoch": 2, "ablation": [ablation]})
    params, log = train(images, cfg, monitor=monitor)
    assert all(np.isfinite(log.loss_trace()))
    assert params.config.ablation == Ablation.from_names([ablation])
    result = fuse(images[0], images[1], params)
    assert result.fused.shape == (24, 24)
    assert np.all(np.isfinite(result.fused))
    assert np.all((result.fused >= 0.0) & (result.fused <= 1.0))
