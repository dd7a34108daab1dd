"""
Reconstruction training for the unrolled network.

Every image (infrared or visible) is an independent sample: random crops are
encoded, decoded, and scored with ``l2 + mu * (1 - ssim) / 2``. The learning
rate drops from ``lr_phase1`` to ``lr_phase2`` at ``phase_split`` epochs.
Given the same images and config, a run is bit-for-bit reproducible.
"""
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from auif.config import TrainConfig, echo_config, write_config_echo
from .checkpoint import save_checkpoint
from .errors import DatasetError, InvalidInputError, NonFiniteLossError
from .fusion import MergeStrategy, fuse
from .losses import total_loss_and_grad
from .metrics import compute_metrics, summarize
from .network import Ablation, NetworkParams, backward, commit_running_stats, forward, init_network
from .training_monitor import TrainingMonitor, get_training_monitor

logger = logging.getLogger(__name__)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr_phase1 if epoch < cfg.phase_split else cfg.lr_phase2


def _check_images(images: Sequence[np.ndarray], crop: int) -> List[np.ndarray]:
    if len(images) == 0:
        raise DatasetError("training set is empty")
    checked = []
    for k, img in enumerate(images):
        img = np.asarray(img)
        if img.ndim != 2:
            raise InvalidInputError(f"training image {k} is not 2-D (shape {img.shape})")
        if min(img.shape) < crop:
            raise InvalidInputError(f"training image {k} of size {img.shape} is smaller than crop {crop}")
        checked.append(img)
    return checked


def sample_batch(images: Sequence[np.ndarray], cfg: TrainConfig, rng: np.random.Generator,
                 dtype=np.float32) -> np.ndarray:
    """
    Draw ``batch_size`` random crops, each from a uniformly chosen image.

    Returns:
        Array of shape (batch_size, 1, crop, crop).
    """
    images = _check_images(images, cfg.crop)
    c = cfg.crop
    batch = np.empty((cfg.batch_size, 1, c, c), dtype=dtype)
    for b in range(cfg.batch_size):
        img = images[int(rng.integers(len(images)))]
        top = int(rng.integers(0, img.shape[0] - c + 1))
        left = int(rng.integers(0, img.shape[1] - c + 1))
        batch[b, 0] = img[top:top + c, left:left + c]
    return batch


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: NetworkParams, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        tensors = params.named_tensors()
        for name, g in grads.items():
            g = g.astype(np.float64)
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            params.set_tensor(name, tensors[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps))


class SGD:
    def step(self, params: NetworkParams, grads: Dict[str, np.ndarray], lr: float) -> None:
        tensors = params.named_tensors()
        for name, g in grads.items():
            params.set_tensor(name, tensors[name] - lr * g.astype(np.float64))


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD()
    return Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most ``max_norm``; returns the norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def loss_weights(cfg: TrainConfig) -> Tuple[float, float]:
    """(mu, l2_weight) after the l2_only / ssim_only ablations."""
    flags = cfg.ablation_flags
    mu = 0.0 if flags & Ablation.L2_ONLY else cfg.mu
    l2_weight = 0.0 if flags & Ablation.SSIM_ONLY else cfg.l2_weight
    return mu, l2_weight


def layer_scalars(params: NetworkParams) -> Dict[str, float]:
    """Current eta and theta of every layer, keyed like ``base.3.eta``."""
    out = {}
    for encoder, layers in (("base", params.base_layers), ("detail", params.detail_layers)):
        for i, layer in enumerate(layers):
            out[f"{encoder}.{i}.eta"] = float(layer.eta[0])
            out[f"{encoder}.{i}.theta"] = float(layer.theta[0])
    return out


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    l2: float
    ssim_part: float
    total: float


@dataclass
class TrainLog:
    seed: int
    config_echo: str
    steps: List[StepRecord] = field(default_factory=list)
    epoch_means: List[float] = field(default_factory=list)
    # entry 0 is the initialization, entry e + 1 the value after epoch e
    layer_trajectories: Dict[str, List[float]] = field(default_factory=dict)
    system: List[Dict[str, float]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def initial_loss(self) -> float:
        return self.steps[0].total if self.steps else float("nan")

    @property
    def final_epoch_loss(self) -> float:
        return self.epoch_means[-1] if self.epoch_means else float("nan")

    def loss_trace(self) -> List[float]:
        return [s.total for s in self.steps]

    def write_loss_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "epoch", "lr", "l2", "ssim_part", "total"])
            for s in self.steps:
                writer.writerow([s.step, s.epoch, repr(s.lr), repr(s.l2), repr(s.ssim_part), repr(s.total)])
        return path

    def write_layer_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        layers = sorted({k.rsplit(".", 1)[0] for k in self.layer_trajectories},
                        key=lambda p: (p.split(".")[0] != "base", int(p.split(".")[1])))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "encoder", "layer", "eta", "theta"])
            n_points = max((len(v) for v in self.layer_trajectories.values()), default=0)
            for e in range(n_points):
                for prefix in layers:
                    encoder, index = prefix.split(".")
                    writer.writerow([e, encoder, index,
                                     repr(self.layer_trajectories[f"{prefix}.eta"][e]),
                                     repr(self.layer_trajectories[f"{prefix}.theta"][e])])
        return path


def write_run_logs(log: TrainLog, checkpoint_path: Union[str, Path]) -> Dict[str, Path]:
    """Loss CSV, layer CSV and config echo next to the checkpoint."""
    checkpoint_path = Path(checkpoint_path)
    stem = checkpoint_path.with_suffix("")
    config_path = write_config_echo(log.config_echo, f"{stem}.config.txt")
    return {
        "loss": log.write_loss_csv(f"{stem}.loss.csv"),
        "layers": log.write_layer_csv(f"{stem}.layers.csv"),
        "config": config_path,
    }


def _snapshot(params: NetworkParams, batch: np.ndarray, step: int, snapshot_dir: Path) -> Path:
    snapshot_dir.mkdir(parents=True, exist_ok=True)
    path = snapshot_dir / f"nonfinite_step{step}.auif"
    save_checkpoint(params, path)
    np.save(snapshot_dir / f"nonfinite_step{step}_batch.npy", batch)
    return path


def train(images: Sequence[np.ndarray], cfg: TrainConfig, monitor: Optional[TrainingMonitor] = None,
          snapshot_dir: Union[str, Path, None] = None,
          params: Optional[NetworkParams] = None) -> Tuple[NetworkParams, TrainLog]:
    """
    Train the network on single-channel images in [0, 1].

    Args:
        images: Training images; every one must be at least ``cfg.crop`` on each side.
        cfg: Hyperparameters (schedule, loss weights, optimizer, architecture, seed).
        monitor: Optional experiment tracker; the process-wide one by default.
        snapshot_dir: Where a diagnostic snapshot goes if the loss turns non-finite.
        params: Start from these parameters instead of a fresh initialization.

    Returns:
        ``(params, log)``.

    Raises:
        NonFiniteLossError: a loss or gradient became NaN/Inf.
    """
    images = [np.asarray(img, dtype=np.float32) for img in _check_images(images, cfg.crop)]
    monitor = monitor or get_training_monitor()
    if params is None:
        params = init_network(cfg.layers, cfg.channels, seed=cfg.seed, ablation=cfg.ablation_flags)
    dtype = params.decoder.kernel.dtype
    rng = np.random.default_rng([cfg.seed, 1])
    optimizer = make_optimizer(cfg)
    mu, l2_weight = loss_weights(cfg)
    steps_per_epoch = cfg.steps_per_epoch or math.ceil(len(images) / cfg.batch_size)
    snapshot_dir = Path(snapshot_dir) if snapshot_dir is not None else Path(".")

    log = TrainLog(seed=cfg.seed, config_echo=echo_config(cfg))
    for name, value in layer_scalars(params).items():
        log.layer_trajectories[name] = [value]
    monitor.start_run(cfg.model_dump())
    logger.info(f"🚀 Training N={cfg.layers} C={cfg.channels} on {len(images)} images: "
                f"{cfg.epochs} epochs x {steps_per_epoch} steps, batch {cfg.batch_size}, crop {cfg.crop}, "
                f"learnables={params.parameter_count()}")

    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(epoch, cfg)
            totals = []
            for _ in range(steps_per_epoch):
                batch = sample_batch(images, cfg, rng, dtype=dtype)
                out, trace = forward(batch, params, mode="train")
                loss, dout = total_loss_and_grad(batch, out, mu=mu, l2_weight=l2_weight,
                                                 normalization=cfg.l2_normalization)
                if not math.isfinite(loss.total):
                    path = _snapshot(params, batch, step, snapshot_dir)
                    raise NonFiniteLossError(f"non-finite loss at step {step} (epoch {epoch})", str(path))
                grads = backward(dout.astype(dtype), trace, params)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    path = _snapshot(params, batch, step, snapshot_dir)
                    raise NonFiniteLossError(f"non-finite gradient at step {step} (epoch {epoch})", str(path))
                if cfg.grad_clip is not None:
                    clip_gradients(grads, cfg.grad_clip)
                commit_running_stats(params, trace)
                optimizer.step(params, grads, lr)

                log.steps.append(StepRecord(step, epoch, lr, loss.l2_part, loss.ssim_part, loss.total))
                monitor.log_step(step, {"l2": loss.l2_part, "ssim_part": loss.ssim_part, "total": loss.total})
                totals.append(loss.total)
                step += 1

            mean_loss = float(np.mean(totals))
            log.epoch_means.append(mean_loss)
            scalars = layer_scalars(params)
            for name, value in scalars.items():
                log.layer_trajectories[name].append(value)
            system = monitor.system.snapshot()
            log.system.append(system)
            monitor.log_epoch(epoch, step, mean_loss, scalars, system)
            logger.info(f"📈 Epoch {epoch + 1}/{cfg.epochs} lr={lr:g} mean loss {mean_loss:.6f}",
                        extra={"epoch": epoch, "lr": lr, "mean_loss": mean_loss, **system})
    finally:
        monitor.finish_run()
    log.seconds = time.perf_counter() - start
    logger.info(f"✅ Training finished in {log.seconds:.1f}s: loss {log.initial_loss:.5f} -> {log.final_epoch_loss:.5f}")
    return params, log


@dataclass
class RobustnessReport:
    seeds: List[int]
    final_losses: List[float]
    mean: float
    std: float
    cv: float


def repeat_training(images: Sequence[np.ndarray], cfg: TrainConfig, repeats: int,
                    monitor: Optional[TrainingMonitor] = None) -> RobustnessReport:
    """Train ``repeats`` times with seeds ``cfg.seed + r`` and summarize the final epoch losses."""
    if repeats < 1:
        raise InvalidInputError(f"repeats must be >= 1, got {repeats}")
    seeds, finals = [], []
    for r in range(repeats):
        run_cfg = cfg.model_copy(update={"seed": cfg.seed + r})
        _, log = train(images, run_cfg, monitor=monitor)
        seeds.append(run_cfg.seed)
        finals.append(log.final_epoch_loss)
        logger.info(f"🔁 Repeat {r + 1}/{repeats} (seed {run_cfg.seed}): final loss {log.final_epoch_loss:.6f}")
    mean = float(np.mean(finals))
    std = float(np.std(finals))
    cv = std / mean if mean != 0 else float("inf")
    return RobustnessReport(seeds=seeds, final_losses=finals, mean=mean, std=std, cv=cv)


@dataclass
class LayerSweepEntry:
    layers: int
    final_loss: float
    metric_means: Dict[str, float]


def sweep_layers(train_images: Sequence[np.ndarray], val_pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                 cfg: TrainConfig, layer_counts: Sequence[int],
                 strategy: Optional[MergeStrategy] = None,
                 monitor: Optional[TrainingMonitor] = None) -> List[LayerSweepEntry]:
    """Train one model per layer count and score its fusions of the validation pairs."""
    if not val_pairs:
        raise InvalidInputError("sweep_layers needs at least one validation pair")
    entries = []
    for n in layer_counts:
        run_cfg = cfg.model_copy(update={"layers": int(n)})
        params, log = train(train_images, run_cfg, monitor=monitor)
        reports = [compute_metrics(fuse(ir, vis, params, strategy).fused, ir, vis, name=str(k))
                   for k, (ir, vis) in enumerate(val_pairs)]
        means = summarize(reports)[0]
        entries.append(LayerSweepEntry(layers=int(n), final_loss=log.final_epoch_loss, metric_means=means))
        logger.info(f"🔬 N={n}: final loss {log.final_epoch_loss:.5f}",
                    extra={"metric_means": {k: round(v, 4) for k, v in means.items()}})
    return entries
