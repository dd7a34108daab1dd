"""
Training monitor - optional W&B run per training invocation, plus psutil snapshots.

W&B runs offline and is silently disabled when the package, the API key or
the ``WANDB_ENABLED`` setting is missing. System snapshots always work and
are stored in the ``TrainLog`` so a run can be inspected without W&B.
"""
import contextlib
import datetime
import io
import logging
import os
import sys
from typing import Any, Dict, Optional

import psutil

from auif.config import settings

# keep wandb quiet and local before it is imported
os.environ.setdefault("WANDB_SILENT", "true")
os.environ.setdefault("WANDB_CONSOLE", "off")
os.environ.setdefault("WANDB_MODE", "offline")
os.environ.setdefault("WANDB_DISABLE_CODE", "true")
os.environ.setdefault("WANDB_DISABLE_GIT", "true")

try:
    with contextlib.redirect_stderr(io.StringIO()):
        import wandb
    WANDB_AVAILABLE = True
except ImportError:
    WANDB_AVAILABLE = False
    wandb = None

logger = logging.getLogger(__name__)


class SystemMetricsTracker:
    """Process memory and CPU utilization of the training process."""

    def __init__(self):
        self._process = psutil.Process(os.getpid())
        # first call primes psutil's CPU counter
        self._process.cpu_percent(interval=None)

    def snapshot(self) -> Dict[str, float]:
        try:
            mem = self._process.memory_info()
            vm = psutil.virtual_memory()
            return {
                "rss_mb": round(mem.rss / (1024 ** 2), 2),
                "cpu_percent": self._process.cpu_percent(interval=None),
                "system_memory_percent": vm.percent,
            }
        except Exception as e:
            logger.warning(f"Failed to read system metrics: {e}")
            return {}


class TrainingMonitor:
    """One W&B run per ``train`` call; every method is a no-op when disabled."""

    def __init__(self, project_name: Optional[str] = None, enabled: Optional[bool] = None):
        self.project_name = project_name or settings.WANDB_PROJECT
        self.enabled = settings.WANDB_ENABLED if enabled is None else enabled
        self.run = None
        self.run_name: Optional[str] = None
        self.system = SystemMetricsTracker()

        if self.enabled and not WANDB_AVAILABLE:
            logger.info("📊 W&B not installed - monitoring disabled")
            self.enabled = False
        if self.enabled and not settings.WANDB_API_KEY:
            logger.info("📊 W&B API key not found - monitoring disabled")
            self.enabled = False

    def start_run(self, config: Dict[str, Any]) -> bool:
        if not self.enabled:
            return False
        self.run_name = f"train-{datetime.datetime.now().strftime('%Y%m%d_%H%M%S')}"
        try:
            with contextlib.redirect_stderr(io.StringIO()):
                self.run = wandb.init(
                    project=self.project_name,
                    name=self.run_name,
                    tags=["auif", "training"],
                    config={**config, "python_version": sys.version},
                    reinit=True,
                    mode="offline",
                )
            logger.info(f"🎯 W&B run started: {self.run_name} (offline mode)")
            return True
        except Exception as e:
            logger.info(f"📊 W&B run skipped: {e}")
            self.enabled = False
            self.run = None
            return False

    def _log(self, data: Dict[str, Any], step: Optional[int] = None) -> None:
        if not self.enabled or self.run is None:
            return
        try:
            with contextlib.redirect_stderr(io.StringIO()):
                wandb.log(data, step=step)
        except Exception:
            pass  # monitoring never interrupts training

    def log_step(self, step: int, values: Dict[str, float]) -> None:
        self._log({f"step/{k}": v for k, v in values.items()}, step=step)

    def log_epoch(self, epoch: int, step: int, mean_loss: float, layer_scalars: Dict[str, float],
                  system: Dict[str, float]) -> None:
        data = {"epoch": epoch, "epoch/mean_loss": mean_loss}
        data.update({f"layers/{k}": v for k, v in layer_scalars.items()})
        data.update({f"system/{k}": v for k, v in system.items()})
        self._log(data, step=step)

    def finish_run(self) -> None:
        if self.enabled and self.run is not None:
            try:
                with contextlib.redirect_stderr(io.StringIO()):
                    wandb.finish()
                logger.info(f"✅ W&B run finished: {self.run_name}")
            except Exception:
                pass
        self.run = None


_monitor: Optional[TrainingMonitor] = None


def get_training_monitor() -> TrainingMonitor:
    """Get or create the process-wide monitor."""
    global _monitor
    if _monitor is None:
        _monitor = TrainingMonitor()
    return _monitor
