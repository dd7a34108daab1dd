"""
Test-phase fusion: encode both sources, merge the base and detail maps, decode.

Three merge strategies are supported: addition (the default), weighted
average, and l1-attention, whose pixel weights come from the blurred
absolute activations of the two maps being merged.
"""
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .decompose import FILTERS, ReflectFilter
from .errors import InvalidInputError
from .metrics import METRIC_NAMES, compute_metrics, summarize
from .network import NetworkParams, encode, reconstruct

logger = logging.getLogger(__name__)

ATTENTION_GUARD = 1e-12
STRATEGY_NAMES = ("addition", "average", "l1att")
_ALIASES = {"l1_attention": "l1att", "l1-attention": "l1att", "add": "addition", "avg": "average"}


@dataclass(frozen=True)
class MergeStrategy:
    variant: str = "addition"
    weight: float = 0.5

    def __post_init__(self):
        variant = _ALIASES.get(self.variant, self.variant)
        if variant not in STRATEGY_NAMES:
            raise InvalidInputError(f"unknown strategy {self.variant!r} (use {', '.join(STRATEGY_NAMES)})")
        if not 0.0 <= self.weight <= 1.0:
            raise InvalidInputError(f"average weight must be in [0, 1], got {self.weight}")
        object.__setattr__(self, "variant", variant)

    @property
    def label(self) -> str:
        return f"average({self.weight:g})" if self.variant == "average" else self.variant


def l1_attention_weights(b_ir, b_vis) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pixel weights proportional to the 3x3-blurred absolute activations.

    Where both blurred activations sum below 1e-12 the weights are 0.5 each.
    """
    b_ir = np.asarray(b_ir, dtype=np.float64)
    b_vis = np.asarray(b_vis, dtype=np.float64)
    if b_ir.shape != b_vis.shape:
        raise InvalidInputError(f"map shapes differ: {b_ir.shape} vs {b_vis.shape}")
    blur = ReflectFilter(FILTERS.blur3)
    act_ir = blur.apply(np.abs(b_ir))
    act_vis = blur.apply(np.abs(b_vis))
    total = act_ir + act_vis
    degenerate = total < ATTENTION_GUARD
    safe = np.where(degenerate, 1.0, total)
    alpha_ir = np.where(degenerate, 0.5, act_ir / safe)
    alpha_vis = np.where(degenerate, 0.5, act_vis / safe)
    return alpha_ir, alpha_vis


def merge_maps(m_ir, m_vis, strategy: MergeStrategy) -> np.ndarray:
    """Merge two feature maps pixelwise; l1-attention weighs each map by its own activations."""
    m_ir = np.asarray(m_ir)
    m_vis = np.asarray(m_vis)
    if m_ir.shape != m_vis.shape:
        raise InvalidInputError(f"map shapes differ: {m_ir.shape} vs {m_vis.shape}")
    if strategy.variant == "addition":
        return m_ir + m_vis
    if strategy.variant == "average":
        return strategy.weight * m_ir + (1.0 - strategy.weight) * m_vis
    alpha_ir, alpha_vis = l1_attention_weights(m_ir, m_vis)
    return (alpha_ir * m_ir + alpha_vis * m_vis).astype(m_ir.dtype, copy=False)


@dataclass
class FusionResult:
    fused: np.ndarray
    merged_base: np.ndarray
    merged_detail: np.ndarray
    strategy: str = "addition"
    seconds: float = 0.0


def _as_batch(img, dtype) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidInputError(f"fusion expects 2-D grayscale images, got shape {img.shape}")
    return img.astype(dtype)[None, None]


def fuse(ir, vis, params: NetworkParams, strategy: Optional[MergeStrategy] = None,
         dump_dir: Union[str, Path, None] = None, name: str = "fused") -> FusionResult:
    """
    Fuse an infrared/visible pair with a trained network (eval mode).

    Args:
        ir: Infrared image in [0, 1].
        vis: Visible image in [0, 1], same shape as ``ir``.
        params: Network parameters.
        strategy: Merge rule for both the base and detail maps; addition by default.
        dump_dir: If set, the merged maps are saved there as ``.npy`` files.
        name: File stem for dumped maps.

    Returns:
        FusionResult whose ``fused`` image lies in (0, 1).
    """
    strategy = strategy or MergeStrategy()
    ir = np.asarray(ir)
    vis = np.asarray(vis)
    if ir.shape != vis.shape:
        raise InvalidInputError(f"infrared image {ir.shape} and visible image {vis.shape} differ in size")
    start = time.perf_counter()
    dtype = params.decoder.kernel.dtype
    b_ir, d_ir = encode(_as_batch(ir, dtype), params, mode="eval")
    b_vis, d_vis = encode(_as_batch(vis, dtype), params, mode="eval")
    base = merge_maps(b_ir, b_vis, strategy)
    detail = merge_maps(d_ir, d_vis, strategy)
    fused = reconstruct(base, detail, params, mode="eval")
    seconds = time.perf_counter() - start

    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        np.save(dump_dir / f"{name}_base.npy", base[0, 0])
        np.save(dump_dir / f"{name}_detail.npy", detail[0, 0])
        logger.debug(f"Dumped merged maps for {name} to {dump_dir}")
    return FusionResult(fused=fused[0, 0].astype(np.float64), merged_base=base, merged_detail=detail,
                        strategy=strategy.label, seconds=seconds)


@dataclass
class StrategyReport:
    means: Dict[str, Dict[str, float]]
    wins: Dict[str, int]
    best: str
    mean_seconds: Dict[str, float] = field(default_factory=dict)


def select_strategy(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], params: NetworkParams,
                    avg_weight: float = 0.5) -> StrategyReport:
    """
    Fuse every validation pair with each strategy and pick the one that leads on most metrics.

    Ties go to the earlier strategy in the order addition, average, l1att.
    """
    if not pairs:
        raise InvalidInputError("select_strategy needs at least one validation pair")
    strategies = [MergeStrategy("addition"), MergeStrategy("average", avg_weight), MergeStrategy("l1att")]
    means: Dict[str, Dict[str, float]] = {}
    seconds: Dict[str, float] = {}
    for s in strategies:
        reports = []
        elapsed: List[float] = []
        for k, (ir, vis) in enumerate(pairs):
            result = fuse(ir, vis, params, s)
            elapsed.append(result.seconds)
            reports.append(compute_metrics(result.fused, ir, vis, name=str(k)))
        means[s.variant] = summarize(reports)[0]
        seconds[s.variant] = float(np.mean(elapsed))

    wins = {s.variant: 0 for s in strategies}
    for metric in METRIC_NAMES:
        leader = max(wins, key=lambda v: (means[v][metric], -STRATEGY_NAMES.index(v)))
        wins[leader] += 1
    best = max(wins, key=lambda v: (wins[v], -STRATEGY_NAMES.index(v)))
    logger.info(f"🏁 Strategy selection over {len(pairs)} pairs: wins={wins}, best={best}",
                extra={"mean_seconds": seconds})
    return StrategyReport(means=means, wins=wins, best=best, mean_seconds=seconds)


def write_strategy_csv(report: StrategyReport, path: Union[str, Path]) -> Path:
    """One row per strategy: metric means, metrics led, mean fusion seconds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", *METRIC_NAMES, "wins", "mean_seconds"])
        for variant, means in report.means.items():
            writer.writerow([variant, *(f"{means[m]:.10g}" for m in METRIC_NAMES),
                             report.wins[variant], f"{report.mean_seconds.get(variant, 0.0):.6g}"])
    return path
