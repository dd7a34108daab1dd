"""
Reference-free and source-referenced fusion metrics.

All metrics take images in [0, 1] and are reported on the 0-255 intensity
scale: entropy (EN), standard deviation (SD), spatial frequency (SF),
average gradient (AG), sum of the correlations of differences (SCD) and
pixel-domain visual information fidelity (VIF) averaged over both sources.
"""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import correlate

from .dataset import IMAGE_SUFFIXES, load_gray, pair_directories
from .errors import DatasetError, InvalidInputError

logger = logging.getLogger(__name__)

SCALE = 255.0
VIF_SIGMA_NSQ = 2.0
VIF_EPS = 1e-10
VIF_SCALES = 4
VIF_MIN_SIDE = 32
METRIC_NAMES = ("EN", "SD", "SF", "VIF", "AG", "SCD")


def _gray(img, name: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {img.shape}")
    return img


def _same_dims(f, i, v):
    f, i, v = _gray(f, "fused"), _gray(i, "infrared"), _gray(v, "visible")
    if not f.shape == i.shape == v.shape:
        raise InvalidInputError(f"shape mismatch: fused {f.shape}, infrared {i.shape}, visible {v.shape}")
    return f, i, v


def en(f) -> float:
    """Shannon entropy in bits of the 256-bin intensity histogram."""
    f = _gray(f)
    levels = np.clip(np.floor(f * SCALE + 0.5), 0, 255).astype(np.int64).ravel()
    p = np.bincount(levels, minlength=256) / levels.size
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def sd(f) -> float:
    return float(np.std(_gray(f) * SCALE))


def _needs_two(f: np.ndarray, what: str) -> None:
    if min(f.shape) < 2:
        raise InvalidInputError(f"{what} needs an image of at least 2x2, got {f.shape}")


def sf(f) -> float:
    f = _gray(f) * SCALE
    _needs_two(f, "SF")
    rf2 = np.mean((f[:, 1:] - f[:, :-1]) ** 2)
    cf2 = np.mean((f[1:, :] - f[:-1, :]) ** 2)
    return float(np.sqrt(rf2 + cf2))


def ag(f) -> float:
    """Mean of sqrt((dx^2 + dy^2) / 2) over forward differences on the (h-1)x(w-1) grid."""
    f = _gray(f) * SCALE
    _needs_two(f, "AG")
    dx = f[:-1, 1:] - f[:-1, :-1]
    dy = f[1:, :-1] - f[:-1, :-1]
    return float(np.mean(np.sqrt((dx ** 2 + dy ** 2) / 2.0)))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation coefficient, defined as 0 when either input is constant."""
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if den == 0.0:
        return 0.0
    return float(np.sum(da * db) / den)


def scd(f, i, v) -> float:
    f, i, v = _same_dims(f, i, v)
    f, i, v = f * SCALE, i * SCALE, v * SCALE
    return pearson(f - v, i) + pearson(f - i, v)


def _vif_window(scale: int) -> np.ndarray:
    n = 2 ** (VIF_SCALES - scale + 1) + 1
    sd_ = n / 5.0
    half = (n - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sd_ * sd_))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def _vif_source(ref: np.ndarray, dist: np.ndarray) -> Tuple[float, float]:
    """Numerator and denominator of one source's fidelity, summed over scales."""
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        win = _vif_window(scale)
        if scale > 1:
            ref = correlate(ref, win, mode="mirror")[::2, ::2]
            dist = correlate(dist, win, mode="mirror")[::2, ::2]
        mu1 = correlate(ref, win, mode="mirror")
        mu2 = correlate(dist, win, mode="mirror")
        s1 = correlate(ref * ref, win, mode="mirror") - mu1 * mu1
        s2 = correlate(dist * dist, win, mode="mirror") - mu2 * mu2
        s12 = correlate(ref * dist, win, mode="mirror") - mu1 * mu2
        s1 = np.maximum(s1, 0.0)
        s2 = np.maximum(s2, 0.0)

        g = s12 / (s1 + VIF_EPS)
        sv = s2 - g * s12
        flat_ref = s1 < VIF_EPS
        g[flat_ref] = 0.0
        sv[flat_ref] = s2[flat_ref]
        s1[flat_ref] = 0.0
        flat_dist = s2 < VIF_EPS
        g[flat_dist] = 0.0
        sv[flat_dist] = 0.0
        negative = g < 0
        sv[negative] = s2[negative]
        g[negative] = 0.0
        sv = np.maximum(sv, VIF_EPS)

        num += float(np.sum(np.log10(1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ))))
        den += float(np.sum(np.log10(1.0 + s1 / VIF_SIGMA_NSQ)))
    return num, den


def vif(f, i, v) -> float:
    """Mean of the two source-wise fidelities; a textureless source counts as fidelity 1."""
    f, i, v = _same_dims(f, i, v)
    if min(f.shape) < VIF_MIN_SIDE:
        raise InvalidInputError(
            f"VIF needs at least {VIF_MIN_SIDE}x{VIF_MIN_SIDE} pixels for {VIF_SCALES} scales, got {f.shape}")
    scores = []
    for src in (i, v):
        num, den = _vif_source(src * SCALE, f * SCALE)
        scores.append(num / den if den > 0 else 1.0)
    return float(np.mean(scores))


@dataclass
class MetricReport:
    image: str
    EN: float
    SD: float
    SF: float
    VIF: float
    AG: float
    SCD: float

    def values(self) -> Dict[str, float]:
        row = asdict(self)
        row.pop("image")
        return row


def compute_metrics(fused, ir, vis, name: str = "") -> MetricReport:
    fused, ir, vis = _same_dims(fused, ir, vis)
    return MetricReport(image=name, EN=en(fused), SD=sd(fused), SF=sf(fused),
                        VIF=vif(fused, ir, vis), AG=ag(fused), SCD=scd(fused, ir, vis))


def summarize(reports: Sequence[MetricReport]) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Per-metric (mean, population std) over a corpus."""
    if not reports:
        raise DatasetError("no metric reports to summarize")
    table = np.array([[getattr(r, m) for m in METRIC_NAMES] for r in reports])
    return dict(zip(METRIC_NAMES, table.mean(axis=0))), dict(zip(METRIC_NAMES, table.std(axis=0)))


@dataclass
class CorpusReport:
    reports: List[MetricReport]
    mean: Dict[str, float]
    std: Dict[str, float]


def write_metrics_csv(reports: Sequence[MetricReport], path: Union[str, Path]) -> CorpusReport:
    """One row per image, then ``mean`` and ``std`` rows."""
    mean, std = summarize(reports)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", *METRIC_NAMES])
        for r in reports:
            writer.writerow([r.image, *(f"{getattr(r, m):.10g}" for m in METRIC_NAMES)])
        writer.writerow(["mean", *(f"{mean[m]:.10g}" for m in METRIC_NAMES)])
        writer.writerow(["std", *(f"{std[m]:.10g}" for m in METRIC_NAMES)])
    return CorpusReport(reports=list(reports), mean=mean, std=std)


def _find_fused(fused_dir: Path, stem: str) -> Optional[Path]:
    for p in sorted(fused_dir.glob(f"{stem}.*")):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            return p
    return None


def evaluate_corpus(ir_dir, vis_dir, fused_dir, csv_path, threads: Optional[int] = None) -> CorpusReport:
    """
    Score every fused image against its source pair and write the CSV.

    Args:
        ir_dir: Infrared sources.
        vis_dir: Visible sources.
        fused_dir: Fused images named by the same stems.
        csv_path: Output CSV path.
        threads: Worker cap; defaults to the ``AUIF_THREADS`` setting. Row order
            follows the sorted stems regardless of scheduling.

    Returns:
        The per-image reports with corpus mean and std.
    """
    from auif.config import settings

    fused_dir = Path(fused_dir)
    if not fused_dir.is_dir():
        raise DatasetError(f"not a directory: {fused_dir}")
    dataset = pair_directories(ir_dir, vis_dir, split="test")
    jobs = []
    for pair in dataset:
        fused_path = _find_fused(fused_dir, pair.stem)
        if fused_path is None:
            logger.warning(f"⚠️ no fused image for {pair.stem!r} in {fused_dir}; skipped")
            continue
        jobs.append((pair, fused_path))
    if not jobs:
        raise DatasetError(f"no fused images in {fused_dir} match the source pairs")

    def score(job) -> MetricReport:
        pair, fused_path = job
        return compute_metrics(load_gray(fused_path), load_gray(pair.ir), load_gray(pair.vis), name=pair.stem)

    workers = threads or settings.AUIF_THREADS
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(score, jobs))
    else:
        reports = [score(job) for job in jobs]
    corpus = write_metrics_csv(reports, csv_path)
    logger.info(f"📊 Evaluated {len(reports)} fused images -> {csv_path}",
                extra={"mean": {k: round(v, 4) for k, v in corpus.mean.items()}})
    return corpus
