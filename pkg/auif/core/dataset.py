"""
Image I/O and infrared/visible pairing.

Images are single-channel float64 arrays in [0, 1]. RGB sources are reduced
to luminance with fixed weights; 16-bit sources are scaled by 65535.
Pairs are joined by filename stem across two directories.
"""
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, ImageIOError, InvalidInputError

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".pgm", ".ppm", ".jpg", ".jpeg"}
LOSSY_SUFFIXES = {".jpg", ".jpeg"}

PathLike = Union[str, Path]


class QuantizationStats:
    """Counts pixels clamped into [0, 1] by ``save_gray``."""

    def __init__(self):
        self._lock = threading.Lock()
        self.clamped_pixels = 0
        self.clamped_images = 0

    def record(self, count: int) -> None:
        if count:
            with self._lock:
                self.clamped_pixels += count
                self.clamped_images += 1

    def reset(self) -> None:
        with self._lock:
            self.clamped_pixels = 0
            self.clamped_images = 0


_quantization_stats = QuantizationStats()


def get_quantization_stats() -> QuantizationStats:
    return _quantization_stats


def load_gray(path: PathLike) -> np.ndarray:
    """
    Read an image as a 2-D float64 array in [0, 1].

    Args:
        path: 8/16-bit grayscale or RGB(A) raster.

    Returns:
        Luminance image; RGB uses weights 0.299/0.587/0.114.

    Raises:
        ImageIOError: missing, unreadable or unsupported file.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I;16N"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "I":
                # PNG 16-bit grayscale opens as 32-bit int
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("1", "LA", "P", "PA"):
                converted = im.convert("RGB") if mode in ("P", "PA") else im.convert("L")
                arr = _to_luma(np.asarray(converted, dtype=np.float64)) / 255.0
            elif mode in ("RGB", "RGBA", "RGBX", "CMYK", "YCbCr"):
                arr = _to_luma(np.asarray(im.convert("RGB"), dtype=np.float64)) / 255.0
            else:
                raise ImageIOError(path, f"unsupported image mode {mode!r}")
    except FileNotFoundError as e:
        raise ImageIOError(path, "file not found") from e
    except (UnidentifiedImageError, OSError) as e:
        if isinstance(e, ImageIOError):
            raise
        raise ImageIOError(path, f"cannot read image ({e})") from e
    if arr.ndim != 2:
        raise ImageIOError(path, f"unexpected pixel layout {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def _to_luma(rgb: np.ndarray) -> np.ndarray:
    if rgb.ndim == 2:
        return rgb
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def quantize(img: np.ndarray) -> Tuple[np.ndarray, int]:
    """Clamp to [0, 1] and round half up to 8 bits; returns ``(bytes, clamped_count)``."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("cannot quantize an image containing NaN or Inf")
    clamped = int(np.count_nonzero((img < 0.0) | (img > 1.0)))
    values = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)
    return values.astype(np.uint8), clamped


def save_gray(img, path: PathLike) -> Path:
    """Write a [0, 1] image as an 8-bit lossless raster (format from the suffix)."""
    path = Path(path)
    img = np.asarray(img)
    if img.ndim == 4 and img.shape[:2] == (1, 1):
        img = img[0, 0]
    if img.ndim != 2:
        raise InvalidInputError(f"save_gray expects a 2-D image, got shape {img.shape}")
    if path.suffix.lower() in LOSSY_SUFFIXES:
        raise ImageIOError(path, "lossy formats are not supported for output; use .png, .bmp or .tif")
    data, clamped = quantize(img)
    if clamped:
        get_quantization_stats().record(clamped)
        logger.warning(f"⚠️ {path.name}: clamped {clamped} pixels into [0, 1] before saving")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data).save(path)
    except (OSError, ValueError, KeyError) as e:
        raise ImageIOError(path, f"cannot write image ({e})") from e
    return path


def image_size(path: PathLike) -> Tuple[int, int]:
    """(height, width) read from the file header."""
    try:
        with Image.open(path) as im:
            w, h = im.size
    except (UnidentifiedImageError, OSError) as e:
        raise ImageIOError(path, f"cannot read image header ({e})") from e
    return h, w


def _index_directory(directory: Path) -> dict:
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    files = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in files:
                logger.warning(f"⚠️ {directory}: several files share stem {p.stem!r}; using {files[p.stem].name}")
                continue
            files[p.stem] = p
    return files


@dataclass(frozen=True)
class ImagePair:
    stem: str
    ir: Path
    vis: Path


@dataclass
class PairedDataset:
    """Stem-matched infrared/visible pairs plus the scan report."""

    pairs: List[ImagePair]
    split: str = "train"
    unmatched: List[str] = field(default_factory=list)
    rejected: List[Tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[ImagePair]:
        return iter(self.pairs)

    def load_pair(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        pair = self.pairs[index]
        return load_gray(pair.ir), load_gray(pair.vis)

    def training_images(self) -> List[np.ndarray]:
        """Every infrared and visible image, in pair order (ir then vis)."""
        images = []
        for pair in self.pairs:
            images.append(load_gray(pair.ir))
            images.append(load_gray(pair.vis))
        return images


def pair_directories(ir_dir: PathLike, vis_dir: PathLike, split: str = "train",
                     min_size: Optional[int] = None) -> PairedDataset:
    """
    Join two directories by filename stem.

    Args:
        ir_dir: Infrared images.
        vis_dir: Visible images.
        split: Tag stored on the dataset (train, val or test).
        min_size: Reject pairs whose images are smaller than this in either dimension.

    Returns:
        Pairs sorted by stem; unmatched stems and rejected pairs are reported.

    Raises:
        DatasetError: a directory is missing or no usable pair was found.
    """
    ir_dir, vis_dir = Path(ir_dir), Path(vis_dir)
    ir_files = _index_directory(ir_dir)
    vis_files = _index_directory(vis_dir)

    unmatched = sorted(set(ir_files) ^ set(vis_files))
    for stem in unmatched:
        side = "infrared" if stem in ir_files else "visible"
        logger.warning(f"⚠️ unmatched {side} image {stem!r} skipped")

    pairs, rejected = [], []
    for stem in sorted(set(ir_files) & set(vis_files)):
        ir_path, vis_path = ir_files[stem], vis_files[stem]
        ir_shape, vis_shape = image_size(ir_path), image_size(vis_path)
        if ir_shape != vis_shape:
            reason = f"size mismatch: infrared {ir_shape} vs visible {vis_shape}"
        elif min_size is not None and min(ir_shape) < min_size:
            reason = f"smaller than crop {min_size}: {ir_shape}"
        else:
            pairs.append(ImagePair(stem, ir_path, vis_path))
            continue
        rejected.append((stem, reason))
        logger.warning(f"⚠️ pair {stem!r} rejected: {reason}")

    if not pairs:
        raise DatasetError(f"no usable image pairs in {ir_dir} and {vis_dir} "
                           f"({len(unmatched)} unmatched, {len(rejected)} rejected)")
    logger.info(f"📁 Paired {len(pairs)} images from {ir_dir} and {vis_dir} ({split})")
    return PairedDataset(pairs=pairs, split=split, unmatched=unmatched, rejected=rejected)
