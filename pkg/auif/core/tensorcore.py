"""
Dense 4-D tensor primitives with hand-derived gradients.

Every differentiable operation the unrolled network needs lives here as a
``*_forward`` / ``*_backward`` pair. A forward returns its output together
with a ``cache`` dict holding whatever the backward pass needs; the backward
takes the upstream gradient and that cache. Tensors are plain ``numpy``
arrays laid out as (batch, channels, height, width).

A ``GradTape`` strings cached steps into a chain so a whole encoder can be
replayed backwards, and ``check_gradients`` compares analytic gradients with
central finite differences.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

Tensor4 = np.ndarray
Cache = Dict[str, object]

KERNEL_SIZE = 3
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25
FD_EPS = 1e-6


def as_tensor4(x, name: str = "tensor") -> Tensor4:
    """Validate ``x`` as a non-empty floating-point (n, c, h, w) array."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise InvalidInputError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise InvalidInputError(f"{name} has an empty dimension: {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


# --------------------------------------------------------------------------
# Reflection padding (reflect-101: the edge pixel is not repeated)
# --------------------------------------------------------------------------

def _reflect_index(n: int, p: int) -> np.ndarray:
    idx = np.arange(-p, n + p)
    if n == 1:
        return np.zeros_like(idx)
    idx = np.abs(idx)
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def _scatter_matrix(index: np.ndarray, n: int, dtype) -> np.ndarray:
    m = np.zeros((index.size, n), dtype=dtype)
    m[np.arange(index.size), index] = 1
    return m


def reflect_pad_forward(x: Tensor4, p: int = 1) -> Tuple[Tensor4, Cache]:
    x = as_tensor4(x, "reflect_pad input")
    if int(p) != p or p < 1:
        raise InvalidInputError(f"pad width must be a positive integer, got {p}")
    p = int(p)
    h, w = x.shape[2], x.shape[3]
    for axis_name, n in (("height", h), ("width", w)):
        if n != 1 and n <= p:
            raise InvalidInputError(
                f"{axis_name} {n} too small for reflection pad {p} (needs > {p})"
            )
    ih = _reflect_index(h, p)
    iw = _reflect_index(w, p)
    out = x[:, :, ih[:, None], iw[None, :]]
    return out, {"ih": ih, "iw": iw, "shape": x.shape}


def reflect_pad_backward(dout: Tensor4, cache: Cache) -> Tensor4:
    """Scatter border gradients back onto the pixels they mirror."""
    n, c, h, w = cache["shape"]
    ph = _scatter_matrix(cache["ih"], h, dout.dtype)
    pw = _scatter_matrix(cache["iw"], w, dout.dtype)
    return ph.T @ dout @ pw


def reflect_pad(x: Tensor4, p: int = 1) -> Tensor4:
    return reflect_pad_forward(x, p)[0]


# --------------------------------------------------------------------------
# Valid correlation, stride 1, no bias
# --------------------------------------------------------------------------

def conv2d_forward(x: Tensor4, k: np.ndarray) -> Tuple[Tensor4, Cache]:
    x = as_tensor4(x, "conv2d input")
    k = np.asarray(k)
    if k.ndim != 4:
        raise InvalidInputError(f"kernel must be 4-D (out, in, kh, kw), got shape {k.shape}")
    if k.shape[1] != x.shape[1]:
        raise InvalidInputError(
            f"channel mismatch: input has {x.shape[1]} channels, kernel expects {k.shape[1]}"
        )
    kh, kw = k.shape[2], k.shape[3]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise InvalidInputError(
            f"input spatial dims {x.shape[2:]} smaller than kernel {k.shape[2:]}; pad first"
        )
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1)), {"x": x, "k": k}


def conv2d_input_grad(dout: Tensor4, k: np.ndarray) -> Tensor4:
    """Full correlation of ``dout`` with the flipped kernel: the adjoint of ``conv2d(., k)``."""
    kh, kw = k.shape[2], k.shape[3]
    dpad = np.pad(dout, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    dwindows = sliding_window_view(dpad, (kh, kw), axis=(2, 3))
    dx = np.tensordot(dwindows, k[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(dx, -1, 1))


def conv2d_backward(dout: Tensor4, cache: Cache) -> Tuple[Tensor4, np.ndarray]:
    """Returns (dx, dk)."""
    x, k = cache["x"], cache["k"]
    kh, kw = k.shape[2], k.shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    dk = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    return conv2d_input_grad(dout, k), dk


def conv2d(x: Tensor4, k: np.ndarray) -> Tensor4:
    return conv2d_forward(x, k)[0]


# --------------------------------------------------------------------------
# Tied kernel: 180 degree rotation with in/out channel roles swapped
# --------------------------------------------------------------------------

def tie_rot180(k: np.ndarray) -> np.ndarray:
    """
    Derive the second convolution's kernel from the first.

    ``k`` of shape (O, I, 3, 3) maps to (I, O, 3, 3) with
    ``out[i, o, r, s] = k[o, i, 2 - r, 2 - s]``. The map is linear and its own
    adjoint, so the same function carries a gradient of the derived kernel
    back onto the free one.
    """
    k = np.asarray(k)
    if k.ndim != 4 or k.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
        raise InvalidInputError(f"tie_rot180 expects a (out, in, 3, 3) kernel, got {k.shape}")
    return np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


# --------------------------------------------------------------------------
# Batch normalization over (n, h, w) per channel
# --------------------------------------------------------------------------

def batch_norm_forward(
    x: Tensor4,
    scale: np.ndarray,
    shift: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tuple[Tensor4, Tuple[np.ndarray, np.ndarray], Cache]:
    """
    Normalize each channel and return the updated running statistics.

    Returns:
        ``(out, (running_mean, running_var), cache)``. In eval mode the running
        statistics come back unchanged; in train mode they are the
        momentum-blended update (unbiased batch variance), returned rather than
        written so the caller decides when to commit them.
    """
    x = as_tensor4(x, "batch_norm input")
    c = x.shape[1]
    for label, arr in (("scale", scale), ("shift", shift),
                       ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise InvalidInputError(f"batch_norm {label} must have shape ({c},), got {np.shape(arr)}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    bcast = (1, c, 1, 1)

    if mode == "train":
        if m < 2:
            raise InvalidInputError("batch_norm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var * (m / (m - 1))
    elif mode == "eval":
        mean = np.asarray(running_mean)
        var = np.asarray(running_var)
        new_mean, new_var = running_mean, running_var
    else:
        raise InvalidInputError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    std = np.sqrt(var + eps).astype(x.dtype)
    xhat = (x - mean.reshape(bcast).astype(x.dtype)) / std.reshape(bcast)
    out = scale.reshape(bcast) * xhat + shift.reshape(bcast)
    cache = {"mode": mode, "xhat": xhat, "std": std, "scale": scale}
    return out.astype(x.dtype, copy=False), (new_mean, new_var), cache


def batch_norm_backward(dout: Tensor4, cache: Cache) -> Tuple[Tensor4, np.ndarray, np.ndarray]:
    """Returns (dx, dscale, dshift); train mode runs the full batch-statistics chain rule."""
    axes = (0, 2, 3)
    xhat, std, scale = cache["xhat"], cache["std"], cache["scale"]
    c = xhat.shape[1]
    bcast = (1, c, 1, 1)
    dshift = dout.sum(axis=axes)
    dscale = (dout * xhat).sum(axis=axes)
    dxhat = dout * scale.reshape(bcast)
    if cache["mode"] == "train":
        dx = (
            dxhat
            - dxhat.mean(axis=axes).reshape(bcast)
            - xhat * (dxhat * xhat).mean(axis=axes).reshape(bcast)
        ) / std.reshape(bcast)
    else:
        dx = dxhat / std.reshape(bcast)
    return dx, dscale, dshift


# --------------------------------------------------------------------------
# PReLU with one shared slope, and the sigmoid output head
# --------------------------------------------------------------------------

def prelu_forward(x: Tensor4, slope: np.ndarray) -> Tuple[Tensor4, Cache]:
    a = np.asarray(slope, dtype=x.dtype).reshape(())
    out = np.where(x >= 0, x, a * x)
    return out, {"x": x, "slope": a}


def prelu_backward(dout: Tensor4, cache: Cache) -> Tuple[Tensor4, np.ndarray]:
    """Returns (dx, dslope) with dslope shaped (1,)."""
    x, a = cache["x"], cache["slope"]
    negative = x < 0
    dx = np.where(negative, a * dout, dout)
    dslope = np.sum(np.where(negative, x * dout, 0.0)).reshape(1)
    return dx, dslope


def sigmoid_forward(x: Tensor4) -> Tuple[Tensor4, Cache]:
    out = expit(x)
    # keep strictly inside (0, 1) even where expit rounds to an endpoint
    info = np.finfo(out.dtype)
    out = np.clip(out, info.tiny, 1.0 - info.epsneg)
    return out, {"out": out}


def sigmoid_backward(dout: Tensor4, cache: Cache) -> Tensor4:
    out = cache["out"]
    return dout * out * (1.0 - out)


def sigmoid(x: Tensor4) -> Tensor4:
    return sigmoid_forward(x)[0]


# --------------------------------------------------------------------------
# Gradient tape
# --------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray, Cache], Tuple[Optional[np.ndarray], Dict[str, np.ndarray]]]


@dataclass
class TapeEntry:
    op_id: str
    backward: BackwardFn
    cache: Cache


class GradTape:
    """
    Ordered record of a chain of differentiable steps.

    Each step consumes the previous step's output (the "stream") and may read
    named side inputs or parameters. Its backward function maps the stream
    gradient to ``(grad of its stream input, {side name: grad})``; side
    gradients with the same name are summed across steps. One tape belongs to
    one forward pass.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def record(self, op_id: str, backward: BackwardFn, cache: Cache) -> None:
        self.entries.append(TapeEntry(op_id, backward, cache))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def op_ids(self) -> List[str]:
        return [e.op_id for e in self.entries]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], Dict[str, np.ndarray]]:
        """Replay every entry once, newest first."""
        side_grads: Dict[str, np.ndarray] = {}
        for entry in reversed(self.entries):
            grad, side = entry.backward(grad, entry.cache)
            for name, g in side.items():
                side_grads[name] = side_grads[name] + g if name in side_grads else g
        return grad, side_grads


def merge_grads(*grad_dicts: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Sum gradient dicts key by key."""
    merged: Dict[str, np.ndarray] = {}
    for grads in grad_dicts:
        for name, g in grads.items():
            merged[name] = merged[name] + g if name in merged else g
    return merged


# --------------------------------------------------------------------------
# Finite-difference gradient checker
# --------------------------------------------------------------------------

@dataclass
class GradCheckCase:
    """
    One gradient check: a scalar function of named inputs plus its analytic gradient.

    ``loss`` and ``gradients`` receive the same dict of float64 arrays;
    ``sample`` (optional) draws an input for a given name and shape.
    ``max_entries`` caps the coordinates checked per input for cases too large
    to difference exhaustively.
    """

    name: str
    shapes: Dict[str, Tuple[int, ...]]
    loss: Callable[[Dict[str, np.ndarray]], float]
    gradients: Callable[[Dict[str, np.ndarray]], Dict[str, np.ndarray]]
    sample: Optional[Callable[[str, Tuple[int, ...], np.random.Generator], np.ndarray]] = None
    tolerance: float = 1e-5
    max_entries: Optional[int] = None


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    max_rel_error: float = 0.0
    per_input: Dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0
    failure: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error <= self.tolerance


def check_gradients(
    case: GradCheckCase,
    tolerance: Optional[float] = None,
    seed: int = 0,
    eps: float = FD_EPS,
    max_entries: Optional[int] = None,
) -> GradCheckReport:
    """
    Compare ``case.gradients`` with central finite differences in float64.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, 1e-3 * s)``
    where ``s`` is the largest numerical gradient magnitude of that input, so
    round-off on entries negligible at the tensor's scale is not reported.

    Args:
        case: The function under test.
        tolerance: Overrides ``case.tolerance``.
        seed: Seeds input sampling and coordinate sampling.
        eps: Finite-difference half step.
        max_entries: Check at most this many coordinates per input (sampled);
            the smaller of this and ``case.max_entries`` applies.

    Returns:
        A report; ``passed`` iff every analytic gradient is finite and the
        maximum relative error is within tolerance.
    """
    tol = case.tolerance if tolerance is None else tolerance
    if case.max_entries is not None:
        max_entries = case.max_entries if max_entries is None else min(max_entries, case.max_entries)
    rng = np.random.default_rng(seed)
    inputs: Dict[str, np.ndarray] = {}
    for name, shape in case.shapes.items():
        if case.sample is not None:
            inputs[name] = np.array(case.sample(name, shape, rng), dtype=np.float64)
        else:
            inputs[name] = rng.standard_normal(shape)

    report = GradCheckReport(name=case.name, tolerance=tol)
    analytic = case.gradients({k: v.copy() for k, v in inputs.items()})

    for name, x in inputs.items():
        a = np.asarray(analytic.get(name, np.zeros_like(x)), dtype=np.float64).reshape(x.shape)
        bad = np.argwhere(~np.isfinite(a))
        if bad.size:
            report.failure = f"non-finite analytic gradient for {name!r} at index {tuple(int(i) for i in bad[0])}"
            report.max_rel_error = float("inf")
            return report

        flat = x.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        numeric = np.empty(coords.size)
        for j, i in enumerate(coords):
            original = flat[i]
            flat[i] = original + eps
            f_plus = case.loss(inputs)
            flat[i] = original - eps
            f_minus = case.loss(inputs)
            flat[i] = original
            numeric[j] = (f_plus - f_minus) / (2.0 * eps)

        a_sel = a.reshape(-1)[coords]
        scale = float(np.max(np.abs(numeric))) if numeric.size else 0.0
        floor = max(1e-3 * scale, 1e-12)
        denom = np.maximum(np.maximum(np.abs(a_sel), np.abs(numeric)), floor)
        rel = float(np.max(np.abs(a_sel - numeric) / denom)) if coords.size else 0.0
        report.per_input[name] = rel
        report.checked_entries += int(coords.size)
        report.max_rel_error = max(report.max_rel_error, rel)

    logger.debug(f"gradcheck {case.name}: max rel err {report.max_rel_error:.3e} (tol {tol:.0e})")
    return report
