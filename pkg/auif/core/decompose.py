"""
Classical two-scale decomposition.

Splits a grayscale image into a smooth base layer and a detail layer without
any learning: a blur-filter split, the gradient-penalty optimization split,
and plain gradient descent on the filter-penalized objectives that the
unrolled encoders are built from. ``linear_oracle`` solves the same
quadratic objective densely and is used to validate the iterative solvers.

All filters here act through reflection padding (reflect-101) followed by a
3x3 correlation, and their transposes are the exact adjoints of that map.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import InvalidInputError, StepSizeError
from .tensorcore import conv2d, conv2d_input_grad, reflect_pad_backward, reflect_pad_forward

logger = logging.getLogger(__name__)

DIVERGENCE_PATIENCE = 10
ORACLE_MAX_SIDE = 24
DEFAULT_THETA = 1.0
DEFAULT_ETA = 0.1
DEFAULT_ITERS = 200
DEFAULT_LAMBDA = 5.0
DEFAULT_OPTIM_STEP = 0.01
DEFAULT_OPTIM_ITERS = 1000


@dataclass(frozen=True)
class FilterBank:
    """The fixed 3x3 kernels used for classical splits and encoder initialization."""

    blur3: np.ndarray = field(default_factory=lambda: np.full((3, 3), 1.0 / 9.0))
    laplacian4: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    )
    # horizontal and vertical forward differences embedded in a 3x3 support
    gx: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, 0.0, 0.0]])
    )
    gy: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 1.0, 0.0]])
    )

    def get(self, name: str) -> np.ndarray:
        if name not in ("blur3", "laplacian4", "gx", "gy"):
            raise InvalidInputError(f"unknown filter {name!r}")
        return getattr(self, name)


FILTERS = FilterBank()


@dataclass
class DecomposeResult:
    base: np.ndarray
    detail: np.ndarray
    loss_trace: List[float] = field(default_factory=list)
    method: str = ""
    seconds: float = 0.0

    @property
    def iterations(self) -> int:
        return max(len(self.loss_trace) - 1, 0)


def _as_image(img, name: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return img


class ReflectFilter:
    """
    A 3x3 filter applied as reflect-pad then correlate, on a stack of images.

    Works on arrays shaped (..., H, W); leading axes are treated as a batch.
    ``adjoint`` is the exact transpose of ``apply`` for the same spatial size.
    """

    def __init__(self, kernel: np.ndarray):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.shape != (3, 3):
            raise InvalidInputError(f"filters must be 3x3, got {kernel.shape}")
        self.kernel = kernel
        self._k4 = kernel.reshape(1, 1, 3, 3)

    def apply(self, img: np.ndarray) -> np.ndarray:
        lead, hw = img.shape[:-2], img.shape[-2:]
        x = img.reshape(-1, 1, *hw)
        padded, _ = reflect_pad_forward(x, 1)
        return conv2d(padded, self._k4).reshape(*lead, *hw)

    def adjoint(self, grad: np.ndarray) -> np.ndarray:
        lead, hw = grad.shape[:-2], grad.shape[-2:]
        g = grad.reshape(-1, 1, *hw)
        _, pad_cache = reflect_pad_forward(np.zeros((1, 1, *hw)), 1)
        pad_cache["shape"] = (g.shape[0], 1, *hw)
        dpadded = conv2d_input_grad(g, self._k4)
        return reflect_pad_backward(dpadded, pad_cache).reshape(*lead, *hw)

    def gram(self, img: np.ndarray) -> np.ndarray:
        """gᵀ(g * img)."""
        return self.adjoint(self.apply(img))


def stable_step(theta: float, kernels: Sequence[np.ndarray]) -> float:
    """
    A step size that keeps gradient descent on the quadratic objective monotone.

    Uses the bound ‖gᵀg‖ ≤ 2‖g‖₁² for a reflect-padded 3x3 filter, capped at
    the default 0.1.
    """
    bound = theta + sum(2.0 * float(np.abs(k).sum()) ** 2 for k in kernels)
    return min(DEFAULT_ETA, 1.0 / bound)


def quadratic_objective(x: np.ndarray, b: np.ndarray, theta: float,
                        filters: Sequence[ReflectFilter]) -> float:
    """θ/2 ‖x − b‖² + ½ Σ ‖g * b‖²."""
    value = 0.5 * theta * float(np.sum((x - b) ** 2))
    for f in filters:
        value += 0.5 * float(np.sum(f.apply(b) ** 2))
    return value


def _descend(x: np.ndarray, start: np.ndarray, theta: float, kernels: Sequence[np.ndarray],
             eta: float, iters: int, objective_scale: float = 1.0) -> Tuple[np.ndarray, List[float]]:
    """
    Gradient descent on θ/2‖x − b‖² + ½Σ‖g * b‖² from ``start``.

    The trace holds ``objective_scale`` times the objective before every
    update and once after the last, so it has ``iters + 1`` entries.
    """
    filters = [ReflectFilter(k) for k in kernels]
    b = start.copy()
    trace = [objective_scale * quadratic_objective(x, b, theta, filters)]
    increases = 0
    for it in range(1, iters + 1):
        grad = theta * (b - x)
        for f in filters:
            grad += f.gram(b)
        b = b - eta * grad
        loss = objective_scale * quadratic_objective(x, b, theta, filters)
        if not np.isfinite(loss):
            raise StepSizeError(f"objective became non-finite at iteration {it} (step {eta:g})", it)
        # round-off at convergence is not an increase
        increases = increases + 1 if loss > trace[-1] + 1e-12 * abs(trace[-1]) else 0
        trace.append(loss)
        if increases >= DIVERGENCE_PATIENCE:
            raise StepSizeError(
                f"objective increased {DIVERGENCE_PATIENCE} iterations in a row "
                f"(step {eta:g}, iteration {it}); reduce the step size", it)
    return b, trace


def filter_decompose(img) -> DecomposeResult:
    """Base is the 3x3 mean of the reflect-padded image, detail the residual."""
    start = time.perf_counter()
    img = _as_image(img)
    base = ReflectFilter(FILTERS.blur3).apply(img)
    detail = img - base
    return DecomposeResult(base=base, detail=detail, method="filter",
                           seconds=time.perf_counter() - start)


def optim_decompose(img, lam: float = DEFAULT_LAMBDA, iters: int = DEFAULT_OPTIM_ITERS,
                    step: float = DEFAULT_OPTIM_STEP) -> DecomposeResult:
    """
    Minimize ‖I − B‖² + λ(‖gx * B‖² + ‖gy * B‖²) by gradient descent from B = I.

    Args:
        img: 2-D image.
        lam: Gradient penalty weight, ≥ 0.
        iters: Number of descent steps.
        step: Step size on the objective above.

    Returns:
        DecomposeResult with ``detail = img - base`` and the objective trace.

    Raises:
        StepSizeError: the objective diverged.
    """
    start = time.perf_counter()
    img = _as_image(img)
    if lam < 0:
        raise InvalidInputError(f"lambda must be >= 0, got {lam}")
    if step <= 0:
        raise InvalidInputError(f"step must be > 0, got {step}")
    if iters < 0:
        raise InvalidInputError(f"iters must be >= 0, got {iters}")
    # F = 2 * (1/2 ‖I − B‖² + 1/2 Σ ‖√λ g * B‖²)
    root = np.sqrt(lam)
    base, trace = _descend(img, img, 1.0, [root * FILTERS.gx, root * FILTERS.gy],
                           eta=2.0 * step, iters=iters, objective_scale=2.0)
    logger.debug(f"optim_decompose: λ={lam:g} step={step:g} loss {trace[0]:.4g} -> {trace[-1]:.4g}")
    return DecomposeResult(base=base, detail=img - base, loss_trace=trace, method="optim",
                           seconds=time.perf_counter() - start)


def classic_gd_decompose(img, variant: str = "base", theta: float = DEFAULT_THETA,
                         eta: Optional[float] = None, iters: int = DEFAULT_ITERS) -> DecomposeResult:
    """
    Plain gradient descent on one filter-penalized objective.

    ``variant="base"`` minimizes θ/2‖I − B‖² + ½‖laplacian4 * B‖² from
    B = blur3 * I and sets ``detail = I - base``; ``variant="detail"``
    minimizes θ/2‖I − D‖² + ½‖blur3 * D‖² from D = laplacian4 * I and sets
    ``base = I - detail``. ``eta=None`` picks ``stable_step``.
    """
    start = time.perf_counter()
    img = _as_image(img)
    if variant not in ("base", "detail"):
        raise InvalidInputError(f"variant must be 'base' or 'detail', got {variant!r}")
    if theta <= 0:
        raise InvalidInputError(f"theta must be > 0, got {theta}")
    if iters < 0:
        raise InvalidInputError(f"iters must be >= 0, got {iters}")

    if variant == "base":
        penalty, init = FILTERS.laplacian4, FILTERS.blur3
    else:
        penalty, init = FILTERS.blur3, FILTERS.laplacian4
    if eta is None:
        eta = stable_step(theta, [penalty])
    elif eta <= 0:
        raise InvalidInputError(f"eta must be > 0, got {eta}")

    x0 = ReflectFilter(init).apply(img)
    solution, trace = _descend(img, x0, theta, [penalty], eta=eta, iters=iters)
    logger.debug(f"classic_gd_decompose[{variant}]: θ={theta:g} η={eta:g} "
                 f"loss {trace[0]:.4g} -> {trace[-1]:.4g} in {iters} iterations")
    if variant == "base":
        base, detail = solution, img - solution
    else:
        base, detail = img - solution, solution
    return DecomposeResult(base=base, detail=detail, loss_trace=trace, method=f"gd-{variant}",
                           seconds=time.perf_counter() - start)


def oracle_operator(shape, theta: float, kernels: Sequence[np.ndarray]) -> np.ndarray:
    """Dense matrix of b ↦ θb + Σ gᵀ(g * b) on row-major flattened images of ``shape``."""
    h, w = shape
    n = h * w
    basis = np.eye(n).reshape(n, h, w)
    response = theta * basis
    for k in kernels:
        response = response + ReflectFilter(k).gram(basis)
    # row j of `response` is A e_j, i.e. column j of A
    return response.reshape(n, n).T


def linear_oracle(img, theta: float, kernels: Sequence[np.ndarray]) -> np.ndarray:
    """
    Closed-form minimizer of θ/2‖x − b‖² + ½Σ‖g * b‖², solved densely.

    Only for small images (each side ≤ 24); the operator is built column by
    column from unit basis images, so it includes the exact boundary handling.
    """
    img = _as_image(img)
    if max(img.shape) > ORACLE_MAX_SIDE:
        raise InvalidInputError(
            f"linear_oracle supports images up to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE}, got {img.shape}")
    if theta <= 0:
        raise InvalidInputError(f"theta must be > 0, got {theta}")
    a = oracle_operator(img.shape, theta, kernels)
    asym = float(np.max(np.abs(a - a.T)))
    assert asym <= 1e-10 * max(1.0, float(np.max(np.abs(a)))), f"oracle operator not symmetric ({asym:.2e})"
    try:
        factor = cho_factor(a)
    except LinAlgError as exc:
        raise AssertionError(f"oracle operator not positive definite for theta={theta}") from exc
    return cho_solve(factor, theta * img.reshape(-1)).reshape(img.shape)
