"""
Finite-difference checks for every differentiable piece of the network.

Each case wraps one primitive or composite as a scalar function of named
float64 inputs together with its analytic gradient. Primitives are checked
against 1e-5 relative error, composites against 1e-4. Linear outputs are
reduced to a scalar with a fixed random weighting.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np

from .losses import l2_loss_and_grad, ssim_and_grads, total_loss_and_grad
from .network import (
    DEFAULT_CHANNELS,
    DEFAULT_LAYERS,
    ETA_MEAN,
    ETA_STD,
    Ablation,
    DecoderParams,
    ForwardTrace,
    LayerParams,
    backward,
    forward,
    init_network,
    layer_backward,
    layer_forward,
    reconstruct,
)
from .tensorcore import (
    GradCheckCase,
    GradCheckReport,
    batch_norm_backward,
    batch_norm_forward,
    check_gradients,
    conv2d_backward,
    conv2d_forward,
    prelu_backward,
    prelu_forward,
    reflect_pad_backward,
    reflect_pad_forward,
    sigmoid_backward,
    sigmoid_forward,
    tie_rot180,
)

logger = logging.getLogger(__name__)

PRIMITIVE_TOLERANCE = 1e-5
COMPOSITE_TOLERANCE = 1e-4
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
SIDE = 8
SSIM_SIDE = 16
CHANNELS = 4
WEIGHT_SEED = 1234
FULL_SIZE_ENTRIES = 3


def _unit_interval(name, shape, rng):
    return rng.uniform(0.05, 0.95, size=shape)


def _weights(shape) -> np.ndarray:
    return np.random.default_rng(WEIGHT_SEED).standard_normal(shape)


def _trained_range(name, shape, rng):
    """Inputs of the magnitude a trained layer sees; step sizes and scales stay away from zero."""
    if name == "eta":
        return np.clip(rng.normal(ETA_MEAN, ETA_STD, size=shape), 0.02, None)
    if name == "theta":
        return rng.uniform(0.5, 2.0, size=shape)
    if name == "bn_scale":
        return rng.uniform(0.5, 1.5, size=shape)
    if name == "bn_shift":
        return rng.normal(0.0, 0.1, size=shape)
    if name == "prelu_slope":
        return rng.uniform(0.1, 0.4, size=shape)
    if name in ("kernel", "kernel1"):
        return rng.normal(0.0, 0.3, size=shape)
    return rng.uniform(0.0, 1.0, size=shape)


def _reflect_pad_case() -> GradCheckCase:
    w = _weights((2, 3, SIDE + 2, SIDE + 2))

    def loss(v):
        return float(np.sum(w * reflect_pad_forward(v["x"], 1)[0]))

    def grads(v):
        _, cache = reflect_pad_forward(v["x"], 1)
        return {"x": reflect_pad_backward(w, cache)}

    return GradCheckCase("reflect_pad", {"x": (2, 3, SIDE, SIDE)}, loss, grads,
                         tolerance=PRIMITIVE_TOLERANCE)


def _conv2d_case() -> GradCheckCase:
    w = _weights((2, 4, SIDE - 2, SIDE - 2))

    def loss(v):
        return float(np.sum(w * conv2d_forward(v["x"], v["k"])[0]))

    def grads(v):
        _, cache = conv2d_forward(v["x"], v["k"])
        dx, dk = conv2d_backward(w, cache)
        return {"x": dx, "k": dk}

    return GradCheckCase("conv2d", {"x": (2, 3, SIDE, SIDE), "k": (4, 3, 3, 3)}, loss, grads,
                         tolerance=PRIMITIVE_TOLERANCE)


def _tied_conv_case() -> GradCheckCase:
    w = _weights((2, 1, SIDE - 2, SIDE - 2))

    def loss(v):
        return float(np.sum(w * conv2d_forward(v["x"], tie_rot180(v["k"]))[0]))

    def grads(v):
        _, cache = conv2d_forward(v["x"], tie_rot180(v["k"]))
        dx, dk2 = conv2d_backward(w, cache)
        return {"x": dx, "k": tie_rot180(dk2)}

    return GradCheckCase("tie_rot180", {"x": (2, CHANNELS, SIDE, SIDE), "k": (CHANNELS, 1, 3, 3)},
                         loss, grads, tolerance=PRIMITIVE_TOLERANCE)


def _batch_norm_case(mode: str) -> GradCheckCase:
    c = 3
    w = _weights((2, c, SIDE, SIDE))
    running_mean = np.linspace(-0.5, 0.5, c)
    running_var = np.linspace(0.5, 2.0, c)

    def run(v):
        return batch_norm_forward(v["x"], v["scale"], v["shift"], running_mean, running_var, mode=mode)

    def loss(v):
        return float(np.sum(w * run(v)[0]))

    def grads(v):
        _, _, cache = run(v)
        dx, dscale, dshift = batch_norm_backward(w, cache)
        return {"x": dx, "scale": dscale, "shift": dshift}

    return GradCheckCase(f"batch_norm_{mode}", {"x": (2, c, SIDE, SIDE), "scale": (c,), "shift": (c,)},
                         loss, grads, tolerance=PRIMITIVE_TOLERANCE)


def _prelu_case() -> GradCheckCase:
    w = _weights((2, 3, SIDE, SIDE))

    def loss(v):
        return float(np.sum(w * prelu_forward(v["x"], v["slope"])[0]))

    def grads(v):
        _, cache = prelu_forward(v["x"], v["slope"])
        dx, dslope = prelu_backward(w, cache)
        return {"x": dx, "slope": dslope}

    return GradCheckCase("prelu", {"x": (2, 3, SIDE, SIDE), "slope": (1,)}, loss, grads,
                         tolerance=PRIMITIVE_TOLERANCE)


def _sigmoid_case() -> GradCheckCase:
    w = _weights((2, 3, SIDE, SIDE))

    def loss(v):
        return float(np.sum(w * sigmoid_forward(v["x"])[0]))

    def grads(v):
        _, cache = sigmoid_forward(v["x"])
        return {"x": sigmoid_backward(w, cache)}

    return GradCheckCase("sigmoid", {"x": (2, 3, SIDE, SIDE)}, loss, grads, tolerance=PRIMITIVE_TOLERANCE)


def _ssim_case() -> GradCheckCase:
    shape = (2, 1, SSIM_SIDE, SSIM_SIDE)

    def grads(v):
        _, da, db = ssim_and_grads(v["a"], v["b"])
        return {"a": da, "b": db}

    return GradCheckCase("ssim", {"a": shape, "b": shape}, lambda v: ssim_and_grads(v["a"], v["b"])[0],
                         grads, sample=_unit_interval, tolerance=PRIMITIVE_TOLERANCE)


def _l2_case() -> GradCheckCase:
    x = np.random.default_rng(WEIGHT_SEED).uniform(size=(2, 1, SIDE, SIDE))

    return GradCheckCase("l2", {"x_hat": x.shape}, lambda v: l2_loss_and_grad(x, v["x_hat"])[0],
                         lambda v: {"x_hat": l2_loss_and_grad(x, v["x_hat"])[1]},
                         sample=_unit_interval, tolerance=PRIMITIVE_TOLERANCE)


def _total_loss_case() -> GradCheckCase:
    x = np.random.default_rng(WEIGHT_SEED).uniform(size=(2, 1, SSIM_SIDE, SSIM_SIDE))

    return GradCheckCase("total_loss", {"x_hat": x.shape},
                         lambda v: total_loss_and_grad(x, v["x_hat"])[0].total,
                         lambda v: {"x_hat": total_loss_and_grad(x, v["x_hat"])[1]},
                         sample=_unit_interval, tolerance=COMPOSITE_TOLERANCE)


_LAYER_FIELDS = ("kernel1", "eta", "theta", "bn_scale", "bn_shift", "prelu_slope")


def _layer_case(name: str, plain: bool = False) -> GradCheckCase:
    """One BCL/DCL step in train mode, differentiated in its stream input, X and every learnable."""
    w = _weights((1, 1, SIDE, SIDE))
    fields_ = [f for f in _LAYER_FIELDS if not (plain and f in ("eta", "theta"))]
    shapes = {"s_in": (1, 1, SIDE, SIDE), "x": (1, 1, SIDE, SIDE), "kernel1": (CHANNELS, 1, 3, 3)}
    shapes.update({f: (1,) for f in fields_ if f != "kernel1"})

    def params(v) -> LayerParams:
        scalars = {f: v.get(f, np.zeros(1)) for f in ("eta", "theta")}
        return LayerParams(kernel1=v["kernel1"], eta=scalars["eta"], theta=scalars["theta"],
                           bn_scale=v["bn_scale"], bn_shift=v["bn_shift"],
                           bn_running_mean=np.zeros(1), bn_running_var=np.ones(1),
                           prelu_slope=v["prelu_slope"])

    def loss(v):
        out, _, _ = layer_forward(v["s_in"], v["x"], params(v), mode="train", plain=plain)
        return float(np.sum(w * out))

    def grads(v):
        _, _, cache = layer_forward(v["s_in"], v["x"], params(v), mode="train", plain=plain)
        ds_in, dx, g = layer_backward(w, cache)
        out = {"s_in": ds_in, "x": dx}
        out.update({f: g[f] for f in fields_})
        return out

    return GradCheckCase(name, shapes, loss, grads, sample=_trained_range,
                         tolerance=COMPOSITE_TOLERANCE)


def _decoder_case() -> GradCheckCase:
    x = np.random.default_rng(WEIGHT_SEED).uniform(size=(2, 1, SSIM_SIDE, SSIM_SIDE))
    template = init_network(layers=1, channels=1, dtype=np.float64)
    shape = x.shape

    def with_decoder(v):
        params = template.copy()
        params.decoder = DecoderParams(kernel=v["kernel"], bn_scale=v["bn_scale"], bn_shift=v["bn_shift"],
                                       bn_running_mean=np.zeros(1), bn_running_var=np.ones(1))
        return params

    def loss(v):
        out = reconstruct(v["b"], v["d"], with_decoder(v), mode="train")
        return total_loss_and_grad(x, out, normalization="sum")[0].total

    def grads(v):
        trace = ForwardTrace()
        out = reconstruct(v["b"], v["d"], with_decoder(v), mode="train", trace=trace)
        dout = total_loss_and_grad(x, out, normalization="sum")[1]
        d_in, g = trace.decoder_tape.backward(dout)
        return {"b": d_in, "d": d_in, "kernel": g["decoder.kernel"],
                "bn_scale": g["decoder.bn_scale"], "bn_shift": g["decoder.bn_shift"]}

    shapes = {"b": shape, "d": shape, "kernel": (1, 1, 3, 3), "bn_scale": (1,), "bn_shift": (1,)}
    return GradCheckCase("decoder", shapes, loss, grads, sample=_trained_range, tolerance=COMPOSITE_TOLERANCE)


def _end_to_end_case(ablation: Ablation = Ablation.NONE, layers: int = 2) -> GradCheckCase:
    """The whole network under the training loss, differentiated in every learnable."""
    x = np.random.default_rng(WEIGHT_SEED).uniform(size=(2, 1, SSIM_SIDE, SSIM_SIDE))
    template = init_network(layers=layers, channels=CHANNELS, ablation=ablation, dtype=np.float64)
    learnables = template.learnables()

    def sample(name, shape, rng):
        return learnables[name] + 0.05 * rng.standard_normal(shape)

    def build(v):
        params = template.copy()
        for name, value in v.items():
            params.set_tensor(name, value)
        return params

    def loss(v):
        out, _ = forward(x, build(v), mode="train", record=False)
        return total_loss_and_grad(x, out)[0].total

    def grads(v):
        params = build(v)
        out, trace = forward(x, params, mode="train")
        return backward(total_loss_and_grad(x, out)[1], trace, params)

    label = "end_to_end" if ablation == Ablation.NONE else f"end_to_end[{ablation.label}]"
    return GradCheckCase(label, {k: v.shape for k, v in learnables.items()}, loss, grads,
                         sample=sample, tolerance=COMPOSITE_TOLERANCE)


def _full_size_case() -> GradCheckCase:
    """
    The default-size network (every one of its learnables), sampled per tensor.

    PReLU slopes sit at 1 so no activation kink falls inside a difference
    step anywhere in the twenty stacked layers.
    """
    x = np.random.default_rng(WEIGHT_SEED).uniform(size=(2, 1, SSIM_SIDE, SSIM_SIDE))
    template = init_network(layers=DEFAULT_LAYERS, channels=DEFAULT_CHANNELS, dtype=np.float64)
    learnables = template.learnables()

    def sample(name, shape, rng):
        if name.endswith(".prelu_slope"):
            return np.ones(shape)
        return learnables[name] + 0.05 * rng.standard_normal(shape)

    def build(v):
        params = template.copy()
        for name, value in v.items():
            params.set_tensor(name, value)
        return params

    def loss(v):
        out, _ = forward(x, build(v), mode="train", record=False)
        return total_loss_and_grad(x, out, normalization="sum")[0].total

    def grads(v):
        params = build(v)
        out, trace = forward(x, params, mode="train")
        return backward(total_loss_and_grad(x, out, normalization="sum")[1], trace, params)

    return GradCheckCase("end_to_end_full", {k: v.shape for k, v in learnables.items()}, loss, grads,
                         sample=sample, tolerance=COMPOSITE_TOLERANCE, max_entries=FULL_SIZE_ENTRIES)

def build_cases() -> List[GradCheckCase]:
    return [
        _reflect_pad_case(),
        _conv2d_case(),
        _tied_conv_case(),
        _batch_norm_case("train"),
        _batch_norm_case("eval"),
        _prelu_case(),
        _sigmoid_case(),
        _ssim_case(),
        _l2_case(),
        _total_loss_case(),
        _layer_case("bcl_step"),
        _layer_case("dcl_step"),
        _layer_case("plain_step", plain=True),
        _decoder_case(),
        _end_to_end_case(),
        _full_size_case(),
    ]


@dataclass
class SuiteResult:
    reports: List[GradCheckReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def worst_by_case(self) -> Dict[str, GradCheckReport]:
        """The report with the largest error for every case, in suite order."""
        worst: Dict[str, GradCheckReport] = {}
        for r in self.reports:
            if r.name not in worst or r.max_rel_error > worst[r.name].max_rel_error or not r.passed:
                worst[r.name] = r
        return worst


def run_suite(tolerance: Optional[float] = None, seeds: Iterable[int] = DEFAULT_SEEDS,
              max_entries: Optional[int] = None,
              cases: Optional[List[GradCheckCase]] = None) -> SuiteResult:
    """
    Run every case once per seed.

    Args:
        tolerance: Replaces each case's own tolerance when given.
        seeds: Input-sampling seeds.
        max_entries: Per-tensor coordinate cap passed to ``check_gradients``.
        cases: Defaults to ``build_cases()``.
    """
    cases = build_cases() if cases is None else cases
    reports = []
    for case in cases:
        for seed in seeds:
            report = check_gradients(case, tolerance=tolerance, seed=seed, max_entries=max_entries)
            reports.append(report)
            if not report.passed:
                logger.warning(f"⚠️ gradcheck {case.name} (seed {seed}) failed: "
                               f"max rel err {report.max_rel_error:.3e} {report.failure or ''}")
    result = SuiteResult(reports)
    logger.info(f"🧪 Gradient suite: {len(cases)} cases, {len(reports)} checks, "
                f"{'passed' if result.passed else 'FAILED'}")
    return result
