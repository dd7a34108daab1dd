"""
The unrolled two-scale fusion network.

Two encoders of N layers each turn an image into a base map and a detail map.
Every layer is one gradient-descent step on a filter-penalized objective
whose filters, step size and fidelity weight are learned:

    raw = S - eta * (conv2(conv1(S)) - theta * (X - S))
    S'  = PReLU(BN(raw))

``conv1`` maps 1 channel to C, and ``conv2`` uses the kernel of ``conv1``
rotated by 180 degrees with in/out channels swapped, so it is never stored.
The decoder adds the two maps and applies conv3x3, BN and a sigmoid.

Parameters live in plain dataclasses of numpy arrays, addressed by dotted
names such as ``base.0.kernel1`` or ``decoder.bn_scale``. A forward pass can
record each step on a ``GradTape`` so ``backward`` replays the whole network.
"""
import enum
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .decompose import FILTERS, filter_decompose, optim_decompose
from .errors import InvalidInputError
from .tensorcore import (
    PRELU_INIT,
    GradTape,
    as_tensor4,
    batch_norm_backward,
    batch_norm_forward,
    conv2d_backward,
    conv2d_forward,
    merge_grads,
    prelu_backward,
    prelu_forward,
    reflect_pad_backward,
    reflect_pad_forward,
    sigmoid_backward,
    sigmoid_forward,
    tie_rot180,
)

logger = logging.getLogger(__name__)

DEFAULT_LAYERS = 10
DEFAULT_CHANNELS = 64
ETA_MEAN = 0.1
ETA_STD = 0.03
THETA_BASE = 1e-3
THETA_DETAIL = 1.0


class Ablation(enum.IntFlag):
    """Architecture and loss variants; the values are the checkpoint bitmask bits."""

    NONE = 0
    PLAIN_CONV = 1
    NO_INIT = 2
    BASE_ONLY = 4
    DETAIL_ONLY = 8
    L2_ONLY = 16
    SSIM_ONLY = 32
    FILTER_DECOMP = 64
    OPTIM_DECOMP = 128

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "Ablation":
        """Parse lowercase flag names (``["plain_conv", "l2_only"]``) into a validated mask."""
        flags = cls.NONE
        for raw in names:
            name = str(raw).strip().lower()
            if not name or name == "none":
                continue
            member = cls.__members__.get(name.upper())
            if member is None or member is cls.NONE:
                known = ", ".join(m.lower() for m in cls.__members__ if m != "NONE")
                raise InvalidInputError(f"unknown ablation {name!r} (known: {known})")
            flags |= member
        return cls.validate(flags)

    @classmethod
    def from_mask(cls, mask: int) -> "Ablation":
        known = sum(m.value for m in cls.__members__.values())
        if mask & ~known:
            raise InvalidInputError(f"ablation bitmask {mask:#x} has unknown bits")
        return cls.validate(cls(mask))

    @classmethod
    def validate(cls, flags: "Ablation") -> "Ablation":
        exclusive = [
            (cls.BASE_ONLY, cls.DETAIL_ONLY),
            (cls.L2_ONLY, cls.SSIM_ONLY),
            (cls.FILTER_DECOMP, cls.OPTIM_DECOMP),
        ]
        for a, b in exclusive:
            if flags & a and flags & b:
                raise InvalidInputError(f"ablations {a.label} and {b.label} are mutually exclusive")
        if flags & (cls.FILTER_DECOMP | cls.OPTIM_DECOMP) and flags & (cls.PLAIN_CONV | cls.NO_INIT):
            raise InvalidInputError("classical decomposition ablations replace the encoders; "
                                    "plain_conv/no_init do not apply")
        return flags

    @property
    def label(self) -> str:
        return "+".join(self.names) or "none"

    @property
    def names(self) -> List[str]:
        return [m.lower() for m, v in type(self).__members__.items() if v and self & v]

    @property
    def classical(self) -> bool:
        return bool(self & (Ablation.FILTER_DECOMP | Ablation.OPTIM_DECOMP))


@dataclass(frozen=True)
class NetworkConfig:
    layers: int = DEFAULT_LAYERS
    channels: int = DEFAULT_CHANNELS
    ablation: Ablation = Ablation.NONE

    def __post_init__(self):
        if self.layers < 0 or self.channels < 1:
            raise InvalidInputError(
                f"need layers >= 0 and channels >= 1, got layers={self.layers}, channels={self.channels}")


@dataclass
class LayerParams:
    """One BCL or DCL step. Every scalar is stored as a shape-(1,) array."""

    kernel1: np.ndarray
    eta: np.ndarray
    theta: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    prelu_slope: np.ndarray

    @property
    def kernel2(self) -> np.ndarray:
        return tie_rot180(self.kernel1)


@dataclass
class DecoderParams:
    kernel: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray


RUNNING_FIELDS = ("bn_running_mean", "bn_running_var")
STEP_FIELDS = ("eta", "theta")


@dataclass
class NetworkParams:
    config: NetworkConfig
    base_layers: List[LayerParams] = field(default_factory=list)
    detail_layers: List[LayerParams] = field(default_factory=list)
    decoder: Optional[DecoderParams] = None

    def _groups(self):
        for i, layer in enumerate(self.base_layers):
            yield f"base.{i}", layer
        for i, layer in enumerate(self.detail_layers):
            yield f"detail.{i}", layer
        if self.decoder is not None:
            yield "decoder", self.decoder

    def named_tensors(self) -> Dict[str, np.ndarray]:
        """Every stored array (learnables and running statistics) in a fixed order."""
        out: Dict[str, np.ndarray] = {}
        for prefix, group in self._groups():
            for f in fields(group):
                out[f"{prefix}.{f.name}"] = getattr(group, f.name)
        return out

    def learnable_names(self) -> List[str]:
        plain = bool(self.config.ablation & Ablation.PLAIN_CONV)
        names = []
        for name in self.named_tensors():
            attr = name.rsplit(".", 1)[1]
            if attr in RUNNING_FIELDS:
                continue
            if plain and attr in STEP_FIELDS:
                continue
            names.append(name)
        return names

    def learnables(self) -> Dict[str, np.ndarray]:
        tensors = self.named_tensors()
        return {name: tensors[name] for name in self.learnable_names()}

    def parameter_count(self) -> int:
        tensors = self.named_tensors()
        return int(sum(tensors[name].size for name in self.learnable_names()))

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        prefix, attr = name.rsplit(".", 1)
        groups = dict(self._groups())
        if prefix not in groups or attr not in {f.name for f in fields(groups[prefix])}:
            raise KeyError(name)
        current = getattr(groups[prefix], attr)
        value = np.asarray(value)
        if value.shape != current.shape:
            raise InvalidInputError(f"{name}: expected shape {current.shape}, got {value.shape}")
        setattr(groups[prefix], attr, value.astype(current.dtype, copy=False))

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams.from_named_tensors(
            self.config, {k: v.astype(dtype) for k, v in self.named_tensors().items()})

    def copy(self) -> "NetworkParams":
        return NetworkParams.from_named_tensors(
            self.config, {k: v.copy() for k, v in self.named_tensors().items()})

    @classmethod
    def from_named_tensors(cls, config: NetworkConfig, tensors: Dict[str, np.ndarray]) -> "NetworkParams":
        """Rebuild parameters from a name -> array mapping; names must match the config exactly."""
        expected = _expected_names(config)
        missing = [n for n in expected if n not in tensors]
        extra = [n for n in tensors if n not in expected]
        if missing or extra:
            raise InvalidInputError(f"tensor names do not match the network config "
                                    f"(missing={missing[:3]}, unexpected={extra[:3]})")

        def layer(prefix):
            return LayerParams(**{f.name: tensors[f"{prefix}.{f.name}"] for f in fields(LayerParams)})

        n = 0 if config.ablation.classical else config.layers
        return cls(
            config=config,
            base_layers=[layer(f"base.{i}") for i in range(n)],
            detail_layers=[layer(f"detail.{i}") for i in range(n)],
            decoder=DecoderParams(**{f.name: tensors[f"decoder.{f.name}"] for f in fields(DecoderParams)}),
        )


def _expected_names(config: NetworkConfig) -> List[str]:
    n = 0 if config.ablation.classical else config.layers
    names = []
    for encoder in ("base", "detail"):
        for i in range(n):
            names += [f"{encoder}.{i}.{f.name}" for f in fields(LayerParams)]
    names += [f"decoder.{f.name}" for f in fields(DecoderParams)]
    return names


def parameter_count(params: NetworkParams) -> int:
    return params.parameter_count()


def _kernel_std(in_channels: int) -> float:
    return math.sqrt(2.0 / (9.0 * in_channels))


def init_network(layers: int = DEFAULT_LAYERS, channels: int = DEFAULT_CHANNELS, seed: int = 0,
                 ablation: Ablation = Ablation.NONE, dtype=np.float32) -> NetworkParams:
    """
    Build a freshly initialized network.

    Args:
        layers: Steps per encoder (N).
        channels: Width of the hidden convolution (C).
        seed: Seed for ``numpy.random.default_rng``; equal seeds give identical parameters.
        ablation: Variant flags; classical-decomposition variants get no encoder layers.
        dtype: Storage dtype of every tensor.

    Returns:
        NetworkParams with eta ~ N(0.1, 0.03^2), theta 1e-3 (base) / 1 (detail),
        He-style kernels, identity batch norm and PReLU slope 0.25.
    """
    config = NetworkConfig(layers=layers, channels=channels, ablation=Ablation.validate(Ablation(ablation)))
    rng = np.random.default_rng(seed)

    def scalar(v):
        return np.full(1, v, dtype=dtype)

    def make_layer(theta):
        kernel = rng.normal(0.0, _kernel_std(1), size=(channels, 1, 3, 3)).astype(dtype)
        eta = rng.normal(ETA_MEAN, ETA_STD, size=1).astype(dtype)
        return LayerParams(kernel1=kernel, eta=eta, theta=scalar(theta),
                           bn_scale=scalar(1.0), bn_shift=scalar(0.0),
                           bn_running_mean=scalar(0.0), bn_running_var=scalar(1.0),
                           prelu_slope=scalar(PRELU_INIT))

    n = 0 if config.ablation.classical else layers
    base = [make_layer(THETA_BASE) for _ in range(n)]
    detail = [make_layer(THETA_DETAIL) for _ in range(n)]
    decoder = DecoderParams(
        kernel=rng.normal(0.0, _kernel_std(1), size=(1, 1, 3, 3)).astype(dtype),
        bn_scale=scalar(1.0), bn_shift=scalar(0.0),
        bn_running_mean=scalar(0.0), bn_running_var=scalar(1.0),
    )
    params = NetworkParams(config=config, base_layers=base, detail_layers=detail, decoder=decoder)
    logger.debug(f"init_network: N={layers} C={channels} ablation={config.ablation.names} "
                 f"learnables={params.parameter_count()}")
    return params


# --------------------------------------------------------------------------
# One unrolled step
# --------------------------------------------------------------------------

def _check_pair(s_in, x, what: str):
    s_in = as_tensor4(s_in, what)
    x = as_tensor4(x, "X")
    if s_in.shape != x.shape:
        raise InvalidInputError(f"{what} shape {s_in.shape} does not match X shape {x.shape}")
    if s_in.shape[1] != 1:
        raise InvalidInputError(f"{what} must have 1 channel, got {s_in.shape[1]}")
    return s_in, x


def layer_forward(s_in, x, p: LayerParams, mode: str = "eval", plain: bool = False):
    """
    One BCL/DCL step.

    Returns:
        ``(out, (running_mean, running_var), cache)``; the running statistics
        are the batch-norm update to commit after a training step.
    """
    s_in, x = _check_pair(s_in, x, "step input")
    pad1, pad1_cache = reflect_pad_forward(s_in, 1)
    hidden, conv1_cache = conv2d_forward(pad1, p.kernel1)
    pad2, pad2_cache = reflect_pad_forward(hidden, 1)
    g, conv2_cache = conv2d_forward(pad2, p.kernel2)
    cache = {"pad1": pad1_cache, "conv1": conv1_cache, "pad2": pad2_cache, "conv2": conv2_cache,
             "plain": plain}
    if plain:
        raw = g
    else:
        resid = x - s_in
        inner = g - p.theta * resid
        raw = s_in - p.eta * inner
        cache.update(resid=resid, inner=inner, eta=p.eta, theta=p.theta)
    normed, running, bn_cache = batch_norm_forward(
        raw, p.bn_scale, p.bn_shift, p.bn_running_mean, p.bn_running_var, mode=mode)
    out, prelu_cache = prelu_forward(normed, p.prelu_slope)
    cache.update(bn=bn_cache, prelu=prelu_cache)
    return out, running, cache


def layer_backward(dout, cache) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Returns ``(d_stream_in, d_x, grads)`` with grads keyed by LayerParams field name."""
    dnormed, dslope = prelu_backward(dout, cache["prelu"])
    draw, dscale, dshift = batch_norm_backward(dnormed, cache["bn"])
    grads = {"bn_scale": dscale, "bn_shift": dshift, "prelu_slope": dslope}
    if cache["plain"]:
        dg = draw
        ds_in = np.zeros_like(draw)
        dx = np.zeros_like(draw)
    else:
        eta, theta = cache["eta"], cache["theta"]
        dg = -eta * draw
        ds_in = (1.0 - eta * theta) * draw
        dx = eta * theta * draw
        grads["eta"] = np.sum(-draw * cache["inner"]).reshape(1)
        grads["theta"] = np.sum(draw * eta * cache["resid"]).reshape(1)
    dpad2, dk2 = conv2d_backward(dg, cache["conv2"])
    dhidden = reflect_pad_backward(dpad2, cache["pad2"])
    dpad1, dk1 = conv2d_backward(dhidden, cache["conv1"])
    ds_in = ds_in + reflect_pad_backward(dpad1, cache["pad1"])
    grads["kernel1"] = dk1 + tie_rot180(dk2)
    return ds_in, dx, grads


def bcl_step(b_in, x, p: LayerParams, mode: str = "eval") -> np.ndarray:
    """Base-encoder step: ``PReLU(BN(B - eta * (conv2(conv1(B)) - theta * (X - B))))``."""
    return layer_forward(b_in, x, p, mode)[0]


def dcl_step(d_in, x, p: LayerParams, mode: str = "eval") -> np.ndarray:
    """Detail-encoder step; same arithmetic as ``bcl_step`` with the detail parameters."""
    return layer_forward(d_in, x, p, mode)[0]


# --------------------------------------------------------------------------
# Encoders, decoder and the full pass
# --------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """What one recorded forward pass leaves behind for ``backward``."""

    base_tape: GradTape = field(default_factory=GradTape)
    detail_tape: GradTape = field(default_factory=GradTape)
    decoder_tape: GradTape = field(default_factory=GradTape)
    running: Dict[str, np.ndarray] = field(default_factory=dict)
    uses_base: bool = True
    uses_detail: bool = True


def _filter4(kernel: np.ndarray, dtype) -> np.ndarray:
    return kernel.reshape(1, 1, 3, 3).astype(dtype)


def _init_map(x, kernel, tape: Optional[GradTape], op_id: str):
    padded, pad_cache = reflect_pad_forward(x, 1)
    out, conv_cache = conv2d_forward(padded, _filter4(kernel, x.dtype))
    if tape is not None:
        def backward(grad, cache):
            dpadded, _ = conv2d_backward(grad, cache["conv"])
            return reflect_pad_backward(dpadded, cache["pad"]), {}
        tape.record(op_id, backward, {"pad": pad_cache, "conv": conv_cache})
    return out


def _record_layer(tape: GradTape, prefix: str, cache):
    def backward(grad, c):
        ds_in, dx, grads = layer_backward(grad, c)
        side = {f"{prefix}.{k}": v for k, v in grads.items()}
        side["x"] = dx
        return ds_in, side
    tape.record(prefix, backward, cache)


def _run_encoder(x, start, layers: List[LayerParams], encoder: str, mode: str, plain: bool,
                 trace: Optional[ForwardTrace], tape: Optional[GradTape]):
    s = start
    for i, p in enumerate(layers):
        prefix = f"{encoder}.{i}"
        s, (new_mean, new_var), cache = layer_forward(s, x, p, mode, plain)
        if tape is not None:
            _record_layer(tape, prefix, cache)
        if trace is not None and mode == "train":
            trace.running[f"{prefix}.bn_running_mean"] = new_mean
            trace.running[f"{prefix}.bn_running_var"] = new_var
    return s


def _classical_maps(x, ablation: Ablation):
    base = np.empty_like(x)
    detail = np.empty_like(x)
    for n in range(x.shape[0]):
        img = x[n, 0].astype(np.float64)
        if ablation & Ablation.FILTER_DECOMP:
            res = filter_decompose(img)
        else:
            res = optim_decompose(img)
        base[n, 0] = res.base
        detail[n, 0] = res.detail
    return base, detail


def _resolve(params: NetworkParams, ablation: Optional[Ablation]) -> Ablation:
    return params.config.ablation if ablation is None else Ablation.validate(Ablation(ablation))


def encode(x, params: NetworkParams, mode: str = "eval", ablation: Optional[Ablation] = None,
           trace: Optional[ForwardTrace] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Run both encoders on ``x`` of shape (n, 1, H, W).

    Returns:
        ``(B_N, D_N)``, each shaped like ``x``. With ``trace`` the steps are
        recorded for ``backward`` and the batch-norm updates collected.
    """
    x = as_tensor4(x, "encoder input")
    if x.shape[1] != 1:
        raise InvalidInputError(f"encoder input must have 1 channel, got {x.shape[1]}")
    flags = _resolve(params, ablation)
    if flags.classical:
        return _classical_maps(x, flags)

    plain = bool(flags & Ablation.PLAIN_CONV)
    want_base = not flags & Ablation.DETAIL_ONLY
    want_detail = not flags & Ablation.BASE_ONLY
    if trace is not None:
        trace.uses_base, trace.uses_detail = want_base, want_detail
    base_tape = trace.base_tape if trace is not None else None
    detail_tape = trace.detail_tape if trace is not None else None

    if flags & Ablation.NO_INIT:
        b0, d0 = x, x
    else:
        b0 = _init_map(x, FILTERS.blur3, base_tape, "base.init")
        d0 = _init_map(x, FILTERS.laplacian4, detail_tape, "detail.init")

    b = _run_encoder(x, b0, params.base_layers, "base", mode, plain, trace, base_tape) if want_base else b0
    d = _run_encoder(x, d0, params.detail_layers, "detail", mode, plain, trace, detail_tape) if want_detail else d0
    return b, d


def decoder_input(b, d, ablation: Ablation) -> np.ndarray:
    if ablation & Ablation.BASE_ONLY:
        return b
    if ablation & Ablation.DETAIL_ONLY:
        return d
    return b + d


def reconstruct(b, d, params: NetworkParams, mode: str = "eval", ablation: Optional[Ablation] = None,
                trace: Optional[ForwardTrace] = None) -> np.ndarray:
    """Decode ``sigmoid(BN(conv3x3(reflect_pad(B + D))))`` into an image in (0, 1)."""
    b = as_tensor4(b, "base map")
    d = as_tensor4(d, "detail map")
    if b.shape != d.shape:
        raise InvalidInputError(f"base map {b.shape} and detail map {d.shape} differ")
    flags = _resolve(params, ablation)
    dec = params.decoder
    padded, pad_cache = reflect_pad_forward(decoder_input(b, d, flags), 1)
    conv, conv_cache = conv2d_forward(padded, dec.kernel)
    normed, (new_mean, new_var), bn_cache = batch_norm_forward(
        conv, dec.bn_scale, dec.bn_shift, dec.bn_running_mean, dec.bn_running_var, mode=mode)
    out, sig_cache = sigmoid_forward(normed)
    if trace is not None:
        def backward(grad, c):
            dnormed = sigmoid_backward(grad, c["sigmoid"])
            dconv, dscale, dshift = batch_norm_backward(dnormed, c["bn"])
            dpadded, dk = conv2d_backward(dconv, c["conv"])
            d_in = reflect_pad_backward(dpadded, c["pad"])
            return d_in, {"decoder.kernel": dk, "decoder.bn_scale": dscale, "decoder.bn_shift": dshift}
        trace.decoder_tape.record("decoder", backward, {
            "pad": pad_cache, "conv": conv_cache, "bn": bn_cache, "sigmoid": sig_cache})
        if mode == "train":
            trace.running["decoder.bn_running_mean"] = new_mean
            trace.running["decoder.bn_running_var"] = new_var
    return out


def forward(x, params: NetworkParams, mode: str = "train",
            record: bool = True) -> Tuple[np.ndarray, Optional[ForwardTrace]]:
    """Encode and decode ``x``; returns ``(reconstruction, trace)``."""
    trace = ForwardTrace() if record else None
    b, d = encode(x, params, mode, trace=trace)
    return reconstruct(b, d, params, mode, trace=trace), trace


def backward(dout, trace: ForwardTrace, params: NetworkParams) -> Dict[str, np.ndarray]:
    """
    Gradients of a scalar loss with respect to every learnable.

    ``dout`` is the loss gradient at the reconstruction. Learnables the pass
    never touched (an unused encoder, eta/theta under ``plain_conv``) get zeros.
    """
    d_in, dec_grads = trace.decoder_tape.backward(dout)
    parts = [dec_grads]
    if trace.uses_base:
        parts.append(trace.base_tape.backward(d_in)[1])
    if trace.uses_detail:
        parts.append(trace.detail_tape.backward(d_in)[1])
    merged = merge_grads(*parts)
    merged.pop("x", None)
    grads = {}
    for name, value in params.learnables().items():
        g = merged.get(name)
        grads[name] = np.zeros_like(value) if g is None else np.asarray(g).reshape(value.shape)
    return grads


def commit_running_stats(params: NetworkParams, trace: ForwardTrace) -> None:
    for name, value in trace.running.items():
        params.set_tensor(name, value)
