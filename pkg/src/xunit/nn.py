"""Network layers: convolution, batch normalization, ReLU, Gaussian gate, xUnit.

Layers come in two flavours.  The tape-level functions (``conv``,
``batchnorm_op``, ``xunit``) record onto an :class:`~xunit.autodiff.Tape`
and are what the model builders use.  The array-level functions
(``relu``, ``batchnorm``, ``gaussian_gate``, ``xunit_forward``,
``conv_layer``) take and return plain arrays.

Any activation ``f`` with ``f(0) = 0`` can be written as ``z * g`` with a
gating map ``g``; for ReLU that map is the binary threshold of ``z``.  The
xUnit replaces it by a spatial, learnable map built by a stage pipeline over
{BN, RL, CD, GS}.  The default pipeline BN -> RL -> CD -> BN -> GS keeps
``g`` in (0, 1].
"""

from dataclasses import dataclass

import numpy as np

from . import tensor
from .autodiff import PRIMITIVES, ParamStore, Tape
from .errors import DimensionError, SpecError
from .rng import PortableRNG

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STAGES = ("BN", "RL", "CD", "GS")
DEFAULT_STAGES = ("BN", "RL", "CD", "BN", "GS")


@dataclass(frozen=True)
class XUnitSpec:
    channels: int
    kernel: int = 9
    stages: tuple = DEFAULT_STAGES

    def __post_init__(self):
        object.__setattr__(self, "stages", parse_stages(self.stages))
        if self.channels < 1:
            raise SpecError("xUnit needs at least one channel")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SpecError(f"xUnit kernel must be odd and positive, got {self.kernel}")

    @property
    def num_bn(self):
        return self.stages.count("BN")


def parse_stages(stages):
    """Normalize a stage list given as a sequence or a ``BN+RL+CD`` string."""
    if isinstance(stages, str):
        stages = [s for s in stages.replace(",", "+").split("+") if s]
    stages = tuple(s.strip().upper() for s in stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise SpecError(f"unknown xUnit stage(s) {unknown}; expected any of {STAGES}")
    if stages.count("CD") != 1:
        raise SpecError(f"xUnit stage list must contain CD exactly once, got {'+'.join(stages)}")
    return stages


def xunit_param_count(channels, kernel, stages=DEFAULT_STAGES):
    """Trainable scalars in one xUnit: ``kernel**2 * channels`` plus ``2 * channels`` per BN."""
    spec = XUnitSpec(channels, kernel, stages)
    return kernel * kernel * channels + 2 * channels * spec.num_bn


# ---------------------------------------------------------------------------
# Array-level layers

def relu(z):
    return np.maximum(z, 0)


def binary_gate(z):
    """Gate that reproduces ReLU as ``z * g``: 1 where ``z > 0``, else 0."""
    return (z > 0).astype(np.result_type(z, np.float32))


def gaussian_gate(d):
    return np.exp(-np.square(d))


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "train"

    @classmethod
    def fresh(cls, channels, dtype=np.float64, **kw):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.running_mean *= 1 - m
        self.running_mean += m * batch_mean
        self.running_var *= 1 - m
        self.running_var += m * batch_var


def batchnorm(x, state):
    """Normalize ``x`` per channel; train mode also updates the running statistics."""
    if x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(f"input has {x.shape[1]} channels, batch norm expects "
                             f"{state.gamma.shape[0]}")
    if state.mode == "train":
        out, saved = PRIMITIVES["batchnorm_train"].forward(x, state.gamma, state.beta, eps=state.eps)
        state.update(saved["mean"], saved["var"])
        return out
    out, _ = PRIMITIVES["batchnorm_eval"].forward(
        x, state.gamma, state.beta, mean=state.running_mean, var=state.running_var, eps=state.eps)
    return out


def conv_layer(x, weight, bias=None):
    """Same-padded convolution."""
    return tensor.conv2d(x, weight, bias, pad=(weight.shape[2] - 1) // 2)


def xunit_forward(z, params, spec, prefix="", train=False, return_gate=False):
    """Apply an xUnit to ``z`` using parameters ``params[prefix + ...]``."""
    tape = Tape()
    out, gate = xunit(tape, tape.constant(z), params, spec, prefix, train)
    if return_gate:
        return tape[out], tape[gate]
    return tape[out]


# ---------------------------------------------------------------------------
# Parameter allocation

def init_conv(params, prefix, in_ch, out_ch, kernel, bias, rng, dtype=np.float32):
    std = np.sqrt(2.0 / (kernel * kernel * in_ch))
    params.add(prefix + "weight", (rng.normal((out_ch, in_ch, kernel, kernel)) * std).astype(dtype))
    if bias:
        params.add(prefix + "bias", np.zeros(out_ch, dtype))


def init_bn(params, prefix, channels, dtype=np.float32):
    params.add(prefix + "gamma", np.ones(channels, dtype))
    params.add(prefix + "beta", np.zeros(channels, dtype))
    params.add(prefix + "running_mean", np.zeros(channels, dtype), trainable=False)
    params.add(prefix + "running_var", np.ones(channels, dtype), trainable=False)


def init_xunit(params, prefix, spec, rng, dtype=np.float32):
    std = np.sqrt(2.0 / (spec.kernel * spec.kernel))
    params.add(prefix + "dw", (rng.normal((spec.channels, spec.kernel, spec.kernel)) * std).astype(dtype))
    for i in range(spec.num_bn):
        init_bn(params, f"{prefix}bn{i}.", spec.channels, dtype)


def xunit_params(spec, seed=0, dtype=np.float64, prefix=""):
    """Fresh standalone parameter store for one xUnit."""
    params = ParamStore()
    init_xunit(params, prefix, spec, PortableRNG(seed), dtype)
    return params


# ---------------------------------------------------------------------------
# Tape-level layers

def conv(tape, x, params, prefix):
    w = params[prefix + "weight"]
    inputs = [x, tape.param(w)]
    if prefix + "bias" in params:
        inputs.append(tape.param(params[prefix + "bias"]))
    return tape.record("conv2d", inputs, pad=(w.value.shape[2] - 1) // 2)


def batchnorm_op(tape, x, params, prefix, train, eps=BN_EPS, momentum=BN_MOMENTUM):
    gamma, beta = params[prefix + "gamma"], params[prefix + "beta"]
    rmean, rvar = params[prefix + "running_mean"].value, params[prefix + "running_var"].value
    if tape[x].shape[1] != gamma.value.shape[0]:
        raise DimensionError(f"input has {tape[x].shape[1]} channels, batch norm {prefix!r} "
                             f"expects {gamma.value.shape[0]}")
    inputs = [x, tape.param(gamma), tape.param(beta)]
    if not train:
        return tape.record("batchnorm_eval", inputs, mean=rmean.copy(), var=rvar.copy(), eps=eps)
    out = tape.record("batchnorm_train", inputs, eps=eps)
    saved = tape.records[-1].saved
    rmean *= 1 - momentum
    rmean += momentum * saved["mean"].astype(rmean.dtype)
    rvar *= 1 - momentum
    rvar += momentum * saved["var"].astype(rvar.dtype)
    return out


def xunit(tape, z, params, spec, prefix="", train=False):
    """Record an xUnit on ``tape``; returns ``(output_id, gate_id)``."""
    if tape[z].shape[1] != spec.channels:
        raise DimensionError(f"xUnit expects {spec.channels} channels, input has {tape[z].shape[1]}")
    d = z
    bn = 0
    for stage in spec.stages:
        if stage == "BN":
            d = batchnorm_op(tape, d, params, f"{prefix}bn{bn}.", train)
            bn += 1
        elif stage == "RL":
            d = tape.record("relu", [d])
        elif stage == "CD":
            d = tape.record("depthwise_conv2d", [d, tape.param(params[prefix + "dw"])],
                            pad=(spec.kernel - 1) // 2)
        else:
            d = tape.record("gaussian", [d])
    return tape.record("mul", [z, d]), d
