"""Tape-based reverse-mode differentiation.

A :class:`Tape` records primitive applications as they run (define-by-run).
Values live in the tape's value table and are addressed by integer ids.
:func:`backward` walks the records in reverse order and accumulates
chain-rule gradients into every leaf that asked for them, including
:class:`Param` entries of a :class:`ParamStore`.

Primitives are registered in :data:`PRIMITIVES`; each one is a pair of a
forward function ``f(*arrays, **attrs) -> (out, saved)`` and a backward
function ``b(grad, arrays, out, saved, needs, **attrs) -> tuple``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import ContractError, DimensionError, GraphError


# ---------------------------------------------------------------------------
# Parameters

@dataclass(eq=False)
class Param:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape} "
                                 f"for parameter {self.name!r}")

    @property
    def size(self):
        return self.value.size


class ParamStore:
    """Ordered, uniquely named collection of parameters and buffers.

    Buffers (e.g. batch-norm running statistics) are stored as
    non-trainable entries; they are serialized with the model but never
    counted or updated by the optimizer.
    """

    def __init__(self, entries=()):
        self._entries = {}
        for p in entries:
            self._insert(p)

    def _insert(self, param):
        if param.name in self._entries:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._entries[param.name] = param
        return param

    def add(self, name, value, trainable=True):
        return self._insert(Param(name, value, trainable))

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def trainable(self):
        return [p for p in self if p.trainable]

    def num_trainable(self):
        return sum(p.size for p in self if p.trainable)

    def zero_grad(self):
        for p in self:
            p.grad.fill(0)

    def copy(self):
        return ParamStore(Param(p.name, p.value.copy(), p.trainable, p.grad.copy()) for p in self)

    def astype(self, dtype):
        return ParamStore(Param(p.name, p.value.astype(dtype), p.trainable) for p in self)


# ---------------------------------------------------------------------------
# Primitive registry

@dataclass(frozen=True)
class Primitive:
    name: str
    forward: object
    backward: object


PRIMITIVES = {}


def primitive(name):
    def register(pair):
        fwd, bwd = pair()
        PRIMITIVES[name] = Primitive(name, fwd, bwd)
        return pair
    return register


@primitive("add")
def _add():
    def fwd(a, b):
        return tensor.elementwise(a, b, "add"), None

    def bwd(g, inputs, out, saved, needs):
        return g, g
    return fwd, bwd


@primitive("sub")
def _sub():
    def fwd(a, b):
        return tensor.elementwise(a, b, "sub"), None

    def bwd(g, inputs, out, saved, needs):
        return g, (-g if needs[1] else None)
    return fwd, bwd


@primitive("mul")
def _mul():
    def fwd(a, b):
        return tensor.hadamard(a, b), None

    def bwd(g, inputs, out, saved, needs):
        a, b = inputs
        return (g * b if needs[0] else None), (g * a if needs[1] else None)
    return fwd, bwd


@primitive("scale")
def _scale():
    def fwd(a, factor):
        return tensor.elementwise(a, factor, "scale"), None

    def bwd(g, inputs, out, saved, needs, factor):
        return (g * np.asarray(factor, dtype=g.dtype),)
    return fwd, bwd


@primitive("conv2d")
def _conv2d():
    def fwd(x, w, b=None, pad=0):
        return tensor.conv2d(x, w, b, pad), None

    def bwd(g, inputs, out, saved, needs, pad=0):
        x, w = inputs[:2]
        gx = tensor.conv2d_grad_input(g, w, pad, x.shape[2:]) if needs[0] else None
        gw = tensor.conv2d_grad_kernel(x, g, w.shape, pad) if needs[1] else None
        if len(inputs) == 3:
            gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
            return gx, gw, gb
        return gx, gw
    return fwd, bwd


@primitive("depthwise_conv2d")
def _depthwise():
    def fwd(x, k, pad=0, method="auto"):
        return tensor.depthwise_forward(x, k, pad, method)

    def bwd(g, inputs, out, saved, needs, pad=0, method="auto"):
        x, k = inputs
        return tensor.depthwise_backward(g, x, k, pad, saved, needs[0], needs[1])
    return fwd, bwd


@primitive("relu")
def _relu():
    def fwd(x):
        tensor._check4(x)
        return np.maximum(x, 0), None

    def bwd(g, inputs, out, saved, needs):
        # Subgradient 0 at the kink.
        return (g * (inputs[0] > 0),)
    return fwd, bwd


@primitive("gaussian")
def _gaussian():
    def fwd(d):
        tensor._check4(d)
        return np.exp(-np.square(d)), None

    def bwd(g, inputs, out, saved, needs):
        return (-2 * inputs[0] * out * g,)
    return fwd, bwd


def _bn_view(v):
    return np.asarray(v).reshape(1, -1, 1, 1)


def _bn_check(x, gamma, beta):
    tensor._check4(x)
    c = x.shape[1]
    if np.shape(gamma) != (c,) or np.shape(beta) != (c,):
        raise DimensionError(f"batch-norm parameters {np.shape(gamma)}/{np.shape(beta)} "
                             f"do not match input channel axis ({c})")


@primitive("batchnorm_train")
def _bn_train():
    def fwd(x, gamma, beta, eps=1e-5):
        _bn_check(x, gamma, beta)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ContractError("train-mode batch norm needs at least two values per channel")
        mean = x.mean(axis=(0, 2, 3))
        centered = x - _bn_view(mean)
        var = np.square(centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * _bn_view(inv_std)
        out = xhat * _bn_view(gamma) + _bn_view(beta)
        return out, {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var}

    def bwd(g, inputs, out, saved, needs, eps=1e-5):
        _, gamma, _ = inputs
        xhat, inv_std = saved["xhat"], saved["inv_std"]
        m = g.shape[0] * g.shape[2] * g.shape[3]
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if needs[0]:
            gx = g * m
            gx -= _bn_view(gbeta)
            gx -= xhat * _bn_view(ggamma)
            gx *= _bn_view(gamma * inv_std / m)
        return gx, ggamma, gbeta
    return fwd, bwd


@primitive("batchnorm_eval")
def _bn_eval():
    def fwd(x, gamma, beta, mean=None, var=None, eps=1e-5):
        _bn_check(x, gamma, beta)
        inv_std = 1.0 / np.sqrt(np.asarray(var) + eps)
        xhat = (x - _bn_view(mean)) * _bn_view(inv_std).astype(x.dtype, copy=False)
        return xhat * _bn_view(gamma) + _bn_view(beta), {"xhat": xhat, "inv_std": inv_std}

    def bwd(g, inputs, out, saved, needs, mean=None, var=None, eps=1e-5):
        gamma = inputs[1]
        gx = g * _bn_view(gamma * saved["inv_std"]).astype(g.dtype) if needs[0] else None
        return gx, (g * saved["xhat"]).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return fwd, bwd


@primitive("mse")
def _mse():
    def fwd(pred, target):
        if pred.shape != target.shape:
            raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
        diff = pred - target
        return np.asarray(np.mean(np.square(diff), dtype=np.float64)), diff

    def bwd(g, inputs, out, diff, needs):
        gp = diff * np.asarray(2.0 * g / diff.size, dtype=diff.dtype)
        return gp, (-gp if needs[1] else None)
    return fwd, bwd


@primitive("sum")
def _sum():
    def fwd(a):
        return np.asarray(np.sum(a, dtype=np.float64)), None

    def bwd(g, inputs, out, saved, needs):
        return (np.full_like(inputs[0], g),)
    return fwd, bwd


# ---------------------------------------------------------------------------
# Tape

@dataclass
class Record:
    op: str
    inputs: tuple
    output: int
    attrs: dict = field(default_factory=dict)
    saved: object = None


class Tape:
    """Single-writer record of a forward computation."""

    def __init__(self):
        self.values = []
        self.records = []
        self._requires = []
        self._params = {}

    def _push(self, value, requires):
        self.values.append(value)
        self._requires.append(requires)
        return len(self.values) - 1

    def constant(self, array):
        """Add a leaf that never receives a gradient."""
        return self._push(np.asarray(array), False)

    def variable(self, array):
        """Add a leaf whose gradient :func:`backward` reports."""
        return self._push(np.asarray(array), True)

    def param(self, p):
        """Add a :class:`Param` leaf; its ``grad`` accumulates during backward."""
        vid = self._push(p.value, p.trainable)
        if p.trainable:
            self._params[vid] = p
        return vid

    def __getitem__(self, vid):
        self._check_id(vid)
        return self.values[vid]

    def _check_id(self, vid):
        if not isinstance(vid, (int, np.integer)) or not 0 <= vid < len(self.values):
            raise GraphError(f"value id {vid!r} is not on this tape")

    def requires_grad(self, vid):
        return self._requires[vid]

    def record(self, op, inputs, **attrs):
        """Apply primitive ``op`` to tape values ``inputs`` and append the result."""
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise GraphError(f"unknown primitive {op!r}") from None
        inputs = tuple(inputs)
        for vid in inputs:
            self._check_id(vid)
        out, saved = prim.forward(*(self.values[i] for i in inputs), **attrs)
        vid = self._push(out, any(self._requires[i] for i in inputs))
        self.records.append(Record(op, inputs, vid, attrs, saved))
        return vid

    def saved(self, vid):
        """Intermediates saved by the record that produced ``vid``."""
        for rec in reversed(self.records):
            if rec.output == vid:
                return rec.saved
        raise GraphError(f"value id {vid} is a leaf")

    def replay(self):
        """Recompute every record from the leaves; returns ``{id: value}``."""
        values = dict(enumerate(self.values))
        for rec in self.records:
            out, _ = PRIMITIVES[rec.op].forward(*(values[i] for i in rec.inputs), **rec.attrs)
            values[rec.output] = out
        return {rec.output: values[rec.output] for rec in self.records}


def backward(tape, root, seed=None):
    """Propagate ``seed`` (default 1 for scalar roots) from ``root`` to the leaves.

    Returns a dict mapping each gradient-requiring leaf id to its gradient.
    Trainable :class:`Param` leaves also get the gradient added to ``grad``.
    """
    tape._check_id(root)
    root_val = tape.values[root]
    if seed is None:
        if root_val.ndim != 0:
            raise ContractError("seed is required for non-scalar roots")
        seed = np.ones_like(root_val)
    seed = np.asarray(seed)
    if seed.shape != root_val.shape:
        raise DimensionError(f"seed shape {seed.shape} does not match root shape {root_val.shape}")

    grads = {root: seed}
    for rec in reversed(tape.records):
        if rec.output > root:
            continue
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        needs = tuple(tape._requires[i] for i in rec.inputs)
        if not any(needs):
            continue
        inputs = [tape.values[i] for i in rec.inputs]
        in_grads = PRIMITIVES[rec.op].backward(g, inputs, tape.values[rec.output],
                                               rec.saved, needs, **rec.attrs)
        for vid, need, gi in zip(rec.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            if vid in grads:
                grads[vid] = grads[vid] + gi
            else:
                grads[vid] = gi

    leaf_grads = {vid: g for vid, g in grads.items() if tape._requires[vid]}
    for vid, g in leaf_grads.items():
        p = tape._params.get(vid)
        if p is not None:
            p.grad += g.astype(p.grad.dtype, copy=False)
    return leaf_grads


def grad_check(f, point, epsilon=1e-5, samples=None, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    ``f(tape, x_id)`` must record a scalar-valued computation on ``tape`` and
    return its id.  ``samples`` limits the check to that many randomly chosen
    coordinates; by default every coordinate is perturbed.  The error for a
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    xid = tape.variable(point)
    root = f(tape, xid)
    if np.ndim(tape[root]) != 0:
        raise ContractError(f"grad_check needs a scalar function, got shape {np.shape(tape[root])}")
    analytic = backward(tape, root).get(xid, np.zeros_like(point)).ravel()

    def value(x):
        t = Tape()
        return float(t[f(t, t.variable(x))])

    coords = np.arange(point.size)
    if samples is not None and samples < point.size:
        coords = np.sort(np.random.default_rng(seed).choice(point.size, samples, replace=False))
    worst = 0.0
    flat = point.ravel()
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        up = value(point)
        flat[i] = orig - epsilon
        down = value(point)
        flat[i] = orig
        numeric = (up - down) / (2 * epsilon)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
