"""Declarative network descriptions, builders, parameter counting and model files.

A :class:`ModelSpec` is an immutable chain of :class:`LayerSpec` entries.
Parameters are allocated from a ModelSpec by :func:`init_params` and named
``"<layer index>.<field>"`` (xUnit internals use ``"<i>.dw"`` and
``"<i>.bn<k>.<field>"``), so a spec and a :class:`ParamStore` round-trip
through a model file without any other metadata.

Model file layout (little-endian)::

    b"XUMD" | u16 version (=1) | u32 manifest length | manifest (UTF-8 JSON)
    | float32 blobs in manifest order | u32 CRC-32 of everything before it
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autodiff import Param, ParamStore, Tape
from .errors import DimensionError, FormatError, SpecError
from .rng import PortableRNG

LAYER_KINDS = ("conv", "bn", "relu", "xunit")
MAGIC = b"XUMD"
VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int
    in_channels: int = 0
    kernel: int = 0
    bias: bool = False
    stages: tuple = ()

    @classmethod
    def conv(cls, in_channels, out_channels, kernel, bias=True):
        return cls("conv", out_channels, in_channels, kernel, bias)

    @classmethod
    def bn(cls, channels):
        return cls("bn", channels, channels)

    @classmethod
    def relu(cls, channels):
        return cls("relu", channels, channels)

    @classmethod
    def xunit(cls, channels, kernel=9, stages=nn.DEFAULT_STAGES):
        return cls("xunit", channels, channels, kernel, False, nn.parse_stages(stages))

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.channels < 1 or self.in_channels < 1:
            raise SpecError(f"{self.kind} layer needs positive channel counts")
        if self.kind in ("conv", "xunit") and (self.kernel < 1 or self.kernel % 2 == 0):
            raise SpecError(f"{self.kind} kernel must be odd, got {self.kernel}")
        if self.kind != "conv" and self.in_channels != self.channels:
            raise SpecError(f"{self.kind} layer cannot change the channel count")
        if self.kind == "xunit":
            object.__setattr__(self, "stages", nn.parse_stages(self.stages))

    @property
    def xunit_spec(self):
        return nn.XUnitSpec(self.channels, self.kernel, self.stages)

    def param_count(self):
        if self.kind == "conv":
            return self.kernel ** 2 * self.in_channels * self.channels + (self.channels if self.bias else 0)
        if self.kind == "bn":
            return 2 * self.channels
        if self.kind == "xunit":
            return nn.xunit_param_count(self.channels, self.kernel, self.stages)
        return 0

    def to_dict(self):
        d = {"kind": self.kind, "channels": self.channels}
        if self.kind == "conv":
            d.update(in_channels=self.in_channels, kernel=self.kernel, bias=self.bias)
        elif self.kind == "xunit":
            d.update(kernel=self.kernel, stages=list(self.stages))
        return d

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind")
        if kind == "conv":
            return cls.conv(d["in_channels"], d["channels"], d["kernel"], d["bias"])
        if kind == "bn":
            return cls.bn(d["channels"])
        if kind == "relu":
            return cls.relu(d["channels"])
        if kind == "xunit":
            return cls.xunit(d["channels"], d["kernel"], tuple(d["stages"]))
        raise SpecError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_channels: int
    layers: tuple = field(default_factory=tuple)
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        ch = self.input_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != ch:
                raise SpecError(f"layer {i} ({layer.kind}) expects {layer.in_channels} channels, "
                                f"previous layer provides {ch}")
            ch = layer.channels
        if self.residual and ch != self.input_channels:
            raise SpecError(f"residual model must output {self.input_channels} channels, not {ch}")

    @property
    def output_channels(self):
        return self.layers[-1].channels if self.layers else self.input_channels

    def to_dict(self):
        return {"name": self.name, "input_channels": self.input_channels,
                "residual": self.residual, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["input_channels"], tuple(LayerSpec.from_dict(l) for l in d["layers"]),
                   d["residual"])


# ---------------------------------------------------------------------------
# Builders

def build_convnet(depth, width=64, kernel=3, in_ch=1, name="convnet"):
    """Conv+ReLU, (depth-2) x (Conv+BN+ReLU), Conv; predicts the residual."""
    if depth < 2:
        raise SpecError("depth must be at least 2")
    layers = [LayerSpec.conv(in_ch, width, kernel, bias=True), LayerSpec.relu(width)]
    for _ in range(depth - 2):
        layers += [LayerSpec.conv(width, width, kernel, bias=False), LayerSpec.bn(width),
                   LayerSpec.relu(width)]
    layers.append(LayerSpec.conv(width, in_ch, kernel, bias=True))
    return ModelSpec(name, in_ch, tuple(layers), residual=True)


def build_xnet(depth, width=64, kernel=3, xkernel=9, in_ch=1, stages=nn.DEFAULT_STAGES, name="xnet"):
    """(depth-1) x (Conv+xUnit), Conv; predicts the residual.

    All convolutions are bias-free: the xUnit opens with batch norm, and the
    residual output of a zero-mean degradation needs no offset.
    """
    if depth < 2:
        raise SpecError("depth must be at least 2")
    layers = []
    ch = in_ch
    for _ in range(depth - 1):
        layers += [LayerSpec.conv(ch, width, kernel, bias=False), LayerSpec.xunit(width, xkernel, stages)]
        ch = width
    layers.append(LayerSpec.conv(width, in_ch, kernel, bias=False))
    return ModelSpec(name, in_ch, tuple(layers), residual=True)


def build_dncnn(in_ch=1):
    return build_convnet(17, 64, 3, in_ch, name="dncnn")


def build_xdncnn(in_ch=1):
    return build_xnet(9, 64, 3, 9, in_ch, name="xdncnn")


def build_srcnn():
    """9x9x64, 5x5x32, 5x5x1 with ReLUs, applied to bicubic-upscaled luminance."""
    layers = (LayerSpec.conv(1, 64, 9), LayerSpec.relu(64),
              LayerSpec.conv(64, 32, 5), LayerSpec.relu(32),
              LayerSpec.conv(32, 1, 5))
    return ModelSpec("srcnn", 1, layers, residual=False)


def build_xsrcnn(variant, xkernel=9):
    """SRCNN with xUnits; ``f`` shrinks the middle filters, ``c`` the first-layer width."""
    if variant == "f":
        first, middle_k = 64, 3
    elif variant == "c":
        first, middle_k = 42, 5
    else:
        raise SpecError(f"xsrcnn variant must be 'f' or 'c', got {variant!r}")
    layers = (LayerSpec.conv(1, first, 9), LayerSpec.xunit(first, xkernel),
              LayerSpec.conv(first, 32, middle_k), LayerSpec.xunit(32, xkernel),
              LayerSpec.conv(32, 1, 5))
    return ModelSpec(f"xsrcnn{variant}", 1, layers, residual=False)


ARCHS = ("convnet", "xnet", "dncnn", "xdncnn", "srcnn", "xsrcnnf", "xsrcnnc")


def build(arch, depth=None, width=64, kernel=3, xkernel=9, in_ch=1, stages=nn.DEFAULT_STAGES):
    """Build any named architecture; structural arguments apply where meaningful."""
    if arch == "convnet":
        return build_convnet(depth or 17, width, kernel, in_ch)
    if arch == "xnet":
        return build_xnet(depth or 9, width, kernel, xkernel, in_ch, stages)
    if arch == "dncnn":
        return build_dncnn(in_ch)
    if arch == "xdncnn":
        return build_xdncnn(in_ch)
    if arch == "srcnn":
        return build_srcnn()
    if arch in ("xsrcnnf", "xsrcnnc"):
        return build_xsrcnn(arch[-1], xkernel)
    raise SpecError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHS)}")


def relu_twin(spec):
    """The same network with every xUnit replaced by a plain ReLU."""
    layers = tuple(LayerSpec.relu(l.channels) if l.kind == "xunit" else l for l in spec.layers)
    return ModelSpec(spec.name + "-relu", spec.input_channels, layers, spec.residual)


# ---------------------------------------------------------------------------
# Counting

def layer_param_counts(spec):
    return [l.param_count() for l in spec.layers]


def count_params(spec):
    """Trainable scalars in ``spec``; batch-norm running statistics are excluded."""
    return sum(layer_param_counts(spec))


def activation_param_count(spec):
    return sum(l.param_count() for l in spec.layers if l.kind == "xunit")


def activation_fraction(spec):
    total = count_params(spec)
    return activation_param_count(spec) / total if total else 0.0


# ---------------------------------------------------------------------------
# Parameters and forward pass

def init_params(spec, seed=0, dtype=np.float32):
    rng = PortableRNG(seed)
    params = ParamStore()
    for i, layer in enumerate(spec.layers):
        prefix = f"{i}."
        if layer.kind == "conv":
            nn.init_conv(params, prefix, layer.in_channels, layer.channels, layer.kernel, layer.bias,
                         rng.child(i), dtype)
        elif layer.kind == "bn":
            nn.init_bn(params, prefix, layer.channels, dtype)
        elif layer.kind == "xunit":
            nn.init_xunit(params, prefix, layer.xunit_spec, rng.child(i), dtype)
    return params


@dataclass
class Activation:
    """Tape ids around one activation layer: pre-activation, gate, output."""
    layer: int
    kind: str
    z: int
    gate: int
    out: int


def forward(spec, params, x, tape=None, train=False, activations=None):
    """Record the network on ``tape`` (a new one by default).

    ``x`` is an array or an id already on ``tape``.  Returns ``(tape, out_id)``.
    For residual models the output is the predicted degradation, not the
    restored image.  If ``activations`` is a list, an :class:`Activation`
    entry is appended for every ReLU/xUnit (ReLU gates have ``gate=-1``).
    """
    if tape is None:
        tape = Tape()
    h = x if isinstance(x, (int, np.integer)) else tape.constant(x)
    if tape[h].ndim != 4 or tape[h].shape[1] != spec.input_channels:
        raise DimensionError(f"{spec.name} expects (n, {spec.input_channels}, h, w) input, "
                             f"got {tape[h].shape}")
    for i, layer in enumerate(spec.layers):
        prefix = f"{i}."
        if layer.kind == "conv":
            h = nn.conv(tape, h, params, prefix)
        elif layer.kind == "bn":
            h = nn.batchnorm_op(tape, h, params, prefix, train)
        elif layer.kind == "relu":
            z, h = h, tape.record("relu", [h])
            if activations is not None:
                activations.append(Activation(i, "relu", z, -1, h))
        else:
            z = h
            h, gate = nn.xunit(tape, h, params, layer.xunit_spec, prefix, train)
            if activations is not None:
                activations.append(Activation(i, "xunit", z, gate, h))
    return tape, h


def predict(spec, params, x, train=False):
    tape, out = forward(spec, params, x, train=train)
    return tape[out]


# ---------------------------------------------------------------------------
# Serialization

def save_model(spec, params, path):
    """Write ``spec`` and ``params`` (buffers included) as a model file.

    Values are stored as 32-bit floats; 64-bit parameters are rounded.
    """
    expected = init_params(spec, dtype=np.float32)
    if params.names() != expected.names():
        raise ValueError("parameter store does not match the model spec")
    records, blobs, offset = [], [], 0
    for p, ref in zip(params, expected):
        if p.value.shape != ref.value.shape:
            raise DimensionError(f"parameter {p.name} has shape {p.value.shape}, "
                                 f"spec needs {ref.value.shape}")
        blob = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
        records.append({"name": p.name, "shape": list(p.value.shape), "offset": offset,
                        "trainable": p.trainable})
        blobs.append(blob)
        offset += len(blob)
    manifest = dict(spec.to_dict(), params=records)
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<HI", VERSION, len(payload)) + payload + b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_model(path):
    """Read a model file; returns ``(spec, params)`` with float32 values."""
    with open(path, "rb") as fh:
        data = fh.read()
    header = len(MAGIC) + 6
    if len(data) < header + 4:
        raise FormatError(f"{path}: file too short ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, mlen = struct.unpack("<HI", data[4:header])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError(f"{path}: CRC-32 mismatch (file corrupt or truncated)")
    if header + mlen > len(data) - 4:
        raise FormatError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(data[header:header + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    try:
        for layer in manifest["layers"]:
            if layer.get("kind") not in LAYER_KINDS:
                raise FormatError(f"{path}: unknown layer kind {layer.get('kind')!r}")
        spec = ModelSpec.from_dict(manifest)
        records = manifest["params"]
    except (KeyError, TypeError, SpecError) as exc:
        raise FormatError(f"{path}: invalid manifest ({exc})") from None

    blob = data[header + mlen:-4]
    expected = init_params(spec, dtype=np.float32)
    if [r.get("name") for r in records] != expected.names():
        raise FormatError(f"{path}: parameter records do not match the layer list")
    params, offset = ParamStore(), 0
    for rec, ref in zip(records, expected):
        shape = tuple(rec["shape"])
        if shape != ref.value.shape:
            raise FormatError(f"{path}: parameter {rec['name']} has shape {shape}, "
                              f"layer needs {ref.value.shape}")
        nbytes = 4 * int(np.prod(shape))
        if rec["offset"] != offset or offset + nbytes > len(blob):
            raise FormatError(f"{path}: blob for {rec['name']} out of bounds")
        value = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
        params._insert(Param(rec["name"], value.astype(np.float32).reshape(shape), ref.trainable))
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after parameter blobs")
    return spec, params
