"""Dense rank-4 tensor kernels in (batch, channel, height, width) layout.

Tensors are plain ``numpy.ndarray`` objects with ``ndim == 4``.  Every function
here is pure and preserves the floating dtype of its inputs, so the same code
serves 64-bit verification runs and 32-bit training runs.

Convolutions follow the cross-correlation convention (no kernel flip) with
zero padding and unit stride.
"""

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

# Depthwise kernels with more taps than this go through the FFT path.
_DIRECT_MAX_TAPS = 9
# Bytes of patch matrix materialized at once by the im2col convolution.
_IM2COL_BUDGET = 64 * 2 ** 20


def _check4(x, name="input"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise DimensionError(f"{name} must be a rank-4 array (n, c, h, w), got shape {shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"{name} has an empty axis: shape {x.shape}")


def _out_size(h, w, kh, kw, pad):
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} with pad {pad} does not fit input {h}x{w}")
    return ho, wo


def zero_pad(x, pad):
    """Pad the two spatial axes of ``x`` with ``pad`` zeros on every side."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def hadamard(a, b):
    """Elementwise product of two equally shaped tensors."""
    _check4(a, "a")
    _check4(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def elementwise(a, b, op):
    """Apply ``op`` in {"add", "sub", "mul", "scale"} pointwise.

    ``scale`` takes a scalar ``b``; the other ops need ``b`` shaped like ``a``.
    """
    _check4(a, "a")
    if op == "scale":
        if np.ndim(b) != 0:
            raise DimensionError("scale expects a scalar factor")
        return a * np.asarray(b, dtype=a.dtype)
    if op not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise op {op!r}")
    _check4(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


# ---------------------------------------------------------------------------
# Full multi-channel convolution

def _check_conv(x, kernel, bias):
    _check4(x, "input")
    _check4(kernel, "kernel")
    o, ci = kernel.shape[:2]
    if ci != x.shape[1]:
        raise DimensionError(
            f"kernel in_channels axis ({ci}) does not match input channel axis ({x.shape[1]})")
    if bias is not None and np.shape(bias) != (o,):
        raise DimensionError(
            f"bias shape {np.shape(bias)} does not match kernel out_channels axis ({o},)")


def _im2col(xp, kh, kw, ho, wo):
    """(b, c, hp, wp) -> (b, c*kh*kw, ho*wo) patch matrix."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (b, c, ho, wo, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)


def _chunk(n, per_sample):
    return max(1, min(n, _IM2COL_BUDGET // max(per_sample, 1)))


def conv2d(x, kernel, bias=None, pad=0):
    """Multi-channel 2-D cross-correlation.

    ``x`` is (n, c, h, w), ``kernel`` is (o, c, kh, kw) and ``bias`` an
    optional length-``o`` vector.  The result is (n, o, h + 2*pad - kh + 1, ...).
    """
    _check_conv(x, kernel, bias)
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho, wo = _out_size(h, w, kh, kw, pad)
    xp = zero_pad(x, pad)
    dtype = np.result_type(x, kernel)
    out = np.empty((n, o, ho * wo), dtype=dtype)
    kmat = np.ascontiguousarray(kernel.reshape(o, c * kh * kw), dtype=dtype)
    # Patch matrices are built a few samples at a time to bound memory.
    step = _chunk(n, c * kh * kw * ho * wo * xp.itemsize)
    for s in range(0, n, step):
        np.matmul(kmat, _im2col(xp[s:s + step], kh, kw, ho, wo), out=out[s:s + step])
    if bias is not None:
        out += np.asarray(bias, dtype=dtype)[None, :, None]
    return out.reshape(n, o, ho, wo)


def conv2d_grad_input(grad, kernel, pad, input_hw):
    """Gradient of :func:`conv2d` with respect to its input."""
    _, _, kh, kw = kernel.shape
    h, w = input_hw
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    # Correlating the upstream gradient with the flipped, transposed kernel
    # over a (k-1)-padded support yields the padded-input gradient.
    gp = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gp = conv2d(gp, flipped)
    return gp[:, :, pad:pad + h, pad:pad + w]


def conv2d_grad_kernel(x, grad, kernel_shape, pad):
    """Gradient of :func:`conv2d` with respect to its kernel."""
    n, c, _, _ = x.shape
    o, _, kh, kw = kernel_shape
    ho, wo = grad.shape[2:]
    xp = zero_pad(x, pad)
    g = grad.reshape(n, o, ho * wo)
    gk = np.zeros((o, c * kh * kw), dtype=np.result_type(x, grad))
    step = _chunk(n, c * kh * kw * ho * wo * xp.itemsize)
    for s in range(0, n, step):
        cols = _im2col(xp[s:s + step], kh, kw, ho, wo)
        gk += np.matmul(g[s:s + step], cols.transpose(0, 2, 1)).sum(axis=0)
    return gk.reshape(kernel_shape)


# ---------------------------------------------------------------------------
# Depthwise convolution

def _check_depthwise(x, kernel):
    _check4(x, "input")
    if not isinstance(kernel, np.ndarray) or kernel.ndim != 3:
        raise DimensionError(
            f"depthwise kernel must be (channels, kh, kw), got {getattr(kernel, 'shape', None)}")
    if kernel.shape[0] != x.shape[1]:
        raise DimensionError(
            f"depthwise kernel channel axis ({kernel.shape[0]}) does not match "
            f"input channel axis ({x.shape[1]})")


def _fft_shape(hp, wp):
    return scipy.fft.next_fast_len(hp, real=True), scipy.fft.next_fast_len(wp, real=True)


def _pick_method(kernel, method):
    if method == "auto":
        return "direct" if kernel.shape[1] * kernel.shape[2] <= _DIRECT_MAX_TAPS else "fft"
    if method not in ("direct", "fft"):
        raise ValueError(f"unknown depthwise method {method!r}")
    return method


def depthwise_forward(x, kernel, pad=0, method="auto"):
    """Depthwise correlation returning ``(output, saved)`` for the backward pass."""
    _check_depthwise(x, kernel)
    n, c, h, w = x.shape
    _, kh, kw = kernel.shape
    ho, wo = _out_size(h, w, kh, kw, pad)
    method = _pick_method(kernel, method)
    xp = zero_pad(x, pad)
    dtype = np.result_type(x, kernel)
    if method == "direct":
        out = np.zeros((n, c, ho, wo), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i:i + ho, j:j + wo] * kernel[:, i, j][:, None, None]
        return out, {"method": method}
    s = _fft_shape(*xp.shape[2:])
    xf = scipy.fft.rfft2(xp, s=s)
    kf = scipy.fft.rfft2(kernel.astype(dtype, copy=False), s=s)
    out = scipy.fft.irfft2(xf * np.conj(kf)[None], s=s)[:, :, :ho, :wo]
    return np.ascontiguousarray(out, dtype=dtype), {"method": method, "xf": xf, "kf": kf, "s": s}


def depthwise_conv2d(x, kernel, pad=0, method="auto"):
    """Per-channel 2-D cross-correlation; output channel i sees input channel i only.

    ``kernel`` has shape (channels, kh, kw).  Small kernels are applied by
    shifted accumulation, larger ones through real FFTs; ``method`` forces
    either path.
    """
    return depthwise_forward(x, kernel, pad, method)[0]


def depthwise_backward(grad, x, kernel, pad, saved, need_input=True, need_kernel=True):
    """Gradients of :func:`depthwise_conv2d` w.r.t. input and kernel."""
    n, c, h, w = x.shape
    _, kh, kw = kernel.shape
    ho, wo = grad.shape[2:]
    dtype = grad.dtype
    gx = gk = None
    if saved["method"] == "direct":
        xp = zero_pad(x, pad)
        if need_input:
            gxp = np.zeros(xp.shape, dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += grad * kernel[:, i, j][:, None, None]
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
        if need_kernel:
            gk = np.empty(kernel.shape, dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    gk[:, i, j] = np.einsum("nchw,nchw->c", grad, xp[:, :, i:i + ho, j:j + wo])
        return gx, gk
    s = saved["s"]
    gf = scipy.fft.rfft2(grad, s=s)
    if need_input:
        gxp = scipy.fft.irfft2(gf * saved["kf"][None], s=s)
        gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w], dtype=dtype)
    if need_kernel:
        acc = np.sum(saved["xf"] * np.conj(gf), axis=0)
        gk = np.ascontiguousarray(scipy.fft.irfft2(acc, s=s)[:, :kh, :kw], dtype=dtype)
    return gx, gk
