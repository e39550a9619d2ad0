"""Image I/O, degradation synthesis and patch datasets.

Images are float arrays of shape (channels, height, width) with values in
[0, 1]; ``channels`` is 1 (gray) or 3 (RGB).  Binary PGM (P5) and PPM (P6)
are read and written natively; PNG goes through Pillow when available.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, XUnitError
from .rng import PortableRNG


class ImageIOError(XUnitError, OSError):
    """An image file is unreadable or in an unsupported format."""


# ---------------------------------------------------------------------------
# Netpbm / PNG

def _read_netpbm(path, data):
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageIOError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageIOError(f"{path}: non-numeric header field") from None
    if w < 1 or h < 1:
        raise ImageIOError(f"{path}: bad dimensions {w}x{h}")
    if not 0 < maxval < 256:
        raise ImageIOError(f"{path}: only 8-bit samples are supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    channels = 1 if data[:2] == b"P5" else 3
    n = w * h * channels
    raster = np.frombuffer(data, dtype=np.uint8, count=min(n, max(len(data) - pos, 0)), offset=min(pos, len(data)))
    if raster.size != n:
        raise ImageIOError(f"{path}: raster truncated ({raster.size} of {n} samples)")
    img = raster.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float64) / maxval
    return img


def load_image(path):
    """Load a PGM/PPM (or PNG) file as a (c, h, w) float64 array in [0, 1]."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] in (b"P5", b"P6"):
        img = _read_netpbm(path, data)
    elif data[:8] == b"\x89PNG\r\n\x1a\n":
        img = _read_png(path)
    else:
        raise ImageIOError(f"{path}: unsupported image format")
    return np.clip(img, 0.0, 1.0)


def _read_png(path):
    try:
        from PIL import Image as PILImage
    except ImportError:  # pragma: no cover
        raise ImageIOError(f"{path}: PNG support needs Pillow") from None
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            if im.mode in ("I;16", "I"):
                raise ImageIOError(f"{path}: only 8-bit PNG is supported")
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image, path):
    """Write ``image`` ((c, h, w) or (h, w)); the format follows the extension."""
    path = os.fspath(path)
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataError(f"cannot save image of shape {image.shape}")
    pixels = to_uint8(image).transpose(1, 2, 0)
    c, h, w = image.shape
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        try:
            from PIL import Image as PILImage
        except ImportError:  # pragma: no cover
            raise ImageIOError(f"{path}: PNG support needs Pillow") from None
        PILImage.fromarray(pixels[:, :, 0] if c == 1 else pixels).save(path)
        return
    if ext not in (".pgm", ".ppm", ".pnm", ""):
        raise ImageIOError(f"{path}: unsupported output format {ext!r}")
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_manifest(path):
    """Paths listed one per line; relative entries resolve against the manifest's folder."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    return [ln if os.path.isabs(ln) else os.path.join(base, ln)
            for ln in lines if ln and not ln.startswith("#")]


# ---------------------------------------------------------------------------
# Color

def rgb_to_ycbcr(image):
    """Full-range ITU-R BT.601 YCbCr, channels stacked as (Y, Cb, Cr)."""
    r, g, b = image
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(image):
    y, cb, cr = image[0], image[1] - 0.5, image[2] - 0.5
    return np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb])


def luminance(image):
    return image if image.shape[0] == 1 else rgb_to_ycbcr(image)[:1]


# ---------------------------------------------------------------------------
# Degradations

def add_gaussian_noise(clean, sigma_255, seed):
    """Add i.i.d. N(0, (sigma_255/255)^2) noise; the result is not clipped."""
    if sigma_255 < 0:
        raise ValueError("sigma must be non-negative")
    clean = np.asarray(clean)
    noise = PortableRNG(seed).normal(clean.shape, dtype=clean.dtype)
    return clean + noise * np.asarray(sigma_255 / 255.0, dtype=clean.dtype)


def _cubic(t, a=-0.5):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(t <= 1, (a + 2) * t3 - (a + 3) * t2 + 1,
                    np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0))


def resize_weights(in_len, out_len, antialias=True):
    """(out_len, in_len) matrix of Catmull-Rom weights with edge clamping.

    Output sample ``j`` sits at input coordinate ``(j + 0.5) / scale - 0.5``.
    When shrinking with ``antialias`` the kernel is stretched by ``1/scale``.
    """
    scale = out_len / in_len
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    centers = (np.arange(out_len) + 0.5) / scale - 0.5
    support = 2.0 * stretch
    left = np.floor(centers - support).astype(np.int64) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    w = _cubic((idx - centers[:, None]) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, in_len - 1).ravel()), w.ravel())
    return mat


def resize(image, out_h, out_w, antialias=True):
    """Bicubic resampling of a (c, h, w) image to ``out_h x out_w``."""
    if out_h < 1 or out_w < 1:
        raise DataError(f"degenerate output size {out_h}x{out_w}")
    image = np.asarray(image)
    _, h, w = image.shape
    wy = resize_weights(h, out_h, antialias)
    wx = resize_weights(w, out_w, antialias)
    return wy @ image @ wx.T


def bicubic_resize(image, factor, antialias=True):
    """Scale both axes by ``factor`` (rounded output size)."""
    if factor <= 0:
        raise DataError(f"resize factor must be positive, got {factor}")
    _, h, w = np.shape(image)
    return resize(image, int(round(h * factor)), int(round(w * factor)), antialias)


def sr_degrade(image, factor):
    """Downscale by ``factor`` then upscale back to the original size."""
    _, h, w = image.shape
    small = resize(image, max(1, int(round(h / factor))), max(1, int(round(w / factor))))
    return resize(small, h, w)


# ---------------------------------------------------------------------------
# Patch datasets

@dataclass
class PatchDataset:
    """Aligned (input, target) patches stacked as (n, c, size, size) arrays.

    ``inputs`` is ``None`` while the degradation is still to be applied at
    batch-assembly time (fresh Gaussian noise per use).
    """
    targets: np.ndarray
    inputs: np.ndarray = None
    seed: int = 0
    source: str = ""

    def __len__(self):
        return len(self.targets)

    @property
    def patch_shape(self):
        return self.targets.shape[1:]

    def with_inputs(self, degrade):
        """Copy with ``inputs = degrade(target)`` applied to every patch."""
        inputs = np.stack([degrade(t) for t in self.targets]) if len(self) else self.targets.copy()
        return PatchDataset(self.targets, inputs.astype(self.targets.dtype), self.seed, self.source)


def sample_patches(images, count, size=80, seed=0, names=None, dtype=np.float32):
    """Random ``size x size`` crops with independent horizontal/vertical flips.

    Image ``k % len(images)`` supplies patch ``k``, so every image contributes
    equally.  Crop positions and flips come from the seeded portable stream.
    """
    images = [np.asarray(im) for im in images]
    names = names or [f"image {i}" for i in range(len(images))]
    for im, name in zip(images, names):
        if im.shape[1] < size or im.shape[2] < size:
            raise DataError(f"{name} is {im.shape[2]}x{im.shape[1]}, smaller than patch size {size}")
    channels = {im.shape[0] for im in images}
    if len(channels) > 1:
        raise DataError(f"images mix channel counts {sorted(channels)}")
    if count == 0:
        c = images[0].shape[0] if images else 1
        return PatchDataset(np.zeros((0, c, size, size), dtype), None, seed, ";".join(names))
    if not images:
        raise DataError("no images to sample from")
    rng = PortableRNG(seed)
    out = np.empty((count, images[0].shape[0], size, size), dtype)
    for k in range(count):
        im = images[k % len(images)]
        top = rng.integers(im.shape[1] - size + 1)
        left = rng.integers(im.shape[2] - size + 1)
        patch = im[:, top:top + size, left:left + size]
        if rng.uniform(1)[0] < 0.5:
            patch = patch[:, :, ::-1]
        if rng.uniform(1)[0] < 0.5:
            patch = patch[:, ::-1, :]
        out[k] = patch
    return PatchDataset(out, None, seed, ";".join(names))


# ---------------------------------------------------------------------------
# Synthetic images

def synthetic_image(size, seed, channels=1):
    """A piecewise-smooth test image: shaded background, shapes, stripes and texture."""
    rng = PortableRNG(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    img = np.zeros((channels, h, w))
    for c in range(channels):
        a, b, off = rng.uniform(3) * np.array([0.6, 0.6, 0.4])
        img[c] = off + a * xx + b * yy - (a + b) / 2
    for _ in range(4 + rng.integers(5)):
        cy, cx, ry, rx = rng.uniform(4) * np.array([1, 1, 0.3, 0.3]) + np.array([0, 0, 0.05, 0.05])
        color = rng.uniform(channels)[:, None, None]
        kind = rng.integers(3)
        if kind == 0:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        elif kind == 1:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            freq, angle = 8 + 24 * rng.uniform(1)[0], np.pi * rng.uniform(1)[0]
            proj = np.cos(angle) * xx + np.sin(angle) * yy
            stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * proj)
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            color = color * stripes[None]
        img = np.where(mask[None], color, img)
    img += 0.03 * rng.normal(img.shape)
    # light smoothing so the texture is spatially correlated
    k = np.array([0.25, 0.5, 0.25])
    img = np.apply_along_axis(lambda v: np.convolve(np.pad(v, 1, mode="edge"), k, "valid"), 2, img)
    img = np.apply_along_axis(lambda v: np.convolve(np.pad(v, 1, mode="edge"), k, "valid"), 1, img)
    return np.clip(img, 0.0, 1.0)


def synthetic_images(count, size=128, seed=0, channels=1):
    return [synthetic_image(size, PortableRNG(seed).child(i).integers(2 ** 31), channels)
            for i in range(count)]
