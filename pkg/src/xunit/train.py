"""Loss, optimizer, training loop, inference, PSNR and parameter-budget sweeps."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models
from .autodiff import Tape, backward
from .data import add_gaussian_noise, sr_degrade
from .errors import ContractError, DimensionError, TrainingError, XUnitError
from .rng import PortableRNG

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "loss", "psnr")
SWEEP_HEADER = ("family", "depth", "xkernel", "params", "activation_fraction", "psnr")
DTYPES = {"f32": np.float32, "f64": np.float64}


def mse(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.square(pred - target), dtype=np.float64))


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    lr_schedule: str = "geometric"
    total_steps: int = 1000
    sigma_255: float = 25.0
    seed: int = 0
    precision: str = "f32"
    log_interval: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ContractError("need lr_start >= lr_end > 0")
        if self.lr_schedule not in ("geometric", "step"):
            raise ContractError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.precision not in DTYPES:
            raise ContractError(f"precision must be one of {sorted(DTYPES)}")
        if self.total_steps < 0 or self.log_interval < 1:
            raise ContractError("total_steps must be >= 0 and log_interval >= 1")

    @property
    def dtype(self):
        return DTYPES[self.precision]


def learning_rate(cfg, step):
    """Decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``.

    ``geometric`` interpolates log-linearly; ``step`` holds three plateaus
    (start, geometric midpoint, end) over equal thirds of the run.
    """
    if cfg.total_steps == 0:
        return cfg.lr_start
    frac = min(max(step / cfg.total_steps, 0.0), 1.0)
    if cfg.lr_schedule == "step":
        frac = min(math.floor(frac * 3), 2) / 2
    if frac == 1.0:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        for p in params.trainable():
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        return state


def adam_step(params, state, lr):
    """One bias-corrected Adam update over the trainable parameters, then zero the grads."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p in params.trainable():
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.value -= (lr * step).astype(p.value.dtype, copy=False)
    params.zero_grad()


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float
    psnr: float = None


@dataclass
class TrainResult:
    params: object
    log: list
    losses: list


def _batches(n, batch_size, seed):
    """Endless index stream: concatenated seeded permutations, one per epoch."""
    epoch, buf = 0, np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, PortableRNG(seed, 1, epoch).permutation(n)])
            epoch += 1
        yield buf[:batch_size]
        buf = buf[batch_size:]


def training_loss(spec, params, inputs, targets, train=True):
    """Record the loss on a new tape; returns ``(tape, loss_id)``.

    Residual models regress the degradation ``inputs - targets``.
    """
    tape = Tape()
    tape, out = models.forward(spec, params, inputs, tape=tape, train=train)
    goal = inputs - targets if spec.residual else targets
    return tape, tape.record("mse", [out, tape.constant(goal)])


def train(spec, data, cfg, params=None, eval_images=None, eval_seed=0):
    """Train ``spec`` on ``data`` with Adam; returns a :class:`TrainResult`.

    If ``data.inputs`` is ``None``, every batch gets fresh Gaussian noise of
    ``cfg.sigma_255`` drawn from a per-step sub-stream of ``cfg.seed``.
    ``eval_images`` (clean images) are denoised at each log point to report
    held-out PSNR.
    """
    if len(data) == 0:
        raise ContractError("training data is empty")
    dtype = cfg.dtype
    if params is None:
        params = models.init_params(spec, seed=cfg.seed, dtype=dtype)
    state = AdamState.for_params(params)
    batches = _batches(len(data), cfg.batch_size, cfg.seed)
    sigma = np.asarray(cfg.sigma_255 / 255.0, dtype=dtype)
    rows, losses, window = [], [], []
    for step in range(cfg.total_steps):
        idx = next(batches)
        clean = data.targets[idx].astype(dtype, copy=False)
        if data.inputs is None:
            noisy = clean + PortableRNG(cfg.seed, 2, step).normal(clean.shape, dtype) * sigma
        else:
            noisy = data.inputs[idx].astype(dtype, copy=False)
        tape, loss_id = training_loss(spec, params, noisy, clean)
        loss = float(tape[loss_id])
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss ({loss}) at step {step}", step=step)
        backward(tape, loss_id)
        del tape
        lr = learning_rate(cfg, step)
        adam_step(params, state, lr)
        losses.append(loss)
        window.append(loss)
        last = step == cfg.total_steps - 1
        if (step + 1) % cfg.log_interval == 0 or last:
            score = None
            if eval_images is not None:
                score = evaluate_denoising(spec, params, eval_images, cfg.sigma_255, eval_seed)
            rows.append(LogRow(step + 1, lr, float(np.mean(window)), score))
            log.info("step %d lr %.3g loss %.6g psnr %s", step + 1, lr, rows[-1].loss, score)
            window = []
    return TrainResult(params, rows, losses)


def infer(spec, params, degraded, clip=True):
    """Restore a (c, h, w) image with batch norm in eval mode.

    Residual models subtract their prediction from the input.
    """
    degraded = np.asarray(degraded)
    if degraded.ndim == 2:
        degraded = degraded[None]
    if degraded.shape[0] != spec.input_channels:
        raise DimensionError(f"{spec.name} takes {spec.input_channels}-channel images, "
                             f"got {degraded.shape[0]}")
    dtype = next(iter(params)).value.dtype
    x = degraded[None].astype(dtype)
    pred = models.predict(spec, params, x, train=False)[0]
    out = x[0] - pred if spec.residual else pred
    out = out.astype(np.float64)
    return np.clip(out, 0.0, 1.0) if clip else out


def noisy_versions(images, sigma_255, seed):
    return [add_gaussian_noise(im, sigma_255, PortableRNG(seed, 3, i).integers(2 ** 62))
            for i, im in enumerate(images)]


def evaluate_denoising(spec, params, clean_images, sigma_255, seed=0):
    """Mean PSNR of restored vs clean images over [0, 1], no border crop."""
    noisy = noisy_versions(clean_images, sigma_255, seed)
    return float(np.mean([psnr(infer(spec, params, n), c) for n, c in zip(noisy, clean_images)]))


def evaluate_sr(spec, params, clean_images, factor):
    scores = []
    for im in clean_images:
        _, h, w = im.shape
        h, w = h - h % factor, w - w % factor
        target = im[:, :h, :w]
        scores.append(psnr(infer(spec, params, sr_degrade(target, factor)), target))
    return float(np.mean(scores))


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.step, repr(r.lr), repr(r.loss), "" if r.psnr is None else repr(r.psnr)])


# ---------------------------------------------------------------------------
# Sweeps

def sweep(families, depths, xkernels, cfg, train_data, test_images, width=64, kernel=3):
    """Train one model per configuration and record size and held-out PSNR.

    ConvNet rows ignore ``xkernels`` (one row per depth, ``xkernel = 0``).
    A configuration that fails to train yields a row with ``psnr = nan`` and
    an ``error`` message; the sweep continues.
    """
    if isinstance(families, str):
        families = [families]
    in_ch = train_data.patch_shape[0]
    rows = []
    for family in families:
        for depth in depths:
            for xk in ([0] if family == "convnet" else xkernels):
                if family == "convnet":
                    spec = models.build_convnet(depth, width, kernel, in_ch)
                elif family == "xnet":
                    spec = models.build_xnet(depth, width, kernel, xk, in_ch)
                else:
                    raise ContractError(f"unknown family {family!r}")
                row = {"family": family, "depth": depth, "xkernel": xk,
                       "params": models.count_params(spec),
                       "activation_fraction": models.activation_fraction(spec),
                       "psnr": float("nan")}
                try:
                    result = train(spec, train_data, cfg)
                    row["psnr"] = evaluate_denoising(spec, result.params, test_images, cfg.sigma_255,
                                                     cfg.seed)
                except XUnitError as exc:
                    log.warning("sweep %s depth %d xkernel %d failed: %s", family, depth, xk, exc)
                    row["error"] = str(exc)
                rows.append(row)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r["family"], r["depth"], r["xkernel"], r["params"],
                        repr(r["activation_fraction"]), repr(r["psnr"])])


def config_dict(cfg):
    return asdict(cfg)
