"""Command-line interface: ``xunit <command> [flags]``.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.
Set ``XUNIT_THREADS`` to cap the BLAS/FFT thread pools.
"""

import argparse
import json
import logging
import math
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import data, models, nn, train
from .autodiff import PRIMITIVES, Tape, backward, grad_check
from .errors import XUnitError
from .rng import PortableRNG

log = logging.getLogger("xunit")

GRAD_TOL = 1e-4


class UsageError(Exception):
    """Bad flag combination detected after parsing; exits with status 2."""


# ---------------------------------------------------------------------------
# Argument parsing

def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _arch_flags(p, default_arch="xdncnn"):
    p.add_argument("--arch", choices=models.ARCHS, default=default_arch)
    p.add_argument("--depth", type=int, help="layers for convnet/xnet (named archs fix their own)")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--kernel", type=int, default=3, help="conv kernel size")
    p.add_argument("--xkernel", type=int, default=9, help="xUnit depthwise kernel size")
    p.add_argument("--stages", default="+".join(nn.DEFAULT_STAGES), help="xUnit stage pipeline")
    p.add_argument("--channels", type=int, default=1, help="image channels (1 gray, 3 RGB)")


def _train_flags(p):
    p.add_argument("--sigma", type=float, default=25.0, help="noise std on the 0-255 scale")
    p.add_argument("--factor", type=int, default=3, choices=(3, 4),
                   help="SR scale used to synthesize inputs for srcnn-family archs")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--patch", type=int, default=80, help="crop size")
    p.add_argument("--patches", type=int, default=1024, help="number of crops to sample")
    p.add_argument("--lr-start", type=float, default=1e-3)
    p.add_argument("--lr-end", type=float, default=1e-4)
    p.add_argument("--lr-schedule", choices=("geometric", "step"), default="geometric")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--log-interval", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="xunit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on images listed in a manifest")
    _arch_flags(p)
    _train_flags(p)
    p.add_argument("--data", required=True, help="manifest of training images")
    p.add_argument("--eval", help="manifest of held-out images for PSNR at log points")
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("denoise", help="denoise an image with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sr", help="bicubic upscale then refine with a trained SR model")
    p.add_argument("--model", required=True)
    p.add_argument("--factor", type=int, choices=(3, 4), required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("psnr", help="PSNR in dB between two images")
    p.add_argument("reference")
    p.add_argument("test")

    p = sub.add_parser("count-params", help="trainable parameter count with per-layer table")
    _arch_flags(p)
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("grad-check", help="finite-difference check of every primitive and a model")
    _arch_flags(p, default_arch="xnet")
    p.set_defaults(depth=2, width=4)
    p.add_argument("--size", type=int, default=8, help="spatial size of the probe input")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", help=".npy array used as the model probe input")

    p = sub.add_parser("sweep", help="train a grid of convnet/xnet models and tabulate PSNR")
    p.add_argument("--family", default="convnet,xnet", help="comma-separated: convnet, xnet")
    p.add_argument("--depths", type=_int_list, required=True)
    p.add_argument("--xkernels", type=_int_list, default=[9])
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--kernel", type=int, default=3)
    _train_flags(p)
    p.add_argument("--data", required=True, help="manifest of training images")
    p.add_argument("--test", required=True, help="manifest of held-out images")
    p.add_argument("--out", required=True, help="CSV to write")

    p = sub.add_parser("inspect", help="write feature, gate and output maps of one activation layer")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--layer", type=int, required=True, help="activation layer, counted from 1")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sigma", type=float, default=0.0, help="noise added before the forward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-raw", action="store_true", help="skip the raw .npz dump")
    return parser


# ---------------------------------------------------------------------------
# Helpers

def _spec_from_args(args):
    try:
        stages = nn.parse_stages(args.stages)
    except XUnitError as exc:
        raise UsageError(str(exc)) from None
    if args.arch in ("srcnn", "xsrcnnf", "xsrcnnc") and args.channels != 1:
        raise UsageError(f"{args.arch} works on luminance; --channels must be 1")
    try:
        return models.build(args.arch, args.depth, args.width, args.kernel, args.xkernel,
                            args.channels, stages)
    except XUnitError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args):
    return train.TrainConfig(batch_size=args.batch, lr_start=args.lr_start, lr_end=args.lr_end,
                             lr_schedule=args.lr_schedule, total_steps=args.steps,
                             sigma_255=args.sigma, seed=args.seed, precision=args.precision,
                             log_interval=args.log_interval)


def _load_images(manifest, channels):
    paths = data.read_manifest(manifest)
    if not paths:
        raise data.DataError(f"{manifest} lists no images")
    images = []
    for path in paths:
        im = data.load_image(path)
        if channels == 1 and im.shape[0] == 3:
            im = data.luminance(im)
        elif im.shape[0] != channels:
            raise data.DataError(f"{path} has {im.shape[0]} channel(s), model needs {channels}")
        images.append(im)
    return images, paths


def _echo_config(args):
    resolved = {k: v for k, v in sorted(vars(args).items())}
    log.info("config %s", json.dumps(resolved, sort_keys=True, default=str))


def _log_path(model_path):
    return os.path.splitext(model_path)[0] + ".log.csv"


def _threads():
    value = os.environ.get("XUNIT_THREADS")
    if not value:
        return nullcontext()
    try:
        limit = int(value)
    except ValueError:
        raise UsageError(f"XUNIT_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(limit, 1))


# ---------------------------------------------------------------------------
# Commands

def cmd_train(args):
    spec = _spec_from_args(args)
    cfg = _train_config(args)
    images, paths = _load_images(args.data, spec.input_channels)
    ds = data.sample_patches(images, args.patches, args.patch, args.seed, names=paths)
    eval_images = None
    if spec.residual:
        if args.eval:
            eval_images, _ = _load_images(args.eval, spec.input_channels)
    else:
        ds = ds.with_inputs(lambda t: data.sr_degrade(t, args.factor))
        if args.eval:
            log.warning("--eval is only used for denoising models; ignored")
    log.info("%s: %d parameters, %d patches", spec.name, models.count_params(spec), len(ds))
    result = train.train(spec, ds, cfg, eval_images=eval_images, eval_seed=args.seed)
    models.save_model(spec, result.params, args.out)
    train.write_log_csv(result.log, _log_path(args.out))
    print(f"wrote {args.out} and {_log_path(args.out)}")
    return 0


def _restore_channels(spec, image):
    """Match an image to the model's channel count; returns (model input, rebuild fn)."""
    if image.shape[0] == spec.input_channels:
        return image, lambda y: y
    if spec.input_channels == 1 and image.shape[0] == 3:
        ycc = data.rgb_to_ycbcr(image)
        return ycc[:1], lambda y: data.ycbcr_to_rgb(np.concatenate([y, ycc[1:]]))
    raise data.DataError(f"image has {image.shape[0]} channel(s), model takes "
                         f"{spec.input_channels}")


def cmd_denoise(args):
    spec, params = models.load_model(args.model)
    image = data.load_image(args.input)
    x, rebuild = _restore_channels(spec, image)
    restored = rebuild(train.infer(spec, params, x))
    data.save_image(restored, args.out)
    print(f"wrote {args.out} (PSNR vs input {train.psnr(restored, image):.2f} dB)")
    return 0


def cmd_sr(args):
    spec, params = models.load_model(args.model)
    if spec.residual:
        log.warning("%s is a residual (denoising) model; applying it to the upscaled image", spec.name)
    image = data.load_image(args.input)
    up = np.clip(data.bicubic_resize(image, args.factor), 0.0, 1.0)
    x, rebuild = _restore_channels(spec, up)
    data.save_image(rebuild(train.infer(spec, params, x)), args.out)
    print(f"wrote {args.out} ({up.shape[2]}x{up.shape[1]})")
    return 0


def cmd_psnr(args):
    a, b = data.load_image(args.reference), data.load_image(args.test)
    value = train.psnr(a, b)
    print("inf" if math.isinf(value) else f"{value:.4f}")
    return 0


def cmd_count_params(args):
    spec = _spec_from_args(args)
    rows = [{"index": i, "kind": l.kind, "channels": l.channels, "kernel": l.kernel,
             "params": l.param_count()} for i, l in enumerate(spec.layers)]
    total = models.count_params(spec)
    if args.json:
        print(json.dumps({"arch": spec.name, "total": total,
                          "activation_params": models.activation_param_count(spec),
                          "layers": rows}, sort_keys=True, indent=2))
        return 0
    print(f"{'#':>3}  {'kind':<6} {'channels':>8} {'kernel':>6} {'params':>9}")
    for r in rows:
        kernel = "" if r["kernel"] is None else r["kernel"]
        print(f"{r['index']:>3}  {r['kind']:<6} {r['channels']:>8} {kernel:>6} {r['params']:>9}")
    print(total)
    return 0


def _primitive_cases(rng):
    """One (op, arrays, attrs) probe per registered primitive, 64-bit, away from kinks."""
    def away(shape):
        x = rng.normal(size=shape)
        x[np.abs(x) < 1e-2] += 0.1
        return x

    x, w = away((2, 3, 5, 5)), rng.normal(size=(2, 3, 3, 3))
    stats = dict(mean=rng.normal(size=3), var=rng.uniform(0.5, 2.0, size=3), eps=nn.BN_EPS)
    return {
        "add": ([away((2, 2, 3, 3)), away((2, 2, 3, 3))], {}),
        "sub": ([away((2, 2, 3, 3)), away((2, 2, 3, 3))], {}),
        "mul": ([away((2, 2, 3, 3)), away((2, 2, 3, 3))], {}),
        "scale": ([away((2, 2, 3, 3))], {"factor": 0.7}),
        "relu": ([away((2, 2, 3, 3))], {}),
        "gaussian": ([away((2, 2, 3, 3))], {}),
        "conv2d": ([x, w, rng.normal(size=2)], {"pad": 1}),
        "depthwise_conv2d": ([x, rng.normal(size=(3, 3, 3))], {"pad": 1}),
        "batchnorm_train": ([x, rng.normal(size=3), rng.normal(size=3)], {"eps": nn.BN_EPS}),
        "batchnorm_eval": ([x, rng.normal(size=3), rng.normal(size=3)], stats),
        "mse": ([away((2, 1, 3, 3)), away((2, 1, 3, 3))], {}),
        "sum": ([away((2, 1, 3, 3))], {}),
    }


def _check_primitive(op, arrays, attrs, rng):
    out_shape = PRIMITIVES[op].forward(*arrays, **attrs)[0].shape
    weights = rng.normal(size=out_shape)
    worst = 0.0
    for pos in range(len(arrays)):
        def f(tape, xid, pos=pos):
            ids = [xid if i == pos else tape.constant(a) for i, a in enumerate(arrays)]
            out = tape.record(op, ids, **attrs)
            if tape[out].ndim == 0:
                return out
            return tape.record("sum", [tape.record("mul", [out, tape.constant(weights)])])
        worst = max(worst, grad_check(f, arrays[pos]))
    return worst


def _check_model(spec, probe, rng):
    """Max relative error over the input and every trainable parameter of ``spec``."""
    params = models.init_params(spec, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    for p in params.trainable():
        p.value[...] = p.value + 0.1 * rng.normal(size=p.value.shape)
    target = rng.normal(size=probe.shape)
    buffers = {p.name: p.value.copy() for p in params if not p.trainable}

    def loss(tape, x_id):
        for name, value in buffers.items():
            params[name].value[...] = value
        _, out = models.forward(spec, params, x_id, tape=tape, train=True)
        return tape.record("mse", [out, tape.constant(target)])

    errors = {"input": grad_check(loss, probe)}
    for p in params.trainable():
        errors[p.name] = _param_grad_check(loss, params, p, probe)
    return errors


def _param_grad_check(loss, params, p, probe, epsilon=1e-5):
    """Central differences on one parameter tensor against the accumulated analytic gradient."""
    params.zero_grad()
    tape = Tape()
    root = loss(tape, tape.constant(probe))
    if not np.isfinite(tape[root]):
        raise XUnitError("non-finite loss during grad-check")
    backward(tape, root)
    analytic = p.grad.copy()
    params.zero_grad()
    flat = p.value.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + epsilon
        t = Tape()
        up = float(t[loss(t, t.constant(probe))])
        flat[i] = old - epsilon
        t = Tape()
        down = float(t[loss(t, t.constant(probe))])
        flat[i] = old
        numeric[i] = (up - down) / (2 * epsilon)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)))


def cmd_grad_check(args):
    rng = PortableRNG(args.seed)
    spec = _spec_from_args(args)
    if args.input:
        probe = np.load(args.input).astype(np.float64)
        if probe.ndim == 3:
            probe = probe[None]
        if probe.ndim != 4 or probe.shape[1] != spec.input_channels:
            print(f"probe input shape {probe.shape} does not fit {spec.name}", file=sys.stderr)
            return 1
    else:
        probe = rng.uniform((args.batch, spec.input_channels, args.size, args.size))
    if not np.all(np.isfinite(probe)):
        print("probe input contains NaN or Inf; gradients cannot be checked", file=sys.stderr)
        return 1

    np_rng = np.random.default_rng(args.seed)
    results = {}
    for op, (arrays, attrs) in _primitive_cases(np_rng).items():
        results[op] = _check_primitive(op, arrays, attrs, np_rng)
    for op in PRIMITIVES:
        if op not in results:
            results[op] = math.nan  # primitive without a probe: report, fail safe
    model_errors = _check_model(spec, probe, np_rng)
    results[f"model:{spec.name}"] = max(model_errors.values())

    ok = True
    print(f"{'check':<24} {'max rel err':>12}")
    for name, err in results.items():
        good = err < GRAD_TOL
        ok &= good
        print(f"{name:<24} {err:>12.3e}  {'ok' if good else 'FAIL'}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_sweep(args):
    families = [f.strip() for f in args.family.split(",") if f.strip()]
    unknown = set(families) - {"convnet", "xnet"}
    if unknown:
        raise UsageError(f"unknown family {sorted(unknown)}; use convnet and/or xnet")
    cfg = _train_config(args)
    images, paths = _load_images(args.data, 1)
    test_images, _ = _load_images(args.test, 1)
    ds = data.sample_patches(images, args.patches, args.patch, args.seed, names=paths)
    rows = train.sweep(families, args.depths, args.xkernels, cfg, ds, test_images,
                       width=args.width, kernel=args.kernel)
    train.write_sweep_csv(rows, args.out)
    for r in rows:
        print(f"{r['family']:<8} depth {r['depth']:>2} xkernel {r['xkernel']:>2} "
              f"params {r['params']:>8} psnr {r['psnr']:.3f}")
    return 0 if any(math.isfinite(r["psnr"]) for r in rows) else 1


def tile(maps, pad=1):
    """Tile (c, h, w) maps into one (1, H, W) grid, min-max normalized as a whole."""
    c, h, w = maps.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    lo, hi = float(maps.min()), float(maps.max())
    scaled = (maps - lo) / (hi - lo) if hi > lo else np.zeros_like(maps)
    grid = np.ones((rows * (h + pad) - pad, cols * (w + pad) - pad))
    for k in range(c):
        r, q = divmod(k, cols)
        grid[r * (h + pad):r * (h + pad) + h, q * (w + pad):q * (w + pad) + w] = scaled[k]
    return grid[None]


def cmd_inspect(args):
    spec, params = models.load_model(args.model)
    n_act = sum(l.kind in ("relu", "xunit") for l in spec.layers)
    if not 1 <= args.layer <= n_act:
        raise UsageError(f"--layer must be in 1..{n_act} for {spec.name}")
    image = data.load_image(args.input)
    x, _ = _restore_channels(spec, image)
    if args.sigma > 0:
        x = data.add_gaussian_noise(x, args.sigma, args.seed)
    acts = []
    tape, _ = models.forward(spec, params, x[None].astype(np.float32), activations=acts)
    act = acts[args.layer - 1]
    z, out = tape[act.z][0], tape[act.out][0]
    gate = nn.binary_gate(z) if act.gate < 0 else tape[act.gate][0]
    os.makedirs(args.out_dir, exist_ok=True)
    for name, maps in (("z", z), ("g", gate), ("x", out)):
        data.save_image(tile(maps), os.path.join(args.out_dir, f"layer{args.layer}_{name}.pgm"))
    if not args.no_raw:
        np.savez(os.path.join(args.out_dir, f"layer{args.layer}_raw.npz"), z=z, g=gate, x=out)
    print(f"layer {args.layer} ({act.kind}, spec index {act.layer}): gate range "
          f"[{gate.min():.4g}, {gate.max():.4g}]; maps in {args.out_dir}")
    return 0


COMMANDS = {
    "train": cmd_train, "denoise": cmd_denoise, "sr": cmd_sr, "psnr": cmd_psnr,
    "count-params": cmd_count_params, "grad-check": cmd_grad_check, "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("xunit")
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        _echo_config(args)
        with _threads():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"xunit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (XUnitError, OSError, ValueError) as exc:
        print(f"xunit {args.command}: {exc}", file=sys.stderr)
        return 1
    finally:
        root.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
