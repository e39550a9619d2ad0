"""Small-scale ConvNet vs xNet denoising comparison.

Both networks are trained on random crops of procedurally generated
grayscale images with identical configuration and then scored by mean PSNR
on held-out images.  :func:`run_trend` writes each trained model and its
training log, so two runs with the same seed can be compared byte for byte.
"""

import os
from dataclasses import asdict, dataclass, replace

from . import models, train
from .data import sample_patches, synthetic_images


@dataclass(frozen=True)
class TrendConfig:
    train_images: int = 20
    test_images: int = 5
    image_size: int = 128
    patch: int = 80
    patches_per_image: int = 64
    batch_size: int = 64
    steps: int = 4000
    sigma_255: float = 25.0
    seed: int = 2024
    width: int = 64
    convnet_depth: int = 5
    xnet_depth: int = 3
    xkernel: int = 9
    log_interval: int = 100


def trend_models(cfg):
    return {
        "convnet": models.build_convnet(cfg.convnet_depth, cfg.width),
        "xnet": models.build_xnet(cfg.xnet_depth, cfg.width, xkernel=cfg.xkernel),
    }


def trend_data(cfg):
    """Training patches and held-out clean images; disjoint seeds keep them independent."""
    images = synthetic_images(cfg.train_images, cfg.image_size, seed=cfg.seed)
    held_out = synthetic_images(cfg.test_images, cfg.image_size, seed=cfg.seed + 1)
    patches = sample_patches(images, cfg.train_images * cfg.patches_per_image, cfg.patch, cfg.seed)
    return patches, held_out


def run_trend(cfg, out_dir=None, families=("convnet", "xnet")):
    """Train the selected families; returns ``{family: {"params", "psnr", "files"}}``."""
    patches, held_out = trend_data(cfg)
    tcfg = train.TrainConfig(batch_size=cfg.batch_size, total_steps=cfg.steps,
                             sigma_255=cfg.sigma_255, seed=cfg.seed, log_interval=cfg.log_interval)
    results = {}
    for family, spec in trend_models(cfg).items():
        if family not in families:
            continue
        result = train.train(spec, patches, tcfg)
        score = train.evaluate_denoising(spec, result.params, held_out, cfg.sigma_255, cfg.seed)
        files = []
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            model_path = os.path.join(out_dir, f"{family}.xumd")
            log_path = os.path.join(out_dir, f"{family}.log.csv")
            models.save_model(spec, result.params, model_path)
            train.write_log_csv(result.log, log_path)
            files = [model_path, log_path]
        results[family] = {"params": models.count_params(spec), "psnr": score, "files": files}
    return results


def scaled(cfg, **changes):
    return replace(cfg, **changes)


def config_dict(cfg):
    return asdict(cfg)
