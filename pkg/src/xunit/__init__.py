"""Spatial gating activations (xUnits) and the networks built from them, in numpy."""

from .autodiff import Param, ParamStore, Tape, backward, grad_check
from .data import (PatchDataset, add_gaussian_noise, bicubic_resize, load_image, sample_patches,
                   save_image, sr_degrade, synthetic_images)
from .errors import (ContractError, DataError, DimensionError, FormatError, GraphError, SpecError,
                     TrainingError, XUnitError)
from .models import (ModelSpec, LayerSpec, build, build_convnet, build_xnet, count_params,
                     init_params, load_model, predict, save_model)
from .nn import XUnitSpec, xunit_forward, xunit_param_count
from .rng import PortableRNG
from .train import TrainConfig, evaluate_denoising, infer, psnr, sweep

__version__ = "0.1.0"
