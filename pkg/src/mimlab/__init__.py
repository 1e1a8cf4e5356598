"""Masked image modeling lab: numpy autodiff, a tiny ViT, MAE-family objectives and invariance probes."""

from .analysis import InvarianceCurve, linear_cka, occlusion_invariance_curve, psnr
from .data import Dataset, gen_synthetic, load_dataset
from .masking import JitterParams, JitterScope, PatchMask, sample_mask, transform_pair
from .objectives import AggregationStrategy, NegativePolicy, cmae_loss, infonce, mae_loss, rmae_loss
from .storage import Checkpoint, emit_curve, emit_metrics, load_checkpoint, save_checkpoint
from .tensor import Tensor, grad_check, no_grad
from .training import Mode, TrainConfig, finetune, linear_probe, pretrain, subsample_dataset
from .vit import MaskHandling, ViTConfig, init_params

__version__ = "0.1.0"
