"""Sparse-angle CT reconstruction with self-supervised deep equilibrium models."""

from .classical import TVConfig, fbp, tv_reconstruct
from .config import ConfigError, RunConfig, load_config
from .denoiser import DenoiserParams, DenoiserSpec, denoiser_forward, denoiser_vjp, init_denoiser
from .deq import DEQConfig, FixedPointResult, apply_t_theta, fixed_point_solve
from .metrics import psnr, ssim
from .phantoms import phantom_set, shepp_logan
from .sampling import AngleMask, MaskDistribution, compute_weight_diagonal, sample_mask, uniform_subset
from .tomo import Geometry, masked_forward, radon_adjoint, radon_forward
from .training import NoiseConfig, TrainConfig, jfb_gradient, train

__version__ = "0.1.0"
