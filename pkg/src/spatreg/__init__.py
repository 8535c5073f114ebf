"""Deformable image registration with spatially-variant, tunable
smoothness regularization.

A single trained pyramid network produces deformations under arbitrary
per-region smoothness weights; the weights can then be tuned by gradient
ascent on validation overlap without retraining.
"""

__version__ = "0.1.0"

from .grid import (
    compose,
    downsample,
    downsample_displacement,
    identity_grid,
    to_deformation,
    upsample_displacement,
    warp,
    warp_nearest,
)
from .weighting import (
    LAMBDA_RANGE,
    RegWeights,
    build_reg_weights,
    build_weight_matrix,
    gaussian_smooth,
    resample_weights,
)
from .conditioning import (
    ConditionedResidualBlock,
    ModulatedInstanceNorm,
    instance_normalize,
)
from .losses import (
    LossTerms,
    diffusion_energy,
    ncc_windowed,
    pyramid_objective,
    soft_dice,
    weighted_diffusion,
)
from .metrics import (
    MetricsReport,
    deformation_report,
    dice_hard,
    folding_pct,
    jac_grad_mean,
    jac_std,
    jacobian_det,
)
from .network import RegistrationPyramid, RunConfig
from .train import TrainingDivergedError, train
from .evaluate import aggregate_reports, evaluate_model
from .hyperopt import HyperOptResult, optimize_lambda, sweep_lambda
from .phantoms import GenerationError, PhantomPair, gen_dataset, gen_pair, gen_phantom
