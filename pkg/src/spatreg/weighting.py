"""Spatially-variant regularization weighting built from a region label map.

Each of the K regions gets its own smoothness weight; the rasterized weight
field is Gaussian-smoothed to avoid discontinuities at region boundaries.
Both the raw and the smoothed field are kept so their effect can be compared.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .grid import downsample

# Weights are drawn from this range during training; inputs are clamped to it.
LAMBDA_RANGE = (0.0, 10.0)

DEFAULT_SIGMA = 0.8
DEFAULT_WINDOW = 5


@dataclass
class RegWeights:
    """Per-region weight vector plus its rasterized weight fields."""

    lambda_vec: torch.Tensor    # (K,)
    lambda_field: torch.Tensor  # (*spatial), pointwise lookup
    lambda_gau: torch.Tensor    # (*spatial), Gaussian-smoothed
    sigma: float = DEFAULT_SIGMA
    window: int = DEFAULT_WINDOW

    @property
    def num_regions(self):
        return int(self.lambda_vec.numel())

    def field(self, smoothed=True):
        return self.lambda_gau if smoothed else self.lambda_field


def build_weight_matrix(labels, lambda_vec):
    """Pointwise lookup: weight at voxel x is lambda_vec[labels[x]].

    Differentiable with respect to ``lambda_vec``. Values are clamped into
    ``LAMBDA_RANGE``; negative weights and out-of-range label ids raise.
    """
    lam = torch.as_tensor(lambda_vec, dtype=torch.float32) \
        if not torch.is_tensor(lambda_vec) else lambda_vec
    if lam.dim() != 1 or lam.numel() < 1:
        raise ValueError("build_weight_matrix: lambda_vec must be a non-empty vector")
    if (lam < 0).any():
        raise ValueError("build_weight_matrix: region weights must be non-negative")
    labels = labels.long()
    num_regions = lam.numel()
    if labels.numel() == 0:
        raise ValueError("build_weight_matrix: empty label map")
    if int(labels.min()) < 0 or int(labels.max()) >= num_regions:
        raise ValueError(
            f"build_weight_matrix: label ids must lie in [0, {num_regions - 1}], "
            f"got range [{int(labels.min())}, {int(labels.max())}]"
        )
    lam = lam.clamp(*LAMBDA_RANGE)
    return lam[labels]


def gaussian_kernel1d(sigma=DEFAULT_SIGMA, window=DEFAULT_WINDOW, dtype=torch.float64):
    """Normalized Gaussian taps exp(-x^2 / 2 sigma^2), x in {-w//2 .. w//2}."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"gaussian_kernel1d: window must be odd, got {window}")
    if sigma <= 0:
        raise ValueError(f"gaussian_kernel1d: sigma must be positive, got {sigma}")
    x = torch.arange(window, dtype=dtype) - window // 2
    k = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _smooth_along_axis(field, kernel, axis):
    pad = kernel.numel() // 2
    moved = field.movedim(axis, -1)
    lead_shape = moved.shape[:-1]
    flat = moved.reshape(-1, 1, moved.shape[-1])
    padded = F.pad(flat, (pad, pad), mode="replicate")
    out = F.conv1d(padded, kernel.reshape(1, 1, -1))
    return out.reshape(*lead_shape, -1).movedim(-1, axis)


def gaussian_smooth(field, sigma=DEFAULT_SIGMA, window=DEFAULT_WINDOW):
    """Separable Gaussian smoothing with edge-replicate padding.

    The kernel is truncated to ``window`` taps per axis and renormalized to
    sum 1, so smoothing is a convex combination: output values stay within
    [min(field), max(field)] and constant fields are fixed points.
    """
    kernel = gaussian_kernel1d(sigma, window).to(field.dtype)
    out = field
    for axis in range(field.dim()):
        out = _smooth_along_axis(out, kernel, axis)
    return out


def resample_weights(field, level, num_levels=3):
    """Weight field at pyramid resolution ``level`` (0 = unchanged, full grid)."""
    if not 0 <= level < num_levels:
        raise ValueError(
            f"resample_weights: level {level} outside [0, {num_levels - 1}]"
        )
    out = field
    for _ in range(level):
        out = downsample(out)
    return out


def build_reg_weights(labels, lambda_vec, sigma=DEFAULT_SIGMA, window=DEFAULT_WINDOW):
    """Rasterize per-region weights into both raw and smoothed fields."""
    lam = torch.as_tensor(lambda_vec, dtype=torch.float32) \
        if not torch.is_tensor(lambda_vec) else lambda_vec
    field = build_weight_matrix(labels, lam)
    return RegWeights(
        lambda_vec=lam,
        lambda_field=field,
        lambda_gau=gaussian_smooth(field, sigma, window),
        sigma=sigma,
        window=window,
    )
