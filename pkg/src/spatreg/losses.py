"""Training objectives: windowed NCC similarity, weighted diffusion
regularizer, the per-level pyramid objective and soft Dice overlap."""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .grid import downsample, to_deformation, warp
from .weighting import resample_weights

EPS = 1e-5

_CONV = {1: F.conv1d, 2: F.conv2d, 3: F.conv3d}


@dataclass
class LossTerms:
    similarity: torch.Tensor   # negated weighted NCC sum, lower is better
    regularizer: torch.Tensor  # >= 0
    total: torch.Tensor        # similarity + regularizer
    per_scale: list = field(default_factory=list)  # (scale, weight, ncc) triples


def ncc_windowed(a, b, window):
    """Mean local normalized cross-correlation over all w^D windows, in [-1, 1].

    Local statistics are taken over valid (fully inside) windows; variances
    are guarded by a small epsilon so constant patches correlate to 0.
    Symmetric in (a, b) and differentiable in both.
    """
    if a.shape != b.shape:
        raise ValueError(f"ncc_windowed: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"ncc_windowed: window must be odd, got {window}")
    ndim = a.dim()
    if ndim not in _CONV:
        raise ValueError(f"ncc_windowed: only 1-3 spatial dims supported, got {ndim}")
    if window > min(a.shape):
        raise ValueError(
            f"ncc_windowed: window {window} exceeds image extent {tuple(a.shape)}"
        )
    stacked = torch.stack([a, b, a * a, b * b, a * b]).unsqueeze(1)
    ones = torch.ones((1, 1) + (window,) * ndim, dtype=a.dtype, device=a.device)
    sums = _CONV[ndim](stacked, ones)
    a_s, b_s, aa_s, bb_s, ab_s = sums[:, 0]
    n = float(window**ndim)
    cross = ab_s - a_s * b_s / n
    var_a = (aa_s - a_s * a_s / n).clamp_min(0.0)
    var_b = (bb_s - b_s * b_s / n).clamp_min(0.0)
    cc = cross / torch.sqrt(var_a * var_b + EPS)
    return cc.mean()


def weighted_diffusion(u, weight_field):
    """Smoothness penalty: squared forward differences of ``u`` scaled by the
    squared weight field at the base voxel; mean over voxels, summed over
    components and axes. Zero iff the displacement is constant (for positive
    weights)."""
    ndim = u.dim() - 1
    if tuple(weight_field.shape) != tuple(u.shape[1:]):
        raise ValueError(
            f"weighted_diffusion: weight grid {tuple(weight_field.shape)} does "
            f"not match displacement grid {tuple(u.shape[1:])}"
        )
    total = u.new_zeros(())
    for axis in range(ndim):
        d = u.diff(dim=axis + 1)
        w = weight_field.narrow(axis, 0, weight_field.shape[axis] - 1)
        e = (w.unsqueeze(0) * d) ** 2
        total = total + e.reshape(u.shape[0], -1).mean(dim=1).sum()
    return total


def diffusion_energy(u):
    """Unweighted mean squared-gradient energy of a displacement field."""
    return weighted_diffusion(u, torch.ones_like(u[0]))


def pyramid_objective(fixed, moving, u_levels, weight_field, level, num_levels=None):
    """Objective at pyramid ``level`` (1-based, ``num_levels`` is finest).

    The moving image is warped at the level's resolution, then similarity is
    accumulated over scales i = level .. 1 with weight 1/2^(level-i) and
    window 1 + 2i, halving the image pair between scales. The smoothness
    penalty is evaluated once, at the level's resolution, with the weight
    field resampled to match.
    """
    if num_levels is None:
        num_levels = len(u_levels)
    if not 1 <= level <= num_levels:
        raise ValueError(f"pyramid_objective: level {level} outside [1, {num_levels}]")
    if fixed.shape != moving.shape:
        raise ValueError("pyramid_objective: fixed/moving shapes differ")

    steps = num_levels - level
    f_l, m_l, lam_l = fixed, moving, weight_field
    for _ in range(steps):
        f_l, m_l = downsample(f_l), downsample(m_l)
    lam_l = resample_weights(weight_field, steps, num_levels)

    u = u_levels[level - 1]
    if tuple(u.shape[1:]) != tuple(f_l.shape):
        raise ValueError(
            f"pyramid_objective: displacement grid {tuple(u.shape[1:])} does not "
            f"match level-{level} image grid {tuple(f_l.shape)}"
        )

    warped = warp(m_l, to_deformation(u))
    similarity = u.new_zeros(())
    per_scale = []
    a, b = f_l, warped
    for i in range(level, 0, -1):
        weight = 1.0 / 2 ** (level - i)
        value = ncc_windowed(a, b, 1 + 2 * i)
        similarity = similarity - weight * value
        per_scale.append((i, weight, value))
        if i > 1:
            a, b = downsample(a), downsample(b)

    regularizer = weighted_diffusion(u, lam_l)
    return LossTerms(
        similarity=similarity,
        regularizer=regularizer,
        total=similarity + regularizer,
        per_scale=per_scale,
    )


def soft_dice(a, b, eps=EPS):
    """Mean soft Dice overlap of two (K, *spatial) fractional mask stacks, in [0, 1].

    Differentiable, so it can drive gradient-based tuning through linearly
    warped one-hot masks."""
    if a.shape != b.shape:
        raise ValueError(
            f"soft_dice: mask stacks differ, {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    k = a.shape[0]
    a_flat = a.reshape(k, -1)
    b_flat = b.reshape(k, -1)
    inter = (a_flat * b_flat).sum(dim=1)
    denom = a_flat.sum(dim=1) + b_flat.sum(dim=1) + eps
    return (2.0 * inter / denom).mean()
