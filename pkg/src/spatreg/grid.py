"""Dimension-agnostic (2D/3D) grid arithmetic for deformable registration.

Conventions used across the package:
  * images / scalar fields are plain ``(*spatial)`` tensors,
  * vector fields are ``(ndim, *spatial)`` tensors in voxel units with
    axis-ordered components (component d moves along spatial axis d),
  * a deformation field stores absolute voxel coordinates, i.e.
    ``identity_grid(shape) + displacement``.

All functions are pure and differentiable where that matters (warping is
differentiable with respect to both the image and the coordinates).
"""

import itertools

import torch
import torch.nn.functional as F

# Smallest spatial extent that still supports finite differences and the
# sliding similarity windows used elsewhere in the package.
MIN_EXTENT = 4


def identity_grid(shape, dtype=torch.float32, device=None):
    """Deformation field of the identity map: voxel (i, j[, k]) holds (i, j[, k])."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("identity_grid: shape must be non-empty")
    if any(s < 1 for s in shape):
        raise ValueError(f"identity_grid: all dims must be >= 1, got {shape}")
    axes = [torch.arange(s, dtype=dtype, device=device) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def to_deformation(u):
    """phi = identity + u, elementwise."""
    return identity_grid(u.shape[1:], dtype=u.dtype, device=u.device) + u


def compose(phi, u):
    """Add a displacement on top of a deformation (additive convention)."""
    if phi.shape != u.shape:
        raise ValueError(
            f"compose: field shapes differ, {tuple(phi.shape)} vs {tuple(u.shape)}"
        )
    return phi + u


def _corner_weights_and_indices(phi):
    """Clamped floor coordinates, interpolation fractions and flat strides."""
    ndim = phi.shape[0]
    spatial = tuple(phi.shape[1:])
    if torch.isnan(phi).any():
        raise FloatingPointError("warp: deformation contains NaN coordinates")
    lo, frac = [], []
    for d in range(ndim):
        c = phi[d].clamp(0.0, float(spatial[d] - 1))
        base = c.floor()
        lo.append(base.long())
        frac.append(c - base)
    strides = [1] * ndim
    for d in reversed(range(ndim - 1)):
        strides[d] = strides[d + 1] * spatial[d + 1]
    return spatial, lo, frac, strides


def warp(img, phi):
    """Sample ``img`` at the coordinates of deformation ``phi`` (multilinear).

    ``img`` is ``(*spatial)`` or ``(channels, *spatial)``; ``phi`` is
    ``(ndim, *spatial)`` in voxel units. Out-of-bounds coordinates clamp to
    the nearest edge voxel. Differentiable in both arguments.
    """
    ndim = phi.shape[0]
    spatial = tuple(phi.shape[1:])
    if tuple(img.shape[-ndim:]) != spatial:
        raise ValueError(
            f"warp: image grid {tuple(img.shape)} does not match deformation "
            f"grid {tuple(phi.shape)}"
        )
    lead = tuple(img.shape[:-ndim])
    flat = img.reshape(*lead, -1)
    spatial, lo, frac, strides = _corner_weights_and_indices(phi)

    out = None
    for corner in itertools.product((0, 1), repeat=ndim):
        idx = None
        w = None
        for d, hi in enumerate(corner):
            if hi:
                i_d = (lo[d] + 1).clamp(max=spatial[d] - 1)
                w_d = frac[d]
            else:
                i_d = lo[d]
                w_d = 1.0 - frac[d]
            idx = i_d * strides[d] if idx is None else idx + i_d * strides[d]
            w = w_d if w is None else w * w_d
        vals = flat[..., idx.reshape(-1)].reshape(*lead, *spatial)
        out = w * vals if out is None else out + w * vals
    return out


def warp_nearest(labels, phi):
    """Nearest-neighbour sampling, for integer label maps."""
    ndim = phi.shape[0]
    spatial = tuple(phi.shape[1:])
    if tuple(labels.shape[-ndim:]) != spatial:
        raise ValueError(
            f"warp_nearest: label grid {tuple(labels.shape)} does not match "
            f"deformation grid {tuple(phi.shape)}"
        )
    if torch.isnan(phi).any():
        raise FloatingPointError("warp_nearest: deformation contains NaN coordinates")
    lead = tuple(labels.shape[:-ndim])
    flat = labels.reshape(*lead, -1)
    idx = None
    stride = 1
    for d in reversed(range(ndim)):
        i_d = phi[d].round().long().clamp(0, spatial[d] - 1)
        idx = i_d * stride if idx is None else idx + i_d * stride
        stride *= spatial[d]
    return flat[..., idx.reshape(-1)].reshape(*lead, *spatial)


_POOL = {1: F.avg_pool1d, 2: F.avg_pool2d, 3: F.avg_pool3d}


def _halve(x, ndim):
    """3-tap average smoothing followed by stride-2 sampling along each axis."""
    spatial = x.shape[-ndim:]
    out_shape = tuple((s + 1) // 2 for s in spatial)
    if any(s < MIN_EXTENT for s in out_shape):
        raise ValueError(
            f"downsample: target dims {out_shape} fall below the minimum "
            f"extent {MIN_EXTENT}"
        )
    lead = x.shape[:-ndim]
    flat = x.reshape(1, -1, *spatial) if lead else x.reshape(1, 1, *spatial)
    pooled = _POOL[ndim](
        flat, kernel_size=3, stride=2, padding=1, count_include_pad=False
    )
    return pooled.reshape(*lead, *pooled.shape[2:])


def downsample(img):
    """Halve every axis of an image / scalar field (values unchanged)."""
    return _halve(img, img.dim())


def downsample_displacement(u):
    """Halve the grid of a displacement field; components rescale to coarse-voxel units."""
    return _halve(u, u.dim() - 1) * 0.5


_INTERP_MODE = {1: "linear", 2: "bilinear", 3: "trilinear"}


def upsample_displacement(u):
    """Double the grid of a displacement field; components rescale to fine-voxel units."""
    ndim = u.dim() - 1
    up = F.interpolate(
        u.unsqueeze(0),
        scale_factor=2,
        mode=_INTERP_MODE[ndim],
        align_corners=True,
    ).squeeze(0)
    return up * 2.0


def image_pyramid(img, num_levels):
    """Coarse-to-fine list of progressively halved images; last entry is ``img``."""
    levels = [img]
    for _ in range(num_levels - 1):
        levels.append(downsample(levels[-1]))
    return levels[::-1]
