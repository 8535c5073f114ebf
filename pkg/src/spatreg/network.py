"""Multi-resolution registration network.

One sub-network per pyramid level, coarse to fine. Each level sees the
fixed image, the moving image pre-warped by the upsampled coarser estimate,
and that estimate itself; it refines the displacement additively. Residual
blocks are conditioned on the regularization weight field, resampled to the
feature resolution of the level.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ConditionedResidualBlock, LEAKY_SLOPE
from .grid import to_deformation, upsample_displacement, image_pyramid, warp
from .weighting import RegWeights, LAMBDA_RANGE, resample_weights

_CONV = {2: nn.Conv2d, 3: nn.Conv3d}
_CONVT = {2: nn.ConvTranspose2d, 3: nn.ConvTranspose3d}


@dataclass
class RunConfig:
    """Everything needed to rebuild and retrain a model deterministically."""

    image_shape: tuple = (64, 64)
    regions: int = 5
    levels: int = 3
    blocks_per_level: int = 5
    width: int = 32
    learning_rate: float = 1e-4
    iters_per_level: int = 20000
    lambda_range: tuple = field(default_factory=lambda: tuple(LAMBDA_RANGE))
    smooth_sigma: float = 0.8
    smooth_window: int = 5
    embed_kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        self.lambda_range = tuple(float(v) for v in self.lambda_range)
        if self.levels < 1:
            raise ValueError("RunConfig: levels must be >= 1")
        if min(self.image_shape) < 4 * 2**self.levels:
            raise ValueError(
                f"RunConfig: image shape {self.image_shape} too small for "
                f"{self.levels} pyramid levels (feature maps would fall below "
                f"4 voxels per axis)"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"RunConfig: unknown fields {sorted(unknown)}")
        return cls(**d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class LevelNetwork(nn.Module):
    """Encoder, conditioned residual trunk and decoder of one pyramid level.

    The encoder halves the grid once; the decoder's transposed convolution
    restores it, so the refinement comes out at the level's own resolution.
    The final convolution is zero-initialized: an untrained network is the
    identity transform.
    """

    def __init__(self, ndim, width, blocks, embed_kernel_size=3):
        super().__init__()
        conv, convt = _CONV[ndim], _CONVT[ndim]
        in_ch = 2 + ndim  # fixed, pre-warped moving, displacement components
        self.encode1 = conv(in_ch, width, 3, padding=1)
        self.encode2 = conv(width, width, 3, stride=2, padding=1)
        self.blocks = nn.ModuleList(
            ConditionedResidualBlock(width, ndim,
                                     embed_kernel_size=embed_kernel_size)
            for _ in range(blocks)
        )
        self.decode = convt(width, width, 2, stride=2)
        self.refine = conv(width, width, 3, padding=1)
        self.to_flow = conv(width, ndim, 3, padding=1)
        nn.init.zeros_(self.to_flow.weight)
        nn.init.zeros_(self.to_flow.bias)

    def forward(self, x, weight_field):
        h = F.leaky_relu(self.encode1(x), LEAKY_SLOPE)
        h = F.leaky_relu(self.encode2(h), LEAKY_SLOPE)
        for block in self.blocks:
            h = block(h, weight_field)
        h = F.leaky_relu(self.decode(h), LEAKY_SLOPE)
        h = F.leaky_relu(self.refine(h), LEAKY_SLOPE)
        return self.to_flow(h)


class RegistrationPyramid(nn.Module):
    """Coarse-to-fine stack of ``LevelNetwork``s driven by one weight field."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        self.ndim = len(config.image_shape)
        if self.ndim not in _CONV:
            raise ValueError(f"RegistrationPyramid: 2D or 3D grids only, got {self.ndim}D")
        self.level_nets = nn.ModuleList(
            LevelNetwork(self.ndim, config.width, config.blocks_per_level,
                         embed_kernel_size=config.embed_kernel_size)
            for _ in range(config.levels)
        )

    def _conditioning_pyramid(self, weights, smoothed):
        """Weight field at each level's feature resolution (coarse first)."""
        fld = weights.field(smoothed) if isinstance(weights, RegWeights) else weights
        num = self.config.levels
        return [
            resample_weights(fld, num - idx, num + 1)
            for idx in range(num)
        ]

    def forward(self, fixed, moving, weights, smoothed=True, max_level=None,
                frozen_levels=0):
        """Displacement estimates per level, coarse to fine.

        ``weights`` is a ``RegWeights`` (or a raw full-resolution field).
        ``max_level`` truncates the pyramid (1-based); the first
        ``frozen_levels`` levels run without gradient tracking, for staged
        training. Entry ``l-1`` of the result lives on the level-``l`` grid.
        """
        cfg = self.config
        num = cfg.levels if max_level is None else int(max_level)
        if not 1 <= num <= cfg.levels:
            raise ValueError(f"forward: max_level {max_level} outside [1, {cfg.levels}]")
        if tuple(fixed.shape) != cfg.image_shape or tuple(moving.shape) != cfg.image_shape:
            raise ValueError(
                f"forward: images must be {cfg.image_shape}, got "
                f"{tuple(fixed.shape)} / {tuple(moving.shape)}"
            )
        if isinstance(weights, RegWeights) and weights.num_regions != cfg.regions:
            raise ValueError(
                f"forward: weight vector has {weights.num_regions} entries, "
                f"model conditions on {cfg.regions}"
            )

        f_pyr = image_pyramid(fixed, cfg.levels)
        m_pyr = image_pyramid(moving, cfg.levels)
        cond = self._conditioning_pyramid(weights, smoothed)

        u = None
        outputs = []
        for idx in range(num):
            grad_ok = torch.is_grad_enabled() and idx >= frozen_levels
            with torch.set_grad_enabled(grad_ok):
                f_l, m_l = f_pyr[idx], m_pyr[idx]
                if u is None:
                    u_in = f_l.new_zeros((self.ndim, *f_l.shape))
                    warped = m_l
                else:
                    u_in = upsample_displacement(u)
                    warped = warp(m_l, to_deformation(u_in))
                x = torch.cat([f_l.unsqueeze(0), warped.unsqueeze(0), u_in]).unsqueeze(0)
                delta = self.level_nets[idx](x, cond[idx]).squeeze(0)
                u = u_in + delta
            outputs.append(u)
        return outputs

    def register(self, fixed, moving, weights, smoothed=True):
        """Full-resolution displacement and deformation for one pair."""
        u = self.forward(fixed, moving, weights, smoothed=smoothed)[-1]
        return u, to_deformation(u)
