"""Spatially-adaptive conditional normalization.

Feature maps are instance-normalized, then modulated voxelwise by scale and
bias maps predicted from the resampled regularization weight field. This is
what lets a single trained network change its output deformation when the
per-region smoothness weights change.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

_CONV = {1: nn.Conv1d, 2: nn.Conv2d, 3: nn.Conv3d}

LEAKY_SLOPE = 0.2


def instance_normalize(h, eps=1e-5):
    """Standardize each channel of each instance over its spatial dims.

    ``h`` is ``(batch, channels, *spatial)``; output channels have mean 0 and
    std 1 up to ``eps`` (constant channels collapse to ~0).
    """
    dims = tuple(range(2, h.dim()))
    mu = h.mean(dim=dims, keepdim=True)
    var = h.var(dim=dims, unbiased=False, keepdim=True)
    return (h - mu) / torch.sqrt(var + eps)


def _as_conditioning(weight_field, h):
    """Weight field as (1, 1, *spatial), checked against the feature grid."""
    w = weight_field
    if w.dim() == h.dim() - 2:
        w = w.unsqueeze(0).unsqueeze(0)
    if tuple(w.shape[-(h.dim() - 2):]) != tuple(h.shape[2:]):
        raise ValueError(
            f"conditioning grid {tuple(weight_field.shape)} does not match "
            f"feature grid {tuple(h.shape[2:])}"
        )
    return w


class ModulatedInstanceNorm(nn.Module):
    """Instance norm with spatial scale/bias maps predicted from a weight field.

    The field is embedded by a shared convolution, then two parallel
    convolutions emit a full-resolution scale map (parameterized as
    1 + residual) and bias map. The output convolutions are zero-initialized
    so the layer starts out as plain instance normalization; embedding
    convolutions use replicate padding, so a spatially constant field yields
    spatially constant modulation.
    """

    def __init__(self, channels, ndim, embed_channels=None, kernel_size=3, eps=1e-5):
        super().__init__()
        conv = _CONV[ndim]
        embed_channels = channels if embed_channels is None else embed_channels
        pad = kernel_size // 2
        self.eps = eps
        self.embed = conv(1, embed_channels, kernel_size, padding=pad,
                          padding_mode="replicate")
        self.to_scale = conv(embed_channels, channels, kernel_size, padding=pad,
                             padding_mode="replicate")
        self.to_bias = conv(embed_channels, channels, kernel_size, padding=pad,
                            padding_mode="replicate")
        nn.init.zeros_(self.to_scale.weight)
        nn.init.zeros_(self.to_scale.bias)
        nn.init.zeros_(self.to_bias.weight)
        nn.init.zeros_(self.to_bias.bias)

    def forward(self, h, weight_field):
        w = _as_conditioning(weight_field, h)
        normalized = instance_normalize(h, self.eps)
        e = F.leaky_relu(self.embed(w), LEAKY_SLOPE)
        scale = 1.0 + self.to_scale(e)
        bias = self.to_bias(e)
        return scale * normalized + bias


class ConditionedResidualBlock(nn.Module):
    """Pre-activation residual block with two modulated normalizations.

    x -> norm -> LeakyReLU -> conv -> norm -> LeakyReLU -> conv -> (+ x)
    """

    def __init__(self, channels, ndim, kernel_size=3, embed_kernel_size=3, eps=1e-5):
        super().__init__()
        conv = _CONV[ndim]
        pad = kernel_size // 2
        self.norm1 = ModulatedInstanceNorm(channels, ndim,
                                           kernel_size=embed_kernel_size, eps=eps)
        self.conv1 = conv(channels, channels, kernel_size, padding=pad)
        self.norm2 = ModulatedInstanceNorm(channels, ndim,
                                           kernel_size=embed_kernel_size, eps=eps)
        self.conv2 = conv(channels, channels, kernel_size, padding=pad)

    def forward(self, h, weight_field):
        expected = self.conv1.weight.shape[1]
        if h.shape[1] != expected:
            raise ValueError(
                f"block expects {expected} channels on the skip path, got {h.shape[1]}"
            )
        out = self.conv1(F.leaky_relu(self.norm1(h, weight_field), LEAKY_SLOPE))
        out = self.conv2(F.leaky_relu(self.norm2(out, weight_field), LEAKY_SLOPE))
        return out + h
