"""Evaluation metrics: per-region Dice overlap, folding percentage and
Jacobian-determinant smoothness statistics of a deformation field."""

import warnings
from dataclasses import dataclass

import torch

from .grid import warp_nearest


def _central_gradients(field):
    """Central differences of a (*spatial) field, cropped to the common interior."""
    ndim = field.dim()
    if any(s < 3 for s in field.shape):
        raise ValueError(
            f"central differences need >= 3 voxels per axis, got {tuple(field.shape)}"
        )
    grads = []
    for axis in range(ndim):
        g = (field.narrow(axis, 2, field.shape[axis] - 2)
             - field.narrow(axis, 0, field.shape[axis] - 2)) / 2.0
        for other in range(ndim):
            if other != axis:
                g = g.narrow(other, 1, field.shape[other] - 2)
        grads.append(g)
    return grads


def jacobian_det(phi):
    """Jacobian determinant of a deformation field on interior voxels.

    ``phi`` is ``(ndim, *spatial)`` with absolute voxel coordinates; central
    differences are used, so the returned field is trimmed by one voxel per
    side. The identity map yields 1 everywhere.
    """
    ndim = phi.shape[0]
    if any(s < 3 for s in phi.shape[1:]):
        raise ValueError(
            f"jacobian_det: grid too small for central differences, {tuple(phi.shape[1:])}"
        )
    jac = [_central_gradients(phi[c]) for c in range(ndim)]  # jac[c][a] = d phi_c / d x_a
    if ndim == 1:
        return jac[0][0]
    if ndim == 2:
        return jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
    if ndim == 3:
        return (
            jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
            - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
            + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
        )
    raise ValueError(f"jacobian_det: unsupported dimensionality {ndim}")


def folding_pct(jdet):
    """Percentage of interior voxels with a negative Jacobian determinant."""
    if jdet.numel() == 0:
        raise ValueError("folding_pct: empty determinant field")
    return float(100.0 * (jdet.detach() < 0).double().mean())


def jac_grad_mean(jdet):
    """Mean finite-difference gradient magnitude of the determinant field."""
    if jdet.numel() == 0:
        raise ValueError("jac_grad_mean: empty determinant field")
    grads = _central_gradients(jdet.detach())
    mag = torch.sqrt(sum(g * g for g in grads))
    return float(mag.mean())


def jac_std(jdet):
    """Standard deviation of the determinant field over the interior."""
    if jdet.numel() == 0:
        raise ValueError("jac_std: empty determinant field")
    return float(jdet.detach().double().std(correction=0))


def dice_hard(labels_a, labels_b, num_regions):
    """Per-region hard Dice overlap of two integer label maps.

    A region absent from both maps scores 1 by convention (flagged with a
    warning). Returns a (num_regions,) float tensor.
    """
    if labels_a.shape != labels_b.shape:
        raise ValueError("dice_hard: label map shapes differ")
    scores = torch.empty(num_regions, dtype=torch.float64)
    for k in range(num_regions):
        a = labels_a == k
        b = labels_b == k
        size = float(a.sum() + b.sum())
        if size == 0:
            warnings.warn(f"dice_hard: region {k} absent from both label maps")
            scores[k] = 1.0
        else:
            scores[k] = 2.0 * float((a & b).sum()) / size
    return scores


@dataclass
class MetricsReport:
    """Registration quality summary for one image pair."""

    dice_per_region: list
    dice_avg: float
    folding_pct: float
    jac_grad_mean: float
    jac_std: float

    def to_dict(self):
        return {
            "dice_per_region": [float(d) for d in self.dice_per_region],
            "dice_avg": float(self.dice_avg),
            "folding_pct": float(self.folding_pct),
            "jac_grad_mean": float(self.jac_grad_mean),
            "jac_std": float(self.jac_std),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            dice_per_region=list(d["dice_per_region"]),
            dice_avg=float(d["dice_avg"]),
            folding_pct=float(d["folding_pct"]),
            jac_grad_mean=float(d["jac_grad_mean"]),
            jac_std=float(d["jac_std"]),
        )


def deformation_report(phi, fixed_labels, moving_labels, num_regions):
    """Warp the moving labels by ``phi`` (nearest-neighbour) and summarize
    overlap and deformation regularity against the fixed labels."""
    warped = warp_nearest(moving_labels, phi)
    dice = dice_hard(fixed_labels, warped, num_regions)
    jdet = jacobian_det(phi)
    return MetricsReport(
        dice_per_region=[float(d) for d in dice],
        dice_avg=float(dice.mean()),
        folding_pct=folding_pct(jdet),
        jac_grad_mean=jac_grad_mean(jdet),
        jac_std=jac_std(jdet),
    )
