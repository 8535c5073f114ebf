"""Post-training tuning of the per-region weight vector.

The network stays frozen; soft Dice of linearly warped one-hot masks is
maximized by gradient ascent on the weight vector itself, which reaches the
network through the rasterized, smoothed weight field. One-at-a-time sweeps
quantify how localized the control of each region's weight is.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .evaluate import evaluate_model
from .grid import warp
from .losses import soft_dice
from .weighting import LAMBDA_RANGE, build_reg_weights


@dataclass
class HyperOptResult:
    lambda_star: np.ndarray
    best_dice: float
    trajectory: list  # dicts: {"step", "lambda", "soft_dice"}

    def to_dict(self):
        return {
            "lambda_star": [float(v) for v in self.lambda_star],
            "best_dice": float(self.best_dice),
            "trajectory": self.trajectory,
        }


def soft_masks(labels, num_regions, dtype=torch.float32):
    """One-hot (num_regions, *spatial) float stack of a label map."""
    flat = torch.nn.functional.one_hot(labels.long(), num_regions)
    return flat.movedim(-1, 0).to(dtype)


def validation_soft_dice(model, pairs, lambda_vec, smoothed=True):
    """Mean soft Dice over pairs; differentiable in ``lambda_vec``."""
    cfg = model.config
    total = None
    for pair in pairs:
        weights = build_reg_weights(
            pair.fixed_labels, lambda_vec,
            sigma=cfg.smooth_sigma, window=cfg.smooth_window,
        )
        _, phi = model.register(pair.fixed, pair.moving, weights, smoothed=smoothed)
        warped = warp(soft_masks(pair.moving_labels, cfg.regions), phi)
        target = soft_masks(pair.fixed_labels, cfg.regions)
        d = soft_dice(warped, target)
        total = d if total is None else total + d
    return total / len(pairs)


def optimize_lambda(model, val_pairs, lambda_init, steps=100, lr=0.1, smoothed=True):
    """Gradient ascent on the weight vector with frozen network parameters.

    The initial vector is projected into the admissible range, and so is the
    iterate after every step. The returned vector is the best one actually
    evaluated, not the final iterate.
    """
    if len(val_pairs) == 0:
        raise ValueError("optimize_lambda: empty validation set")
    cfg = model.config
    init = np.clip(np.asarray(lambda_init, dtype=np.float64), *LAMBDA_RANGE)
    if init.shape != (cfg.regions,):
        raise ValueError(
            f"optimize_lambda: init needs {cfg.regions} entries, got {init.shape}"
        )
    if steps == 0:
        return HyperOptResult(lambda_star=init, best_dice=float("nan"), trajectory=[])

    grad_flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    try:
        lam = torch.tensor(init, dtype=torch.float32, requires_grad=True)
        opt = torch.optim.Adam([lam], lr=lr)
        trajectory = []
        best_dice, best_lambda = -float("inf"), init
        for step in range(steps + 1):
            d = validation_soft_dice(model, val_pairs, lam, smoothed=smoothed)
            value = float(d.detach())
            current = lam.detach().numpy().astype(np.float64).copy()
            trajectory.append({
                "step": step,
                "lambda": [float(v) for v in current],
                "soft_dice": value,
            })
            if value > best_dice:
                best_dice, best_lambda = value, current
            if step == steps:
                break
            opt.zero_grad()
            (-d).backward()
            if not torch.isfinite(lam.grad).all():
                raise RuntimeError(
                    f"optimize_lambda: non-finite gradient at step {step}, "
                    f"lambda={current.tolist()}"
                )
            opt.step()
            with torch.no_grad():
                lam.clamp_(*LAMBDA_RANGE)
    finally:
        for p, flag in zip(model.parameters(), grad_flags):
            p.requires_grad_(flag)
    return HyperOptResult(
        lambda_star=best_lambda, best_dice=best_dice, trajectory=trajectory
    )


def sweep_lambda(model, pairs, region_index, grid, base_lambda=None, smoothed=True):
    """Vary one region's weight over ``grid`` with the others held fixed.

    Returns one row per grid value: the swept weight, mean per-region Dice
    and mean folding percentage over ``pairs``.
    """
    k = model.config.regions
    if not 0 <= region_index < k:
        raise ValueError(f"sweep_lambda: region {region_index} outside [0, {k - 1}]")
    base = np.ones(k) if base_lambda is None else np.asarray(base_lambda, dtype=np.float64)
    if base.shape != (k,):
        raise ValueError(f"sweep_lambda: base vector needs {k} entries")
    rows = []
    for value in grid:
        lam = base.copy()
        lam[region_index] = value
        reports = evaluate_model(model, pairs, lam, smoothed=smoothed)
        n = len(reports)
        row = {"lambda_k": float(value)}
        for i in range(k):
            row[f"dice_{i}"] = sum(r.dice_per_region[i] for r in reports) / n
        row["folding_pct"] = sum(r.folding_pct for r in reports) / n
        rows.append(row)
    return rows
