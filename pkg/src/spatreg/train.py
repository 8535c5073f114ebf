"""Coarse-to-fine training loop.

Levels are trained sequentially; once a level's stage finishes its
parameters are frozen. Every iteration draws a random pair and a fresh
per-region weight vector from the configured range, so the network learns
the whole conditioning space rather than one fixed trade-off.
"""

import json
import os

import numpy as np
import torch

from .losses import pyramid_objective
from .network import RegistrationPyramid, RunConfig
from .weighting import build_reg_weights


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def _dump_state(model, config, stage, iteration, lam, curve, diagnostics_dir):
    if diagnostics_dir is None:
        return None
    os.makedirs(diagnostics_dir, exist_ok=True)
    path = os.path.join(diagnostics_dir, "diverged_state.json")
    state = {
        "stage": stage,
        "iteration": iteration,
        "lambda": [float(v) for v in lam],
        "curve_tail": curve[-50:],
        "param_norms": {
            name: float(p.detach().norm())
            for name, p in model.named_parameters()
        },
        "config": config.to_dict(),
    }
    with open(path, "w") as f:
        json.dump(state, f, indent=2)
    return path


def train(pairs, config: RunConfig, progress=False, diagnostics_dir=None):
    """Train a ``RegistrationPyramid`` on a list of phantom pairs.

    Returns ``(model, curve)`` where ``curve`` is one dict per iteration with
    the loss breakdown. All randomness is controlled by ``config.seed``; two
    runs with the same inputs produce bit-identical parameters.
    """
    if len(pairs) == 0:
        raise ValueError("train: empty dataset")
    for i, pair in enumerate(pairs):
        for name in ("fixed", "moving"):
            if not torch.isfinite(getattr(pair, name)).all():
                raise ValueError(f"train: pair {i} has non-finite values in '{name}'")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = RegistrationPyramid(config)
    lo, hi = config.lambda_range

    curve = []
    for stage in range(1, config.levels + 1):
        for idx, net in enumerate(model.level_nets):
            net.requires_grad_(idx == stage - 1)
        opt = torch.optim.Adam(
            model.level_nets[stage - 1].parameters(), lr=config.learning_rate
        )
        for it in range(config.iters_per_level):
            pair = pairs[int(rng.integers(len(pairs)))]
            lam = rng.uniform(lo, hi, size=config.regions)
            weights = build_reg_weights(
                pair.fixed_labels, lam,
                sigma=config.smooth_sigma, window=config.smooth_window,
            )
            try:
                us = model(
                    pair.fixed, pair.moving, weights,
                    max_level=stage, frozen_levels=stage - 1,
                )
                terms = pyramid_objective(
                    pair.fixed, pair.moving, us, weights.lambda_gau,
                    stage, config.levels,
                )
                diverged = not torch.isfinite(terms.total)
            except FloatingPointError:
                diverged = True
            if diverged:
                dump = _dump_state(model, config, stage, it, lam, curve, diagnostics_dir)
                raise TrainingDivergedError(
                    f"non-finite loss at stage {stage} iteration {it}"
                    + (f" (state dumped to {dump})" if dump else ""),
                    dump_path=dump,
                )
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            curve.append({
                "level": stage,
                "iteration": it,
                "total": float(terms.total.detach()),
                "similarity": float(terms.similarity.detach()),
                "regularizer": float(terms.regularizer.detach()),
            })
            if progress and (it % 200 == 0 or it == config.iters_per_level - 1):
                print(
                    f"stage {stage}/{config.levels} iter {it:6d} "
                    f"loss {curve[-1]['total']:+.4f}",
                    flush=True,
                )
    model.requires_grad_(True)
    return model, curve
