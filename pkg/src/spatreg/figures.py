"""Figure rendering for the report paths of the command-line tool.

Every figure is rendered straight to a file next to the delimited output it
visualizes; nothing here opens a window.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 120


def _mid_slice(array):
    """2D view of a field: identity in 2D, central axial slice in 3D."""
    a = np.asarray(array)
    if a.ndim == 3:
        return a[a.shape[0] // 2]
    return a


def save_training_curve(curve, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    levels = sorted({row["level"] for row in curve})
    offset = 0
    for level in levels:
        rows = [r for r in curve if r["level"] == level]
        xs = np.arange(offset, offset + len(rows))
        ax.plot(xs, [r["total"] for r in rows], lw=0.8, label=f"level {level}")
        offset += len(rows)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_sweep_figure(rows, region_index, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r["lambda_k"] for r in rows]
    num_regions = len([k for k in rows[0] if k.startswith("dice_")])
    for i in range(num_regions):
        style = "-o" if i == region_index else "--s"
        ax.plot(xs, [r[f"dice_{i}"] for r in rows], style, ms=4,
                label=f"region {i}" + (" (swept)" if i == region_index else ""))
    ax.set_xscale("log")
    ax.set_xlabel(f"weight of region {region_index}")
    ax.set_ylabel("Dice")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_trajectory_figure(trajectory, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    steps = [t["step"] for t in trajectory]
    ax1.plot(steps, [t["soft_dice"] for t in trajectory], lw=1.0)
    ax1.set_xlabel("step")
    ax1.set_ylabel("validation soft Dice")
    lam = np.array([t["lambda"] for t in trajectory])
    for i in range(lam.shape[1]):
        ax2.plot(steps, lam[:, i], lw=1.0, label=f"region {i}")
    ax2.set_xlabel("step")
    ax2.set_ylabel("weight")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_register_panel(fixed, moving, warped, jdet, path):
    panels = [
        ("fixed", _mid_slice(fixed), "gray", None),
        ("moving", _mid_slice(moving), "gray", None),
        ("warped moving", _mid_slice(warped), "gray", None),
        ("|warped - fixed|", np.abs(_mid_slice(warped) - _mid_slice(fixed)), "magma", None),
        ("Jacobian det", _mid_slice(jdet), "coolwarm", (0.0, 2.0)),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2))
    for ax, (title, img, cmap, clim) in zip(axes, panels):
        im = ax.imshow(img, cmap=cmap)
        if clim:
            im.set_clim(*clim)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_dice_boxplot(reports, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    num_regions = len(reports[0].dice_per_region)
    data = [
        [r.dice_per_region[i] for r in reports] for i in range(num_regions)
    ]
    ax.boxplot(data, tick_labels=[f"region {i}" for i in range(num_regions)])
    ax.set_ylabel("Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
