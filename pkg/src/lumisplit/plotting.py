"""Report figures: loss curves from the run log and per-frame mask panels."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import linear_to_srgb  # noqa: E402

LOSS_TERMS = ("l_lan", "l_pho", "l_seg", "l_area", "l_bin", "l_gp", "l_lp", "l_hp", "total")


def plot_loss_curves(log_rows, path, ace_iteration: int | None = None) -> None:
    """One panel per loss term that is ever non-zero, drawn over the iterations where it is active.

    Stage changes are dotted; ``ace_iteration`` (global index) is dashed red.
    """
    if not log_rows:
        raise ValueError("empty run log")
    it = np.array([r["iteration"] for r in log_rows])
    stage = np.array([r["stage"] for r in log_rows])
    terms = [t for t in LOSS_TERMS if any(r[t] != 0 for r in log_rows)]
    cols = 3
    rows = max(1, -(-len(terms) // cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.8 * rows), squeeze=False)
    bounds = it[1:][np.diff(stage) != 0]
    for ax, term in zip(axes.ravel(), terms):
        y = np.array([r[term] for r in log_rows])
        on = y != 0
        ax.plot(it[on], y[on], lw=0.9)
        for b in bounds:
            ax.axvline(b, color="0.5", ls=":", lw=0.8)
        if ace_iteration is not None:
            ax.axvline(ace_iteration, color="tab:red", ls="--", lw=0.8)
        if np.all(y[on] > 0) and np.ptp(y[on]) > 0 and y[on].max() / y[on].min() > 10:
            ax.set_yscale("log")
        ax.set_title(term, fontsize=9)
        ax.tick_params(labelsize=7)
    for ax in axes.ravel()[len(terms):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _rgb(img):
    return linear_to_srgb(np.clip(img, 0.0, 1.0))


def plot_mask_panels(frame, i_out, m_o, m_l, path, texture=None) -> None:
    """Input, reconstruction, face mask, each light mask and optionally the diffuse texture."""
    panels = [("input", _rgb(frame), None), ("I_out", _rgb(i_out), None), ("M_o", m_o, "gray")]
    panels += [(f"M_L[{j}]", m, "viridis") for j, m in enumerate(m_l)]
    if texture is not None:
        panels.append(("diffuse T", _rgb(texture), None))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6), squeeze=False)
    for ax, (title, img, cmap) in zip(axes[0], panels):
        if cmap is None:
            ax.imshow(img)
        else:
            ax.imshow(img, cmap=cmap, vmin=0.0, vmax=1.0)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ace_areas(areas, epsilon: float, kept, path) -> None:
    """Bar chart of the condition areas against the selection threshold."""
    areas = np.asarray(areas, dtype=np.float64)
    colors = ["tab:blue" if i in set(kept) else "0.7" for i in range(len(areas))]
    fig, ax = plt.subplots(figsize=(4, 2.8))
    ax.bar(np.arange(len(areas)), areas, color=colors)
    ax.axhline(epsilon, color="tab:red", ls="--", lw=0.9, label=f"epsilon = {epsilon:g}")
    ax.set_xlabel("condition")
    ax.set_ylabel("area (fraction of frame)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
