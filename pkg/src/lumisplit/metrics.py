"""Image and reconstruction metrics."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .shade import LUMA

PSNR_CAP = 99.0


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    mask_iou: list[float]
    texture_rmse_visible: float | None
    n_l: int
    runtime_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-20:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows of the luma images."""
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError("ssim needs images of at least 11x11")
    g = gaussian_window()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mask_iou(pred, gt):
    """IoU of each ground-truth region under the best injective pred->gt matching.

    ``pred`` (n_L, ...) is binarised at 0.5; ``gt`` (m, ...) is boolean. Returns
    (per-region IoU list, assignment gt index -> pred index or -1).
    """
    pred = np.asarray(pred) > 0.5
    gt = np.asarray(gt).astype(bool)
    n, m = len(pred), len(gt)
    table = np.array([[iou(p, g) for g in gt] for p in pred]).reshape(n, m)
    best, best_assign = -1.0, None
    if n >= m:
        for perm in itertools.permutations(range(n), m):
            score = sum(table[perm[j], j] for j in range(m))
            if score > best + 1e-12:
                best, best_assign = score, list(perm)
    else:
        for perm in itertools.permutations(range(m), n):
            assign = [-1] * m
            for i, j in enumerate(perm):
                assign[j] = i
            score = sum(table[assign[j], j] for j in range(m) if assign[j] >= 0)
            if score > best + 1e-12:
                best, best_assign = score, assign
    per_region = [float(table[best_assign[j], j]) if best_assign[j] >= 0 else 0.0 for j in range(m)]
    return per_region, best_assign


def texture_rmse_visible(t_pred, t_gt, visibility) -> float:
    t_pred = np.asarray(t_pred, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    if t_pred.shape != t_gt.shape:
        raise ValueError("texture resolutions differ")
    if not vis.any():
        raise ValueError("visibility mask is empty")
    d = t_pred[vis][..., :3] - t_gt[vis][..., :3]
    return float(np.sqrt(np.mean(d * d)))
