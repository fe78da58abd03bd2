"""Fitting losses with analytic gradients.

Every loss returns ``(value, grad)`` (or a tuple of grads) for the inputs it
is optimized through. Raster losses average over all pixels of the frame,
covered or not.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np

log = logging.getLogger(__name__)

NEIGHBOR_OFFSETS = tuple((dy, dx) for dy in range(-2, 3) for dx in range(-2, 3) if (dy, dx) != (0, 0))


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _safe_unit(diff: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return np.divide(diff, norm[..., None], out=np.zeros_like(diff), where=norm[..., None] > 0)


def landmark_loss(q_out, q_in):
    """Mean Euclidean distance between projected and detected landmarks (pixels)."""
    q_out = np.asarray(q_out, dtype=np.float64)
    q_in = np.asarray(q_in, dtype=np.float64)
    if q_out.shape != q_in.shape:
        raise ValueError(f"landmark count mismatch: {q_out.shape} vs {q_in.shape}")
    diff = q_out - q_in
    norm = np.linalg.norm(diff, axis=-1)
    n = norm.size
    return float(norm.sum() / n), _safe_unit(diff, norm) / n


def photometric_loss(i_out, i_in):
    """Per-pixel RGB L2 distance averaged over all pixels."""
    i_out = np.asarray(i_out, dtype=np.float64)
    i_in = np.asarray(i_in, dtype=np.float64)
    _same_shape(i_out, i_in, "photometric_loss")
    diff = i_out - i_in
    norm = np.linalg.norm(diff, axis=-1)
    n = norm.size
    return float(norm.sum() / n), _safe_unit(diff, norm) / n


def seg_loss(g_out, h_out):
    """Mean absolute difference between the face field and the segmentation oracle."""
    g_out = np.asarray(g_out, dtype=np.float64)
    h_out = np.asarray(h_out, dtype=np.float64)
    _same_shape(g_out, h_out, "seg_loss")
    diff = g_out - h_out
    return float(np.abs(diff).sum() / diff.size), np.sign(diff) / diff.size


def area_loss(m_n):
    """Pushes each pixel's condition probabilities away from their per-pixel mean.

    ``m_n`` is (n, *pixels). Value lies in [-1, 0]; 0 when all masks agree.
    """
    m = np.asarray(m_n, dtype=np.float64)
    n = m.shape[0]
    n_pix = m[0].size
    d = m - m.mean(axis=0, keepdims=True)
    e = np.exp(-d * d)
    value = e.sum() / (n * n_pix) - 1.0
    ed = e * d
    grad = (-2.0 / (n * n_pix)) * (ed - ed.mean(axis=0, keepdims=True))
    return float(value), grad


def bin_loss(m_l):
    """Pushes each mask's values away from that mask's spatial mean (towards 0/1)."""
    m = np.asarray(m_l, dtype=np.float64)
    n = m.shape[0]
    flat = m.reshape(n, -1)
    n_pix = flat.shape[1]
    d = flat - flat.mean(axis=1, keepdims=True)
    e = np.exp(-d * d)
    value = e.sum() / (n * n_pix) - 1.0
    ed = e * d
    grad = (-2.0 / (n * n_pix)) * (ed - ed.mean(axis=1, keepdims=True))
    return float(value), grad.reshape(m.shape)


# ---------------------------------------------------------------------------
# texture priors


@dataclass
class Palette:
    colors: np.ndarray  # (k, 3)
    source: str
    warning: str | None = None

    def to_dict(self) -> dict:
        return {"colors": self.colors.tolist(), "source": self.source, "warning": self.warning}


def texture_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :], 0.0)


def kmeans_sse(points: np.ndarray, centers: np.ndarray) -> float:
    return float(_sq_dists(points, centers).min(axis=1).sum())


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds; empty clusters move to the farthest point."""
    rng = np.random.default_rng(seed)
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _sq_dists(points, centers[j:j + 1])[:, 0])
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        label = d.argmin(axis=1)
        counts = np.bincount(label, minlength=k)
        new = np.stack([np.bincount(label, weights=points[:, c], minlength=k) for c in range(points.shape[1])], 1)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            far = d[np.arange(n), label]
            for j in np.flatnonzero(~nonempty):
                i = int(np.argmax(far))
                new[j] = points[i]
                far[i] = -1.0
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    return centers


def kmeans_palette(t0_diffuse: np.ndarray, k: int = 16, seed: int = 0) -> Palette:
    """Palette of the statistical diffuse albedo (the 4x4 colour matrix for k=16)."""
    pts = np.asarray(t0_diffuse, dtype=np.float64).reshape(-1, 3)
    n_distinct = len(np.unique(pts, axis=0))
    warning = None
    if n_distinct < k:
        warning = f"only {n_distinct} distinct texel colours, palette reduced from {k}"
        log.warning(warning)
        k = n_distinct
    return Palette(kmeans(pts, k, seed), texture_digest(t0_diffuse), warning)


def global_prior_loss(t_diffuse, palette: Palette):
    """Mean distance from each diffuse texel to its nearest palette colour."""
    t = np.asarray(t_diffuse, dtype=np.float64)
    pts = t.reshape(-1, 3)
    nearest = palette.colors[_sq_dists(pts, palette.colors).argmin(axis=1)]
    diff = pts - nearest
    norm = np.linalg.norm(diff, axis=1)
    n = len(pts)
    return float(norm.sum() / n), (_safe_unit(diff, norm) / n).reshape(t.shape)


def _shifted(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """arr[p - o] with clamp-to-edge, for |dy|, |dx| <= 2."""
    h, w = arr.shape[:2]
    pad = [(2, 2), (2, 2)] + [(0, 0)] * (arr.ndim - 2)
    p = np.pad(arr, pad, mode="edge")
    return p[2 - dy:2 - dy + h, 2 - dx:2 - dx + w]


def neighbor_variation(t: np.ndarray) -> np.ndarray:
    """Stack (24, H, W[, C]) of centre-minus-neighbour over the 5x5 window."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape[0] < 5 or t.shape[1] < 5:
        raise ValueError("neighbor_variation needs a raster of at least 5x5")
    return np.stack([t - _shifted(t, dy, dx) for dy, dx in NEIGHBOR_OFFSETS])


def _fold_edges(gp: np.ndarray) -> np.ndarray:
    """Adjoint of edge padding by 2 on the first two axes."""
    gp = gp.copy()
    gp[2] += gp[0] + gp[1]
    gp[-3] += gp[-1] + gp[-2]
    gp[:, 2] += gp[:, 0] + gp[:, 1]
    gp[:, -3] += gp[:, -1] + gp[:, -2]
    return gp[2:-2, 2:-2]


def _variation_l1(d: np.ndarray):
    """sum over offsets/texels of |d - shift(d)|, and its gradient w.r.t. d."""
    h, w = d.shape[:2]
    pad = [(2, 2), (2, 2)] + [(0, 0)] * (d.ndim - 2)
    p = np.pad(d, pad, mode="edge")
    value = 0.0
    grad = np.zeros_like(d)
    grad_pad = np.zeros_like(p)
    for dy, dx in NEIGHBOR_OFFSETS:
        sl = (slice(2 - dy, 2 - dy + h), slice(2 - dx, 2 - dx + w))
        diff = d - p[sl]
        value += np.abs(diff).sum()
        s = np.sign(diff)
        grad += s
        grad_pad[sl] -= s
    return value, grad + _fold_edges(grad_pad)


def local_prior_loss(t_stacked, t0_stacked):
    """Neighbour-variation mismatch between texture and its statistical init.

    Inputs are (H, W, 5) stacks: diffuse RGB, specular, roughness. The diffuse
    term is averaged over RGB so the three albedo maps weigh the same.
    """
    t = np.asarray(t_stacked, dtype=np.float64)
    t0 = np.asarray(t0_stacked, dtype=np.float64)
    _same_shape(t, t0, "local_prior_loss")
    d = t - t0
    n = t.shape[0] * t.shape[1]
    v_d, g_d = _variation_l1(d[..., :3])
    v_s, g_s = _variation_l1(d[..., 3])
    v_r, g_r = _variation_l1(d[..., 4])
    value = (v_d / 3.0 + v_s + v_r) / n
    grad = np.concatenate([g_d / 3.0, g_s[..., None], g_r[..., None]], axis=-1) / n
    return float(value), grad


# ---------------------------------------------------------------------------
# plausibility prior


class PlausibilityScorer(Protocol):
    def scores(self, image: np.ndarray) -> np.ndarray: ...

    def score_grad(self, image: np.ndarray, index: int) -> np.ndarray: ...


def _resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear-interpolation resampling matrix (n_out, n_in), pixel-centre aligned."""
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = pos - i0
    m[np.arange(n_out), i0] += 1 - f
    m[np.arange(n_out), i1] += f
    return m


class TemplateScorer:
    """Softmax over negative mean squared distances to a bank of reference crops.

    The crop is the bounding box of the image's non-zero pixels, resampled to
    ``size`` x ``size``. Stands in for a face-recognition network's class
    probabilities: deterministic and differentiable in the image.
    """

    def __init__(self, references: np.ndarray, temperature: float = 0.05, size: int = 32):
        self.references = np.asarray(references, dtype=np.float64)  # (K, size, size, 3)
        self.temperature = temperature
        self.size = size

    def _crop(self, image):
        support = np.any(image > 0, axis=-1)
        if support.any():
            rows = np.flatnonzero(support.any(axis=1))
            cols = np.flatnonzero(support.any(axis=0))
            r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        else:
            r0, r1, c0, c1 = 0, image.shape[0], 0, image.shape[1]
        ay = _resize_matrix(self.size, r1 - r0)
        ax = _resize_matrix(self.size, c1 - c0)
        crop = np.einsum("ij,jkc->ikc", ay, ax @ image[r0:r1, c0:c1], optimize=True)
        return crop, (r0, r1, c0, c1, ay, ax)

    def _probs(self, crop):
        d = ((crop[None] - self.references) ** 2).mean(axis=(1, 2, 3))
        z = -d / self.temperature
        z -= z.max()
        p = np.exp(z)
        return p / p.sum(), d

    def scores(self, image: np.ndarray) -> np.ndarray:
        crop, _ = self._crop(np.asarray(image, dtype=np.float64))
        return self._probs(crop)[0]

    def score_grad(self, image: np.ndarray, index: int) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        crop, (r0, r1, c0, c1, ay, ax) = self._crop(image)
        p, _ = self._probs(crop)
        n = crop.size
        dd = 2.0 * (crop[None] - self.references) / n  # d distance_j / d crop
        mean_dd = np.einsum("j,jhwc->hwc", p, dd)
        g_crop = -p[index] / self.temperature * (dd[index] - mean_dd)
        out = np.zeros_like(image)
        out[r0:r1, c0:c1] = np.einsum("ij,ikc->jkc", ay, ax.T @ g_crop, optimize=True)
        return out


def human_prior_loss(i_rs, scorer: PlausibilityScorer):
    """Sum over rendered faces of the best score's gap to 1, with image gradients."""
    i_rs = np.asarray(i_rs, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(i_rs)
    for f, img in enumerate(i_rs):
        try:
            s = np.asarray(scorer.scores(img), dtype=np.float64)
        except Exception as exc:  # scorer failures must not silently drop the term
            raise RuntimeError(f"plausibility scorer failed on face {f}: {exc}") from exc
        if s.size == 0 or not np.all(np.isfinite(s)):
            raise RuntimeError(f"plausibility scorer returned no finite scores for face {f}")
        gaps = np.abs(1.0 - s)
        best = int(np.argmin(gaps))
        value += float(gaps[best])
        if s[best] != 1.0:
            grad[f] = -np.sign(1.0 - s[best]) * scorer.score_grad(img, best)
    return value, grad
