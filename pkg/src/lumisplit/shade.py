"""Spherical-harmonics shading, per-condition renders and mask composition.

Reflectance is diffuse albedo times SH irradiance plus a Blinn-Phong lobe
scaled by the irradiance luma. The lobe's half vector uses the condition's
dominant direction, read off its first-order SH coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import GBuffer

LUMA = np.array([0.299, 0.587, 0.114])
SUPPORTED_C_SH = (1, 4, 9, 16, 25)
ROUGHNESS_EPS = 1e-4

_PI = np.pi
_C0 = 0.5 * np.sqrt(1.0 / _PI)
_C1 = np.sqrt(3.0 / (4.0 * _PI))
_C2 = (0.5 * np.sqrt(15.0 / _PI), 0.25 * np.sqrt(5.0 / _PI), 0.25 * np.sqrt(15.0 / _PI))
_C3 = (0.25 * np.sqrt(35.0 / (2.0 * _PI)), 0.5 * np.sqrt(105.0 / _PI),
       0.25 * np.sqrt(21.0 / (2.0 * _PI)), 0.25 * np.sqrt(7.0 / _PI), 0.25 * np.sqrt(105.0 / _PI))
_C4 = (0.75 * np.sqrt(35.0 / _PI), 0.75 * np.sqrt(35.0 / (2.0 * _PI)), 0.75 * np.sqrt(5.0 / _PI),
       0.75 * np.sqrt(5.0 / (2.0 * _PI)), (3.0 / 16.0) * np.sqrt(1.0 / _PI),
       0.375 * np.sqrt(5.0 / _PI), (3.0 / 16.0) * np.sqrt(35.0 / _PI))


def sh_basis(normals, c_sh: int = 9) -> np.ndarray:
    """Real orthonormal SH basis in (l, m) order, m from -l to l; shape (..., c_sh)."""
    if c_sh not in SUPPORTED_C_SH:
        raise ValueError(f"unsupported SH coefficient count {c_sh}; use one of {SUPPORTED_C_SH}")
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    out = [np.full(x.shape, _C0)]
    if c_sh >= 4:
        out += [_C1 * y, _C1 * z, _C1 * x]
    if c_sh >= 9:
        out += [_C2[0] * x * y, _C2[0] * y * z, _C2[1] * (3 * z * z - 1),
                _C2[0] * x * z, _C2[2] * (x * x - y * y)]
    if c_sh >= 16:
        out += [_C3[0] * y * (3 * x * x - y * y), _C3[1] * x * y * z,
                _C3[2] * y * (5 * z * z - 1), _C3[3] * z * (5 * z * z - 3),
                _C3[2] * x * (5 * z * z - 1), _C3[4] * z * (x * x - y * y),
                _C3[0] * x * (x * x - 3 * y * y)]
    if c_sh >= 25:
        out += [_C4[0] * x * y * (x * x - y * y), _C4[1] * y * z * (3 * x * x - y * y),
                _C4[2] * x * y * (7 * z * z - 1), _C4[3] * y * z * (7 * z * z - 3),
                _C4[4] * (35 * z**4 - 30 * z * z + 3), _C4[3] * x * z * (7 * z * z - 3),
                _C4[5] * (x * x - y * y) * (7 * z * z - 1), _C4[1] * x * z * (x * x - 3 * y * y),
                _C4[6] * (x * x * (x * x - 3 * y * y) - y * y * (3 * x * x - y * y))]
    return np.stack(out, axis=-1)


@dataclass
class TextureSet:
    diffuse: np.ndarray  # (H_T, W_T, 3)
    specular: np.ndarray  # (H_T, W_T)
    roughness: np.ndarray  # (H_T, W_T)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.diffuse.shape[1], self.diffuse.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.diffuse, self.specular[..., None], self.roughness[..., None]], axis=-1)

    @classmethod
    def from_stacked(cls, arr: np.ndarray) -> "TextureSet":
        return cls(arr[..., :3].copy(), arr[..., 3].copy(), arr[..., 4].copy())

    def copy(self) -> "TextureSet":
        return TextureSet(self.diffuse.copy(), self.specular.copy(), self.roughness.copy())


@dataclass
class LightSet:
    coeffs: np.ndarray  # (n, 3, C)
    alive: np.ndarray = field(default=None)  # (n,) bool

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.alive is None:
            self.alive = np.ones(self.coeffs.shape[0], dtype=bool)
        self.alive = np.asarray(self.alive, dtype=bool)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @property
    def c_sh(self) -> int:
        return self.coeffs.shape[2]

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def copy(self) -> "LightSet":
        return LightSet(self.coeffs.copy(), self.alive.copy())

    def to_dict(self) -> dict:
        return {"coeffs": self.coeffs.tolist(), "alive": self.alive.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LightSet":
        return cls(np.asarray(d["coeffs"], dtype=np.float64), np.asarray(d["alive"], dtype=bool))


def init_lights(n: int, c_sh: int = 9) -> LightSet:
    """Condition i (1-based) starts as the constant block 2 * i / n - 1."""
    if n < 1:
        raise ValueError("need at least one light condition")
    if c_sh not in SUPPORTED_C_SH:
        raise ValueError(f"unsupported SH coefficient count {c_sh}")
    vals = 2.0 * np.arange(1, n + 1) / n - 1.0
    return LightSet(np.broadcast_to(vals[:, None, None], (n, 3, c_sh)).copy())


# ---------------------------------------------------------------------------
# texture lookups


def bilinear_taps(uv: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat texel indices (P, 4) and weights (P, 4), clamp-to-edge."""
    x = uv[:, 0] * width - 0.5
    y = uv[:, 1] * height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, width - 1), np.clip(x0 + 1, 0, width - 1)
    ya, yb = np.clip(y0, 0, height - 1), np.clip(y0 + 1, 0, height - 1)
    idx = np.stack([ya * width + xa, ya * width + xb, yb * width + xa, yb * width + xb], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def gather(flat: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Bilinear lookup from a texture flattened to (T, ...)."""
    vals = flat[idx]  # (P, 4, ...)
    return np.einsum("pk,pk...->p...", w, vals)


def scatter(grad: np.ndarray, idx: np.ndarray, w: np.ndarray, n_texels: int) -> np.ndarray:
    """Adjoint of ``gather``: accumulate per-pixel gradients onto texels."""
    flat_idx = idx.ravel()
    if grad.ndim == 1:
        return np.bincount(flat_idx, weights=(w * grad[:, None]).ravel(), minlength=n_texels)
    cols = [np.bincount(flat_idx, weights=(w * grad[:, None, c]).ravel(), minlength=n_texels)
            for c in range(grad.shape[1])]
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# shading


@dataclass
class ShadingInputs:
    """Per-covered-pixel quantities that stay fixed while lights and albedo change."""
    pix: tuple[np.ndarray, np.ndarray]  # (rows, cols)
    normal: np.ndarray  # (P, 3)
    view: np.ndarray  # (P, 3)
    sh: np.ndarray  # (P, C)
    taps: tuple[np.ndarray, np.ndarray]
    shape: tuple[int, int]

    @property
    def n_pixels(self) -> int:
        return self.normal.shape[0]


def shading_inputs(gbuffer: GBuffer, c_sh: int, texture_size: tuple[int, int]) -> ShadingInputs:
    iy, ix = np.nonzero(gbuffer.covered)
    normal = gbuffer.normal[iy, ix]
    return ShadingInputs(
        pix=(iy, ix),
        normal=normal,
        view=gbuffer.view_dir[iy, ix],
        sh=sh_basis(normal, c_sh),
        taps=bilinear_taps(gbuffer.uv[iy, ix], texture_size[0], texture_size[1]),
        shape=gbuffer.shape,
    )


def sample_albedo(inputs: ShadingInputs, texture: TextureSet):
    """Diffuse (P, 3), specular (P,), roughness (P,) at the covered pixels."""
    idx, w = inputs.taps
    stacked = texture.stacked().reshape(-1, 5)
    vals = gather(stacked, idx, w)
    return vals[:, :3], vals[:, 3], vals[:, 4]


def dominant_direction(gamma: np.ndarray) -> np.ndarray | None:
    """Unnormalised (x, y, z) direction from the luma of the l=1 coefficients."""
    if gamma.shape[1] < 4:
        return None
    g1 = LUMA @ gamma[:, 1:4]  # coefficients of (y, z, x)
    d = np.array([g1[2], g1[0], g1[1]])
    if np.linalg.norm(d) < 1e-6:
        return None
    return d


def shininess(roughness):
    return 2.0 / (roughness * roughness + ROUGHNESS_EPS) - 2.0


def shade_condition(inputs: ShadingInputs, a_d, a_s, a_r, gamma):
    """Colours (P, 3) of the covered pixels under one condition, plus a backward cache."""
    gamma = np.asarray(gamma, dtype=np.float64)
    raw = inputs.sh @ gamma.T  # (P, 3)
    irr = np.maximum(raw, 0.0)
    d_raw = dominant_direction(gamma)
    if d_raw is None:
        h = inputs.view
        w_norm = None
        d = None
    else:
        d = d_raw / np.linalg.norm(d_raw)
        w = inputs.view + d
        w_norm = np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-12)
        h = w / w_norm
    ndh = np.maximum(np.einsum("pc,pc->p", inputs.normal, h), 0.0)
    s = shininess(a_r)
    pos = ndh > 0
    safe = np.where(pos, ndh, 1.0)
    lobe = np.where(pos, safe ** s, 0.0)
    e_lum = irr @ LUMA
    color = a_d * irr + (a_s * lobe * e_lum)[:, None]
    cache = dict(raw=raw, irr=irr, d_raw=d_raw, d=d, h=h, w_norm=w_norm, ndh=ndh, pos=pos,
                 safe=safe, s=s, lobe=lobe, e_lum=e_lum, a_d=a_d, a_s=a_s, a_r=a_r)
    return np.maximum(color, 0.0), cache


def shade_condition_backward(inputs: ShadingInputs, cache: dict, grad: np.ndarray):
    """Gradients w.r.t. (a_d, a_s, a_r, gamma) given dL/dcolor (P, 3).

    The final clamp is treated as identity: its argument is non-negative for
    non-negative albedo.
    """
    irr, lobe, e_lum = cache["irr"], cache["lobe"], cache["e_lum"]
    a_d, a_s, a_r = cache["a_d"], cache["a_s"], cache["a_r"]
    g_sum = grad.sum(axis=1)
    g_ad = grad * irr
    g_as = g_sum * lobe * e_lum
    g_lobe = g_sum * a_s * e_lum
    g_irr = grad * a_d + (g_sum * a_s * lobe)[:, None] * LUMA
    g_raw = g_irr * (cache["raw"] > 0)
    g_gamma = g_raw.T @ inputs.sh  # (3, C)

    pos, safe, s = cache["pos"], cache["safe"], cache["s"]
    g_ndh = np.where(pos, g_lobe * s * safe ** (s - 1.0), 0.0)
    g_s = np.where(pos, g_lobe * lobe * np.log(safe), 0.0)
    g_ar = g_s * (-4.0 * a_r / (a_r * a_r + ROUGHNESS_EPS) ** 2)

    if cache["d_raw"] is not None:
        h = cache["h"]
        g_h = g_ndh[:, None] * inputs.normal
        g_w = (g_h - np.einsum("pc,pc->p", g_h, h)[:, None] * h) / cache["w_norm"]
        g_d = g_w.sum(axis=0)
        d = cache["d"]
        g_draw = (g_d - (g_d @ d) * d) / np.linalg.norm(cache["d_raw"])
        g_l1 = np.array([g_draw[1], g_draw[2], g_draw[0]])  # back to (y, z, x) order
        g_gamma[:, 1:4] += LUMA[:, None] * g_l1[None, :]
    return g_ad, g_as, g_ar, g_gamma


def shade_pixel(gbuffer: GBuffer, row: int, col: int, texture: TextureSet, gamma) -> np.ndarray:
    if not gbuffer.covered[row, col]:
        raise ValueError(f"pixel ({row}, {col}) is not covered")
    gamma = np.asarray(gamma, dtype=np.float64)
    sub = GBuffer(*(getattr(gbuffer, f)[row:row + 1, col:col + 1] for f in GBuffer.__dataclass_fields__))
    inp = shading_inputs(sub, gamma.shape[1], texture.resolution)
    a_d, a_s, a_r = sample_albedo(inp, texture)
    color, _ = shade_condition(inp, a_d, a_s, a_r, gamma)
    return color[0]


def render_conditions(gbuffer: GBuffer, texture: TextureSet, lights: LightSet):
    """Full-frame renders under every condition (I_Rn) and the alive subset (I_Rs)."""
    inp = shading_inputs(gbuffer, lights.c_sh, texture.resolution)
    a_d, a_s, a_r = sample_albedo(inp, texture)
    h, w = gbuffer.shape
    out = np.zeros((lights.n, h, w, 3))
    for i in range(lights.n):
        color, _ = shade_condition(inp, a_d, a_s, a_r, lights.coeffs[i])
        out[i][inp.pix] = color
    return out, out[lights.alive]


# ---------------------------------------------------------------------------
# composition


def compose(i_rs, m_l, m_o, i_in):
    """I_R = sum_i I_Rs^i * M_L^i and I_out = I_R * M_o + I_in * (1 - M_o)."""
    i_rs = np.asarray(i_rs, dtype=np.float64)
    m_l = np.asarray(m_l, dtype=np.float64)
    m_o = np.asarray(m_o, dtype=np.float64)
    i_in = np.asarray(i_in, dtype=np.float64)
    if i_rs.shape[0] != m_l.shape[0]:
        raise ValueError(f"{i_rs.shape[0]} renders but {m_l.shape[0]} light masks")
    if i_rs.shape[1:3] != m_l.shape[1:] or m_o.shape != i_in.shape[:2] or i_in.shape != i_rs.shape[1:]:
        raise ValueError("compose inputs must share one resolution")
    i_r = np.einsum("nhw,nhwc->hwc", m_l, i_rs)
    i_out = i_r * m_o[..., None] + i_in * (1.0 - m_o[..., None])
    return i_r, i_out


def compose_backward(grad_out, i_rs, m_l, m_o, i_in, i_r):
    """Gradients of I_out w.r.t. (I_Rs, M_L, M_o, I_in)."""
    g_r = grad_out * m_o[..., None]
    g_rs = m_l[..., None] * g_r[None]
    g_ml = np.einsum("hwc,nhwc->nhw", g_r, i_rs)
    g_mo = np.einsum("hwc,hwc->hw", grad_out, i_r - i_in)
    g_in = grad_out * (1.0 - m_o[..., None])
    return g_rs, g_ml, g_mo, g_in
