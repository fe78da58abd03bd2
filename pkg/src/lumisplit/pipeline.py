"""Three-stage fitting controller.

Stage 1 fits shape, expression and pose to the landmarks. Stage 2 adds the
albedo coefficients, the light conditions and both mask fields; condition
selection (ACE) runs once inside it. Stage 3 frees the texels and keeps
refining lights and the light-mask field with small steps.

Sequences share (alpha, delta, gamma, theta_f, theta_g) across frames and
keep (beta, pose) per frame; frame i of k feeds t = i / k to the fields.
"""
from __future__ import annotations

import functools
import hashlib
import logging
import time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import ace as ace_mod
from .fields import MaskField, init_field, pixel_coords
from .losses import (Palette, TemplateScorer, area_loss, bin_loss, global_prior_loss, human_prior_loss,
                     kmeans_palette, landmark_loss, local_prior_loss, photometric_loss, seg_loss)
from .optim import VarGroup, adam_step, clamp_constraints
from .proxymm import PoseCamera, ProxyMM, evaluate_albedo, evaluate_geometry, generate_model, project_landmarks
from .raster import GBuffer, rasterize, texel_footprint
from .shade import (LightSet, ShadingInputs, TextureSet, init_lights, sample_albedo, scatter,
                    shade_condition, shade_condition_backward, shading_inputs)

log = logging.getLogger(__name__)

# pixels the face field considers occluded (M_o below this) pass no colour gradient
OCCLUSION_CUTOFF = 0.1
# L_seg-only steps on the face field before the joint stage; without them the
# early photometric pull drives M_o to zero before the renders are any good
G_WARMUP_ITERS = 100
# g only takes the photometric term at pixels the render misses by more than this (RGB L2);
# milder misfits (grazing silhouettes, unfitted detail) are left to the oracle
GROSS_RESIDUAL = 0.5
DEFAULT_TRANSLATION = (0.0, 0.0, 5.5)
LOG_COLUMNS = ("iteration", "stage", "l_lan", "l_pho", "l_seg", "l_area", "l_bin", "l_gp", "l_lp", "l_hp", "total")


class ConfigError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class FitConfig:
    w0: float = 2e3
    w1: float = 1e-3
    w2: float = 1.5e2
    w3: float = 0.5
    w4: float = 25.0
    w5: float = 2e3
    w6: float = 2.0
    w7: float = 1.0
    iter0: int = 100
    iter1: int = 2000
    iter2: int = 400
    iter3: int = 200
    epsilon: float = 0.17
    n: int = 5
    c_sh: int = 9
    image_size: int = 128
    texture_size: int = 256
    seed: int = 0
    lr_coeffs: float = 1e-2
    lr_gamma: float = 0.1
    lr_fields: float = 1e-2
    lr_texture: float = 5e-3
    lr_stage3_light: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    REQUIRED = ("w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "iter0", "iter1", "iter2", "iter3",
                "epsilon", "n", "c_sh", "image_size", "texture_size", "seed", "lr_coeffs", "lr_gamma",
                "lr_fields", "lr_texture", "lr_stage3_light")
    OPTIONAL = ("adam_beta1", "adam_beta2", "adam_eps")

    @property
    def weights(self) -> tuple:
        return tuple(getattr(self, f"w{i}") for i in range(8))

    @property
    def iters(self) -> tuple:
        return (self.iter0, self.iter1, self.iter2, self.iter3)

    def validate(self) -> "FitConfig":
        if any(w < 0 for w in self.weights):
            raise ConfigError("loss weights must be >= 0")
        if any(i < 0 for i in self.iters):
            raise ConfigError("iteration counts must be >= 0")
        if not 1 <= self.iter0 < self.iter2:
            raise ConfigError("need 1 <= iter0 < iter2 so that ACE fires inside stage 2")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.c_sh not in (1, 4, 9, 16, 25):
            raise ConfigError("c_sh must be one of 1, 4, 9, 16, 25")
        if self.texture_size < 8 or self.texture_size & (self.texture_size - 1):
            raise ConfigError("texture_size must be a power of two >= 8")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        for name in ("lr_coeffs", "lr_gamma", "lr_fields", "lr_texture", "lr_stage3_light", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        return self

    def replace(self, **kw) -> "FitConfig":
        d = self.to_dict()
        d.update(kw)
        return FitConfig(**d).validate()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "FitConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in cls.REQUIRED and key not in cls.OPTIONAL:
                raise ConfigError(f"unknown config key: {key}")
            if key in values:
                raise ConfigError(f"duplicate config key: {key}")
            values[key] = val
        for key in cls.REQUIRED:
            if key not in values:
                raise ConfigError(f"missing config key: {key}")
        kw = {}
        types = {f.name: f.type for f in dc_fields(cls)}
        for key, val in values.items():
            try:
                kw[key] = int(val) if types[key] in ("int", int) else float(val)
            except ValueError:
                raise ConfigError(f"config key {key}: cannot parse {val!r}") from None
        return cls(**kw).validate()

    @classmethod
    def from_file(cls, path) -> "FitConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def acceptance_config(**kw) -> FitConfig:
    """Default weights with the shortened schedule used by the round-trip checks."""
    base = dict(iter0=50, iter1=600, iter2=100, iter3=100, texture_size=128)
    base.update(kw)
    return FitConfig(**base).validate()


# ---------------------------------------------------------------------------
# state


@dataclass
class FitInputs:
    frames: np.ndarray  # (k, H, W, 3)
    landmarks: np.ndarray  # (k, L, 2)
    times: np.ndarray  # (k,)
    seg: np.ndarray  # (k, H, W)
    model_seed: int = 7

    @property
    def k(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:3]

    @classmethod
    def from_scene(cls, scene) -> "FitInputs":
        return cls(np.asarray(scene.frames, dtype=np.float64), np.asarray(scene.landmarks, dtype=np.float64),
                   np.asarray(scene.times, dtype=np.float64), np.asarray(scene.seg, dtype=np.float64),
                   int(scene.spec.model_seed))

    def validate(self, config: FitConfig) -> "FitInputs":
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError("frames must be (k, H, W, 3)")
        k, h, w = self.frames.shape[:3]
        if (h, w) != (config.image_size, config.image_size):
            raise ValueError(f"frames are {w}x{h} but config image_size is {config.image_size}")
        if self.landmarks.shape[0] != k or self.times.shape != (k,) or self.seg.shape != (k, h, w):
            raise ValueError("landmarks, times and seg must match the frame count and resolution")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        return self


@dataclass
class FitState:
    config: FitConfig
    model: ProxyMM
    groups: dict
    f: MaskField
    g: MaskField
    lights: LightSet
    stage: int = 0
    iteration: int = 0
    palette: Palette | None = None
    t0: TextureSet | None = None
    ace: ace_mod.AceReport | None = None
    log_rows: list = field(default_factory=list)
    occluded_texture_grad: float = 0.0
    stage2_final_pho: float | None = None

    @property
    def k(self) -> int:
        return self.groups["pose"].values.shape[0]

    def pose(self, i: int) -> PoseCamera:
        s = self.config.image_size
        return PoseCamera(self.groups["pose"].values[i, :3], self.groups["pose"].values[i, 3:],
                          focal=2.0 * s, image_size=(s, s))

    def sync(self):
        """Point the field and light objects at the optimizer's current values."""
        self.f.theta = self.groups["theta_f"].values
        self.g.theta = self.groups["theta_g"].values
        self.lights.coeffs = self.groups["gamma"].values

    def texture(self) -> TextureSet:
        if "T" in self.groups:
            return TextureSet.from_stacked(self.groups["T"].values)
        return evaluate_albedo(self.model, self.groups["delta"].values)


def init_state(config: FitConfig, k: int, model: ProxyMM) -> FitState:
    c = config
    pose0 = np.tile(np.r_[np.zeros(3), DEFAULT_TRANSLATION], (k, 1))
    groups = {
        "alpha": VarGroup("alpha", np.zeros(model.n_shape), c.lr_coeffs),
        "beta": VarGroup("beta", np.zeros((k, model.n_expr)), c.lr_coeffs),
        "pose": VarGroup("pose", pose0, c.lr_coeffs),
        "delta": VarGroup("delta", np.zeros(model.n_albedo), c.lr_coeffs, frozen=True),
        "gamma": VarGroup("gamma", init_lights(c.n, c.c_sh).coeffs, c.lr_gamma, frozen=True),
    }
    f = init_field(c.seed, c.n, head="softmax")
    g = init_field(c.seed + 1, 1, head="sigmoid")
    groups["theta_f"] = VarGroup("theta_f", f.theta, c.lr_fields, frozen=True)
    groups["theta_g"] = VarGroup("theta_g", g.theta, c.lr_fields, frozen=True)
    state = FitState(c, model, groups, f, g, LightSet(groups["gamma"].values))
    state.sync()
    return state


# ---------------------------------------------------------------------------
# per-iteration pieces


def _check_finite(name: str, value: float, state: FitState):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {name} at stage {state.stage}, iteration {state.iteration}")


def _landmark_terms(state: FitState, inputs: FitInputs, weight: float, grads: dict) -> float:
    """Landmark loss over all frames; adds weighted gradients into ``grads``."""
    a = state.groups["alpha"].values
    b = state.groups["beta"].values
    qs, jacs = [], []
    for i in range(state.k):
        q, jac = project_landmarks(state.model, a, b[i], state.pose(i), jacobian=True)
        qs.append(q)
        jacs.append(jac)
    value, g_q = landmark_loss(np.stack(qs), inputs.landmarks)
    if weight == 0:
        return value
    for i, jac in enumerate(jacs):
        gq = weight * g_q[i]
        grads["alpha"] += np.einsum("lj,lja->a", gq, jac["alpha"])
        grads["beta"][i] += np.einsum("lj,lja->a", gq, jac["beta"])
        grads["pose"][i] += np.einsum("lj,lja->a", gq, jac["pose"])
    return value


@dataclass
class FrameGeom:
    gb: GBuffer
    inputs: ShadingInputs
    coords: np.ndarray  # (H, W, 3)

    @property
    def m_r(self) -> np.ndarray:
        return self.gb.covered


def frame_geometry(model: ProxyMM, alpha, beta, pose: PoseCamera, t: float, c_sh: int,
                   texture_size: int) -> FrameGeom:
    verts, normals = evaluate_geometry(model, alpha, beta)
    gb = rasterize(verts, normals, model.triangles, model.uv_coords, pose)
    h, w = gb.shape
    return FrameGeom(gb, shading_inputs(gb, c_sh, (texture_size, texture_size)), pixel_coords(h, w, t))


def _geometries(state: FitState, inputs: FitInputs) -> list[FrameGeom]:
    a = state.groups["alpha"].values
    b = state.groups["beta"].values
    c = state.config
    return [frame_geometry(state.model, a, b[i], state.pose(i), float(inputs.times[i]), c.c_sh, c.texture_size)
            for i in range(state.k)]


def _color_pass(state: FitState, inputs: FitInputs, geoms: list[FrameGeom], texture: TextureSet,
                conds: np.ndarray, m_o_fixed=None):
    """Forward through fields, shading and composition for every frame.

    ``conds`` lists the condition indices that enter the composite. Returns
    a dict of stacked rasters plus per-frame caches for the backward pass.
    """
    k = len(geoms)
    h, w = inputs.shape
    n = state.f.n_outputs
    m_n = np.zeros((n, k, h, w))
    g_raw = np.zeros((k, h, w))
    m_o = np.zeros((k, h, w))
    i_r = np.zeros((k, h, w, 3))
    renders = np.zeros((len(conds), k, h, w, 3))
    caches = []
    for i, geo in enumerate(geoms):
        inp = geo.inputs
        pix = inp.pix
        f_out, f_cache = state.f.forward(geo.coords[pix])
        m_n[:, i][:, pix[0], pix[1]] = f_out.T
        if m_o_fixed is None:
            g_out, g_cache = state.g.forward(geo.coords.reshape(-1, 3))
            g_raw[i] = g_out.reshape(h, w)
            m_o[i] = g_raw[i] * geo.m_r
        else:
            g_cache = None
            m_o[i] = m_o_fixed[i]
        a_d, a_s, a_r = sample_albedo(inp, texture)
        shade_caches = []
        for j, c in enumerate(conds):
            color, sc = shade_condition(inp, a_d, a_s, a_r, state.lights.coeffs[c])
            renders[j, i][pix] = color
            i_r[i][pix] += f_out[:, c][:, None] * color
            shade_caches.append(sc)
        caches.append(dict(f_out=f_out, f_cache=f_cache, g_cache=g_cache, shade=shade_caches))
    i_out = i_r * m_o[..., None] + inputs.frames * (1.0 - m_o[..., None])
    return dict(m_n=m_n, g_raw=g_raw, m_o=m_o, i_r=i_r, i_out=i_out, renders=renders, caches=caches)


def _color_backward(state: FitState, inputs: FitInputs, geoms, fwd: dict, conds, g_iout, g_mask,
                    g_render=None, want_g: bool = True, pho_to_g=True):
    """Backpropagate image-space gradients into (gamma, theta_f, theta_g, texture).

    ``g_iout`` (k, H, W, 3) is dL/dI_out; ``g_mask`` (n, k, H, W) adds direct
    gradients on the light masks (area/bin terms); ``g_render`` (len(conds),
    k, H, W, 3) adds direct gradients on the condition renders. Colour
    gradients from pixels with M_o below the occlusion cutoff are dropped.
    ``pho_to_g`` is a bool or a (k, H, W) mask of pixels whose photometric
    gradient reaches g.
    """
    c = state.config
    n_tex = c.texture_size * c.texture_size
    out = {"gamma": np.zeros_like(state.lights.coeffs), "theta_f": np.zeros_like(state.f.theta),
           "theta_g": np.zeros_like(state.g.theta), "tex": np.zeros((n_tex, 5)), "occluded": 0.0}
    m_o = fwd["m_o"]
    for i, geo in enumerate(geoms):
        inp = geo.inputs
        pix = inp.pix
        cache = fwd["caches"][i]
        f_out = cache["f_out"]
        gate = (m_o[i] >= OCCLUSION_CUTOFF)
        g_rfull = g_iout[i] * m_o[i][..., None]
        g_r = (g_rfull * gate[..., None])[pix]  # (P, 3)
        g_fout = np.zeros_like(f_out)
        if g_mask is not None:
            g_fout += g_mask[:, i][:, pix[0], pix[1]].T
        g_ad = np.zeros((inp.n_pixels, 3))
        g_as = np.zeros(inp.n_pixels)
        g_ar = np.zeros(inp.n_pixels)
        for j, cnd in enumerate(conds):
            color = fwd["renders"][j, i][pix]
            g_fout[:, cnd] += np.einsum("pc,pc->p", g_r, color)
            g_col = f_out[:, cnd][:, None] * g_r
            if g_render is not None:
                g_col = g_col + g_render[j, i][pix] * gate[pix][:, None]
            d_ad, d_as, d_ar, d_gamma = shade_condition_backward(inp, cache["shade"][j], g_col)
            g_ad += d_ad
            g_as += d_as
            g_ar += d_ar
            out["gamma"][cnd] += d_gamma
        # diagnostic: what occluded pixels would have pushed into the diffuse texels
        out["occluded"] += float(np.abs(g_ad[~gate[pix]]).sum())
        out["theta_f"] += state.f.backward(cache["f_cache"], g_fout)
        if want_g and cache["g_cache"] is not None:
            g_gout = np.zeros(geo.m_r.size)
            if pho_to_g is not False:
                g_mo = np.einsum("hwc,hwc->hw", g_iout[i], fwd["i_r"][i] - inputs.frames[i])
                if pho_to_g is not True:
                    g_mo = g_mo * pho_to_g[i]
                g_gout = (g_mo * geo.m_r).ravel()
            if "g_seg" in fwd:
                g_gout = g_gout + fwd["g_seg"][i].ravel()
            out["theta_g"] += state.g.backward(cache["g_cache"], g_gout)
        idx, w = inp.taps
        stacked = np.concatenate([g_ad, g_as[:, None], g_ar[:, None]], axis=1)
        out["tex"] += scatter(stacked, idx, w, n_tex)
    return out


def render_residual(fwd: dict, inputs: FitInputs, geoms) -> float:
    """Mean per-pixel |I_R - I_in| over covered pixels the oracle calls face."""
    face = np.stack([geo.m_r for geo in geoms]) & (inputs.seg > 0.5)
    if not face.any():
        return float("inf")
    return float(np.linalg.norm(fwd["i_r"] - inputs.frames, axis=-1)[face].mean())


def _delta_grad(state: FitState, g_tex: np.ndarray) -> np.ndarray:
    """Chain diffuse-texel gradients through the clamped linear albedo model."""
    model = state.model
    s = state.config.texture_size
    g_d = g_tex[:, :3].reshape(s, s, 3)
    lin = model.albedo_diffuse + np.tensordot(state.groups["delta"].values, model.albedo_basis, axes=1)
    g_d = g_d * ((lin > 0.0) & (lin < 1.0))
    return np.tensordot(model.albedo_basis, g_d, axes=([1, 2, 3], [0, 1, 2]))


def _step(state: FitState, grads: dict):
    c = state.config
    for name, grad in grads.items():
        grp = state.groups[name]
        if grp.frozen:
            continue
        try:
            adam_step(grp, grad, c.adam_beta1, c.adam_beta2, c.adam_eps)
        except FloatingPointError as exc:
            raise NumericalError(f"{exc} (stage {state.stage}, iteration {state.iteration})") from None
    clamp_constraints(state.groups)
    state.sync()


def _log(state: FitState, **terms):
    row = {"iteration": state.iteration, "stage": state.stage}
    for col in LOG_COLUMNS[2:-1]:
        row[col] = float(terms.get(col, 0.0))
    total = float(terms["total"])
    _check_finite("total loss", total, state)
    row["total"] = total
    state.log_rows.append(row)


def _zero_grads(state: FitState, names) -> dict:
    return {n: np.zeros_like(state.groups[n].values) for n in names}


# ---------------------------------------------------------------------------
# stages


def stage1(state: FitState, inputs: FitInputs, iters: int | None = None) -> FitState:
    """Landmark-only fit of (alpha, beta, pose)."""
    n_iter = state.config.iter1 if iters is None else iters
    state.stage = 1
    for name in ("alpha", "beta", "pose"):
        state.groups[name].frozen = False
    for _ in range(n_iter):
        state.iteration += 1
        grads = _zero_grads(state, ("alpha", "beta", "pose"))
        l_lan = _landmark_terms(state, inputs, 1.0, grads)
        _check_finite("landmark loss", l_lan, state)
        _log(state, l_lan=l_lan, total=l_lan)
        _step(state, grads)
    warmup_face_field(state, inputs)
    return state


def warmup_face_field(state: FitState, inputs: FitInputs, iters: int = G_WARMUP_ITERS) -> float:
    """Fit g to the segmentation oracle alone. Returns the final L_seg."""
    grp = state.groups["theta_g"]
    grp.frozen = False
    coords = [geo.coords.reshape(-1, 3) for geo in _geometries(state, inputs)]
    l_seg = float("nan")
    for _ in range(iters):
        grad = np.zeros_like(grp.values)
        outs = [state.g.forward(x) for x in coords]
        g_raw = np.stack([o.reshape(inputs.shape) for o, _ in outs])
        l_seg, g_seg = seg_loss(g_raw, inputs.seg)
        for i, (_, cache) in enumerate(outs):
            grad += state.g.backward(cache, g_seg[i].ravel())
        _step(state, {"theta_g": grad})
    grp.frozen = True
    return l_seg


def _run_ace(state: FitState, m_n: np.ndarray, n: int):
    report = ace_mod.estimate(m_n, state.config.epsilon, iteration=n)
    ace_mod.apply(state.lights, state.f, report)
    dead = ~state.lights.alive
    grp = state.groups["gamma"]
    grp.m[dead] = 0.0
    grp.v[dead] = 0.0
    state.ace = report
    log.info("ACE at stage-2 iteration %d: areas %s, kept %s", n,
             ", ".join(f"{a:.3f}" for a in report.areas), report.kept)


def stage2(state: FitState, inputs: FitInputs, iters: int | None = None) -> FitState:
    c = state.config
    n_iter = c.iter2 if iters is None else iters
    state.stage = 2
    # the landmark term drops to weight w1 here; stale Stage-1 momentum would outrun it
    for name in ("alpha", "beta", "pose"):
        state.groups[name].reset()
    for name in ("alpha", "beta", "pose", "delta", "gamma", "theta_f", "theta_g"):
        state.groups[name].frozen = False
    w = c.weights
    names = ("alpha", "beta", "pose", "delta", "gamma", "theta_f", "theta_g")
    for n in range(1, n_iter + 1):
        state.iteration += 1
        geoms = _geometries(state, inputs)
        post = state.ace is not None or n >= c.iter0
        if n == c.iter0 and state.ace is None:
            probe = _color_pass(state, inputs, geoms, state.texture(), np.arange(c.n))
            _run_ace(state, probe["m_n"], n)
        conds = np.flatnonzero(state.lights.alive) if post else np.arange(c.n)
        fwd = _color_pass(state, inputs, geoms, state.texture(), conds)
        grads = _zero_grads(state, names)
        l_lan = _landmark_terms(state, inputs, w[1], grads)
        l_pho, g_pho = photometric_loss(fwd["i_out"], inputs.frames)
        l_seg, g_seg = seg_loss(fwd["g_raw"], inputs.seg)
        fwd["g_seg"] = w[2] * g_seg
        g_mask = np.zeros_like(fwd["m_n"])
        l_area = l_bin = 0.0
        if post:
            l_bin, gb_ = bin_loss(fwd["m_n"][conds])
            g_mask[conds] = w[4] * gb_
        else:
            l_area, ga_ = area_loss(fwd["m_n"])
            g_mask = w[3] * ga_
        # the photometric pull on M_o is w0*|I_R - I_in| and always points to zero; until the
        # render residual on the oracle's face pixels is under the w2/w0 crossover it would erase
        # the whole face, so g follows the oracle alone, and afterwards only gross misfits reach it
        pho_to_g = False
        if post and render_residual(fwd, inputs, geoms) < (w[2] / w[0] if w[0] > 0 else 0.0):
            pho_to_g = np.linalg.norm(fwd["i_r"] - inputs.frames, axis=-1) > GROSS_RESIDUAL
        back = _color_backward(state, inputs, geoms, fwd, conds, w[0] * g_pho, g_mask, pho_to_g=pho_to_g)
        grads["gamma"] = back["gamma"]
        grads["gamma"][~state.lights.alive] = 0.0
        grads["theta_f"] = back["theta_f"]
        grads["theta_g"] = back["theta_g"]
        grads["delta"] = _delta_grad(state, back["tex"])
        total = w[0] * l_pho + w[1] * l_lan + w[2] * l_seg + w[3] * l_area + w[4] * l_bin
        _log(state, l_lan=l_lan, l_pho=l_pho, l_seg=l_seg, l_area=l_area, l_bin=l_bin, total=total)
        state.stage2_final_pho = l_pho
        _step(state, grads)
    if state.ace is None:
        raise RuntimeError("stage 2 ended before ACE ran; iter0 must not exceed iter2")
    return state


@dataclass
class Stage3Cache:
    geoms: list
    m_o: np.ndarray


def stage3(state: FitState, inputs: FitInputs, scorer=None, iters: int | None = None) -> FitState:
    c = state.config
    n_iter = c.iter3 if iters is None else iters
    state.stage = 3
    if state.ace is None:
        raise RuntimeError("stage 3 needs the stage-2 condition selection")
    t0 = evaluate_albedo(state.model, state.groups["delta"].values)
    state.t0 = t0
    state.palette = kmeans_palette(t0.diffuse, 16, seed=c.seed)
    if state.palette.warning:
        log.warning(state.palette.warning)
    state.groups["T"] = VarGroup("T", t0.stacked(), c.lr_texture)
    for name in ("alpha", "beta", "pose", "delta", "theta_g"):
        state.groups[name].frozen = True
    state.groups["gamma"].reset(c.lr_stage3_light)
    state.groups["theta_f"].reset(c.lr_stage3_light)
    state.groups["gamma"].frozen = False
    state.groups["theta_f"].frozen = False
    if scorer is None and c.w7 > 0:
        scorer = default_scorer(state.model, c.image_size, c.c_sh)

    # geometry and g are frozen: rasterize and evaluate M_o once
    geoms = _geometries(state, inputs)
    m_o = np.stack([state.g(geo.coords.reshape(-1, 3)).reshape(inputs.shape) * geo.m_r for geo in geoms])
    conds = np.flatnonzero(state.lights.alive)
    w = c.weights
    k = state.k
    s = c.texture_size
    for _ in range(n_iter):
        state.iteration += 1
        tex = state.texture()
        fwd = _color_pass(state, inputs, geoms, tex, conds, m_o_fixed=m_o)
        l_pho, g_pho = photometric_loss(fwd["i_out"], inputs.frames)
        tstack = state.groups["T"].values
        l_gp = l_lp = l_hp = 0.0
        g_t = np.zeros_like(tstack)
        if w[5] > 0:
            l_gp, g_gp = global_prior_loss(tstack[..., :3], state.palette)
            g_t[..., :3] += w[5] * g_gp
        if w[6] > 0:
            l_lp, g_lp = local_prior_loss(tstack, t0.stacked())
            g_t += w[6] * g_lp
        g_render = None
        if w[7] > 0:
            g_render = np.zeros_like(fwd["renders"])
            for i in range(k):
                v, g_h = human_prior_loss(fwd["renders"][:, i], scorer)
                l_hp += v / k
                g_render[:, i] = w[7] * g_h / k
        back = _color_backward(state, inputs, geoms, fwd, conds, w[0] * g_pho, None, g_render, want_g=False)
        state.occluded_texture_grad += back["occluded"]
        g_t += back["tex"].reshape(s, s, 5)
        grads = {"T": g_t, "gamma": back["gamma"], "theta_f": back["theta_f"]}
        grads["gamma"][~state.lights.alive] = 0.0
        total = w[0] * l_pho + w[5] * l_gp + w[6] * l_lp + w[7] * l_hp
        _log(state, l_pho=l_pho, l_gp=l_gp, l_lp=l_lp, l_hp=l_hp, total=total)
        _step(state, grads)
    return state


@functools.lru_cache(maxsize=4)
def _reference_crops(model_key: tuple, image_size: int, c_sh: int, count: int = 16) -> np.ndarray:
    model = generate_model(*model_key)
    rng = np.random.default_rng(20240)
    pose = PoseCamera(focal=2.0 * image_size, image_size=(image_size, image_size))
    geo = frame_geometry(model, np.zeros(model.n_shape), np.zeros(model.n_expr), pose, 0.0, c_sh,
                         model.texture_size)
    gamma = np.zeros((3, c_sh))
    gamma[:, 0] = 1.0 / (0.5 * np.sqrt(1.0 / np.pi))  # unit irradiance everywhere
    probe = TemplateScorer(np.zeros((1, 32, 32, 3)))
    crops = []
    for _ in range(count):
        tex = evaluate_albedo(model, rng.normal(0.0, 0.5, model.n_albedo))
        a_d, a_s, a_r = sample_albedo(geo.inputs, tex)
        color, _ = shade_condition(geo.inputs, a_d, a_s, a_r, gamma)
        img = np.zeros((image_size, image_size, 3))
        img[geo.inputs.pix] = color
        crops.append(probe._crop(img)[0])
    out = np.stack(crops)
    out.flags.writeable = False
    return out


def default_scorer(model: ProxyMM, image_size: int, c_sh: int) -> TemplateScorer:
    """Template bank of 16 seeded albedos rendered under uniform light."""
    return TemplateScorer(_reference_crops(model.key(), image_size, c_sh))


# ---------------------------------------------------------------------------
# results


@dataclass
class FinalRender:
    m_r: np.ndarray  # (k, H, W)
    m_l: np.ndarray  # (n_L, k, H, W)
    m_o: np.ndarray  # (k, H, W)
    i_rs: np.ndarray  # (n_L, k, H, W, 3)
    i_r: np.ndarray  # (k, H, W, 3)
    i_out: np.ndarray  # (k, H, W, 3)


def render_final(model: ProxyMM, alpha, betas, poses, times, texture: TextureSet, lights: LightSet,
                 f: MaskField, g: MaskField, frames) -> FinalRender:
    k = len(poses)
    h, w = frames.shape[1:3]
    conds = np.flatnonzero(lights.alive)
    m_r = np.zeros((k, h, w), dtype=bool)
    m_l = np.zeros((len(conds), k, h, w))
    m_o = np.zeros((k, h, w))
    i_rs = np.zeros((len(conds), k, h, w, 3))
    for i in range(k):
        geo = frame_geometry(model, alpha, betas[i], poses[i], float(times[i]), lights.c_sh, texture.resolution[0])
        pix = geo.inputs.pix
        m_r[i] = geo.m_r
        f_out = f(geo.coords[pix])
        m_o[i] = g(geo.coords.reshape(-1, 3)).reshape(h, w) * geo.m_r
        a_d, a_s, a_r = sample_albedo(geo.inputs, texture)
        for j, c in enumerate(conds):
            color, _ = shade_condition(geo.inputs, a_d, a_s, a_r, lights.coeffs[c])
            i_rs[j, i][pix] = color
            m_l[j, i][pix] = f_out[:, c]
    i_r = np.einsum("nkhw,nkhwc->khwc", m_l, i_rs)
    i_out = i_r * m_o[..., None] + frames * (1.0 - m_o[..., None])
    return FinalRender(m_r, m_l, m_o, i_rs, i_r, i_out)


@dataclass
class FitResult:
    config: FitConfig
    model_key: tuple
    inputs: FitInputs
    texture: TextureSet
    t0: TextureSet
    lights: LightSet
    alpha: np.ndarray
    beta: np.ndarray  # (k, K_b)
    delta: np.ndarray
    poses: list
    f: MaskField
    g: MaskField
    ace: ace_mod.AceReport
    palette: Palette | None
    render: FinalRender
    log_rows: list
    occluded_texture_grad: float = 0.0
    runtime_seconds: float = 0.0

    @property
    def k(self) -> int:
        return len(self.poses)

    @property
    def n_l(self) -> int:
        return self.lights.n_alive

    def model(self) -> ProxyMM:
        return generate_model(*self.model_key)

    def hash(self) -> str:
        """Digest of every fitted quantity (runtime excluded)."""
        h = hashlib.sha256()
        arrays = [self.texture.stacked(), self.t0.stacked(), self.lights.coeffs,
                  self.lights.alive.astype(np.uint8), self.alpha, self.beta, self.delta,
                  np.stack([p.params() for p in self.poses]), self.f.theta, self.g.theta,
                  self.render.m_l, self.render.m_o, self.render.i_rs, self.render.i_out,
                  np.array([[r[c] for c in LOG_COLUMNS] for r in self.log_rows], dtype=np.float64)]
        for a in arrays:
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(repr(self.ace.to_dict()).encode())
        return h.hexdigest()

    def with_texture(self, texture: TextureSet) -> "FitResult":
        """Same geometry, lights and masks, different texture; renders are recomputed."""
        r = render_final(self.model(), self.alpha, self.beta, self.poses, self.inputs.times, texture,
                         self.lights, self.f, self.g, self.inputs.frames)
        out = FitResult(**{f.name: getattr(self, f.name) for f in dc_fields(self)})
        out.texture = texture
        out.render = r
        return out


def fit(scene_or_inputs, config: FitConfig, scorer=None) -> FitResult:
    """Run stages 1-3 on a scene (or prepared inputs)."""
    start = time.perf_counter()
    config.validate()
    inputs = scene_or_inputs if isinstance(scene_or_inputs, FitInputs) else FitInputs.from_scene(scene_or_inputs)
    inputs.validate(config)
    model = generate_model(inputs.model_seed, texture_size=config.texture_size)
    state = init_state(config, inputs.k, model)
    stage1(state, inputs)
    stage2(state, inputs)
    stage3(state, inputs, scorer)
    return result_from_state(state, inputs, time.perf_counter() - start)


def result_from_state(state: FitState, inputs: FitInputs, runtime: float = 0.0) -> FitResult:
    tex = state.texture()
    poses = [state.pose(i) for i in range(state.k)]
    f = state.f.copy()
    g = state.g.copy()
    lights = state.lights.copy()
    alpha = state.groups["alpha"].values.copy()
    beta = state.groups["beta"].values.copy()
    r = render_final(state.model, alpha, beta, poses, inputs.times, tex, lights, f, g, inputs.frames)
    return FitResult(state.config, state.model.key(), inputs, tex, state.t0 if state.t0 is not None else tex.copy(),
                     lights, alpha, beta, state.groups["delta"].values.copy(), poses, f, g, state.ace,
                     state.palette, r, list(state.log_rows), state.occluded_texture_grad, runtime)


def swap_synthesize(fit_src: FitResult, fit_tgt: FitResult) -> np.ndarray:
    """Target frames re-rendered with the source's texture: (k, H, W, 3)."""
    if fit_src.model_key != fit_tgt.model_key:
        raise ValueError("swap needs both fits on the same proxy model")
    return fit_tgt.with_texture(fit_src.texture).render.i_out


def relight_single(model: ProxyMM, alpha, beta, pose: PoseCamera, texture: TextureSet, gamma):
    """Render under one light condition; returns (image, coverage mask)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    s = pose.image_size
    geo = frame_geometry(model, alpha, beta, pose, 0.0, gamma.shape[1], texture.resolution[0])
    a_d, a_s, a_r = sample_albedo(geo.inputs, texture)
    color, _ = shade_condition(geo.inputs, a_d, a_s, a_r, gamma)
    img = np.zeros((s[1], s[0], 3))
    img[geo.inputs.pix] = color
    return img, geo.m_r


def relight(fit_res: FitResult, lights, frame: int = 0) -> np.ndarray:
    """Re-render one fitted frame under user lights, composited into its input.

    ``lights`` is a single (3, C) block (applied over the whole face) or an
    (n_L, 3, C) stack matching the fit's surviving conditions and masks.
    """
    lights = np.asarray(lights, dtype=np.float64)
    if lights.ndim == 2:
        lights = lights[None]
    if lights.shape[0] not in (1, fit_res.n_l):
        raise ValueError(f"expected 1 or {fit_res.n_l} light blocks, got {lights.shape[0]}")
    if lights.shape[2] != fit_res.lights.c_sh:
        raise ValueError(f"lights have {lights.shape[2]} SH coefficients, fit uses {fit_res.lights.c_sh}")
    model = fit_res.model()
    r = fit_res.render
    i_r = np.zeros(r.i_r.shape[1:])
    for j, gamma in enumerate(lights):
        img, m_r = relight_single(model, fit_res.alpha, fit_res.beta[frame], fit_res.poses[frame],
                                  fit_res.texture, gamma)
        weight = m_r.astype(np.float64) if lights.shape[0] == 1 else r.m_l[j, frame]
        i_r += weight[..., None] * img
    m_o = r.m_o[frame][..., None]
    return i_r * m_o + fit_res.inputs.frames[frame] * (1.0 - m_o)


def texture_visibility(model: ProxyMM, alpha, betas, poses, texture_size: int) -> np.ndarray:
    """Texels reached by a bilinear lookup from some covered pixel in some frame."""
    vis = np.zeros((texture_size, texture_size), dtype=bool)
    for b, p in zip(betas, poses):
        verts, normals = evaluate_geometry(model, alpha, b)
        gb = rasterize(verts, normals, model.triangles, model.uv_coords, p)
        vis |= texel_footprint(gb, texture_size)
    return vis


def texture_gradient_from_pixels(fit_res: FitResult, pixel_mask, weight: float | None = None) -> np.ndarray:
    """Stage-3 photometric diffuse-texel gradient contributed by ``pixel_mask`` pixels only.

    Recomputes the final state's forward pass and restricts dL/dI_out to the
    selected (k, H, W) pixels before backpropagating.
    """
    cfg = fit_res.config
    model = fit_res.model()
    inputs = fit_res.inputs
    groups = {"theta_f": VarGroup("theta_f", fit_res.f.theta.copy(), 0.0),
              "theta_g": VarGroup("theta_g", fit_res.g.theta.copy(), 0.0),
              "gamma": VarGroup("gamma", fit_res.lights.coeffs.copy(), 0.0),
              "alpha": VarGroup("alpha", fit_res.alpha, 0.0),
              "beta": VarGroup("beta", fit_res.beta, 0.0),
              "pose": VarGroup("pose", np.stack([p.params() for p in fit_res.poses]), 0.0),
              "T": VarGroup("T", fit_res.texture.stacked(), 0.0)}
    st = FitState(cfg, model, groups, fit_res.f.copy(), fit_res.g.copy(), fit_res.lights.copy(), stage=3)
    st.sync()
    geoms = _geometries(st, inputs)
    conds = np.flatnonzero(st.lights.alive)
    fwd = _color_pass(st, inputs, geoms, st.texture(), conds, m_o_fixed=fit_res.render.m_o)
    _, g_pho = photometric_loss(fwd["i_out"], inputs.frames)
    w0 = cfg.w0 if weight is None else weight
    g = w0 * g_pho * np.asarray(pixel_mask, dtype=np.float64)[..., None]
    back = _color_backward(st, inputs, geoms, fwd, conds, g, None, want_g=False)
    s = cfg.texture_size
    return back["tex"].reshape(s, s, 5)[..., :3]
