"""Central finite-difference checks of every analytic gradient in the fit.

Each check builds a seeded 8x8 instance in double precision, perturbs one
coordinate at a time by +-step and compares the numerical derivative of a
scalar objective with the analytic one. Coordinates whose perturbation moves
the function across a kink (a relu, clamp, |.|, or nearest-colour switch) are
skipped; ``pattern`` callables expose those branch decisions.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses
from .fields import encode, init_field
from .proxymm import PoseCamera, generate_model, project_landmarks
from .shade import (ShadingInputs, TextureSet, bilinear_taps, compose, compose_backward, gather, scatter,
                    sh_basis, shade_condition, shade_condition_backward)

STEP = 1e-3
TOLERANCE = 1e-4
# derivatives smaller than this (relative to the largest one in the check) are compared absolutely
ABS_FLOOR = 1e-6
SIZE = 8


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    n_skipped: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<28} max rel err {self.max_rel_err:.2e} "
                f"({self.n_checked} coords, {self.n_skipped} skipped)")


def _pattern_equal(a, b) -> bool:
    if a is None:
        return True
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check(name: str, fn, x0, grad, pattern=None, step: float = STEP, tol: float = TOLERANCE,
          max_coords: int | None = 400, rng=None) -> CheckResult:
    """Compare ``grad`` (same shape as x0) with central differences of scalar ``fn``.

    ``pattern(x)`` returns a tuple of arrays describing the branch taken; a
    coordinate is skipped when the pattern differs at x - step or x + step.
    """
    x0 = np.array(x0, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x0.shape:
        raise ValueError(f"{name}: gradient shape {grad.shape} != input shape {x0.shape}")
    flat = x0.ravel()
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
    base = pattern(x0) if pattern is not None else None
    scale = max(float(np.abs(grad).max()), 1e-300)
    worst, checked, skipped = 0.0, 0, 0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        xp = xp.reshape(x0.shape)
        xm = xm.reshape(x0.shape)
        if pattern is not None and not (_pattern_equal(base, pattern(xp)) and _pattern_equal(base, pattern(xm))):
            skipped += 1
            continue
        fd = (fn(xp) - fn(xm)) / (2.0 * step)
        an = grad.ravel()[i]
        denom = max(abs(fd), abs(an), ABS_FLOOR * scale)
        worst = max(worst, abs(fd - an) / denom)
        checked += 1
    return CheckResult(name, worst, checked, skipped, checked > 0 and worst <= tol)


# ---------------------------------------------------------------------------
# individual checks


def _away_from_zero(rng, shape, low: float) -> np.ndarray:
    """Random signed offsets with magnitude in [low, 2 * low]."""
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(low, 2 * low, shape)


def _losses(rng) -> list[CheckResult]:
    out = []
    s = SIZE

    q_in = rng.uniform(0, s, (16, 2))
    q_out = q_in + _away_from_zero(rng, (16, 2), 0.5)
    out.append(check("landmark_loss", lambda q: losses.landmark_loss(q, q_in)[0], q_out,
                     losses.landmark_loss(q_out, q_in)[1]))

    i_in = rng.uniform(0, 1, (s, s, 3))
    # residuals kept >= 0.3: the norm's curvature grows as 1/|r| and would swamp the step
    i_out = i_in + _away_from_zero(rng, i_in.shape, 0.3)
    out.append(check("photometric_loss", lambda x: losses.photometric_loss(x, i_in)[0], i_out,
                     losses.photometric_loss(i_out, i_in)[1],
                     pattern=lambda x: (np.linalg.norm(x - i_in, axis=-1) > 1e-6,)))

    h = rng.uniform(0, 1, (s, s))
    g = rng.uniform(0, 1, (s, s))
    out.append(check("seg_loss", lambda x: losses.seg_loss(x, h)[0], g, losses.seg_loss(g, h)[1],
                     pattern=lambda x: (np.sign(x - h),)))

    m_n = rng.dirichlet(np.ones(5), (s, s)).transpose(2, 0, 1)
    out.append(check("area_loss", lambda x: losses.area_loss(x)[0], m_n, losses.area_loss(m_n)[1]))

    m_l = rng.uniform(0, 1, (2, s, s))
    out.append(check("bin_loss", lambda x: losses.bin_loss(x)[0], m_l, losses.bin_loss(m_l)[1]))

    t0 = rng.uniform(0, 1, (s, s, 3))
    pal = losses.kmeans_palette(t0, 4, seed=0)
    t = pal.colors[rng.integers(len(pal.colors), size=s * s)].reshape(t0.shape) + _away_from_zero(rng, t0.shape, 0.1)

    def nearest(x):
        return (losses._sq_dists(x.reshape(-1, 3), pal.colors).argmin(axis=1),)
    out.append(check("global_prior_loss", lambda x: losses.global_prior_loss(x, pal)[0], t,
                     losses.global_prior_loss(t, pal)[1], pattern=nearest))

    t0s = rng.uniform(0, 1, (s, s, 5))
    ts = t0s + rng.normal(0, 0.1, t0s.shape)

    def variation_signs(x):
        d = x - t0s
        return (np.sign(losses.neighbor_variation(d)),)
    out.append(check("local_prior_loss", lambda x: losses.local_prior_loss(x, t0s)[0], ts,
                     losses.local_prior_loss(ts, t0s)[1], pattern=variation_signs))

    refs = rng.uniform(0.1, 0.9, (6, s, s, 3))
    scorer = losses.TemplateScorer(refs, temperature=0.05, size=s)
    faces = np.clip(refs[:2] + rng.normal(0, 0.05, (2, s, s, 3)), 0.05, 1)

    def best_and_support(x):
        return tuple(np.concatenate([[np.argmax(scorer.scores(f))], np.any(f > 0, axis=-1).ravel()]) for f in x)
    out.append(check("human_prior_loss", lambda x: losses.human_prior_loss(x, scorer)[0], faces,
                     losses.human_prior_loss(faces, scorer)[1], pattern=best_and_support))
    return out


def _landmark_chain(rng) -> list[CheckResult]:
    """L_lan through projection w.r.t. shape, expression and pose."""
    model = generate_model(7, texture_size=SIZE)
    alpha = rng.normal(0, 0.5, model.n_shape)
    beta = rng.normal(0, 0.5, model.n_expr)
    params = np.r_[rng.normal(0, 0.2, 3), 0.1, -0.1, 5.5]
    q_in = project_landmarks(model, alpha, beta, _pose(params)) + _away_from_zero(rng, (len(model.landmark_idx), 2), 0.5)

    def loss(a, b, p):
        return losses.landmark_loss(project_landmarks(model, a, b, _pose(p)), q_in)[0]

    q, jac = project_landmarks(model, alpha, beta, _pose(params), jacobian=True)
    _, g_q = losses.landmark_loss(q, q_in)
    return [
        check("landmark_chain/alpha", lambda a: loss(a, beta, params), alpha,
              np.einsum("li,lia->a", g_q, jac["alpha"])),
        check("landmark_chain/beta", lambda b: loss(alpha, b, params), beta,
              np.einsum("li,lia->a", g_q, jac["beta"])),
        check("landmark_chain/pose", lambda p: loss(alpha, beta, p), params,
              np.einsum("li,lia->a", g_q, jac["pose"])),
    ]


def _pose(params) -> PoseCamera:
    return PoseCamera(params[:3], params[3:], focal=2.0 * SIZE, image_size=(SIZE, SIZE))


def _shading_inputs(rng, n_pix: int) -> ShadingInputs:
    # a frontal patch: far from grazing half-vectors, where the lobe's log(n.h) blows up the curvature
    normal = np.tile([0.0, 0.0, 1.0], (n_pix, 1)) + rng.normal(0, 0.3, (n_pix, 3))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    view = np.tile([0.0, 0.0, 1.0], (n_pix, 1)) + rng.normal(0, 0.1, (n_pix, 3))
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    pix = np.divmod(np.arange(n_pix), SIZE)
    taps = bilinear_taps(rng.uniform(0, 1, (n_pix, 2)), SIZE, SIZE)
    return ShadingInputs(pix, normal, view, sh_basis(normal, 9), taps, (SIZE, SIZE))


def _shading(rng) -> list[CheckResult]:
    n_pix = SIZE * SIZE
    inp = _shading_inputs(rng, n_pix)
    a_d = rng.uniform(0.2, 0.9, (n_pix, 3))
    a_s = rng.uniform(0.1, 0.6, n_pix)
    a_r = rng.uniform(0.6, 0.9, n_pix)
    gamma = np.zeros((3, 9))
    gamma[:, 0] = rng.uniform(1.5, 2.5, 3)
    gamma[:, 1:4] = rng.normal(0, 0.3, (3, 3))
    gamma[:, 2] += 0.8  # light from the viewer's side
    gamma[:, 4:] = rng.normal(0, 0.2, (3, 5))
    w = rng.normal(0, 1, (n_pix, 3))

    def obj(ad, as_, ar, gm):
        return float((w * shade_condition(inp, ad, as_, ar, gm)[0]).sum())

    def branches(ad, as_, ar, gm):
        c = shade_condition(inp, ad, as_, ar, gm)[1]
        return (c["raw"] > 0, c["pos"])

    _, cache = shade_condition(inp, a_d, a_s, a_r, gamma)
    g_ad, g_as, g_ar, g_gm = shade_condition_backward(inp, cache, w)
    out = [
        check("shade/diffuse", lambda x: obj(x, a_s, a_r, gamma), a_d, g_ad,
              pattern=lambda x: branches(x, a_s, a_r, gamma)),
        check("shade/specular", lambda x: obj(a_d, x, a_r, gamma), a_s, g_as,
              pattern=lambda x: branches(a_d, x, a_r, gamma)),
        check("shade/roughness", lambda x: obj(a_d, a_s, x, gamma), a_r, g_ar,
              pattern=lambda x: branches(a_d, a_s, x, gamma)),
        check("shade/gamma", lambda x: obj(a_d, a_s, a_r, x), gamma, g_gm,
              pattern=lambda x: branches(a_d, a_s, a_r, x)),
    ]

    tex = rng.uniform(0, 1, (SIZE, SIZE, 5))
    idx, tw = inp.taps
    wv = rng.normal(0, 1, (n_pix, 5))
    g_tex = scatter(wv, idx, tw, SIZE * SIZE).reshape(SIZE, SIZE, 5)
    out.append(check("texture_lookup", lambda x: float((wv * gather(x.reshape(-1, 5), idx, tw)).sum()),
                     tex, g_tex))

    # full chain: texels -> bilinear lookup -> shading
    def chain(x):
        ts = TextureSet.from_stacked(x)
        vals = gather(ts.stacked().reshape(-1, 5), idx, tw)
        return obj(vals[:, :3], vals[:, 3], vals[:, 4], gamma)

    tex[..., 4] = rng.uniform(0.6, 0.9, (SIZE, SIZE))
    vals = gather(tex.reshape(-1, 5), idx, tw)
    _, cache = shade_condition(inp, vals[:, :3], vals[:, 3], vals[:, 4], gamma)
    g_ad, g_as, g_ar, _ = shade_condition_backward(inp, cache, w)
    g_vals = np.concatenate([g_ad, g_as[:, None], g_ar[:, None]], axis=1)
    out.append(check("shade/texels", chain, tex, scatter(g_vals, idx, tw, SIZE * SIZE).reshape(SIZE, SIZE, 5),
                     pattern=lambda x: branches(*_split(gather(x.reshape(-1, 5), idx, tw)), gamma)))
    return out


def _split(vals):
    return vals[:, :3], vals[:, 3], vals[:, 4]


def _compose(rng) -> list[CheckResult]:
    s = SIZE
    i_rs = rng.uniform(0, 1, (3, s, s, 3))
    m_l = rng.dirichlet(np.ones(3), (s, s)).transpose(2, 0, 1)
    m_o = rng.uniform(0, 1, (s, s))
    i_in = rng.uniform(0, 1, (s, s, 3))
    w = rng.normal(0, 1, (s, s, 3))
    i_r, _ = compose(i_rs, m_l, m_o, i_in)
    g_rs, g_ml, g_mo, _ = compose_backward(w, i_rs, m_l, m_o, i_in, i_r)

    def obj(rs, ml, mo):
        return float((w * compose(rs, ml, mo, i_in)[1]).sum())
    return [
        check("compose/renders", lambda x: obj(x, m_l, m_o), i_rs, g_rs),
        check("compose/light_masks", lambda x: obj(i_rs, x, m_o), m_l, g_ml),
        check("compose/face_mask", lambda x: obj(i_rs, m_l, x), m_o, g_mo),
    ]


def _fields(rng) -> list[CheckResult]:
    s = SIZE
    yy, xx = np.meshgrid(np.linspace(-1, 1, s), np.linspace(-1, 1, s), indexing="ij")
    coords = np.stack([xx, yy, np.full_like(xx, 0.25)], -1).reshape(-1, 3)
    out = []
    for name, n, head in (("field_f/softmax", 5, "softmax"), ("field_g/sigmoid", 1, "sigmoid")):
        fld = init_field(int(rng.integers(1 << 30)), n, head=head, out_scale=1.0)
        fld.theta = fld.theta + rng.normal(0, 0.05, fld.theta.shape)
        value, cache = fld.forward(coords)
        w = rng.normal(0, 1, value.shape)
        grad = fld.backward(cache, w)
        probe = fld.copy()

        def obj(th, probe=probe, w=w):
            probe.theta = th
            return float((w * probe(coords)).sum())

        def relus(th, probe=probe):
            probe.theta = th
            h = encode(coords, probe.n_freq)
            pats = []
            for wl, bl in probe.layers()[:-1]:
                pre = h @ wl + bl
                pats.append(pre > 0)
                h = np.maximum(pre, 0.0)
            return tuple(pats)
        out.append(check(name, obj, fld.theta.copy(), grad, pattern=relus, rng=rng))
    return out


SUITES = (_losses, _landmark_chain, _shading, _compose, _fields)


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for suite in SUITES:
        results.extend(suite(rng))
    return results


def main_report(seed: int = 0, stream=None) -> bool:
    """Run the suite, print one line per check, return overall success."""
    import sys
    stream = stream or sys.stdout
    t0 = time.perf_counter()
    results = run_suite(seed)
    for r in results:
        print(r.line(), file=stream)
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'} {len(results)} checks in {time.perf_counter() - t0:.1f}s", file=stream)
    return ok
