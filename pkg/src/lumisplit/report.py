"""Fit directories (save / load) and metrics of a fit against scene ground truth."""
from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from . import io, metrics, plotting
from .ace import AceReport
from .fields import MaskField
from .losses import Palette
from .pipeline import LOG_COLUMNS, FitConfig, FitInputs, FitResult, relight_single, render_final, texture_visibility
from .proxymm import PoseCamera, generate_model
from .shade import LightSet, TextureSet
from .synth import sh_from_direction

# held-out light for the relighting check: side light from the viewer's right, slightly above
HELD_OUT_DIRECTION = (0.5, -0.3, -0.8)
HELD_OUT_AMBIENT = 0.6
HELD_OUT_STRENGTH = 0.35


def held_out_light(c_sh: int) -> np.ndarray:
    d = np.asarray(HELD_OUT_DIRECTION) / np.linalg.norm(HELD_OUT_DIRECTION)
    return np.stack([sh_from_direction(HELD_OUT_AMBIENT, HELD_OUT_STRENGTH, d, c_sh)] * 3)


# ---------------------------------------------------------------------------
# metrics


def gt_visibility(res: FitResult, scene) -> np.ndarray:
    gt = scene.gt
    return texture_visibility(res.model(), gt["alpha"], gt["beta"], gt["poses"], res.config.texture_size)


def relight_psnr(res: FitResult, scene, gamma=None, frame: int = 0) -> float:
    """PSNR of fitted vs ground-truth renders under one light, over pixels both cover."""
    gt = scene.gt
    gamma = held_out_light(res.lights.c_sh) if gamma is None else np.asarray(gamma, dtype=np.float64)
    model = res.model()
    ref, ref_cov = relight_single(model, gt["alpha"], gt["beta"][frame], gt["poses"][frame], gt["texture"], gamma)
    out, out_cov = relight_single(model, res.alpha, res.beta[frame], res.poses[frame], res.texture, gamma)
    both = ref_cov & out_cov
    if not both.any():
        return 0.0
    return metrics.psnr(out[both], ref[both])


def face_mask_error(res: FitResult, scene) -> float:
    """Mean |M_o - gt face mask| over the rendered pixels."""
    mr = res.render.m_r
    return float(np.abs(res.render.m_o - scene.gt["face_mask"])[mr].mean())


def fit_metrics(res: FitResult, scene=None) -> tuple[metrics.MetricsReport, dict]:
    """MetricsReport of the reconstruction, plus ground-truth extras when the scene has them."""
    frames = res.inputs.frames
    i_out = res.render.i_out
    psnr = metrics.psnr(i_out, frames)
    ssim = float(np.mean([metrics.ssim(a, b) for a, b in zip(i_out, frames)]))
    ious, rmse, extra = [], None, {}
    if scene is not None and scene.gt:
        gtm = scene.region_masks()
        ious, assign = metrics.mask_iou(res.render.m_l.reshape(res.n_l, -1), gtm.reshape(len(gtm), -1))
        rmse = metrics.texture_rmse_visible(res.texture.stacked(), scene.gt["texture"].stacked(),
                                            gt_visibility(res, scene))
        extra = {"face_mask_error": face_mask_error(res, scene), "relight_psnr_db": relight_psnr(res, scene),
                 "mask_assignment": assign, "gt_regions": len(gtm)}
    report = metrics.MetricsReport(psnr, ssim, ious, rmse, res.n_l, res.runtime_seconds)
    return report, extra


# ---------------------------------------------------------------------------
# fit directories


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(float(r[c])) if c not in ("iteration", "stage") else int(r[c]))
                        for c in LOG_COLUMNS})


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{c: (int(r[c]) if c in ("iteration", "stage") else float(r[c])) for c in LOG_COLUMNS}
                for r in csv.DictReader(fh)]


def save_fit(res: FitResult, path, scene=None, figures: bool = True) -> Path:
    """Write every output of a fit; ``state.npz`` holds the exact float64 values for reloading."""
    root = Path(path)
    for sub in ("masks", "renders", "figures", "fields"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(res.config.to_text(), encoding="utf-8")
    io.write_png(root / "texture_diffuse.png", res.texture.diffuse)
    io.write_flr(root / "texture.flr", res.texture.stacked())
    io.write_png(root / "texture_t0_diffuse.png", res.t0.diffuse)
    io.write_flr(root / "texture_t0.flr", res.t0.stacked())
    io.write_json(root / "lights.json", res.lights.to_dict())
    io.write_json(root / "ace.json", res.ace.to_dict())
    io.write_json(root / "coeffs.json", {"alpha": res.alpha.tolist(), "beta": res.beta.tolist(),
                                         "delta": res.delta.tolist(),
                                         "poses": [p.to_dict() for p in res.poses],
                                         "model_key": list(res.model_key)})
    io.write_json(root / "fields.json", {"f": res.f.to_dict(), "g": res.g.to_dict()})
    for name, fld in (("f", res.f), ("g", res.g)):
        # float32 weights with a layout sidecar; state.npz keeps the exact values
        io.write_flr(root / "fields" / f"{name}.flr", fld.theta[None, :, None])
        (root / "fields" / f"{name}.json").write_text(fld.to_json() + "\n")
    write_log_csv(root / "log.csv", res.log_rows)
    r = res.render
    for i in range(res.k):
        io.write_png(root / "renders" / f"i_out_{i:03d}.png", r.i_out[i])
        io.write_png(root / "renders" / f"i_r_{i:03d}.png", r.i_r[i])
        io.write_flr(root / "masks" / f"m_o_{i:03d}.flr", r.m_o[i])
        io.write_flr(root / "masks" / f"m_l_{i:03d}.flr", np.moveaxis(r.m_l[:, i], 0, -1))
        for j in range(res.n_l):
            io.write_png(root / "renders" / f"i_rs_{j}_{i:03d}.png", r.i_rs[j, i])
    np.savez(root / "state.npz", texture=res.texture.stacked(), t0=res.t0.stacked(), gamma=res.lights.coeffs,
             alive=res.lights.alive, alpha=res.alpha, beta=res.beta, delta=res.delta,
             poses=np.stack([p.params() for p in res.poses]), focal=res.poses[0].focal,
             f_theta=res.f.theta, g_theta=res.g.theta, frames=res.inputs.frames,
             landmarks=res.inputs.landmarks, times=res.inputs.times, seg=res.inputs.seg,
             model_seed=res.inputs.model_seed,
             palette=res.palette.colors if res.palette is not None else np.zeros((0, 3)),
             occluded_texture_grad=res.occluded_texture_grad, runtime=res.runtime_seconds)
    report, extra = fit_metrics(res, scene)
    io.write_json(root / "metrics.json", {**report.to_dict(), **extra, "fit_hash": res.hash()})
    if figures:
        plotting.plot_loss_curves(res.log_rows, root / "figures" / "losses.png",
                                  res.config.iter1 + res.ace.iteration)
        plotting.plot_ace_areas(res.ace.areas, res.ace.epsilon, res.ace.kept, root / "figures" / "ace_areas.png")
        for i in range(res.k):
            plotting.plot_mask_panels(res.inputs.frames[i], r.i_out[i], r.m_o[i], r.m_l[:, i],
                                      root / "figures" / f"masks_{i:03d}.png", res.texture.diffuse)
    return root


def load_fit(path) -> FitResult:
    root = Path(path)
    if not (root / "state.npz").exists():
        raise FileNotFoundError(f"{root}: not a fit directory (no state.npz)")
    config = FitConfig.from_file(root / "config.txt")
    st = np.load(root / "state.npz")
    meta = io.read_json(root / "fields.json")
    coeffs = io.read_json(root / "coeffs.json")
    s = config.image_size
    poses = [PoseCamera(p[:3], p[3:], focal=float(st["focal"]), image_size=(s, s)) for p in st["poses"]]
    inputs = FitInputs(st["frames"], st["landmarks"], st["times"], st["seg"], int(st["model_seed"]))
    texture = TextureSet.from_stacked(st["texture"])
    lights = LightSet(st["gamma"], st["alive"])
    f = MaskField.from_dict(meta["f"], st["f_theta"])
    g = MaskField.from_dict(meta["g"], st["g_theta"])
    model_key = tuple(coeffs["model_key"])
    model = generate_model(*model_key)
    render = render_final(model, st["alpha"], st["beta"], poses, inputs.times, texture, lights, f, g, inputs.frames)
    palette = Palette(st["palette"], "") if len(st["palette"]) else None
    return FitResult(config, model_key, inputs, texture, TextureSet.from_stacked(st["t0"]), lights, st["alpha"],
                     st["beta"], st["delta"], poses, f, g, AceReport.from_dict(io.read_json(root / "ace.json")),
                     palette, render, read_log_csv(root / "log.csv"), float(st["occluded_texture_grad"]),
                     float(st["runtime"]))


def swap_report(fit_src: FitResult, fit_tgt: FitResult, synthesized) -> metrics.MetricsReport:
    t0 = time.perf_counter()
    frames = fit_tgt.inputs.frames
    psnr = metrics.psnr(synthesized, frames)
    ssim = float(np.mean([metrics.ssim(a, b) for a, b in zip(synthesized, frames)]))
    return metrics.MetricsReport(psnr, ssim, [], None, fit_tgt.n_l, time.perf_counter() - t0)
