"""Ground-truthed synthetic scenes and the default segmentation oracle.

Frames are rendered with this package's own shading and composition, so
the ground-truth variables reproduce every stored frame exactly.

Shadow regions come from occluder disks placed between the head and the
light: pixels whose ray toward the light hits a disk belong to that disk's
region and are lit by a dimmed, tinted copy of the base light.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io
from .fields import frame_times
from .proxymm import (PoseCamera, ProxyMM, _blob_field, evaluate_albedo, evaluate_geometry,
                      generate_model, project_landmarks, rodrigues, texel_directions)
from .raster import GBuffer, rasterize, shadow_visibility
from .shade import LightSet, TextureSet, compose, render_conditions

OCCLUDERS = ("none", "shadow", "sprite", "both")
MIN_REGION_AREA = 0.02
MAX_ATTEMPTS = 10
DISK_RADIUS = 3.0
DISK_DISTANCE = 2.5
DISK_SEGMENTS = 24
_SH_C0 = 0.5 * np.sqrt(1.0 / np.pi)
_SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))


@dataclass
class SceneSpec:
    k: int = 1
    n_regions: int = 1
    occluder: str = "none"
    image_size: int = 128
    texture_size: int = 128
    model_seed: int = 7
    c_sh: int = 9
    landmark_noise: float = 0.0
    seg_noise: float = 0.0

    def validate(self) -> "SceneSpec":
        if self.occluder not in OCCLUDERS:
            raise ValueError(f"occluder must be one of {OCCLUDERS}, got {self.occluder!r}")
        if not 1 <= self.n_regions <= 3:
            raise ValueError("n_regions must lie in 1..3")
        shadow = self.occluder in ("shadow", "both")
        if self.n_regions > 1 and not shadow:
            raise ValueError("extra light regions need a shadow occluder")
        if not 1 <= self.k <= 8:
            raise ValueError("k must lie in 1..8")
        if not 0.0 <= self.seg_noise < 0.5:
            raise ValueError("seg_noise must lie in [0, 0.5)")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        return self

    @property
    def n_disks(self) -> int:
        if self.occluder not in ("shadow", "both"):
            return 0
        return max(self.n_regions, 2) - 1

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class Identity:
    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    texture: TextureSet


@dataclass
class SceneBundle:
    spec: SceneSpec
    seed: int
    frames: np.ndarray  # (k, H, W, 3) linear RGB
    landmarks: np.ndarray  # (k, L, 2)
    times: np.ndarray  # (k,)
    seg: np.ndarray  # (k, H, W) oracle face probability
    gt: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.frames.shape[0]

    @property
    def image_size(self) -> int:
        return self.frames.shape[2]

    def model(self) -> ProxyMM:
        return generate_model(self.spec.model_seed, texture_size=self.spec.texture_size)

    def render_mask(self) -> np.ndarray:
        return self.gt["region_ids"] >= 0

    def region_masks(self, frame: int | None = None) -> np.ndarray:
        """Binary (m, k, H, W) masks of the ground-truth light regions (or one frame's)."""
        ids = self.gt["region_ids"]
        m = len(self.gt["lights"])
        masks = np.stack([ids == r for r in range(m)])
        return masks if frame is None else masks[:, frame]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.frames, self.landmarks, self.times, self.seg, self.gt["texture"].stacked(),
                    self.gt["lights"], self.gt["region_ids"], self.gt["face_mask"]):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _pose_camera(rotation, translation, image_size: int) -> PoseCamera:
    return PoseCamera(rotation, translation, focal=2.0 * image_size, image_size=(image_size, image_size))


def sh_from_direction(ambient: float, strength: float, direction, c_sh: int) -> np.ndarray:
    """SH block whose irradiance is ambient + strength * (n . direction)."""
    d = np.asarray(direction, dtype=np.float64)
    g = np.zeros(c_sh)
    g[0] = ambient / _SH_C0
    if c_sh >= 4:
        g[1:4] = strength * np.array([d[1], d[2], d[0]]) / _SH_C1
    return g


def _base_light(rng, c_sh: int, direction) -> np.ndarray:
    ambient = rng.uniform(0.55, 0.7)
    strength = rng.uniform(0.25, 0.35)
    block = np.stack([sh_from_direction(ambient, strength, direction, c_sh)] * 3)
    block *= (1.0 + rng.uniform(-0.05, 0.05, size=3))[:, None]  # warm/cool cast
    if c_sh >= 9:
        block[:, 4:9] += rng.normal(scale=0.03, size=5)[None]
    return block


def _light_direction(rng) -> np.ndarray:
    d = np.array([rng.uniform(-0.6, 0.6), -0.7, -0.7])
    return d / np.linalg.norm(d)


def _disk(center, normal, radius=DISK_RADIUS, segments=DISK_SEGMENTS):
    a = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(normal, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    ang = 2.0 * np.pi * np.arange(segments) / segments
    rim = center + radius * (np.cos(ang)[:, None] * a + np.sin(ang)[:, None] * b)
    verts = np.vstack([center[None], rim])
    tris = np.array([(0, 1 + i, 1 + (i + 1) % segments) for i in range(segments)])
    return verts, tris


def _disk_frame(light_dir):
    a = np.cross(light_dir, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    return a, np.cross(light_dir, a)


def _occluder_disks(rng, n: int, head_center, light_dir, gb: GBuffer):
    """Disks between head and light, each slid sideways until its shadow covers a
    seeded fraction of the visible head (bisection on the rim offset)."""
    a, b = _disk_frame(light_dir)
    base = np.pi * rng.integers(2)  # mostly sideways splits
    targets = rng.uniform(0.42, 0.58, 1) if n == 1 else rng.uniform(0.22, 0.32, n)
    n_cov = max(int(gb.covered.sum()), 1)
    disks = []
    for i in range(n):
        ang = base + np.pi * i + rng.uniform(-0.35, 0.35)  # second disk from the other side
        u = np.cos(ang) * a + np.sin(ang) * b
        lo, hi = DISK_RADIUS - 2.0, DISK_RADIUS + 2.0
        for _ in range(20):
            mid = 0.5 * (lo + hi)
            dv, dt = _disk(head_center + DISK_DISTANCE * light_dir + mid * u, light_dir)
            frac = (shadow_visibility(dv, dt, gb, light_dir)[gb.covered] == 0).sum() / n_cov
            if frac > targets[i]:
                lo = mid
            else:
                hi = mid
        disks.append(_disk(head_center + DISK_DISTANCE * light_dir + 0.5 * (lo + hi) * u, light_dir))
    return disks


def _inside_polygon(px, py, poly) -> np.ndarray:
    """Even-odd point-in-polygon test for arrays of points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def _sprite_polygon(rng, gb: GBuffer) -> np.ndarray:
    """Irregular star-shaped polygon over the upper face, like a hat brim or hair."""
    rows, cols = np.nonzero(gb.covered)
    top, bottom = rows.min(), rows.max()
    left, right = cols.min(), cols.max()
    cy = top + rng.uniform(0.05, 0.2) * (bottom - top)
    cx = 0.5 * (left + right) + rng.uniform(-0.15, 0.15) * (right - left)
    n = int(rng.integers(6, 10))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rx = rng.uniform(0.3, 0.45) * (right - left)
    ry = rng.uniform(0.15, 0.25) * (bottom - top)
    rad = rng.uniform(0.7, 1.0, n)
    return np.stack([cx + rx * rad * np.cos(ang), cy + ry * rad * np.sin(ang)], axis=1)


def _background(rng, size: int) -> np.ndarray:
    c0 = rng.uniform(0.1, 0.5, 3)
    c1 = rng.uniform(0.1, 0.5, 3)
    ang = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[0:size, 0:size] / (size - 1.0)
    s = 0.5 + 0.5 * (np.cos(ang) * (x - 0.5) + np.sin(ang) * (y - 0.5)) * np.sqrt(2)
    return c0 + (c1 - c0) * np.clip(s, 0, 1)[..., None]


def _sample_identity(rng, model: ProxyMM) -> Identity:
    alpha = rng.normal(0.0, 0.5, model.n_shape)
    beta = rng.normal(0.0, 0.5, model.n_expr)
    delta = rng.normal(0.0, 0.5, model.n_albedo)
    t0 = evaluate_albedo(model, delta)
    detail = _blob_field(rng, texel_directions(model.texture_size), 6, (0.15, 0.35), (3,), 0.03)
    tex = TextureSet(np.clip(t0.diffuse + detail, 0.0, 1.0), t0.specular, t0.roughness)
    return Identity(alpha, beta, delta, tex)


def _attempt(rng, spec: SceneSpec, model: ProxyMM, ident: Identity):
    s = spec.image_size
    k = spec.k
    times = frame_times(k)
    light_dir = _light_direction(rng)
    base = _base_light(rng, spec.c_sh, light_dir)
    lights = [base]
    for _ in range(spec.n_disks):
        factor = rng.uniform(0.15, 0.5)
        tint = 1.0 + rng.uniform(-0.1, 0.1, 3)
        lights.append(base * factor * tint[:, None])
    lights = np.stack(lights)

    yaw = np.deg2rad(rng.uniform(-25.0, 25.0))
    pitch = np.deg2rad(rng.uniform(-8.0, 8.0))
    trans = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 5.5 + rng.uniform(-0.2, 0.2)])
    yaw_rate = np.deg2rad(rng.uniform(-6.0, 6.0))
    betas = [ident.beta + (rng.normal(0.0, 0.15, ident.beta.shape) if i else 0.0) for i in range(k)]

    sprite = spec.occluder in ("sprite", "both")
    sprite_shift = rng.uniform(-0.25, 0.25, 2) * s * 0.25
    bg = _background(rng, s)

    frames, lms, region_ids, face_masks, poses, polys = [], [], [], [], [], []
    ys, xs = np.mgrid[0:s, 0:s] + 0.5
    poly0 = None
    for i in range(k):
        rot = np.array([pitch, yaw + yaw_rate * times[i], 0.0])
        pose = _pose_camera(rot, trans, s)
        verts, normals = evaluate_geometry(model, ident.alpha, betas[i])
        gb = rasterize(verts, normals, model.triangles, model.uv_coords, pose)
        if i == 0:
            disks = _occluder_disks(rng, spec.n_disks, trans, light_dir, gb)
        ids = np.where(gb.covered, 0, -1)
        for j, (dv, dt) in enumerate(disks):
            vis = shadow_visibility(dv, dt, gb, light_dir)
            ids = np.where(gb.covered & (vis == 0) & (ids == 0), j + 1, ids)
        image = bg.copy()
        face = gb.covered.copy()
        poly = None
        if sprite:
            if poly0 is None:
                poly0 = _sprite_polygon(rng, gb)
                noise = gaussian_filter(rng.normal(0, 1, (s, s)), 1.0)
                dark = rng.uniform(0.03, 0.1, 3)
            poly = poly0 + sprite_shift * times[i]
            inside = _inside_polygon(xs, ys, poly)
            image[inside] = np.clip(dark + 0.03 * noise[inside][:, None], 0.0, 1.0)
            face &= ~inside
        _, i_rs = render_conditions(gb, ident.texture, LightSet(lights))
        one_hot = np.stack([(ids == r).astype(np.float64) for r in range(len(lights))])
        _, i_out = compose(i_rs, one_hot, face.astype(np.float64), image)
        frames.append(i_out)
        lms.append(project_landmarks(model, ident.alpha, betas[i], pose))
        region_ids.append(ids)
        face_masks.append(face)
        poses.append(pose)
        polys.append(None if poly is None else poly.tolist())

    region_ids = np.stack(region_ids)
    areas = [(region_ids == r).mean() for r in range(len(lights))]
    if min(areas) < MIN_REGION_AREA:
        return None
    if sprite and np.mean([fm.sum() / max(gb_cov, 1) for fm, gb_cov in
                           zip(face_masks, (region_ids >= 0).reshape(k, -1).sum(1))]) > 0.98:
        return None
    gt = {
        "alpha": ident.alpha, "beta": np.stack(betas), "delta": ident.delta,
        "poses": poses, "texture": ident.texture, "lights": lights, "light_dir": light_dir,
        "region_ids": region_ids, "face_mask": np.stack(face_masks), "sprite": polys,
        "background": bg, "region_areas": [float(a) for a in areas],
    }
    return np.stack(frames), np.stack(lms), times, gt


def gen_scene(seed: int, spec: SceneSpec | dict | None = None, identity: Identity | None = None) -> SceneBundle:
    """Seeded synthetic scene; ``identity`` pins (alpha, beta, delta, T*) across scenes."""
    if spec is None:
        spec = SceneSpec()
    elif isinstance(spec, dict):
        spec = SceneSpec.from_dict(spec)
    spec.validate()
    model = generate_model(spec.model_seed, texture_size=spec.texture_size)
    rng = np.random.default_rng(seed)
    ident = identity if identity is not None else _sample_identity(rng, model)
    for _ in range(MAX_ATTEMPTS):
        out = _attempt(rng, spec, model, ident)
        if out is not None:
            break
    else:
        raise RuntimeError(f"scene seed {seed}: a light region stayed below "
                           f"{MIN_REGION_AREA:.0%} of the frame after {MAX_ATTEMPTS} attempts")
    frames, lms, times, gt = out
    if spec.landmark_noise > 0:
        lms = lms + rng.normal(0.0, spec.landmark_noise, lms.shape)
    scene = SceneBundle(spec, seed, frames, lms, times, np.zeros(frames.shape[:3]), gt)
    scene.seg = seg_oracle(scene, spec.seg_noise)
    return scene


def seg_oracle(scene: SceneBundle, rho: float = 0.0, sigma: float = 1.5) -> np.ndarray:
    """Blurred ground-truth face mask with seeded per-pixel flips at rate ``rho``."""
    if not 0.0 <= rho < 0.5:
        raise ValueError("rho must lie in [0, 0.5)")
    rng = np.random.default_rng([scene.seed, 0x5E6])
    out = []
    for fm in scene.gt["face_mask"]:
        h = gaussian_filter(fm.astype(np.float64), sigma, mode="constant")
        flip = rng.random(h.shape) < rho
        out.append(np.clip(np.where(flip, 1.0 - h, h), 0.0, 1.0))
    return np.stack(out)


def make_pair(seed: int, image_size: int = 128, texture_size: int = 128, k: int = 1):
    """(source with a shadow occluder, target without), same person."""
    src = gen_scene(seed, SceneSpec(k=k, n_regions=2, occluder="shadow", image_size=image_size,
                                    texture_size=texture_size))
    ident = Identity(src.gt["alpha"], src.gt["beta"][0], src.gt["delta"], src.gt["texture"])
    tgt = gen_scene(seed + 104729, SceneSpec(k=k, n_regions=1, occluder="none", image_size=image_size,
                                             texture_size=texture_size), identity=ident)
    return src, tgt


# ---------------------------------------------------------------------------
# scene directories


def save_scene(scene: SceneBundle, path) -> Path:
    root = Path(path)
    for sub in ("frames", "gt", "seg"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(scene.frames):
        io.write_png(root / "frames" / f"frame_{i:03d}.png", fr)
        io.write_flr(root / "frames" / f"frame_{i:03d}.flr", fr)
        io.write_flr(root / "seg" / f"seg_{i:03d}.flr", scene.seg[i])
    io.write_json(root / "landmarks.json", {"times": scene.times.tolist(),
                                            "landmarks": scene.landmarks.tolist()})
    gt = scene.gt
    io.write_json(root / "gt" / "coeffs.json", {
        "alpha": gt["alpha"].tolist(), "beta": gt["beta"].tolist(), "delta": gt["delta"].tolist(),
        "poses": [p.to_dict() for p in gt["poses"]]})
    io.write_json(root / "gt" / "lights.json", {
        "coeffs": gt["lights"].tolist(), "light_dir": gt["light_dir"].tolist(),
        "region_areas": gt["region_areas"]})
    io.write_json(root / "gt" / "sprite.json", {"polygons": gt["sprite"]})
    io.write_flr(root / "gt" / "region_ids.flr", np.moveaxis(gt["region_ids"], 0, -1))
    io.write_flr(root / "gt" / "face_mask.flr", np.moveaxis(gt["face_mask"], 0, -1))
    io.write_flr(root / "gt" / "background.flr", gt["background"])
    io.write_flr(root / "gt" / "texture_stack.flr", gt["texture"].stacked())
    io.write_png(root / "gt" / "texture_diffuse.png", gt["texture"].diffuse)
    io.write_json(root / "spec.json", {"seed": scene.seed, "spec": scene.spec.to_dict(),
                                       "digest": scene.digest()})
    return root


def _frames_from_dir(root: Path) -> np.ndarray:
    frames = []
    for png in sorted((root / "frames").glob("frame_*.png")):
        flr = png.with_suffix(".flr")
        frames.append(io.read_flr(flr).astype(np.float64) if flr.exists() else io.read_png(png))
    if not frames:
        raise FileNotFoundError(f"{root}: no frames/frame_*.png")
    return np.stack(frames)


def load_scene(path) -> SceneBundle:
    """Load a scene directory; ground truth is optional (real inputs carry none)."""
    root = Path(path)
    meta = io.read_json(root / "spec.json") if (root / "spec.json").exists() else {"seed": 0, "spec": {}}
    frames = _frames_from_dir(root)
    k = len(frames)
    lm = io.read_json(root / "landmarks.json")
    landmarks = np.asarray(lm["landmarks"], dtype=np.float64).reshape(k, -1, 2)
    times = np.asarray(lm.get("times", frame_times(k)), dtype=np.float64)
    spec = SceneSpec.from_dict(meta["spec"])
    spec.k = k
    spec.image_size = frames.shape[2]
    seg_files = sorted((root / "seg").glob("seg_*.flr")) if (root / "seg").exists() else []
    if len(seg_files) == k:
        seg = np.stack([io.read_flr(p).astype(np.float64) for p in seg_files])
    else:
        seg = None
    gt = {}
    g = root / "gt"
    if (g / "coeffs.json").exists():
        c = io.read_json(g / "coeffs.json")
        lights = io.read_json(g / "lights.json")
        tex = io.read_flr(g / "texture_stack.flr").astype(np.float64)
        ids = io.read_flr(g / "region_ids.flr", squeeze=False)
        fm = io.read_flr(g / "face_mask.flr", squeeze=False)
        sprite = io.read_json(g / "sprite.json")["polygons"] if (g / "sprite.json").exists() else [None] * k
        gt = {
            "alpha": np.asarray(c["alpha"]), "beta": np.asarray(c["beta"]), "delta": np.asarray(c["delta"]),
            "poses": [PoseCamera.from_dict(p) for p in c["poses"]],
            "texture": TextureSet.from_stacked(tex), "lights": np.asarray(lights["coeffs"]),
            "light_dir": np.asarray(lights["light_dir"]),
            "region_areas": lights["region_areas"],
            "region_ids": np.moveaxis(ids, -1, 0).astype(np.int64),
            "face_mask": np.moveaxis(fm, -1, 0) > 0.5,
            "sprite": sprite,
            "background": io.read_flr(g / "background.flr").astype(np.float64),
        }
    scene = SceneBundle(spec, int(meta["seed"]), frames, landmarks, times,
                        np.zeros(frames.shape[:3]) if seg is None else seg, gt)
    if seg is None:
        if not gt:
            raise FileNotFoundError(f"{root}: no seg/seg_*.flr and no ground truth to derive it from")
        scene.seg = seg_oracle(scene, spec.seg_noise)
    return scene
