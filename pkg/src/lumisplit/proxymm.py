"""Procedural morphable head model.

A seeded icosphere ellipsoid with linear shape/expression bases, statistical
albedo rasters in UV space and a fixed set of landmark vertices. Everything
is derived from the seed, so a model never has to be shipped as an asset.

Coordinate conventions
----------------------
Model space: x right, y up, z out of the face (landmarks live on z > 0).
Camera space: x right, y down, z forward (OpenCV style); a point is in front
of the camera when z > 0. ``PoseCamera`` maps model to camera space through a
fixed half turn about x followed by the pose rotation and translation.
"""
from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

ICO_SUBDIVISIONS = 4
HEAD_SCALE = np.array([1.0, 1.25, 1.1])
N_LANDMARKS = 16
MAX_BLOBS = 8

# model (y up, z toward viewer) -> camera (y down, z forward)
CANONICAL = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True, eq=False)
class ProxyMM:
    mean_vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int, outward counter-clockwise
    uv_coords: np.ndarray  # (V, 2) in [0, 1]
    shape_basis: np.ndarray  # (K_a, V, 3)
    expr_basis: np.ndarray  # (K_b, V, 3)
    albedo_diffuse: np.ndarray  # (H_T, W_T, 3)
    albedo_specular: np.ndarray  # (H_T, W_T)
    albedo_roughness: np.ndarray  # (H_T, W_T)
    albedo_basis: np.ndarray  # (K_d, H_T, W_T, 3)
    landmark_idx: np.ndarray  # (L,) int
    seed: int

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[0]

    @property
    def n_albedo(self) -> int:
        return self.albedo_basis.shape[0]

    @property
    def texture_size(self) -> int:
        return self.albedo_diffuse.shape[0]

    def key(self) -> tuple:
        """Arguments that regenerate this model."""
        return (self.seed, self.n_shape, self.n_expr, self.n_albedo, self.texture_size)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_shape": self.n_shape,
            "n_expr": self.n_expr,
            "n_albedo": self.n_albedo,
            "texture_size": self.texture_size,
            "mean_vertices": self.mean_vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "uv_coords": self.uv_coords.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "expr_basis": self.expr_basis.tolist(),
            "albedo_mean": {
                "diffuse": self.albedo_diffuse.tolist(),
                "specular": self.albedo_specular.tolist(),
                "roughness": self.albedo_roughness.tolist(),
            },
            "albedo_basis": self.albedo_basis.tolist(),
            "landmark_idx": self.landmark_idx.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ProxyMM":
        am = d["albedo_mean"]
        return cls(
            mean_vertices=_frozen(np.asarray(d["mean_vertices"], dtype=np.float64)),
            triangles=_frozen(np.asarray(d["triangles"], dtype=np.int64)),
            uv_coords=_frozen(np.asarray(d["uv_coords"], dtype=np.float64)),
            shape_basis=_frozen(np.asarray(d["shape_basis"], dtype=np.float64)),
            expr_basis=_frozen(np.asarray(d["expr_basis"], dtype=np.float64)),
            albedo_diffuse=_frozen(np.asarray(am["diffuse"], dtype=np.float64)),
            albedo_specular=_frozen(np.asarray(am["specular"], dtype=np.float64)),
            albedo_roughness=_frozen(np.asarray(am["roughness"], dtype=np.float64)),
            albedo_basis=_frozen(np.asarray(d["albedo_basis"], dtype=np.float64)),
            landmark_idx=_frozen(np.asarray(d["landmark_idx"], dtype=np.int64)),
            seed=int(d["seed"]),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.mean_vertices, self.triangles, self.uv_coords, self.shape_basis,
                    self.expr_basis, self.albedo_diffuse, self.albedo_specular,
                    self.albedo_roughness, self.albedo_basis, self.landmark_idx):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.seed).encode())
        return h.hexdigest()


@dataclass
class PoseCamera:
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 5.5]))
    focal: float = 256.0
    image_size: tuple[int, int] = (128, 128)  # (W, H)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.image_size[0] / 2.0, self.image_size[1] / 2.0])

    def matrix(self) -> np.ndarray:
        """Model-to-camera rotation (pose rotation after the canonical flip)."""
        return rodrigues(self.rotation) @ CANONICAL

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.matrix().T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.matrix().T

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        return project_points(points_cam, self.focal, self.center)

    def params(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    def with_params(self, params: np.ndarray) -> "PoseCamera":
        params = np.asarray(params, dtype=np.float64)
        return PoseCamera(params[:3].copy(), params[3:6].copy(), self.focal, self.image_size)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "focal": self.focal, "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseCamera":
        return cls(d["rotation"], d["translation"], float(d["focal"]), tuple(d["image_size"]))


def project_points(points_cam: np.ndarray, focal: float, center: np.ndarray) -> np.ndarray:
    z = points_cam[..., 2:3]
    return focal * points_cam[..., :2] / z + center


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rodrigues(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        return np.eye(3) + skew(omega)
    k = skew(omega / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rodrigues_derivatives(omega: np.ndarray) -> np.ndarray:
    """dR/domega_i for i = 0..2, shape (3, 3, 3).

    Closed form from Gallego & Yezzi, "A compact formula for the derivative of
    a 3-D rotation in exponential coordinates".
    """
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    eye = np.eye(3)
    if theta2 < 1e-16:
        return np.stack([skew(eye[i]) for i in range(3)])
    r = rodrigues(omega)
    w = skew(omega)
    out = np.empty((3, 3, 3))
    for i in range(3):
        v = np.cross(omega, (eye - r) @ eye[i])
        out[i] = (omega[i] * w + skew(v)) @ r / theta2
    return out


# ---------------------------------------------------------------------------
# generation


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with outward counter-clockwise faces."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(v), np.array(faces, dtype=np.int64)


def sphere_uv(dirs: np.ndarray) -> np.ndarray:
    """Equirectangular UV; the seam sits at the back of the head (z < 0)."""
    u = 0.5 + np.arctan2(dirs[:, 0], dirs[:, 2]) / (2.0 * np.pi)
    v = 0.5 - np.arcsin(np.clip(dirs[:, 1], -1.0, 1.0)) / np.pi
    return np.clip(np.stack([u, v], axis=1), 0.0, 1.0)


def texel_directions(size: int) -> np.ndarray:
    """Unit directions of texel centres, inverse of ``sphere_uv``; (size, size, 3)."""
    c = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(c, c)
    phi = (u - 0.5) * 2.0 * np.pi
    lat = (0.5 - v) * np.pi
    return np.stack([np.cos(lat) * np.sin(phi), np.sin(lat), np.cos(lat) * np.cos(phi)], axis=-1)


def _random_dirs(rng: np.random.Generator, n: int, min_z: float = -1.0) -> np.ndarray:
    out = []
    while len(out) < n:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if d[2] >= min_z:
            out.append(d)
    return np.array(out)


def _blob_field(rng, dirs, n_blobs, sigma_range, amp_shape, amp_scale, min_z=-1.0):
    """Sum of Gaussian bumps on the unit sphere evaluated at ``dirs``."""
    centers = _random_dirs(rng, n_blobs, min_z)
    sigmas = rng.uniform(*sigma_range, size=n_blobs)
    amps = rng.normal(scale=amp_scale, size=(n_blobs,) + amp_shape)
    out = np.zeros(dirs.shape[:-1] + amp_shape)
    for c, s, a in zip(centers, sigmas, amps):
        w = np.exp(-np.sum((dirs - c) ** 2, axis=-1) / (2.0 * s * s))
        out += w.reshape(w.shape + (1,) * len(amp_shape)) * a
    return out


def _landmarks(rng: np.random.Generator, unit: np.ndarray) -> np.ndarray:
    cand = np.flatnonzero(unit[:, 2] > 0.55)
    chosen = [int(rng.choice(cand))]
    dist = np.linalg.norm(unit[cand] - unit[chosen[0]], axis=1)
    while len(chosen) < N_LANDMARKS:
        nxt = int(cand[np.argmax(dist)])
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(unit[cand] - unit[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


@functools.lru_cache(maxsize=8)
def generate_model(seed: int = 7, n_shape: int = 8, n_expr: int = 8, n_albedo: int = 8,
                   texture_size: int = 256) -> ProxyMM:
    for k in (n_shape, n_expr, n_albedo):
        if not 1 <= k <= 32:
            raise ValueError(f"basis counts must lie in [1, 32], got {k}")
    if texture_size < 8 or texture_size & (texture_size - 1):
        raise ValueError("texture_size must be a power of two >= 8")
    rng = np.random.default_rng(seed)
    unit, tris = icosphere(ICO_SUBDIVISIONS)
    mean = unit * HEAD_SCALE
    uv = sphere_uv(unit)

    def n_blobs():
        return int(rng.integers(3, MAX_BLOBS + 1))

    shape = np.stack([
        _blob_field(rng, unit, n_blobs(), (0.35, 0.7), (), 0.05)[:, None] * unit
        for _ in range(n_shape)])
    expr = np.stack([
        _blob_field(rng, unit, n_blobs(), (0.25, 0.5), (), 0.04, min_z=0.2)[:, None] * unit
        for _ in range(n_expr)])

    tdirs = texel_directions(texture_size)
    skin = np.array([0.63, 0.46, 0.37])
    diffuse = skin + _blob_field(rng, tdirs, 6, (0.3, 0.6), (3,), 0.04)
    specular = 0.3 + _blob_field(rng, tdirs, 4, (0.3, 0.6), (), 0.05)
    roughness = 0.55 + _blob_field(rng, tdirs, 4, (0.3, 0.6), (), 0.05)
    basis = []
    for _ in range(n_albedo):
        lum = _blob_field(rng, tdirs, n_blobs(), (0.25, 0.6), (), 0.06)
        chroma = _blob_field(rng, tdirs, 3, (0.3, 0.6), (3,), 0.015)
        basis.append(lum[..., None] + chroma)
    landmarks = _landmarks(rng, unit)

    return ProxyMM(
        mean_vertices=_frozen(mean),
        triangles=_frozen(tris),
        uv_coords=_frozen(uv),
        shape_basis=_frozen(shape),
        expr_basis=_frozen(expr),
        albedo_diffuse=_frozen(np.clip(diffuse, 0.0, 1.0)),
        albedo_specular=_frozen(np.clip(specular, 0.0, 1.0)),
        albedo_roughness=_frozen(np.clip(roughness, 0.05, 1.0)),
        albedo_basis=_frozen(np.stack(basis)),
        landmark_idx=_frozen(landmarks),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# evaluation


def _check_len(name: str, coeffs, expected: int) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if coeffs.shape[0] != expected:
        raise ValueError(f"{name} has {coeffs.shape[0]} coefficients, model expects {expected}")
    return coeffs


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (vertices[triangles[:, i]] for i in range(3))
    face_n = np.cross(p1 - p0, p2 - p0)  # length = 2 * area
    n = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(n, triangles[:, i], face_n)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def evaluate_geometry(model: ProxyMM, alpha, beta) -> tuple[np.ndarray, np.ndarray]:
    """Vertex positions and area-weighted unit normals for (alpha, beta)."""
    alpha = _check_len("alpha", alpha, model.n_shape)
    beta = _check_len("beta", beta, model.n_expr)
    verts = (model.mean_vertices
             + np.tensordot(alpha, model.shape_basis, axes=1)
             + np.tensordot(beta, model.expr_basis, axes=1))
    return verts, vertex_normals(verts, model.triangles)


def evaluate_albedo(model: ProxyMM, delta):
    """Statistical texture T0 for albedo coefficients ``delta``."""
    from .shade import TextureSet

    delta = _check_len("delta", delta, model.n_albedo)
    diffuse = np.clip(model.albedo_diffuse + np.tensordot(delta, model.albedo_basis, axes=1), 0.0, 1.0)
    return TextureSet(diffuse, model.albedo_specular.copy(), model.albedo_roughness.copy())


def albedo_unclamped(model: ProxyMM, delta) -> np.ndarray:
    delta = _check_len("delta", delta, model.n_albedo)
    return model.albedo_diffuse + np.tensordot(delta, model.albedo_basis, axes=1)


def landmark_points(model: ProxyMM, alpha, beta) -> np.ndarray:
    """Model-space landmark positions without evaluating the full mesh."""
    alpha = _check_len("alpha", alpha, model.n_shape)
    beta = _check_len("beta", beta, model.n_expr)
    idx = model.landmark_idx
    return (model.mean_vertices[idx]
            + np.tensordot(alpha, model.shape_basis[:, idx], axes=1)
            + np.tensordot(beta, model.expr_basis[:, idx], axes=1))


def project_landmarks(model: ProxyMM, alpha, beta, pose: PoseCamera, jacobian: bool = False):
    """Pixel positions (L, 2) of the landmarks.

    With ``jacobian=True`` also returns a dict of derivatives of the pixel
    coordinates: ``alpha`` (L, 2, K_a), ``beta`` (L, 2, K_b), ``pose`` (L, 2, 6)
    ordered as (rotation, translation).
    """
    x_model = landmark_points(model, alpha, beta)
    rot = rodrigues(pose.rotation)
    xc = x_model @ CANONICAL.T  # canonical frame, before pose rotation
    cam = xc @ rot.T + pose.translation
    bad = np.flatnonzero(cam[:, 2] <= 0)
    if bad.size:
        raise ValueError(f"landmark {int(bad[0])} is behind the camera (z={cam[bad[0], 2]:.4g})")
    q = project_points(cam, pose.focal, pose.center)
    if not jacobian:
        return q

    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    f = pose.focal
    dq_dp = np.zeros((len(cam), 2, 3))
    dq_dp[:, 0, 0] = f / z
    dq_dp[:, 0, 2] = -f * x / z**2
    dq_dp[:, 1, 1] = f / z
    dq_dp[:, 1, 2] = -f * y / z**2

    m = rot @ CANONICAL
    idx = model.landmark_idx
    d_alpha = np.einsum("lij,jk,alk->lia", dq_dp, m, model.shape_basis[:, idx])
    d_beta = np.einsum("lij,jk,blk->lib", dq_dp, m, model.expr_basis[:, idx])
    dr = rodrigues_derivatives(pose.rotation)  # (3, 3, 3)
    dp_domega = np.einsum("ijk,lk->lji", dr, xc)  # (L, 3, 3): d cam / d omega_i
    d_pose = np.concatenate([np.einsum("lij,ljk->lik", dq_dp, dp_domega), dq_dp], axis=2)
    return q, {"alpha": d_alpha, "beta": d_beta, "pose": d_pose}
