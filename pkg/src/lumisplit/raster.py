"""Z-buffered software rasterizer and a ray-cast shadow test.

Pixel (row i, column j) samples the continuous image point (j + 0.5, i + 0.5).
Fragments are resolved per pixel by minimal camera depth, ties going to the
lower triangle index, so output never depends on evaluation order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .proxymm import PoseCamera

NEAR = 1e-3


@dataclass
class GBuffer:
    covered: np.ndarray  # (H, W) bool, the render mask M_R
    triangle_id: np.ndarray  # (H, W) int, -1 where uncovered
    barycentric: np.ndarray  # (H, W, 3) perspective-correct
    uv: np.ndarray  # (H, W, 2)
    normal: np.ndarray  # (H, W, 3) unit, camera space
    view_dir: np.ndarray  # (H, W, 3) unit, surface -> camera
    depth: np.ndarray  # (H, W) camera z, inf where uncovered
    position: np.ndarray  # (H, W, 3) camera-space surface point

    @property
    def shape(self) -> tuple[int, int]:
        return self.covered.shape

    def channels(self) -> np.ndarray:
        """Covered, triangle id, barycentrics, uv, normal, view, depth as an (H, W, 14) float raster."""
        return np.concatenate([
            self.covered[..., None].astype(np.float64),
            self.triangle_id[..., None].astype(np.float64),
            self.barycentric, self.uv, self.normal, self.view_dir,
            np.where(self.covered, self.depth, 0.0)[..., None],
        ], axis=-1)


def empty_gbuffer(width: int, height: int) -> GBuffer:
    return GBuffer(
        covered=np.zeros((height, width), dtype=bool),
        triangle_id=np.full((height, width), -1, dtype=np.int64),
        barycentric=np.zeros((height, width, 3)),
        uv=np.zeros((height, width, 2)),
        normal=np.zeros((height, width, 3)),
        view_dir=np.zeros((height, width, 3)),
        depth=np.full((height, width), np.inf),
        position=np.zeros((height, width, 3)),
    )


def rasterize(vertices, normals, triangles, uvs, pose: PoseCamera) -> GBuffer:
    """Rasterize a model-space mesh under ``pose``.

    Back faces are culled, triangles touching the near plane are dropped
    (no clipping), the top-left rule decides pixels centred exactly on an edge.
    """
    width, height = pose.image_size
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    cam = pose.to_camera(np.asarray(vertices, dtype=np.float64))
    ncam = pose.rotate(np.asarray(normals, dtype=np.float64))
    return rasterize_camera(cam, ncam, np.asarray(triangles), np.asarray(uvs, dtype=np.float64),
                            pose.focal, width, height)


def rasterize_camera(cam, ncam, triangles, uvs, focal, width, height) -> GBuffer:
    gb = empty_gbuffer(width, height)
    tri_z = cam[triangles, 2]
    ok = np.all(tri_z > NEAR, axis=1)
    p0, p1, p2 = (cam[triangles[:, i]] for i in range(3))
    facing = np.einsum("ij,ij->i", np.cross(p1 - p0, p2 - p0), p0) < 0
    tri_ids = np.flatnonzero(ok & facing)
    if tri_ids.size == 0:
        return gb

    center = np.array([width / 2.0, height / 2.0])
    tv = triangles[tri_ids]
    z = cam[tv, 2]  # (T, 3)
    scr = focal * cam[tv, :2] / z[..., None] + center  # (T, 3, 2)

    # orient every triangle so that the 2D cross product is positive
    area = ((scr[:, 1, 0] - scr[:, 0, 0]) * (scr[:, 2, 1] - scr[:, 0, 1])
            - (scr[:, 1, 1] - scr[:, 0, 1]) * (scr[:, 2, 0] - scr[:, 0, 0]))
    keep = area != 0
    tri_ids, tv, z, scr, area = tri_ids[keep], tv[keep], z[keep], scr[keep], area[keep]
    perm = np.tile(np.arange(3), (len(tri_ids), 1))
    flip = area < 0
    perm[flip] = [0, 2, 1]
    rows = np.arange(len(tri_ids))[:, None]
    tv, z, scr = tv[rows, perm], z[rows, perm], scr[rows, perm]
    area = np.abs(area)

    xmin = np.clip(np.ceil(scr[..., 0].min(1) - 0.5), 0, width).astype(np.int64)
    xmax = np.clip(np.floor(scr[..., 0].max(1) - 0.5), -1, width - 1).astype(np.int64)
    ymin = np.clip(np.ceil(scr[..., 1].min(1) - 0.5), 0, height).astype(np.int64)
    ymax = np.clip(np.floor(scr[..., 1].max(1) - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(xmax - xmin + 1, 0)
    ny = np.maximum(ymax - ymin + 1, 0)
    counts = nx * ny
    if counts.sum() == 0:
        return gb

    t = np.repeat(np.arange(len(tri_ids)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = xmin[t] + offs % nx[t]
    py = ymin[t] + offs // nx[t]
    sx, sy = px + 0.5, py + 0.5

    s = scr[t]  # (C, 3, 2)
    w = np.empty((len(t), 3))
    inside = np.ones(len(t), dtype=bool)
    # barycentric weight of vertex k comes from the edge opposite to it
    for k, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
        ex = s[:, b, 0] - s[:, a, 0]
        ey = s[:, b, 1] - s[:, a, 1]
        e = ex * (sy - s[:, a, 1]) - ey * (sx - s[:, a, 0])
        top_left = ((ey == 0) & (ex > 0)) | (ey < 0)
        inside &= (e > 0) | ((e == 0) & top_left)
        w[:, k] = e
    t, px, py, w = t[inside], px[inside], py[inside], w[inside]
    if t.size == 0:
        return gb
    w /= area[t][:, None]

    zt = z[t]
    inv_z = np.sum(w / zt, axis=1)
    depth = 1.0 / inv_z
    pix = py * width + px
    order = np.lexsort((tri_ids[t], depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    t, pix, w, zt, depth = t[win], pix[win], w[win], zt[win], depth[win]
    lam = (w / zt) * depth[:, None]
    verts = tv[t]
    iy, ix = np.divmod(pix, width)

    n = np.einsum("pk,pkc->pc", lam, ncam[verts])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    pos = np.einsum("pk,pkc->pc", lam, cam[verts])
    view = -pos / np.linalg.norm(pos, axis=1, keepdims=True)

    gb.covered[iy, ix] = True
    gb.triangle_id[iy, ix] = tri_ids[t]
    # report weights in the triangle's own vertex order
    unperm = np.argsort(perm[t], axis=1)
    gb.barycentric[iy, ix] = np.take_along_axis(lam, unperm, axis=1)
    gb.uv[iy, ix] = np.einsum("pk,pkc->pc", lam, uvs[verts])
    gb.normal[iy, ix] = n
    gb.view_dir[iy, ix] = view
    gb.depth[iy, ix] = depth
    gb.position[iy, ix] = pos
    return gb


def ray_hits_any(origins, direction, v0, v1, v2, t_min=1e-6, chunk=1 << 22) -> np.ndarray:
    """Moller-Trumbore: True where the ray origin + s*direction (s > t_min) hits a triangle."""
    hit = np.zeros(len(origins), dtype=bool)
    if len(origins) == 0 or len(v0) == 0:
        return hit
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(direction, e2)  # (T, 3)
    det = np.einsum("tc,tc->t", e1, pvec)
    good = np.abs(det) > 1e-12
    e1, e2, v0, pvec, det = e1[good], e2[good], v0[good], pvec[good], det[good]
    inv = 1.0 / det
    step = max(1, chunk // max(len(v0), 1))
    for start in range(0, len(origins), step):
        o = origins[start:start + step]
        tvec = o[:, None, :] - v0[None]  # (P, T, 3)
        u = np.einsum("ptc,tc->pt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None])
        v = (qvec @ direction) * inv
        s = np.einsum("ptc,tc->pt", qvec, e2) * inv
        h = (u >= 0) & (v >= 0) & (u + v <= 1) & (s > t_min)
        hit[start:start + step] = h.any(axis=1)
    return hit


def shadow_visibility(vertices, triangles, gbuffer: GBuffer, light_dir, offset: float = 1e-4) -> np.ndarray:
    """Per-pixel visibility toward a directional light; 1 = unoccluded.

    ``vertices`` must be in the same camera frame as ``gbuffer``. Uncovered
    pixels report 0.
    """
    light_dir = np.asarray(light_dir, dtype=np.float64)
    light_dir = light_dir / np.linalg.norm(light_dir)
    vis = np.zeros(gbuffer.shape)
    iy, ix = np.nonzero(gbuffer.covered)
    origins = gbuffer.position[iy, ix] + offset * gbuffer.normal[iy, ix]
    tri = np.asarray(triangles)
    v = np.asarray(vertices, dtype=np.float64)
    hit = ray_hits_any(origins, light_dir, v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]])
    vis[iy, ix] = np.where(hit, 0.0, 1.0)
    return vis


def texel_footprint(gbuffer: GBuffer, texture_size: int) -> np.ndarray:
    """Boolean (T, T) raster of texels touched by bilinear lookups from covered pixels."""
    from .shade import bilinear_taps

    out = np.zeros(texture_size * texture_size, dtype=bool)
    uv = gbuffer.uv[gbuffer.covered]
    if len(uv):
        idx, w = bilinear_taps(uv, texture_size, texture_size)
        out[idx[w > 0]] = True
    return out.reshape(texture_size, texture_size)
