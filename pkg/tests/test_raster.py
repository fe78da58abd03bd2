import numpy as np
import pytest

from lumisplit.proxymm import PoseCamera, evaluate_geometry
from lumisplit.raster import GBuffer, rasterize, rasterize_camera, ray_hits_any, shadow_visibility, texel_footprint

from conftest import frontal_pose


def _front_triangle(screen, z=2.0, focal=10.0, size=16):
    """Camera-space triangle whose vertices project to the given screen points."""
    c = size / 2.0
    pts = np.array([[(sx - c) * z / focal, (sy - c) * z / focal, z] for sx, sy in screen])
    # front-facing means (p1 - p0) x (p2 - p0) points back toward the camera
    if np.cross(pts[1] - pts[0], pts[2] - pts[0]) @ pts[0] > 0:
        pts = pts[[0, 2, 1]]
    return pts


def _oracle_coverage(screen, size):
    """Per-pixel half-plane test with the top-left rule, in a plain loop."""
    s = np.asarray(screen, dtype=np.float64)
    area = (s[1, 0] - s[0, 0]) * (s[2, 1] - s[0, 1]) - (s[1, 1] - s[0, 1]) * (s[2, 0] - s[0, 0])
    if area < 0:
        s = s[[0, 2, 1]]
    out = np.zeros((size, size), dtype=bool)
    for i in range(size):
        for j in range(size):
            px, py = j + 0.5, i + 0.5
            ok = True
            for a, b in ((1, 2), (2, 0), (0, 1)):
                ex, ey = s[b] - s[a]
                e = ex * (py - s[a, 1]) - ey * (px - s[a, 0])
                top_left = (ey == 0 and ex > 0) or ey < 0
                ok &= e > 0 or (e == 0 and top_left)
            out[i, j] = ok
    return out


@pytest.mark.parametrize("screen", [
    [(2.5, 2.5), (12.5, 2.5), (2.5, 12.5)],  # axis-aligned legs through pixel centres
    [(1.0, 1.0), (15.0, 3.0), (6.0, 14.0)],
    [(8.5, 0.5), (15.5, 8.5), (0.5, 15.5)],
])
def test_single_triangle_coverage_matches_oracle(screen):
    pts = _front_triangle(screen)
    gb = rasterize_camera(pts, np.tile([0, 0, -1.0], (3, 1)), np.array([[0, 1, 2]]), np.zeros((3, 2)),
                          10.0, 16, 16)
    np.testing.assert_array_equal(gb.covered, _oracle_coverage(screen, 16))
    assert np.array_equal(gb.covered, gb.triangle_id >= 0)


def test_shared_edge_pixels_counted_once():
    # a quad split on its diagonal: every centre covered exactly once, none twice
    quad = [(2.0, 2.0), (14.0, 2.0), (14.0, 14.0), (2.0, 14.0)]
    total = np.zeros((16, 16), dtype=int)
    for tri in ([0, 1, 2], [0, 2, 3]):
        screen = [quad[i] for i in tri]
        pts = _front_triangle(screen)
        gb = rasterize_camera(pts, np.tile([0, 0, -1.0], (3, 1)), np.array([[0, 1, 2]]), np.zeros((3, 2)),
                              10.0, 16, 16)
        total += gb.covered
    assert total.max() == 1
    assert total.sum() == 12 * 12


def test_behind_camera_is_empty(model):
    v, n = evaluate_geometry(model, np.zeros(8), np.zeros(8))
    gb = rasterize(v, n, model.triangles, model.uv_coords, frontal_pose(z=-5.5))
    assert not gb.covered.any()


def test_gbuffer_invariants_and_determinism(model):
    v, n = evaluate_geometry(model, np.zeros(8), np.zeros(8))
    pose = PoseCamera(np.array([0.1, 0.4, 0.0]), np.array([0.0, 0.0, 5.5]), 256.0, (128, 128))
    gb = rasterize(v, n, model.triangles, model.uv_coords, pose)
    gb2 = rasterize(v, n, model.triangles, model.uv_coords, pose)
    for f in GBuffer.__dataclass_fields__:
        np.testing.assert_array_equal(getattr(gb, f), getattr(gb2, f))
    c = gb.covered
    assert c.sum() > 1000
    bary = gb.barycentric[c]
    assert bary.min() >= -1e-12
    np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(gb.normal[c], axis=1), 1.0, atol=1e-9)
    assert gb.channels().shape == (128, 128, 14)


def test_depth_test_keeps_nearest():
    near = _front_triangle([(1, 1), (15, 1), (1, 15)], z=2.0)
    far = _front_triangle([(1, 1), (15, 1), (1, 15)], z=4.0)
    cam = np.concatenate([far, near])
    gb = rasterize_camera(cam, np.tile([0, 0, -1.0], (6, 1)), np.array([[0, 1, 2], [3, 4, 5]]),
                          np.zeros((6, 2)), 10.0, 16, 16)
    assert np.all(gb.triangle_id[gb.covered] == 1)
    np.testing.assert_allclose(gb.depth[gb.covered], 2.0)


def test_perspective_correct_uv_matches_ray_cast():
    # slanted triangle: screen-space linear interpolation would be visibly wrong
    cam = np.array([[-1.0, -1.0, 2.0], [1.5, -0.5, 6.0], [-0.5, 1.5, 3.0]])
    if np.cross(cam[1] - cam[0], cam[2] - cam[0]) @ cam[0] > 0:
        cam = cam[[0, 2, 1]]
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    focal, size = 12.0, 24
    gb = rasterize_camera(cam, np.tile([0, 0, -1.0], (3, 1)), np.array([[0, 1, 2]]), uvs, focal, size, size)
    iy, ix = np.nonzero(gb.covered)
    assert len(iy) > 20
    nrm = np.cross(cam[1] - cam[0], cam[2] - cam[0])
    for i, j in zip(iy, ix):
        ray = np.array([(j + 0.5 - size / 2) / focal, (i + 0.5 - size / 2) / focal, 1.0])
        p = ray * (nrm @ cam[0]) / (nrm @ ray)
        # barycentrics of p by area ratios
        a = np.linalg.lstsq(np.stack([cam[0] - cam[2], cam[1] - cam[2]], 1), p - cam[2], rcond=None)[0]
        lam = np.array([a[0], a[1], 1 - a.sum()])
        np.testing.assert_allclose(gb.uv[i, j], lam @ uvs, atol=1e-6)
        np.testing.assert_allclose(gb.depth[i, j], p[2], rtol=1e-9)


def test_coverage_shrinks_with_distance(model):
    v, n = evaluate_geometry(model, np.zeros(8), np.zeros(8))
    counts = [rasterize(v, n, model.triangles, model.uv_coords, frontal_pose(z=z)).covered.sum()
              for z in (4.5, 5.5, 7.0, 9.0)]
    assert all(a > b for a, b in zip(counts, counts[1:]))


def test_resolution_consistency(model):
    v, n = evaluate_geometry(model, np.zeros(8), np.zeros(8))
    lo = rasterize(v, n, model.triangles, model.uv_coords, frontal_pose(64)).covered
    hi = rasterize(v, n, model.triangles, model.uv_coords, frontal_pose(128)).covered
    down = hi.reshape(64, 2, 64, 2).mean(axis=(1, 3)) >= 0.5
    assert np.mean(down != lo) < 0.03


def test_convex_mesh_unshadowed(model):
    pose = frontal_pose(64)
    v, n = evaluate_geometry(model, np.zeros(8), np.zeros(8))
    gb = rasterize(v, n, model.triangles, model.uv_coords, pose)
    cam = pose.to_camera(v)
    vis = shadow_visibility(cam, model.triangles, gb, np.array([0.0, 0.0, -1.0]))
    assert np.all(vis[gb.covered] == 1)
    assert np.all(vis[~gb.covered] == 0)


def _naive_hits(origins, d, tris):
    out = np.zeros(len(origins), dtype=bool)
    for k, o in enumerate(origins):
        for v0, v1, v2 in tris:
            e1, e2 = v1 - v0, v2 - v0
            p = np.cross(d, e2)
            det = e1 @ p
            if abs(det) < 1e-12:
                continue
            t = o - v0
            u = (t @ p) / det
            q = np.cross(t, e1)
            w = (d @ q) / det
            s = (e2 @ q) / det
            if u >= 0 and w >= 0 and u + w <= 1 and s > 1e-6:
                out[k] = True
                break
    return out


def test_occluder_disk_shadow_matches_bruteforce():
    # a lit floor quad facing the camera and a small disk hovering between it and the light
    floor = np.array([[-1.0, -1.0, 4.0], [1.0, -1.0, 4.0], [1.0, 1.0, 4.0], [-1.0, 1.0, 4.0]])
    tris = np.array([[0, 2, 1], [0, 3, 2]])
    ang = np.linspace(0, 2 * np.pi, 13)[:-1]
    disk = np.c_[0.3 * np.cos(ang), 0.3 * np.sin(ang), np.full(12, 3.0)]
    verts = np.concatenate([floor, disk, [[0.0, 0.0, 3.0]]])
    dtris = np.array([[4 + i, 4 + (i + 1) % 12, 16] for i in range(12)])
    all_tris = np.concatenate([tris, dtris])
    gb = rasterize_camera(floor, np.tile([0, 0, -1.0], (4, 1)), tris, np.zeros((4, 2)), 16.0, 32, 32)
    light = np.array([0.2, 0.1, -1.0])
    light /= np.linalg.norm(light)
    vis = shadow_visibility(verts, all_tris, gb, light)
    iy, ix = np.nonzero(gb.covered)
    origins = gb.position[iy, ix] + 1e-4 * gb.normal[iy, ix]
    oracle = _naive_hits(origins, light, verts[all_tris])
    np.testing.assert_array_equal(vis[iy, ix] == 0, oracle)
    assert 0 < oracle.sum() < len(oracle)


def test_back_light_gives_no_diffuse():
    from lumisplit.shade import sh_basis
    from lumisplit.synth import sh_from_direction
    normals = np.tile([0.0, 0.0, -1.0], (5, 1))
    gamma = sh_from_direction(0.0, 1.0, [0.0, 0.0, 1.0], 9)  # light behind every surface point
    assert np.all(np.maximum(sh_basis(normals, 9) @ gamma, 0) == 0)


def test_ray_hits_empty():
    assert not ray_hits_any(np.zeros((3, 3)), np.array([0, 0, 1.0]), *(np.zeros((0, 3)),) * 3).any()


def test_texel_footprint_inside_texture(model):
    v, n = evaluate_geometry(model, np.zeros(8), np.zeros(8))
    gb = rasterize(v, n, model.triangles, model.uv_coords, frontal_pose(64))
    fp = texel_footprint(gb, 32)
    assert fp.shape == (32, 32) and 0 < fp.sum() < 32 * 32
