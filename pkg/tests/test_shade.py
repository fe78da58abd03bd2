import numpy as np
import pytest

from lumisplit.proxymm import evaluate_albedo, evaluate_geometry
from lumisplit.raster import rasterize
from lumisplit.shade import (LightSet, TextureSet, compose, init_lights, render_conditions, sh_basis, shade_pixel)

from conftest import frontal_pose

Y0 = 0.5 * np.sqrt(1.0 / np.pi)


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_sh_constant_band(rng):
    np.testing.assert_allclose(sh_basis(_unit(rng, 50), 9)[:, 0], 0.2820948, atol=1e-7)
    assert abs(Y0 - 0.2820948) < 1e-7


def test_sh_axis_zeros():
    y = sh_basis(np.array([[0.0, 0.0, 1.0]]), 9)[0]
    # (l=1, m=-1) ~ y and (l=1, m=1) ~ x
    assert y[1] == 0.0 and y[3] == 0.0
    assert y[2] > 0


@pytest.mark.parametrize("c_sh", [1, 4, 9, 16, 25])
def test_sh_orthonormal(c_sh):
    # 1e6-point Fibonacci lattice: near-uniform, so the quadrature error is far below 1e-3
    n = 1_000_000
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    r = np.sqrt(1 - z * z)
    dirs = np.c_[r * np.cos(phi), r * np.sin(phi), z]
    y = sh_basis(dirs, c_sh)
    gram = 4 * np.pi * (y.T @ y) / n
    np.testing.assert_allclose(gram, np.eye(c_sh), atol=1e-3)


def test_sh_rejects_bad_count():
    with pytest.raises(ValueError):
        sh_basis(np.array([[0.0, 0.0, 1.0]]), 5)


def test_init_lights_paper_values():
    ls = init_lights(5, 9)
    assert ls.coeffs.shape == (5, 3, 9)
    for i in range(5):
        np.testing.assert_allclose(ls.coeffs[i], 2 * (i + 1) / 5 - 1)
    assert ls.alive.all() and ls.n_alive == 5


@pytest.fixture(scope="module")
def scene_gb(small_model):
    v, n = evaluate_geometry(small_model, np.zeros(8), np.zeros(8))
    return rasterize(v, n, small_model.triangles, small_model.uv_coords, frontal_pose(32))


def _texture(model, spec=0.0, diffuse=None):
    t = evaluate_albedo(model, np.zeros(8))
    if diffuse is not None:
        t.diffuse[:] = diffuse
    t.specular[:] = spec
    return t


def test_ambient_only_pixel(small_model, scene_gb):
    tex = _texture(small_model, 0.0)
    gamma = np.zeros((3, 9))
    gamma[:, 0] = [1.0, 2.0, 0.5]
    iy, ix = np.nonzero(scene_gb.covered)
    for i, j in list(zip(iy, ix))[::97]:
        td = shade_pixel(scene_gb, i, j, TextureSet(tex.diffuse, tex.specular, tex.roughness), gamma)
        from lumisplit.shade import bilinear_taps, gather
        idx, w = bilinear_taps(scene_gb.uv[i:i + 1, j], 64, 64)
        a_d = gather(tex.diffuse.reshape(-1, 3), idx, w)[0]
        np.testing.assert_allclose(td, a_d * gamma[:, 0] * 0.2820948, rtol=1e-6)


def test_black_albedo_black_pixel(small_model, scene_gb):
    tex = _texture(small_model, 0.0, diffuse=0.0)
    i, j = np.argwhere(scene_gb.covered)[0]
    assert np.all(shade_pixel(scene_gb, i, j, tex, np.ones((3, 9))) == 0)


def test_uncovered_pixel_raises(small_model, scene_gb):
    with pytest.raises(ValueError):
        shade_pixel(scene_gb, 0, 0, _texture(small_model), np.ones((3, 9)))


def test_diffuse_linear_in_gamma(small_model, scene_gb, rng):
    tex = _texture(small_model, 0.0)
    gamma = np.abs(rng.normal(0, 0.3, (3, 9)))
    gamma[:, 0] = 2.0
    ims, _ = render_conditions(scene_gb, tex, LightSet(np.stack([gamma, 2 * gamma])))
    np.testing.assert_allclose(ims[1], 2 * ims[0], atol=1e-12)


def test_render_conditions(small_model, scene_gb, rng):
    tex = _texture(small_model, 0.3)
    g = rng.normal(0, 0.3, (3, 9))
    g[:, 0] += 2.0
    one, alive = render_conditions(scene_gb, tex, LightSet(g[None]))
    assert one.shape[0] == 1 and alive.shape[0] == 1
    two, _ = render_conditions(scene_gb, tex, LightSet(np.stack([g, g])))
    np.testing.assert_array_equal(two[0], two[1])
    assert np.all(one[0][~scene_gb.covered] == 0)
    iy, ix = np.nonzero(scene_gb.covered)
    for i, j in list(zip(iy, ix))[::53]:
        np.testing.assert_allclose(one[0, i, j], shade_pixel(scene_gb, i, j, tex, g), atol=1e-12)
    ls = LightSet(np.stack([g, g, g]), np.array([True, False, True]))
    full, subset = render_conditions(scene_gb, tex, ls)
    assert full.shape[0] == 3 and subset.shape[0] == 2


def test_compose_cases(rng):
    h, w = 6, 7
    i_rs = rng.uniform(0, 1, (3, h, w, 3))
    i_in = rng.uniform(0, 1, (h, w, 3))
    hot = rng.integers(0, 3, (h, w))
    one_hot = np.stack([(hot == k).astype(float) for k in range(3)])
    i_r, _ = compose(i_rs, one_hot, np.ones((h, w)), i_in)
    np.testing.assert_array_equal(i_r, np.take_along_axis(i_rs, hot[None, ..., None], 0)[0])
    _, out = compose(i_rs, one_hot, np.zeros((h, w)), i_in)
    np.testing.assert_array_equal(out, i_in)
    m_r = rng.uniform(size=(h, w)) > 0.3
    i_r1, out1 = compose(i_rs[:1], np.ones((1, h, w)), m_r.astype(float), i_in)
    np.testing.assert_array_equal(out1[m_r], i_r1[m_r])
    with pytest.raises(ValueError):
        compose(i_rs, one_hot[:2], np.ones((h, w)), i_in)


def test_compose_affine_and_bounded(rng):
    h, w = 5, 5
    a, b = rng.uniform(0, 1, (2, 2, h, w, 3))
    i_in1, i_in2 = rng.uniform(0, 1, (2, h, w, 3))
    m_l = rng.dirichlet([1, 1], (h, w)).transpose(2, 0, 1)
    m_o = rng.uniform(size=(h, w))
    ra, _ = compose(a, m_l, m_o, i_in1)
    rb, _ = compose(b, m_l, m_o, i_in1)
    rab, _ = compose(a + b, m_l, m_o, i_in1)
    np.testing.assert_allclose(rab, ra + rb, atol=1e-6)
    _, o1 = compose(a, m_l, m_o, i_in1)
    _, o2 = compose(a, m_l, m_o, i_in2)
    _, o12 = compose(a, m_l, m_o, 0.5 * (i_in1 + i_in2))
    np.testing.assert_allclose(o12, 0.5 * (o1 + o2), atol=1e-6)
    assert np.all(ra >= a.min(axis=0) - 1e-6) and np.all(ra <= a.max(axis=0) + 1e-6)
