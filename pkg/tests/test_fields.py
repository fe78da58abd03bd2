import numpy as np
import pytest

from lumisplit.fields import (backward_field, encode, eval_face_mask, eval_light_mask, frame_times, init_field,
                              pixel_coords)
from lumisplit.gradcheck import check


def _coords(rng, n=1000):
    return np.c_[rng.uniform(-1, 1, (n, 2)), rng.uniform(0, 1, n)]


def test_pixel_coords_ranges():
    c = pixel_coords(16, 24, 0.0)
    assert c.shape == (16, 24, 3)
    assert c[..., :2].min() >= -1 and c[..., :2].max() <= 1
    assert np.all(c[..., 2] == 0)


def test_frame_times():
    np.testing.assert_allclose(frame_times(4), [0, 0.25, 0.5, 0.75])
    np.testing.assert_array_equal(frame_times(1), [0.0])


def test_fresh_f_near_uniform(rng):
    for n in (2, 5):
        f = init_field(3, n)
        p = f(_coords(rng))
        assert np.all(np.abs(p - 1 / n) <= 0.15)
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def test_init_deterministic_and_encoding():
    a, b = init_field(5, 5), init_field(5, 5)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, init_field(6, 5).theta)
    f0 = init_field(5, 5, n_freq=0)
    assert f0.input_dim == 3 and f0.shapes[0][0] == 3
    x = np.array([[0.1, -0.2, 0.3]])
    np.testing.assert_array_equal(encode(x, 0), x)
    assert init_field(5, 5).input_dim == 39
    with pytest.raises(ValueError):
        init_field(0, 5, hidden=(0, 64))


def test_g_output_range(rng):
    g = init_field(1, 1)
    out = g(_coords(rng))
    assert g.head == "sigmoid" and np.all((out > 0) & (out < 1))


def test_light_mask_partition_and_zero_outside(rng):
    f = init_field(2, 5)
    coords = pixel_coords(12, 12, 0.0)
    m_r = rng.uniform(size=(12, 12)) > 0.4
    m_n = eval_light_mask(f, coords, m_r)
    np.testing.assert_allclose(m_n.sum(axis=0), m_r.astype(float), atol=1e-6)
    assert np.all(m_n[:, ~m_r] == 0)
    assert not eval_light_mask(f, coords, np.zeros((12, 12), bool)).any()


def _bias_last(fld, values):
    (fan_in, fan_out) = fld.shapes[-1]
    fld.theta[-fan_out:] = values


def test_saturated_logit(rng):
    f = init_field(2, 5)
    _bias_last(f, [0, 0, 20.0, 0, 0])
    coords = pixel_coords(8, 8, 0.0)
    m_r = np.ones((8, 8), bool)
    m_n = eval_light_mask(f, coords, m_r)
    np.testing.assert_allclose(m_n[2], 1.0, atol=1e-6)
    g = init_field(3, 1)
    _bias_last(g, [20.0])
    m_r = rng.uniform(size=(8, 8)) > 0.5
    m_o = eval_face_mask(g, coords, m_r)
    np.testing.assert_allclose(m_o, m_r.astype(float), atol=1e-6)
    assert np.all(m_o[~m_r] == 0) and m_o.max() <= 1
    assert not eval_face_mask(g, coords, np.zeros((8, 8), bool)).any()


def test_backward_zero_upstream(rng):
    f = init_field(2, 5)
    c = _coords(rng, 20)
    assert not backward_field(f, c, np.zeros((20, 5))).any()


def test_backward_matches_fd(rng):
    for n in (5, 1):
        fld = init_field(4, n, out_scale=1.0)
        c = _coords(rng, 64)
        out = fld(c)
        w = rng.normal(size=out.shape)
        grad = backward_field(fld, c, w)
        probe = fld.copy()

        def obj(th):
            probe.theta = th
            return float((w * probe(c)).sum())

        def relus(th):
            probe.theta = th
            h = encode(c, probe.n_freq)
            pats = []
            for wl, bl in probe.layers()[:-1]:
                pre = h @ wl + bl
                pats.append(pre > 0)
                h = np.maximum(pre, 0.0)
            return tuple(pats)
        res = check("field", obj, fld.theta.copy(), grad, pattern=relus, max_coords=40, rng=rng)
        assert res.max_rel_err <= 1e-4 and res.n_checked > 0


def test_softmax_jacobian_rows_sum_to_zero(rng):
    from lumisplit.fields import softmax_backward
    p = rng.dirichlet(np.ones(5), 30)
    g = softmax_backward(p, rng.normal(size=(30, 5)))
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-8)


def test_backward_shape_mismatch(rng):
    f = init_field(2, 5)
    _, cache = f.forward(_coords(rng, 10))
    with pytest.raises(ValueError):
        f.backward(cache, np.zeros((10, 4)))


def test_temporal_continuity(rng):
    f = init_field(2, 5)
    c = _coords(rng, 200)
    c2 = c.copy()
    c2[:, 2] += 1e-5
    assert np.abs(f(c) - f(c2)).max() < 1e-3


def test_masked_softmax_after_drop(rng):
    f = init_field(2, 5)
    f.active = np.array([True, False, True, False, False])
    coords = pixel_coords(10, 10, 0.0)
    m_r = rng.uniform(size=(10, 10)) > 0.3
    m_n = eval_light_mask(f, coords, m_r)
    assert np.all(m_n[~f.active] == 0)
    np.testing.assert_allclose(m_n[f.active].sum(axis=0), m_r.astype(float), atol=1e-6)


def test_serialization_round_trip():
    from lumisplit.fields import MaskField
    f = init_field(2, 5)
    back = MaskField.from_dict(f.to_dict(), f.theta)
    np.testing.assert_array_equal(back.theta, f.theta)
    assert back.shapes == f.shapes and back.head == f.head
