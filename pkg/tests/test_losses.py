import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lumisplit import losses
from lumisplit.losses import (Palette, TemplateScorer, area_loss, bin_loss, global_prior_loss, human_prior_loss,
                              kmeans_palette, kmeans_sse, landmark_loss, local_prior_loss, neighbor_variation,
                              photometric_loss, seg_loss)


def test_landmark_loss_values():
    q = np.array([[10.0, 20.0]])
    assert landmark_loss(q, q)[0] == 0
    assert landmark_loss(q + [3, 4], q)[0] == pytest.approx(5.0)
    with pytest.raises(ValueError):
        landmark_loss(np.zeros((3, 2)), np.zeros((4, 2)))


def test_photometric_values():
    a = np.random.default_rng(0).uniform(size=(6, 6, 3))
    assert photometric_loss(a, a)[0] == 0
    b = a.copy()
    b[..., 1] += 0.1
    assert photometric_loss(b, a)[0] == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        photometric_loss(a, a[:5])


def test_seg_values():
    h = np.zeros((4, 4))
    assert seg_loss(h, h)[0] == 0
    v, g = seg_loss(np.ones((4, 4)), h)
    assert v == 1.0
    rng = np.random.default_rng(1)
    g_out, h_out = rng.uniform(size=(2, 5, 5))
    _, grad = seg_loss(g_out, h_out)
    np.testing.assert_array_equal(grad, np.sign(g_out - h_out) / 25)


def test_area_values():
    rng = np.random.default_rng(2)
    same = np.repeat(rng.uniform(size=(1, 6, 6)), 4, axis=0)
    assert area_loss(same)[0] == pytest.approx(0.0, abs=1e-15)
    one_hot = np.zeros((5, 3, 3))
    one_hot[0] = 1
    expected = (np.exp(-0.64) + 4 * np.exp(-0.04)) / 5 - 1
    assert area_loss(one_hot)[0] == pytest.approx(expected, abs=1e-12)
    # the closed form evaluates to -0.125910; the commonly quoted -0.12585 is a rounding slip
    assert area_loss(one_hot)[0] == pytest.approx(-0.125910, abs=1e-6)
    assert area_loss(rng.uniform(size=(1, 7, 7)))[0] == 0


def test_bin_values():
    assert bin_loss(np.full((1, 8, 8), 0.5))[0] == pytest.approx(0.0, abs=1e-15)
    half = np.zeros((1, 8, 8))
    half[0, :4] = 1
    assert bin_loss(half)[0] == pytest.approx(np.exp(-0.25) - 1, abs=1e-12)
    assert bin_loss(half)[0] == pytest.approx(-0.22120, abs=1e-5)
    vals = [bin_loss(0.5 + s * (half - 0.5))[0] for s in np.linspace(0, 1, 11)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1)))
def test_mask_losses_bounded(m):
    for fn in (area_loss, bin_loss):
        v = fn(m)[0]
        assert -1.0 <= v <= 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)), arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)))
def test_nonnegative_losses(a, b):
    assert photometric_loss(a, b)[0] >= 0
    assert seg_loss(a[..., 0], b[..., 0])[0] >= 0
    assert landmark_loss(a[0], b[0])[0] >= 0


def test_kmeans_two_colors():
    t = np.zeros((8, 8, 3))
    t[:, 4:] = [0.2, 0.6, 0.9]
    pal = kmeans_palette(t, 2, seed=0)
    got = sorted(map(tuple, np.round(pal.colors, 12)))
    assert got == [(0.0, 0.0, 0.0), (0.2, 0.6, 0.9)]


def test_kmeans_seeded_and_good():
    rng = np.random.default_rng(3)
    t = rng.uniform(size=(16, 16, 3))
    a, b = kmeans_palette(t, 16, seed=4), kmeans_palette(t, 16, seed=4)
    np.testing.assert_array_equal(a.colors, b.colors)
    pts = t.reshape(-1, 3)
    sse = kmeans_sse(pts, a.colors)
    worst = max(kmeans_sse(pts, pts[rng.choice(len(pts), 16, replace=False)]) for _ in range(100))
    assert sse <= worst


def test_kmeans_reduces_k_with_warning():
    t = np.zeros((6, 6, 3))
    t[:3] = 0.5
    pal = kmeans_palette(t, 16, seed=0)
    assert len(pal.colors) == 2 and pal.warning


def test_global_prior():
    pal = Palette(np.array([[0.1, 0.2, 0.3], [0.8, 0.8, 0.8]]), "x")
    t = np.tile(pal.colors[0], (4, 4, 1))
    assert global_prior_loss(t, pal)[0] == 0
    t1 = t.copy()
    t1[0, 0] += 0.1
    v, g = global_prior_loss(t1, pal)
    assert v * 16 == pytest.approx(np.sqrt(3) * 0.1, abs=1e-12)
    assert v * 16 == pytest.approx(0.17321, abs=1e-5)
    # the gradient moves the texel toward its nearest colour
    assert np.all(np.sign(g[0, 0]) == np.sign(t1[0, 0] - pal.colors[0]))


def test_neighbor_variation():
    assert not neighbor_variation(np.full((6, 6), 0.3)).any()
    s = 0.05
    ramp = s * np.tile(np.arange(9.0), (9, 1))
    nv = neighbor_variation(ramp)
    for k, (dy, dx) in enumerate(losses.NEIGHBOR_OFFSETS):
        np.testing.assert_allclose(nv[k][2:-2, 2:-2], s * dx, atol=1e-12)
    with pytest.raises(ValueError):
        neighbor_variation(np.zeros((4, 6)))


def test_neighbor_variation_loop_oracle():
    rng = np.random.default_rng(5)
    t = rng.uniform(size=(7, 6))
    nv = neighbor_variation(t)
    h, w = t.shape
    for k, (dy, dx) in enumerate(losses.NEIGHBOR_OFFSETS):
        for i in range(h):
            for j in range(w):
                ii = min(max(i - dy, 0), h - 1)
                jj = min(max(j - dx, 0), w - 1)
                assert nv[k, i, j] == t[i, j] - t[ii, jj]


def test_local_prior_shift_invariant():
    rng = np.random.default_rng(6)
    t0 = rng.uniform(size=(8, 8, 5))
    assert local_prior_loss(t0, t0)[0] == 0
    assert local_prior_loss(t0 + 0.37, t0)[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        local_prior_loss(t0, t0[:7])


def test_texture_priors_permutation_invariant():
    rng = np.random.default_rng(7)
    t = rng.uniform(size=(8, 8, 3))
    pal = kmeans_palette(t, 4, seed=0)
    perm = rng.permutation(64)
    tp = t.reshape(-1, 3)[perm].reshape(8, 8, 3)
    assert global_prior_loss(tp, pal)[0] == pytest.approx(global_prior_loss(t, pal)[0], abs=1e-12)


class _FixedScorer:
    def __init__(self, s):
        self.s = np.asarray(s, dtype=float)

    def scores(self, image):
        return self.s

    def score_grad(self, image, index):
        return np.zeros_like(image)


def test_human_prior_values():
    img = np.zeros((1, 4, 4, 3))
    assert human_prior_loss(img, _FixedScorer([1.0]))[0] == 0
    assert human_prior_loss(img, _FixedScorer([0.2, 0.7]))[0] == pytest.approx(0.3)
    assert human_prior_loss(img, _FixedScorer([0.2, 0.6]))[0] > 0.3


def test_human_prior_fails_loudly():
    class Broken:
        def scores(self, image):
            raise RuntimeError("boom")

        def score_grad(self, image, index):
            raise RuntimeError("boom")
    with pytest.raises(RuntimeError, match="scorer failed"):
        human_prior_loss(np.zeros((1, 4, 4, 3)), Broken())


def test_template_scorer_scores_are_probabilities():
    rng = np.random.default_rng(8)
    refs = rng.uniform(size=(5, 8, 8, 3))
    sc = TemplateScorer(refs, size=8)
    s = sc.scores(refs[2])
    assert np.all(s >= 0) and s.sum() == pytest.approx(1.0) and np.argmax(s) == 2
