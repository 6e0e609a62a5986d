import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doei import hfa
from doei import tensor as T
from doei.tensor import Tensor


def two_patch_image(c1, c2, patch=2):
    img = np.zeros((patch, 2 * patch, 3))
    img[:, :patch] = c1
    img[:, patch:] = c2
    # pad to a square canvas of 2x2 patches
    return np.concatenate([img, img], axis=0)


class TestRgbSimilarity:
    def test_uniform_image(self):
        img = np.full((8, 8, 3), 0.3)
        assert np.all(hfa.rgb_similarity(img, 4) == 1.0)

    def test_red_vs_green(self):
        sim = hfa.rgb_similarity(two_patch_image([1, 0, 0], [0, 1, 0]), 2)
        assert sim[0, 1] == pytest.approx(0.5)
        assert np.all(np.diag(sim) == 1.0)

    def test_black_patches(self):
        sim = hfa.rgb_similarity(two_patch_image([0, 0, 0], [0, 0, 0]), 2)
        assert np.all(sim == 1.0)
        sim = hfa.rgb_similarity(two_patch_image([0, 0, 0], [0.2, 0.4, 0.1]), 2)
        assert sim[0, 1] == pytest.approx(0.5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_in_range(self, seed):
        img = np.random.default_rng(seed).random((16, 16, 3))
        sim = hfa.rgb_similarity(img, 4)
        assert np.allclose(sim, sim.T)
        assert sim.min() >= 0 and sim.max() <= 1
        assert np.all(np.diag(sim) == 1.0)


class TestEmbSimilarity:
    def test_identical_rows(self):
        assert hfa.emb_similarity(Tensor([[1.0, 2.0], [1.0, 2.0]])).data[0, 1] == pytest.approx(1.0)

    def test_antipodal_rows(self):
        assert hfa.emb_similarity(Tensor([[1.0, -2.0], [-1.0, 2.0]])).data[0, 1] == pytest.approx(0.0, abs=1e-15)

    def test_closed_form(self):
        # (1 + 1/sqrt 2) / 2 from a 30-digit mpmath evaluation
        assert hfa.emb_similarity(Tensor([[1.0, 0.0], [1.0, 1.0]])).data[0, 1] == pytest.approx(0.8535533905932737, abs=1e-12)

    def test_symmetric_in_range(self):
        x = np.random.default_rng(0).normal(size=(9, 5))
        sim = hfa.emb_similarity(Tensor(x)).data
        np.testing.assert_allclose(sim, sim.T, atol=1e-15)
        assert sim.min() >= 0 and sim.max() <= 1 + 1e-15
        np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-15)


def random_weights(rng, h, t):
    w = rng.random((h, t, t)) + 1e-3
    return w / w.sum(axis=-1, keepdims=True)


class TestRefine:
    def test_alpha_zero_identity(self):
        w = Tensor(random_weights(np.random.default_rng(0), 2, 6))
        assert hfa.refine_attention(w, np.ones((4, 4)), 0.0, 2) is w

    def test_alpha_one_uniform_block(self):
        w = random_weights(np.random.default_rng(1), 2, 6)
        out = hfa.refine_attention(Tensor(w), np.ones((4, 4)), 1.0, 2).data
        block = out[:, 2:, 2:]
        assert np.allclose(block, block[..., :1])

    def test_two_patch_toy(self):
        w = Tensor([[[0.6, 0.4], [0.4, 0.6]]])
        sim = np.array([[1.0, 0.25], [0.25, 1.0]])
        out = hfa.refine_attention(w, sim, 0.35, 0).data[0]
        blended = np.array([[0.74, 0.3475], [0.3475, 0.74]])
        np.testing.assert_allclose(out, blended / blended.sum(axis=1, keepdims=True), atol=1e-15)

    def test_class_entries_preserved_before_renormalisation(self):
        rng = np.random.default_rng(2)
        w = random_weights(rng, 1, 5)
        out = hfa.refine_attention(Tensor(w), rng.random((3, 3)), 0.4, 2).data
        # class rows touch only class-row entries, which are untouched, so stay exactly stochastic rows of w
        np.testing.assert_allclose(out[:, :2, :], w[:, :2, :], atol=1e-15)
        ratio = out[:, 2:, :2] / w[:, 2:, :2]
        assert np.allclose(ratio, ratio[..., :1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_rows_stochastic(self, seed, alpha):
        rng = np.random.default_rng(seed)
        w = random_weights(rng, 3, 7)
        sim = hfa.rgb_similarity(rng.random((8, 8, 3)), 4) * hfa.emb_similarity(Tensor(rng.normal(size=(4, 3)))).data
        out = hfa.refine_attention(Tensor(w), sim, alpha, 3).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
        assert out.min() >= 0

    def test_monotone_blending(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            w = random_weights(rng, 1, 6)
            sim = rng.random((4, 4))
            target = sim / sim.sum(axis=-1, keepdims=True)
            dists = []
            for a in np.linspace(0, 1, 11):
                out = hfa.refine_attention(Tensor(w), sim, float(a), 2).data[0, 2:, 2:]
                out = out / out.sum(axis=-1, keepdims=True)
                dists.append(np.abs(out - target).sum(axis=-1))
            dists = np.array(dists)
            assert np.all(np.diff(dists, axis=0) <= 1e-12)

    def test_batched_with_heads(self):
        rng = np.random.default_rng(4)
        w = np.stack([random_weights(rng, 2, 6) for _ in range(3)])
        sims = rng.random((3, 4, 4))
        out = hfa.refine_attention(Tensor(w), sims, 0.3, 2).data
        for b in range(3):
            np.testing.assert_allclose(out[b], hfa.refine_attention(Tensor(w[b]), sims[b], 0.3, 2).data, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            hfa.refine_attention(Tensor(random_weights(np.random.default_rng(0), 1, 6)), np.ones((3, 3)), 0.5, 2)
