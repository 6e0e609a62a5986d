import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doei import cam, pnm


class TestGenerateCam:
    def test_zero_weights(self):
        maps = cam.generate_cam(np.random.default_rng(0).normal(size=(3, 3, 4)), np.zeros((4, 2)))
        assert maps.shape == (2, 3, 3) and np.all(maps == 0)

    def test_single_positive_cell(self):
        f = np.zeros((2, 2, 1))
        f[1, 0, 0] = 0.3
        maps = cam.generate_cam(f, np.ones((1, 1)))
        assert maps[0].tolist() == [[0, 0], [1, 0]]

    def test_hand_minmax(self):
        maps = cam.generate_cam(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]), np.array([[1.0]]))
        np.testing.assert_allclose(maps[0], [[0, 1 / 3], [2 / 3, 1]], atol=1e-15)

    def test_flat_rows_accepted(self):
        f = np.random.default_rng(1).normal(size=(9, 3))
        w = np.random.default_rng(2).normal(size=(3, 2))
        np.testing.assert_array_equal(cam.generate_cam(f, w), cam.generate_cam(f.reshape(3, 3, 3), w))

    def test_non_square_rows_rejected(self):
        with pytest.raises(ValueError):
            cam.generate_cam(np.zeros((8, 2)), np.zeros((2, 1)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariant_in_unit_range(self, seed, lam):
        rng = np.random.default_rng(seed)
        f, w = rng.normal(size=(4, 4, 3)), rng.normal(size=(3, 3))
        maps = cam.generate_cam(f, w)
        assert maps.min() >= 0 and maps.max() <= 1
        np.testing.assert_allclose(cam.generate_cam(lam * f, w), maps, atol=1e-12)
        assert np.array_equal(cam.threshold_labels(cam.generate_cam(lam * f, w), 0.5), cam.threshold_labels(maps, 0.5)) or np.any(
            np.abs(maps - 0.5) < 1e-9
        )


class TestThreshold:
    def test_tie_goes_low(self):
        maps = np.array([0.2, 0.7, 0.7]).reshape(3, 1, 1)
        assert cam.threshold_labels(maps, 0.5)[0, 0] == 2

    def test_below_beta_is_background(self):
        maps = np.array([[[0.99, 1.0]]])
        assert cam.threshold_labels(maps, 0.995).tolist() == [[0, 1]]

    def test_exactly_beta_is_foreground(self):
        assert cam.threshold_labels(np.full((1, 1, 1), 0.5), 0.5)[0, 0] == 1

    @pytest.mark.parametrize("beta", [0.0, 1.0, -0.1])
    def test_beta_out_of_range(self, beta):
        with pytest.raises(ValueError):
            cam.threshold_labels(np.zeros((1, 2, 2)), beta)

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
    def test_consistency(self, seed, beta):
        maps = np.random.default_rng(seed).random((3, 5, 5))
        labels = cam.threshold_labels(maps, beta)
        peak = maps.max(axis=0)
        fg = labels > 0
        assert np.all(peak[fg] >= beta) and np.all(peak[~fg] < beta)
        rows, cols = np.nonzero(fg)
        assert np.all(maps[labels[fg] - 1, rows, cols] == peak[fg])


class TestUpsample:
    def test_identity(self):
        m = np.arange(16).reshape(4, 4)
        assert np.array_equal(cam.upsample_labels(m, 4), m)

    def test_constant(self):
        assert np.all(cam.upsample_labels(np.array([[3]]), 5) == 3)

    def test_block_replication(self):
        out = cam.upsample_labels(np.array([[1, 2], [3, 0]]), 4)
        assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 0, 0], [3, 3, 0, 0]]

    def test_indivisible(self):
        with pytest.raises(ValueError):
            cam.upsample_labels(np.zeros((3, 3)), 8)


class TestCamResult:
    def test_absent_classes_zeroed(self):
        f = np.random.default_rng(3).normal(size=(2, 2, 3))
        w = np.abs(np.random.default_rng(4).normal(size=(3, 2)))
        res = cam.cam_result(np.abs(f), w, 0.5, present=[0, 1])
        assert np.all(res.maps[0] == 0)
        assert set(np.unique(res.label_map)) <= {0, 2}


class TestHeatmap:
    def test_colormap_endpoints(self):
        assert cam.COLORMAP.shape == (256, 3)
        assert cam.COLORMAP[0].tolist() == [0, 0, 255]
        assert cam.COLORMAP[-1].tolist() == [255, 0, 0]

    def test_heatmap_file(self, tmp_path):
        m = np.array([[0.0, 1.0], [0.5, 0.25]])
        cam.write_heatmap(tmp_path / "h.ppm", m, image_size=4)
        img = pnm.read_ppm(tmp_path / "h.ppm")
        assert img.shape == (4, 4, 3)
        assert img[0, 0].tolist() == [0, 0, 255] and img[0, 3].tolist() == [255, 0, 0]
