import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointtrack.errors import ValidationError
from pointtrack.sampling import (FeatureMap, FeaturePyramid, bilinear_sample,
                                 bilinear_sample_backward, bilinear_sample_forward,
                                 sample_pyramid, sample_pyramid_backward,
                                 sample_pyramid_forward)

from .conftest import N_INSTANCES, fd_check


def affine_map(h, w):
    """f(x, y) = 2x + 3y - 1 evaluated at cell centres, in normalized coords."""
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return (2 * xs[None, :] + 3 * ys[:, None] - 1)[None]


def away_from_cell_edges(rng, n, h, w, margin=1e-3):
    """Random interior points whose cell coordinates stay off integer lines."""
    pts = []
    while len(pts) < n:
        p = rng.uniform(0.5 / w + 0.01, 1 - 0.5 / w - 0.01), rng.uniform(0.5 / h + 0.01, 1 - 0.5 / h - 0.01)
        u, v = p[0] * w - 0.5, p[1] * h - 0.5
        if min(u % 1, 1 - u % 1, v % 1, 1 - v % 1) > margin:
            pts.append(p)
    return np.array(pts)


class TestBilinearSample:
    def test_centre_of_2x2_is_mean(self):
        m = FeatureMap(np.array([[[0.0, 1.0], [2.0, 3.0]]]), stride=1)
        assert bilinear_sample(m, np.array([0.5, 0.5]))[0] == 1.5

    def test_cell_centre_is_exact(self, rng):
        data = rng.normal(size=(3, 4, 5))
        out = bilinear_sample(FeatureMap(data, 1), np.array([0.5 / 5, 0.5 / 4]))
        np.testing.assert_array_equal(out, data[:, 0, 0])

    def test_affine_field_reproduced(self, rng):
        data = affine_map(6, 7)
        pts = rng.uniform(0.5 / 7, 1 - 0.5 / 7, size=(200, 2))
        pts[:, 1] = rng.uniform(0.5 / 6, 1 - 0.5 / 6, size=200)
        out = bilinear_sample(data, pts)[:, 0]
        np.testing.assert_allclose(out, 2 * pts[:, 0] + 3 * pts[:, 1] - 1, atol=1e-12)

    def test_edge_clamp_replicates_border(self, rng):
        data = rng.normal(size=(2, 3, 3))
        np.testing.assert_allclose(bilinear_sample(data, np.array([-0.7, 0.5 / 3])), data[:, 0, 0])
        np.testing.assert_allclose(bilinear_sample(data, np.array([3.0, 2.5 / 3])), data[:, 2, 2])

    def test_pure(self, rng):
        data = rng.normal(size=(4, 5, 5))
        p = rng.random((10, 2))
        a, b = bilinear_sample(data, p), bilinear_sample(data, p)
        assert a.tobytes() == b.tobytes()

    def test_map_validation(self):
        with pytest.raises(ValidationError):
            FeatureMap(np.zeros((1, 1, 4)), 1)
        with pytest.raises(ValidationError):
            FeatureMap(np.zeros((1, 4, 4)), 0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-0.2, 1.2), st.floats(-0.2, 1.2))
    def test_within_value_range(self, x, y):
        data = np.arange(12, dtype=float).reshape(1, 3, 4)
        v = bilinear_sample(data, np.array([x, y]))[0]
        assert data.min() - 1e-12 <= v <= data.max() + 1e-12

    def test_gradients(self, rng):
        for _ in range(N_INSTANCES):
            h, w = rng.integers(2, 6, size=2)
            data = rng.normal(size=(3, h, w))
            pts = away_from_cell_edges(rng, 4, h, w)
            g = rng.normal(size=(4, 3))
            _, cache = bilinear_sample_forward(data, pts)
            dmap, dpts = bilinear_sample_backward(cache, g)
            loss = lambda: float((bilinear_sample(data, pts) * g).sum())
            fd_check(loss, data, dmap)
            fd_check(loss, pts, dpts)


class TestSamplePyramid:
    def pyramid(self, rng, channels=(2, 3)):
        return FeaturePyramid.from_arrays(
            [rng.normal(size=(channels[0], 8, 8)), rng.normal(size=(channels[1], 4, 4))],
            strides=(4, 8), image_size=(32, 32))

    def test_single_scale_matches_bilinear(self, rng):
        data = rng.normal(size=(3, 4, 4))
        pyr = FeaturePyramid.from_arrays([data], (4,), (16, 16))
        p = rng.random((5, 2))
        np.testing.assert_array_equal(sample_pyramid(pyr, p), bilinear_sample(data, p))

    def test_constant_scales(self, rng):
        pyr = FeaturePyramid.from_arrays([np.full((2, 8, 8), 1.5), np.full((1, 4, 4), -2.0)],
                                         (4, 8), (32, 32))
        for p in rng.uniform(-0.5, 1.5, size=(10, 2)):
            np.testing.assert_allclose(sample_pyramid(pyr, p), [1.5, 1.5, -2.0], rtol=1e-15)

    def test_matches_per_scale_concatenation(self, rng):
        pyr = self.pyramid(rng)
        p = rng.random((6, 2))
        expected = np.concatenate([bilinear_sample(m.data, p) for m in pyr.maps], axis=-1)
        np.testing.assert_array_equal(sample_pyramid(pyr, p), expected)

    def test_gradients(self, rng):
        for _ in range(N_INSTANCES):
            pyr = self.pyramid(rng)
            pts = away_from_cell_edges(rng, 3, 8, 8)
            g = rng.normal(size=(3, 5))
            _, caches = sample_pyramid_forward(pyr, pts)
            dmaps, dpts = sample_pyramid_backward(caches, g)
            loss = lambda: float((sample_pyramid(pyr, pts) * g).sum())
            for m, dm in zip(pyr.maps, dmaps):
                fd_check(loss, m.data, dm)

    def test_stride_order_enforced(self, rng):
        with pytest.raises(ValidationError):
            FeaturePyramid.from_arrays([rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 8, 8))],
                                       (8, 4), (32, 32))

    def test_coverage_enforced(self, rng):
        with pytest.raises(ValidationError):
            FeaturePyramid.from_arrays([rng.normal(size=(1, 4, 4))], (4,), (64, 64))
