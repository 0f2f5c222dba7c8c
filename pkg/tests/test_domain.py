import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from critic_seg.domain import binarize, iou, merge
from critic_seg.errors import NonBinaryMaskError, ShapeMismatchError

from conftest import random_image, random_mask
from oracles import oracle_iou


class TestMerge:
    def test_all_zero_mask_is_identity(self, rng):
        a, b = random_image(rng), random_image(rng)
        x, y = merge(a, b, np.zeros((64, 64)))
        np.testing.assert_array_equal(x, a)
        np.testing.assert_array_equal(y, b)

    def test_all_one_mask_is_full_swap(self, rng):
        a, b = random_image(rng), random_image(rng)
        x, y = merge(a, b, np.ones((64, 64)))
        np.testing.assert_array_equal(x, b)
        np.testing.assert_array_equal(y, a)

    def test_half_mask_midpoint(self):
        a = np.ones((64, 64, 3))
        b = np.zeros((64, 64, 3))
        x, y = merge(a, b, np.full((64, 64), 0.5))
        np.testing.assert_allclose(x, 0.5)
        np.testing.assert_allclose(y, 0.5)

    def test_conservation(self, rng):
        for _ in range(20):
            a, b, m = random_image(rng), random_image(rng), random_mask(rng)
            x, y = merge(a, b, m)
            np.testing.assert_allclose(x + y, a + b, atol=1e-12)

    def test_reswap_recovers_inputs(self, rng):
        a, b = random_image(rng), random_image(rng)
        m = (random_mask(rng) > 0.5).astype(float)  # binary so the swap is invertible
        x, y = merge(a, b, m)
        a2, b2 = merge(x, y, m)
        np.testing.assert_allclose(a2, a, atol=1e-12)
        np.testing.assert_allclose(b2, b, atol=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        a = random_image(rng)
        with pytest.raises(ShapeMismatchError):
            merge(a, random_image(rng, size=32), random_mask(rng))
        with pytest.raises(ShapeMismatchError):
            merge(a, random_image(rng), random_mask(rng, size=32))


class TestIoU:
    def _blob(self, size=64, y0=10, x0=10, h=10, w=10):
        m = np.zeros((size, size))
        m[y0 : y0 + h, x0 : x0 + w] = 1
        return m

    def test_identical_blobs(self):
        blob = self._blob()
        assert iou(blob, blob, 0.5).value == 1.0

    def test_disjoint_blobs(self):
        s = iou(self._blob(x0=1), self._blob(x0=40), 0.5)
        assert s.value == 0.0
        assert s.intersection_px == 0

    def test_left_half_vs_full(self):
        pred = np.zeros((64, 64))
        pred[:, :32] = 0.9
        truth = np.ones((64, 64))
        s = iou(pred, truth, 0.5)
        # frozen from the per-pixel counting oracle
        assert (s.intersection_px, s.union_px) == (2048, 4096)
        assert s.value == 0.5

    def test_both_empty_is_one(self):
        assert iou(np.zeros((64, 64)), np.zeros((64, 64)), 0.5).value == 1.0

    def test_non_binary_truth_rejected(self, rng):
        with pytest.raises(NonBinaryMaskError):
            iou(random_mask(rng), random_mask(rng), 0.5)

    def test_symmetry_after_binarization(self, rng):
        p = binarize(random_mask(rng, 8), 0.5)
        q = binarize(random_mask(rng, 8), 0.5)
        assert iou(p.astype(float), q, 0.5).value == iou(q.astype(float), p, 0.5).value

    @settings(max_examples=60, deadline=None)
    @given(
        pred=arrays(np.float64, (8, 8), elements=st.floats(0, 1)),
        truth=arrays(np.int_, (8, 8), elements=st.integers(0, 1)),
        threshold=st.floats(0.05, 0.95),
    )
    def test_matches_counting_oracle(self, pred, truth, threshold):
        got = iou(pred, truth.astype(np.uint8), threshold)
        value, inter, union = oracle_iou(pred, truth, threshold)
        assert (got.intersection_px, got.union_px) == (inter, union)
        assert got.value == value

    def test_matches_oracle_on_embedded_blobs(self, rng):
        # 8x8 toys embedded in full-size zeros, exercising the 64x64 shape
        for _ in range(25):
            pred = np.zeros((64, 64))
            truth = np.zeros((64, 64), dtype=np.uint8)
            pred[20:28, 20:28] = rng.uniform(0, 1, (8, 8))
            truth[20:28, 20:28] = rng.integers(0, 2, (8, 8))
            got = iou(pred, truth, 0.5)
            value, inter, union = oracle_iou(pred, truth, 0.5)
            assert (got.value, got.intersection_px, got.union_px) == (value, inter, union)
