import numpy as np
import pytest
import torch

from critic_seg.domain import Frame
from critic_seg.errors import MissingArtifactError
from critic_seg.evaluation import (
    SaliencySpec,
    baseline_full_mask,
    evaluate_model,
    false_positive_intensity,
    grid_search,
    make_montage,
    saliency_map,
    threshold_saliency,
)
from critic_seg.model import init_model

from oracles import oracle_finite_diff_at, oracle_iou


class FixedMaskModel:
    """Model stub whose forward_mask returns a stored mask per frame index."""

    def __init__(self, masks):
        self.masks = np.asarray(masks, dtype=np.float32)
        self.cursor = 0

    def eval(self):
        return self

    def forward_mask(self, x):
        n = x.shape[0]
        out = torch.from_numpy(self.masks[self.cursor : self.cursor + n])
        self.cursor += n
        return out


def frames_with_gt(rng, n=4, size=8, empty=()):
    frames = []
    for i in range(n):
        gt = np.zeros((size, size))
        if i not in empty:
            gt[2:6, 2:6] = 1.0
        frames.append(Frame(image=rng.random((size, size, 3)), reward=0.0, gt_mask=gt))
    return frames


class TestEvaluateModel:
    def test_perfect_masks_score_one(self, rng):
        frames = frames_with_gt(rng)
        model = FixedMaskModel([f.gt_mask for f in frames])
        rep = evaluate_model(model, frames, threshold=0.5)
        assert rep["mean_iou"] == 1.0
        assert rep["n_frames"] == 4

    def test_mean_matches_per_frame_oracle(self, rng):
        frames = frames_with_gt(rng, n=5)
        masks = rng.random((5, 8, 8)).astype(np.float32)
        rep = evaluate_model(FixedMaskModel(masks), frames, threshold=0.5)
        expect = np.mean([oracle_iou(m, f.gt_mask, 0.5)[0] for m, f in zip(masks, frames)])
        assert rep["mean_iou"] == pytest.approx(expect, abs=1e-12)

    def test_missing_gt_rejected(self, rng):
        frames = [Frame(image=rng.random((8, 8, 3)))]
        with pytest.raises(MissingArtifactError):
            evaluate_model(FixedMaskModel(np.zeros((1, 8, 8))), frames)


class TestFullMaskBaseline:
    def test_equals_object_fraction(self, rng):
        frames = frames_with_gt(rng, n=3)
        rep = baseline_full_mask(frames)
        # all-ones prediction: intersection = |gt|, union = |image|
        expect = np.mean([f.gt_mask.sum() / f.gt_mask.size for f in frames])
        assert rep["mean_iou"] == pytest.approx(expect, abs=1e-12)


class TestSaliency:
    def test_constant_critic_gives_zero_map(self, toy_spec, rng):
        model = init_model(toy_spec, seed=0)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        sal = saliency_map(model, rng.random((8, 8, 3)), SaliencySpec())
        np.testing.assert_array_equal(sal, 0.0)

    def test_nonnegative_and_shaped(self, toy_spec, rng):
        sal = saliency_map(init_model(toy_spec, seed=0), rng.random((8, 8, 3)), SaliencySpec())
        assert sal.shape == (8, 8)
        assert np.all(sal >= 0)

    def test_map_equals_reduced_input_gradient(self, toy_spec, rng):
        # the map is exactly the channel-reduced |dV/dx|; gradient correctness
        # itself is pinned by test_gradient_values_match_finite_differences
        from critic_seg.model import to_batch

        model = init_model(toy_spec, seed=0)
        model.eval()
        img = rng.uniform(0.2, 0.8, (8, 8, 3))
        sal = saliency_map(model, img, SaliencySpec(score_weighting=False, channel_reduction="abs_mean"))

        x = to_batch([img]).requires_grad_(True)
        v = model.forward_critic(x)
        (g,) = torch.autograd.grad(v.sum(), x)
        expect = g[0].abs().mean(dim=0).numpy()
        np.testing.assert_allclose(sal, expect, atol=1e-7)

    def test_gradient_values_match_finite_differences(self, toy_spec, rng):
        model = init_model(toy_spec, seed=0).double()
        model.eval()
        img = rng.uniform(0.2, 0.8, (8, 8, 3))

        from critic_seg.model import to_batch

        x = to_batch([img]).double().requires_grad_(True)
        v = model.forward_critic(x)
        (g,) = torch.autograd.grad(v.sum(), x)
        analytic = g[0].permute(1, 2, 0).numpy().reshape(-1)

        def fn(arr):
            with torch.no_grad():
                return model.forward_critic(torch.from_numpy(arr).permute(2, 0, 1)[None].double()).item()

        coords = rng.choice(img.size, size=10, replace=False)
        fd = oracle_finite_diff_at(fn, img, coords, epsilon=1e-5)
        np.testing.assert_allclose(analytic[coords], fd, rtol=1e-2, atol=1e-10)

    def test_threshold_trivial_cases(self):
        spec = SaliencySpec(threshold_multiple=2.0)
        flat = np.full((4, 4), 0.3)
        np.testing.assert_array_equal(threshold_saliency(flat, spec), 0)
        spike = np.zeros((4, 4))
        spike[1, 1] = 1.0
        out = threshold_saliency(spike, spec)
        assert out[1, 1] == 1 and out.sum() == 1


class TestGridSearch:
    def test_finds_planted_optimum(self):
        space = {"a": [0, 1, 2, 3], "b": [-1.0, 0.5, 2.0]}
        best, table = grid_search(space, lambda p: -((p["a"] - 2) ** 2) - (p["b"] - 0.5) ** 2)
        assert best == {"a": 2, "b": 0.5}
        assert len(table) == 12

    def test_single_point_grid(self):
        best, table = grid_search({"x": [7]}, lambda p: 0.0)
        assert best == {"x": 7} and len(table) == 1

    def test_best_matches_table_max(self, rng):
        scores = {v: rng.random() for v in range(10)}
        best, table = grid_search({"v": list(range(10))}, lambda p: scores[p["v"]])
        assert scores[best["v"]] == max(r["score"] for r in table)

    def test_tie_breaks_toward_first(self):
        best, _ = grid_search({"v": [5, 6, 7]}, lambda p: 1.0)
        assert best == {"v": 5}

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            grid_search({}, lambda p: 0.0)
        with pytest.raises(ValueError):
            grid_search({"a": []}, lambda p: 0.0)


class TestFalsePositiveIntensity:
    def test_counts_only_empty_frames(self, rng):
        frames = frames_with_gt(rng, n=4, empty=(1, 3))
        masks = np.zeros((4, 8, 8), dtype=np.float32)
        masks[1] = 0.2
        masks[3] = 0.4
        model = FixedMaskModel(masks[[1, 3]])  # only empty frames are scored
        assert false_positive_intensity(model, frames) == pytest.approx(0.3, abs=1e-6)

    def test_no_empty_frames_rejected(self, rng):
        with pytest.raises(MissingArtifactError):
            false_positive_intensity(FixedMaskModel(np.zeros((1, 8, 8))), frames_with_gt(rng))


class TestMontage:
    def test_layout(self, rng):
        frames = frames_with_gt(rng, n=3)
        masks = rng.random((3, 8, 8)).astype(np.float32)
        img = make_montage(FixedMaskModel(masks), frames, n_cols=3)
        assert img.shape == (24, 24, 3)
        # top row is the raw input
        np.testing.assert_allclose(img[:8, :8], frames[0].image, atol=1e-6)
        # bottom row replicates the mask across channels
        np.testing.assert_allclose(img[16:, :8, 0], masks[0], atol=1e-6)
