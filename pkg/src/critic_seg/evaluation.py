"""IoU evaluation, the full-mask and saliency baselines, CRF refinement glue,
grid search, and report aggregation."""

from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .crf import CrfSpec, crf_refine
from .domain import iou
from .errors import MissingArtifactError, NumericFaultError
from .model import CriticSegModel, predict_masks, to_batch


@dataclass
class SaliencySpec:
    threshold_multiple: float = 2.0
    score_weighting: bool = True
    channel_reduction: str = "abs_max"  # abs_max | abs_mean

    def validate(self):
        assert self.threshold_multiple > 0
        assert self.channel_reduction in ("abs_max", "abs_mean")


@dataclass
class EvalReport:
    variant: str
    per_seed_ious: list = field(default_factory=list)
    mean_iou: float = 0.0
    threshold: float = 0.5
    dataset_fingerprint: str = ""
    runtime_s: float = 0.0

    def to_dict(self):
        return asdict(self)


def _require_gt(frames):
    for i, f in enumerate(frames):
        if f.gt_mask is None:
            raise MissingArtifactError(f"test frame {i} has no ground-truth mask")


def mean_iou_of_masks(masks, frames, threshold: float) -> float:
    scores = [iou(m, f.gt_mask, threshold).value for m, f in zip(masks, frames)]
    return float(np.mean(scores))


def evaluate_model(model: CriticSegModel, frames, threshold: float = 0.5,
                   refine: CrfSpec | None = None, crf_limit: int = 0) -> dict:
    """Mean IoU of the model's masks over test frames (eval mode, no dropout).

    With refine set, masks are CRF-refined first; crf_limit > 0 restricts the
    refinement pass to the first crf_limit frames to bound runtime.
    """
    _require_gt(frames)
    t0 = time.time()
    masks = predict_masks(model, [f.image for f in frames])
    if refine is not None:
        limit = crf_limit if crf_limit > 0 else len(frames)
        frames = frames[:limit]
        masks = [crf_refine(f.image, m, refine) for f, m in zip(frames, masks[:limit])]
    value = mean_iou_of_masks(masks, frames, threshold)
    return {
        "mean_iou": value,
        "n_frames": len(frames),
        "threshold": threshold,
        "crf": refine is not None,
        "runtime_s": time.time() - t0,
    }


def baseline_full_mask(frames, threshold: float = 0.5) -> dict:
    """IoU of the all-ones mask; equals the object-pixel fraction per frame."""
    _require_gt(frames)
    ones = np.ones(frames[0].gt_mask.shape)
    value = mean_iou_of_masks([ones] * len(frames), frames, threshold)
    return {"mean_iou": value, "n_frames": len(frames), "threshold": threshold}


def saliency_map(model: CriticSegModel, img: np.ndarray, spec: SaliencySpec) -> np.ndarray:
    """Per-pixel input-gradient magnitude of the critic value, optionally
    weighted by the predicted value itself. Continuous and nonnegative."""
    spec.validate()
    model.eval()
    x = to_batch([img]).requires_grad_(True)
    v = model.forward_critic(x)
    (grad,) = torch.autograd.grad(v.sum(), x)
    g = grad[0].abs()
    sal = g.max(dim=0).values if spec.channel_reduction == "abs_max" else g.mean(dim=0)
    sal = sal.detach().numpy().astype(np.float64)
    if spec.score_weighting:
        sal = sal * float(v.item())
    sal = np.abs(sal)
    if not np.all(np.isfinite(sal)):
        raise NumericFaultError("non-finite saliency map")
    return sal


def threshold_saliency(sal: np.ndarray, spec: SaliencySpec) -> np.ndarray:
    """Binarize at a multiple of the per-image mean value."""
    spec.validate()
    mean = sal.mean()
    return (sal > spec.threshold_multiple * mean).astype(np.uint8)


def baseline_saliency(model, frames, spec: SaliencySpec, threshold: float = 0.5,
                      refine: CrfSpec | None = None, crf_limit: int = 0) -> dict:
    _require_gt(frames)
    t0 = time.time()
    if refine is not None and crf_limit > 0:
        frames = frames[:crf_limit]
    masks = []
    for f in frames:
        sal = saliency_map(model, f.image, spec)
        binary = threshold_saliency(sal, spec).astype(np.float64)
        if refine is not None:
            binary = crf_refine(f.image, np.clip(binary, 0.05, 0.95), refine)
        masks.append(binary)
    value = mean_iou_of_masks(masks, frames, threshold)
    return {"mean_iou": value, "n_frames": len(frames), "threshold": threshold,
            "crf": refine is not None, "runtime_s": time.time() - t0}


def grid_search(space: dict, objective):
    """Exhaustive search over a dict of {name: [values...]}.

    Returns (best_params, table); ties break toward the earlier grid point.
    objective takes a params dict and returns a score (higher is better).
    """
    names = list(space)
    if not names or any(len(space[n]) == 0 for n in names):
        raise ValueError("empty grid")
    best, best_score = None, -np.inf
    table = []
    for combo in itertools.product(*(space[n] for n in names)):
        params = dict(zip(names, combo))
        score = float(objective(params))
        table.append({"params": params, "score": score})
        if score > best_score:
            best, best_score = params, score
    return best, table


def false_positive_intensity(model: CriticSegModel, frames) -> float:
    """Mean soft-mask intensity over frames that contain no reward object."""
    empty = [f for f in frames if f.gt_mask is not None and f.gt_mask.sum() == 0]
    if not empty:
        raise MissingArtifactError("no object-free frames in the test set")
    masks = predict_masks(model, [f.image for f in empty])
    return float(np.mean(masks))


def make_montage(model: CriticSegModel, frames, n_cols: int = 8) -> np.ndarray:
    """Rows: input image / extracted segment / mask, columns sampled from the
    given frames. Returns an HxWx3 float image."""
    frames = frames[:n_cols]
    masks = predict_masks(model, [f.image for f in frames])
    rows = [[], [], []]
    for f, m in zip(frames, masks):
        rows[0].append(f.image)
        rows[1].append(f.image * m[..., None])
        rows[2].append(np.repeat(m[..., None], 3, axis=2))
    return np.concatenate([np.concatenate(r, axis=1) for r in rows], axis=0)
