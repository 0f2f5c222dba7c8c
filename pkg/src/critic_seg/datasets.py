"""Turning raw episode archives into labeled, filtered, augmented, and
critic-split training sets.

The labeled dataset is stored as a tensor container (uint8 images + float64
labels) with a JSON sidecar recording the preparation parameters and input
provenance hashes.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .containers import load_tensors, save_tensors
from .domain import Episode, Frame, LabeledFrame
from .errors import DegenerateSplitError, MissingArtifactError

logger = logging.getLogger(__name__)


@dataclass
class DatasetSpec:
    gamma: float = 0.98
    reward_clip: float = 1.0
    strip_after_reward: int = 35
    shift_max_px: int = 12
    total_frames_cap: int = 0  # 0 = no cap

    def validate(self):
        assert 0.0 < self.gamma < 1.0, "gamma must be in (0, 1)"
        assert self.strip_after_reward >= 0
        assert 0 <= self.shift_max_px < 64


@dataclass
class SplitSpec:
    high_threshold: float = 0.7
    low_threshold: float = 0.3

    def validate(self):
        assert 0.0 < self.low_threshold < self.high_threshold < 1.0


def load_archive(path) -> tuple:
    """Read an episode archive (see synthgym.export_archive). Returns
    (episodes, manifest)."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"no manifest.json under {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    episodes = []
    for entry in manifest["episodes"]:
        epdir = root / entry["dir"]
        rewards = {}
        with open(epdir / "rewards.csv", newline="") as f:
            for row in csv.DictReader(f):
                rewards[int(row["frame_index"])] = float(row["reward"])
        frames = []
        for j in range(entry["n_frames"]):
            img8 = np.asarray(PILImage.open(epdir / f"frame_{j:05d}.png"), dtype=np.uint8)
            img = img8.astype(np.float64) / 255.0
            mask_path = epdir / f"mask_{j:05d}.png"
            gt = None
            if mask_path.exists():
                gt = (np.asarray(PILImage.open(mask_path), dtype=np.uint8) > 127).astype(np.uint8)
            frames.append(Frame(image=img, reward=rewards[j], gt_mask=gt))
        episodes.append(Episode(episode_id=entry["id"], frames=frames))
    return episodes, manifest


def strip_post_reward(ep: Episode, n: int) -> Episode:
    """Drop the n frames following every reward, keeping reward frames
    themselves. Removal windows are computed against original indices."""
    assert n >= 0
    rewards = ep.rewards()
    removed = set()
    for i in np.flatnonzero(rewards > 0):
        removed.update(range(i + 1, min(i + 1 + n, len(ep.frames))))
    removed -= set(np.flatnonzero(rewards > 0).tolist())
    kept = [f for i, f in enumerate(ep.frames) if i not in removed]
    return Episode(episode_id=ep.episode_id, frames=kept)


def discount_labels(ep: Episode, gamma: float, clip: float = 1.0) -> list:
    """Backward discounted-return labels, clipped to [0, 1].

    Rewards are clipped to <= clip first; the recurrence is
    label_i = r_i + gamma * label_{i+1} with label past the end = 0.
    """
    if len(ep.frames) == 0:
        raise ValueError("cannot label an empty episode")
    rewards = np.minimum(ep.rewards(), clip)
    labels = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        labels[i] = acc
    labels = np.clip(labels, 0.0, 1.0)
    return [
        LabeledFrame(image=f.image, label=float(labels[i]), gt_mask=f.gt_mask)
        for i, f in enumerate(ep.frames)
    ]


def augment_shift(img: np.ndarray, gt, rng, max_px: int):
    """Random horizontal shift by up to max_px, vacated columns filled by edge
    replication. The truth mask, when given, is shifted identically."""
    assert 0 <= max_px < img.shape[1]
    k = int(rng.integers(-max_px, max_px + 1))
    return shift_horizontal(img, k), (None if gt is None else shift_horizontal(gt, k)), k


def shift_horizontal(arr: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return arr.copy()
    out = np.empty_like(arr)
    if k > 0:  # content moves right
        out[:, k:] = arr[:, :-k]
        out[:, :k] = arr[:, :1]
    else:
        out[:, :k] = arr[:, -k:]
        out[:, k:] = arr[:, -1:]
    return out


def split_indices(values, spec: SplitSpec):
    """Indices with value above high_threshold / below low_threshold.
    Mid-range frames belong to neither set."""
    spec.validate()
    values = np.asarray(values, dtype=np.float64)
    return np.flatnonzero(values > spec.high_threshold), np.flatnonzero(values < spec.low_threshold)


def split_by_critic(frames, critic_fn, spec: SplitSpec):
    """Partition frame indices by predicted value. Mid-range frames are
    dropped. Raises DegenerateSplitError when either side is empty."""
    values = np.asarray(critic_fn([f.image for f in frames]), dtype=np.float64)
    high, low = split_indices(values, spec)
    if len(high) == 0 or len(low) == 0:
        raise DegenerateSplitError(
            f"critic split degenerate: |high|={len(high)}, |low|={len(low)} of {len(frames)}"
        )
    return high, low, values


def prepare_labeled_frames(episodes, spec: DatasetSpec):
    """strip -> discount over every episode, with an optional total frame cap."""
    spec.validate()
    labeled = []
    for ep in episodes:
        stripped = strip_post_reward(ep, spec.strip_after_reward)
        labeled.extend(discount_labels(stripped, spec.gamma, spec.reward_clip))
    if spec.total_frames_cap and len(labeled) > spec.total_frames_cap:
        labeled = labeled[: spec.total_frames_cap]
    _log_label_histogram([lf.label for lf in labeled])
    return labeled


def _log_label_histogram(labels):
    hist, _ = np.histogram(labels, bins=10, range=(0.0, 1.0))
    frac = hist / max(len(labels), 1)
    logger.info("label histogram (deciles): %s", np.round(frac, 3).tolist())
    for d, f in enumerate(frac):
        if f < 0.02:
            logger.warning("label decile %d holds only %.1f%% of frames", d, 100 * f)


def save_labeled_dataset(path, labeled, spec: DatasetSpec, provenance: dict | None = None) -> str:
    images = np.stack([np.round(lf.image * 255.0).astype(np.uint8) for lf in labeled])
    labels = np.array([lf.label for lf in labeled], dtype=np.float64)
    has_gt = all(lf.gt_mask is not None for lf in labeled)
    tensors = {"images": images, "labels": labels}
    if has_gt:
        tensors["gt_masks"] = np.stack([lf.gt_mask for lf in labeled]).astype(np.uint8)
    meta = {"frame_count": len(labeled), "spec": asdict(spec), "provenance": provenance or {}}
    payload_sha = save_tensors(path, tensors, meta)
    sidecar = dict(meta, payload_sha256=payload_sha)
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return payload_sha


def load_labeled_dataset(path):
    """Returns (images_uint8 NxHxWx3, labels float64 N, gt_masks or None, meta)."""
    tensors, meta = load_tensors(path)
    return tensors["images"], tensors["labels"], tensors.get("gt_masks"), meta


def frames_from_arrays(images_uint8, labels, gt_masks=None):
    out = []
    for i in range(len(labels)):
        out.append(
            LabeledFrame(
                image=images_uint8[i].astype(np.float64) / 255.0,
                label=float(labels[i]),
                gt_mask=None if gt_masks is None else gt_masks[i],
            )
        )
    return out
