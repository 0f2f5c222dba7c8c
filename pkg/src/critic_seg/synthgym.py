"""Procedural sparse-reward episode generator.

Scenes are 64x64 first-person style views: a sky/ground background, green
distractor blobs, and vertically elongated trunk shapes drawn in a reward
palette (browns and a whitish bark tone). Episodes simulate approaching a
trunk: it grows monotonically until the collection frame (reward 1.0), then
disappears. Every frame carries an exact rasterized ground-truth mask, so the
whole pipeline can be verified without any real game data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .domain import IMG_SIZE, Episode, Frame
from .errors import GenerationError

# Reward-object palette: white and brown bark tones. Distractors never use these.
TRUNK_PALETTE = [
    (0.42, 0.27, 0.13),
    (0.55, 0.38, 0.20),
    (0.88, 0.86, 0.80),
]
# Greens shared between background and distractors, so color alone does not
# trivially separate the reward objects from the rest of the scene.
DISTRACTOR_PALETTE = [
    (0.20, 0.42, 0.18),
    (0.30, 0.55, 0.25),
    (0.44, 0.58, 0.30),
    (0.15, 0.30, 0.12),
]
SKY_COLOR = (0.58, 0.72, 0.86)
GROUND_COLOR = (0.36, 0.50, 0.28)


@dataclass
class SceneConfig:
    object_count_range: tuple = (1, 1)
    object_color_palette: list = field(default_factory=lambda: list(TRUNK_PALETTE))
    distractor_count_range: tuple = (2, 6)
    background_mode: str = "noise"  # flat | gradient | noise (gradient + speckle)
    seed: int = 0
    object_width_range: tuple = (11, 16)
    object_height_range: tuple = (36, 48)

    def validate(self):
        for name in ("object_count_range", "distractor_count_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise GenerationError(f"{name} must be a nonnegative (lo, hi) pair, got {(lo, hi)}")
        if self.background_mode not in ("flat", "gradient", "noise"):
            raise GenerationError(f"unknown background_mode {self.background_mode!r}")
        for c in self.object_color_palette:
            if min(c) < 0 or max(c) > 1:
                raise GenerationError(f"palette entry outside [0,1]^3: {c}")
        if self.object_width_range[1] > IMG_SIZE or self.object_height_range[1] > IMG_SIZE:
            raise GenerationError("objects larger than the canvas cannot be placed")


@dataclass
class EpisodeConfig:
    length_range: tuple = (105, 145)
    approach_steps: int = 50
    reward_on_collect: float = 1.0
    collect_distance: float = 1.0  # fraction of full apparent size at collection
    post_steps: int = 10  # frames kept after collection (later stripped)

    def validate(self):
        if self.approach_steps <= 0:
            raise GenerationError("approach_steps must be positive")
        if self.length_range[0] < self.approach_steps:
            raise GenerationError("length_range lower bound must cover approach_steps")


@dataclass
class Trunk:
    cx: float
    base_y: float
    width: float
    height: float
    taper: float  # top width as a fraction of base width
    color: tuple


@dataclass
class Blob:
    cx: float
    cy: float
    rx: float
    ry: float
    color: tuple


@dataclass
class SceneGeom:
    """Everything needed to rasterize one frame; kept separate so tests can
    re-rasterize with an independent oracle."""

    background_mode: str
    horizon: int
    noise_seed: int
    blobs: list
    trunks: list


def _draw_background(mode: str, horizon: int, noise_seed: int) -> np.ndarray:
    img = np.empty((IMG_SIZE, IMG_SIZE, 3), dtype=np.float64)
    sky = np.array(SKY_COLOR)
    ground = np.array(GROUND_COLOR)
    if mode == "flat":
        img[:] = ground
    else:
        rows = np.arange(IMG_SIZE)[:, None, None]
        t = np.clip((rows - (horizon - 6)) / 12.0, 0.0, 1.0)
        img[:] = (1 - t) * sky + t * ground
    if mode == "noise":
        rng = np.random.default_rng(noise_seed)
        img += rng.uniform(-0.04, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _paint_blob(img: np.ndarray, blob: Blob) -> None:
    ys, xs = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    d = ((xs - blob.cx) / max(blob.rx, 1e-6)) ** 2 + ((ys - blob.cy) / max(blob.ry, 1e-6)) ** 2
    inside = d <= 1.0
    img[inside] = blob.color


def trunk_row_bounds(trunk: Trunk, y: int):
    """Column interval [x0, x1) covered by the trunk at row y, or None."""
    y_top = trunk.base_y - trunk.height
    if y < y_top or y >= trunk.base_y:
        return None
    frac = (y - y_top) / max(trunk.height, 1e-9)  # 0 at top, 1 at base
    w = trunk.width * (trunk.taper + (1.0 - trunk.taper) * frac)
    x0 = int(round(trunk.cx - w / 2.0))
    x1 = int(round(trunk.cx + w / 2.0))
    x0 = max(x0, 0)
    x1 = min(x1, IMG_SIZE)
    if x1 <= x0:
        return None
    return x0, x1


def _paint_trunk(img: np.ndarray, mask: np.ndarray, trunk: Trunk) -> None:
    y_top = trunk.base_y - trunk.height
    base_color = np.array(trunk.color)
    for y in range(IMG_SIZE):
        bounds = trunk_row_bounds(trunk, y)
        if bounds is None:
            continue
        x0, x1 = bounds
        # slight vertical shading so trunks are not constant-color slabs
        shade = 1.0 - 0.15 * ((y - y_top) / max(trunk.height, 1e-9))
        img[y, x0:x1] = np.clip(base_color * shade, 0.0, 1.0)
        mask[y, x0:x1] = 1


def render_scene(geom: SceneGeom) -> Frame:
    """Rasterize a scene geometry into a Frame with an exact truth mask."""
    img = _draw_background(geom.background_mode, geom.horizon, geom.noise_seed)
    for blob in geom.blobs:
        _paint_blob(img, blob)
    mask = np.zeros((IMG_SIZE, IMG_SIZE), dtype=np.uint8)
    for trunk in geom.trunks:
        _paint_trunk(img, mask, trunk)
    img = np.round(img * 255.0) / 255.0  # match the 8-bit archive representation
    return Frame(image=img, reward=0.0, gt_mask=mask)


def _sample_blobs(cfg: SceneConfig, rng) -> list:
    n = int(rng.integers(cfg.distractor_count_range[0], cfg.distractor_count_range[1] + 1))
    blobs = []
    for _ in range(n):
        blobs.append(
            Blob(
                cx=float(rng.uniform(2, IMG_SIZE - 2)),
                cy=float(rng.uniform(2, IMG_SIZE - 2)),
                rx=float(rng.uniform(3, 9)),
                ry=float(rng.uniform(3, 9)),
                color=DISTRACTOR_PALETTE[int(rng.integers(len(DISTRACTOR_PALETTE)))],
            )
        )
    return blobs


def _sample_trunk(cfg: SceneConfig, rng) -> Trunk:
    w = float(rng.uniform(*cfg.object_width_range))
    h = float(rng.uniform(*cfg.object_height_range))
    return Trunk(
        cx=float(rng.uniform(w / 2 + 1, IMG_SIZE - w / 2 - 1)),
        base_y=float(rng.uniform(h + 1, IMG_SIZE - 1)),
        width=w,
        height=h,
        taper=float(rng.uniform(0.7, 0.95)),
        color=tuple(cfg.object_color_palette[int(rng.integers(len(cfg.object_color_palette)))]),
    )


def generate_scene_geom(cfg: SceneConfig, rng) -> SceneGeom:
    cfg.validate()
    n_obj = int(rng.integers(cfg.object_count_range[0], cfg.object_count_range[1] + 1))
    return SceneGeom(
        background_mode=cfg.background_mode,
        horizon=int(rng.integers(22, 34)),
        noise_seed=int(rng.integers(0, 2**31)),
        blobs=_sample_blobs(cfg, rng),
        trunks=[_sample_trunk(cfg, rng) for _ in range(n_obj)],
    )


def generate_scene(cfg: SceneConfig, rng) -> Frame:
    return render_scene(generate_scene_geom(cfg, rng))


def generate_episode(scfg: SceneConfig, ecfg: EpisodeConfig, rng, episode_id: str = "ep") -> Episode:
    """One approach-and-collect run.

    Timeline: object-free wander frames, then an approach segment where the
    trunk grows monotonically toward the image center, a collection frame with
    reward 1.0, and a short object-free tail.
    """
    scfg.validate()
    ecfg.validate()
    length = int(rng.integers(ecfg.length_range[0], ecfg.length_range[1] + 1))
    post = min(ecfg.post_steps, max(length - ecfg.approach_steps, 0))
    wander = max(length - ecfg.approach_steps - post, 0)

    horizon = int(rng.integers(22, 34))
    blobs = _sample_blobs(scfg, rng)
    final = _sample_trunk(scfg, rng)
    # collection pose: large, near the image center
    final.width = float(rng.uniform(*scfg.object_width_range)) * ecfg.collect_distance
    final.height = float(rng.uniform(*scfg.object_height_range)) * ecfg.collect_distance
    final.cx = float(rng.uniform(IMG_SIZE / 2 - 4, IMG_SIZE / 2 + 4))
    final.base_y = float(rng.uniform(50, 58))
    start_scale = float(rng.uniform(0.16, 0.22))
    start_cx = float(rng.uniform(12, IMG_SIZE - 12))
    start_base_y = float(rng.uniform(34, 42))

    frames = []

    def scene(trunks, noise_seed, jitter):
        jb = [
            Blob(b.cx + jitter[0], b.cy + jitter[1], b.rx, b.ry, b.color) for b in blobs
        ]
        return render_scene(
            SceneGeom(
                background_mode=scfg.background_mode,
                horizon=horizon,
                noise_seed=noise_seed,
                blobs=jb,
                trunks=trunks,
            )
        )

    def frame_noise_seed():
        return int(rng.integers(0, 2**31))

    for _ in range(wander):
        jitter = rng.uniform(-1.0, 1.0, size=2)
        frames.append(scene([], frame_noise_seed(), jitter))

    for t in range(ecfg.approach_steps):
        p = (t + 1) / ecfg.approach_steps
        scale = start_scale * (1.0 / start_scale) ** p  # geometric growth, monotone
        trunk = Trunk(
            cx=start_cx + (final.cx - start_cx) * p + float(rng.uniform(-1.0, 1.0)),
            base_y=start_base_y + (final.base_y - start_base_y) * p,
            width=final.width * scale,
            height=final.height * scale,
            taper=final.taper,
            color=final.color,
        )
        f = scene([trunk], frame_noise_seed(), rng.uniform(-1.0, 1.0, size=2))
        if t == ecfg.approach_steps - 1:
            f.reward = float(ecfg.reward_on_collect)
        frames.append(f)

    for _ in range(post):
        jitter = rng.uniform(-1.0, 1.0, size=2)
        frames.append(scene([], frame_noise_seed(), jitter))

    return Episode(episode_id=episode_id, frames=frames)


def generate_episodes(scfg: SceneConfig, ecfg: EpisodeConfig, n_episodes: int, seed: int):
    """Each episode owns an independent stream derived from (seed, index)."""
    episodes = []
    for i in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        episodes.append(generate_episode(scfg, ecfg, rng, episode_id=f"ep_{i:04d}"))
    return episodes


def _save_png(path, arr_uint8, mode):
    PILImage.fromarray(arr_uint8, mode=mode).save(path, format="PNG")


def export_archive(episodes, path, config: dict | None = None, seed: int | None = None) -> dict:
    """Write the on-disk episode archive and return its manifest.

    Layout: <path>/<episode_id>/frame_#####.png + mask_#####.png +
    rewards.csv, plus a top-level manifest.json.
    """
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for ep in episodes:
            epdir = root / ep.episode_id
            epdir.mkdir(parents=True, exist_ok=True)
            with open(epdir / "rewards.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["frame_index", "reward"])
                for j, fr in enumerate(ep.frames):
                    img8 = np.round(np.asarray(fr.image) * 255.0).astype(np.uint8)
                    _save_png(epdir / f"frame_{j:05d}.png", img8, "RGB")
                    if fr.gt_mask is not None:
                        _save_png(epdir / f"mask_{j:05d}.png", (fr.gt_mask * 255).astype(np.uint8), "L")
                    writer.writerow([j, repr(float(fr.reward))])
            entries.append({"id": ep.episode_id, "dir": ep.episode_id, "n_frames": len(ep.frames)})
        manifest = {
            "episodes": entries,
            "total_frames": int(sum(e["n_frames"] for e in entries)),
            "generator_config": config or {},
            "seed": seed,
        }
        with open(root / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return manifest
    except OSError as exc:
        raise GenerationError(f"failed to write archive at {root}: {exc}") from exc
