"""Pipeline stages behind the CLI: generate -> prepare -> train-critic ->
split -> train-seg -> evaluate -> table1.

Every stage writes a manifest (config hash, input hashes, output hashes) and
is idempotent: re-running with an unchanged config hash reuses the cached
artifacts. Downstream stages verify the manifest chain before consuming.
"""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import __version__
from .config import ExperimentConfig, derive_seed, stage_hash
from .containers import load_tensors, save_tensors, sha256_file
from .datasets import (
    load_archive,
    load_labeled_dataset,
    prepare_labeled_frames,
    save_labeled_dataset,
    split_indices,
)
from .errors import ArtifactMismatchError, DegenerateSplitError, MissingArtifactError
from .evaluation import (
    baseline_full_mask,
    baseline_saliency,
    evaluate_model,
    false_positive_intensity,
    make_montage,
)
from .model import (
    init_model,
    load_checkpoint,
    predict_values,
    save_checkpoint,
    with_variant,
)
from .synthgym import export_archive, generate_episodes
from .training import train_phase1, train_phase2

logger = logging.getLogger(__name__)

VARIANTS = ("full", "frozen_encoder", "separate_critic", "no_inject")
BASELINES = ("full_mask", "saliency", "saliency_crf")


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ArtifactMismatchError(
            f"{lock} exists; another run owns this output directory (delete it if stale)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _manifest_path(out: Path, name: str) -> Path:
    return out / "manifests" / f"{name}.json"


def _tree_hash(root: Path) -> str:
    """Single digest over every file under root (sorted relative paths)."""
    import hashlib

    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(bytes.fromhex(sha256_file(p)))
    return h.hexdigest()


def _write_manifest(out: Path, name: str, config_hash: str, inputs: dict, outputs: dict):
    path = _manifest_path(out, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "stage": name,
        "config_hash": config_hash,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "timestamp": time.time(),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    return doc


def _read_manifest(out: Path, name: str, needed_by: str) -> dict:
    path = _manifest_path(out, name)
    if not path.exists():
        raise MissingArtifactError(
            f"stage '{name}' has not run (needed by '{needed_by}'); run the corresponding command first"
        )
    with open(path) as f:
        return json.load(f)


def _require_upstream(out: Path, name: str, expected_hash: str, needed_by: str) -> dict:
    doc = _read_manifest(out, name, needed_by)
    if doc["config_hash"] != expected_hash:
        raise ArtifactMismatchError(
            f"stage '{name}' was produced under config hash {doc['config_hash'][:12]} "
            f"but the current config expects {expected_hash[:12]}; re-run '{name}' "
            f"(or restore the original config)"
        )
    return doc


def _cached(out: Path, name: str, config_hash: str, force: bool) -> dict | None:
    """Return the existing manifest when this stage is already done for this
    config hash and all outputs are intact."""
    if force:
        return None
    path = _manifest_path(out, name)
    if not path.exists():
        return None
    with open(path) as f:
        doc = json.load(f)
    if doc.get("config_hash") != config_hash:
        return None
    for rel, digest in doc.get("outputs", {}).items():
        p = out / rel
        if not p.exists():
            return None
        if p.is_dir():
            if _tree_hash(p) != digest:
                return None
        elif sha256_file(p) != digest:
            return None
    logger.info("stage %s: cache hit (%s)", name, config_hash[:12])
    return doc


def _jsonl_dump(path: Path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------- stages


def run_generate(cfg: ExperimentConfig, force: bool = False) -> dict:
    out = Path(cfg.out_dir)
    h = stage_hash(cfg, "generate")
    cached = _cached(out, "generate", h, force)
    if cached:
        return cached
    outputs = {}
    for split_name, n_eps, seed_tag in (
        ("archive_train", cfg.counts.train_episodes, "train"),
        ("archive_val", cfg.counts.val_episodes, "val"),
        ("archive_test", cfg.counts.test_episodes, "test"),
    ):
        seed = derive_seed(cfg.data_seed, seed_tag)
        episodes = generate_episodes(cfg.scene, cfg.episode, n_eps, seed)
        export_archive(
            episodes,
            out / split_name,
            config={"scene": asdict(cfg.scene), "episode": asdict(cfg.episode)},
            seed=seed,
        )
        outputs[split_name] = _tree_hash(out / split_name)
        logger.info("generated %s: %d episodes, %d frames", split_name, n_eps,
                    sum(len(e) for e in episodes))
    return _write_manifest(out, "generate", h, {}, outputs)


def run_prepare(cfg: ExperimentConfig, force: bool = False) -> dict:
    out = Path(cfg.out_dir)
    up = _require_upstream(out, "generate", stage_hash(cfg, "generate"), "prepare")
    h = stage_hash(cfg, "prepare", upstream=up["config_hash"])
    cached = _cached(out, "prepare", h, force)
    if cached:
        return cached
    outputs = {}
    for split_name, fname in (("archive_train", "dataset_train.cst"), ("archive_val", "dataset_val.cst")):
        episodes, _ = load_archive(out / split_name)
        labeled = prepare_labeled_frames(episodes, cfg.dataset)
        save_labeled_dataset(out / fname, labeled, cfg.dataset,
                             provenance={"archive": up["outputs"][split_name]})
        outputs[fname] = sha256_file(out / fname)
        logger.info("prepared %s: %d labeled frames", fname, len(labeled))
    return _write_manifest(out, "prepare", h, {"generate": up["config_hash"]}, outputs)


def run_train_critic(cfg: ExperimentConfig, seed: int, force: bool = False) -> dict:
    out = Path(cfg.out_dir)
    up = _require_upstream(out, "prepare", stage_hash(cfg, "prepare",
                           upstream=stage_hash(cfg, "generate")), "train-critic")
    h = stage_hash(cfg, "train_critic", upstream=up["config_hash"], seed=seed)
    name = f"train_critic_s{seed}"
    cached = _cached(out, name, h, force)
    if cached:
        return cached
    images, labels, _, _ = load_labeled_dataset(out / "dataset_train.cst")
    val_images, val_labels, _, _ = load_labeled_dataset(out / "dataset_val.cst")
    hyper = replace(cfg.phase1, seed=derive_seed(seed, "phase1"))
    model = init_model(cfg.model, "full", seed=derive_seed(seed, "init"))
    seed_dir = out / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    model, log = train_phase1(images, labels, hyper, model,
                              val=(val_images, val_labels),
                              diag_path=seed_dir / "phase1_diag.ckpt")
    ckpt = seed_dir / "phase1.ckpt"
    save_checkpoint(ckpt, model, "phase1", hyper.epochs, seed)
    _jsonl_dump(seed_dir / "phase1_log.jsonl", log)
    outputs = {f"seed_{seed}/phase1.ckpt": sha256_file(ckpt)}
    logger.info("phase1 seed %d: val_mse=%.5f", seed, log[-1].get("val_mse", float("nan")))
    return _write_manifest(out, name, h, {"prepare": up["config_hash"]}, outputs)


def run_split(cfg: ExperimentConfig, seed: int, force: bool = False) -> dict:
    out = Path(cfg.out_dir)
    up_hash = stage_hash(cfg, "train_critic",
                         upstream=stage_hash(cfg, "prepare", upstream=stage_hash(cfg, "generate")),
                         seed=seed)
    up = _require_upstream(out, f"train_critic_s{seed}", up_hash, "split")
    h = stage_hash(cfg, "split", upstream=up["config_hash"], seed=seed)
    name = f"split_s{seed}"
    cached = _cached(out, name, h, force)
    if cached:
        return cached
    images, labels, _, _ = load_labeled_dataset(out / "dataset_train.cst")
    model, _ = load_checkpoint(out / f"seed_{seed}" / "phase1.ckpt")
    values = predict_values(model, images)
    high, low = split_indices(values, cfg.split)
    if len(high) == 0 or len(low) == 0:
        raise DegenerateSplitError(f"seed {seed}: |high|={len(high)}, |low|={len(low)}")
    path = out / f"seed_{seed}" / "splits.cst"
    save_tensors(path, {"high_idx": high.astype(np.int64), "low_idx": low.astype(np.int64),
                        "values": values},
                 meta={"split": asdict(cfg.split), "n_frames": len(labels)})
    logger.info("split seed %d: |high|=%d |low|=%d of %d", seed, len(high), len(low), len(labels))
    outputs = {f"seed_{seed}/splits.cst": sha256_file(path)}
    return _write_manifest(out, name, h, {f"train_critic_s{seed}": up["config_hash"]}, outputs)


def _split_hash(cfg, seed):
    return stage_hash(
        cfg, "split", seed=seed,
        upstream=stage_hash(cfg, "train_critic", seed=seed,
                            upstream=stage_hash(cfg, "prepare", upstream=stage_hash(cfg, "generate"))))


def run_train_seg(cfg: ExperimentConfig, seed: int, variant: str, force: bool = False) -> dict:
    if variant not in VARIANTS:
        raise MissingArtifactError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    out = Path(cfg.out_dir)
    up = _require_upstream(out, f"split_s{seed}", _split_hash(cfg, seed), "train-seg")
    h = stage_hash(cfg, "train_seg", upstream=up["config_hash"], seed=seed, variant=variant)
    name = f"train_seg_s{seed}_{variant}"
    cached = _cached(out, name, h, force)
    if cached:
        return cached
    images, labels, _, _ = load_labeled_dataset(out / "dataset_train.cst")
    splits, _ = load_tensors(out / f"seed_{seed}" / "splits.cst")
    base, _ = load_checkpoint(out / f"seed_{seed}" / "phase1.ckpt")
    model = with_variant(base, variant, seed=derive_seed(seed, "seg_encoder", variant))
    encoder_before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    hyper = replace(cfg.phase2, variant=variant, seed=derive_seed(seed, "phase2", variant))
    hi, lo = splits["high_idx"], splits["low_idx"]
    model, log = train_phase2(model, (images[hi], labels[hi]), (images[lo], labels[lo]), hyper)
    if variant == "frozen_encoder":
        after = model.encoder.state_dict()
        assert all((encoder_before[k] == after[k]).all() for k in after), "frozen encoder moved"
    seed_dir = out / f"seed_{seed}"
    ckpt = seed_dir / f"phase2_{variant}.ckpt"
    save_checkpoint(ckpt, model, "phase2", hyper.epochs, seed)
    _jsonl_dump(seed_dir / f"phase2_{variant}_log.jsonl", log)
    outputs = {f"seed_{seed}/phase2_{variant}.ckpt": sha256_file(ckpt)}
    return _write_manifest(out, name, h, {f"split_s{seed}": up["config_hash"]}, outputs)


def load_test_frames(cfg: ExperimentConfig):
    out = Path(cfg.out_dir)
    episodes, _ = load_archive(out / "archive_test")
    frames = [f for ep in episodes for f in ep.frames]
    cap = cfg.counts.test_frames_cap
    return frames[:cap] if cap else frames


def run_evaluate(cfg: ExperimentConfig, seed: int, targets=None, force: bool = False) -> dict:
    """Score trained variants and baselines for one seed on the test set."""
    out = Path(cfg.out_dir)
    targets = list(targets or VARIANTS)
    ups = {}
    for variant in targets:
        up_hash = stage_hash(cfg, "train_seg", seed=seed, variant=variant,
                             upstream=_split_hash(cfg, seed))
        ups[variant] = _require_upstream(out, f"train_seg_s{seed}_{variant}", up_hash, "evaluate")
    h = stage_hash(cfg, "evaluate", seed=seed, targets=sorted(targets),
                   upstream="|".join(ups[v]["config_hash"] for v in sorted(targets)))
    name = f"evaluate_s{seed}"
    cached = _cached(out, name, h, force)
    if cached:
        return cached
    frames = load_test_frames(cfg)
    report = {"seed": seed, "threshold": cfg.mask_threshold, "n_frames": len(frames), "entries": {}}
    for variant in targets:
        model, _ = load_checkpoint(out / f"seed_{seed}" / f"phase2_{variant}.ckpt")
        report["entries"][variant] = evaluate_model(model, frames, cfg.mask_threshold)
        if variant == "full":
            report["entries"]["full_crf"] = evaluate_model(
                model, frames, cfg.mask_threshold, refine=cfg.crf, crf_limit=cfg.crf_eval_frames)
            report["entries"]["full_false_positive_intensity"] = false_positive_intensity(model, frames)
            montage = make_montage(model, _montage_frames(frames))
            PILImage.fromarray(np.round(montage * 255).astype(np.uint8)).save(
                out / f"seed_{seed}" / "montage_full.png")
    critic, _ = load_checkpoint(out / f"seed_{seed}" / "phase1.ckpt")
    report["entries"]["baseline_full_mask"] = baseline_full_mask(frames, cfg.mask_threshold)
    report["entries"]["baseline_saliency"] = baseline_saliency(
        critic, frames, cfg.saliency, cfg.mask_threshold)
    report["entries"]["baseline_saliency_crf"] = baseline_saliency(
        critic, frames, cfg.saliency, cfg.mask_threshold, refine=cfg.crf,
        crf_limit=cfg.crf_eval_frames)
    path = out / f"seed_{seed}" / "eval.json"
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    outputs = {f"seed_{seed}/eval.json": sha256_file(path)}
    return _write_manifest(out, name, h,
                           {k: v["config_hash"] for k, v in ups.items()}, outputs)


def _montage_frames(frames, n_high: int = 4, n_low: int = 4):
    """Mirror the qualitative figure layout: object-rich columns then
    object-free columns."""
    rich = [f for f in frames if f.gt_mask is not None and f.gt_mask.sum() > 80]
    empty = [f for f in frames if f.gt_mask is not None and f.gt_mask.sum() == 0]
    return rich[:n_high] + empty[:n_low]


def run_table1(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Aggregate per-seed evaluations into the variants-vs-baselines table."""
    out = Path(cfg.out_dir)
    ups = {}
    for seed in cfg.seeds:
        # evaluate hash depends on its upstream chain; recompute it the same way
        chains = {}
        for variant in VARIANTS:
            chains[variant] = stage_hash(cfg, "train_seg", seed=seed, variant=variant,
                                         upstream=_split_hash(cfg, seed))
        h_eval = stage_hash(cfg, "evaluate", seed=seed, targets=sorted(VARIANTS),
                            upstream="|".join(chains[v] for v in sorted(VARIANTS)))
        ups[seed] = _require_upstream(out, f"evaluate_s{seed}", h_eval, "table1")
    h = stage_hash(cfg, "table1", upstream="|".join(ups[s]["config_hash"] for s in cfg.seeds))
    cached = _cached(out, "table1", h, force)
    if cached:
        return cached
    per_seed = {}
    for seed in cfg.seeds:
        with open(out / f"seed_{seed}" / "eval.json") as f:
            per_seed[seed] = json.load(f)["entries"]
    rows = {}
    for key in ("baseline_full_mask", "baseline_saliency", "baseline_saliency_crf",
                "separate_critic", "no_inject", "frozen_encoder", "full", "full_crf"):
        ious = [per_seed[s][key]["mean_iou"] for s in cfg.seeds]
        rows[key] = {"per_seed_iou": ious, "mean_iou": float(np.mean(ious))}
    rows["full_false_positive_intensity"] = {
        "per_seed": [per_seed[s]["full_false_positive_intensity"] for s in cfg.seeds],
        "mean": float(np.mean([per_seed[s]["full_false_positive_intensity"] for s in cfg.seeds])),
    }
    table = {"seeds": cfg.seeds, "threshold": cfg.mask_threshold, "rows": rows}
    path = out / "table1.json"
    with open(path, "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
    outputs = {"table1.json": sha256_file(path)}
    return _write_manifest(out, "table1", h,
                           {f"evaluate_s{s}": ups[s]["config_hash"] for s in cfg.seeds}, outputs)


def format_table1(table: dict) -> str:
    names = {
        "baseline_full_mask": "Baseline Full Mask",
        "baseline_saliency": "Baseline Saliency Map",
        "baseline_saliency_crf": "Baseline Saliency Map + CRF",
        "separate_critic": "Separate Critic",
        "no_inject": "No Inject Loss",
        "frozen_encoder": "Frozen Encoder",
        "full": "Full Model",
        "full_crf": "Full Model + CRF",
    }
    lines = [f"{'Model Variant':32s} IoU (mean over seeds {table['seeds']})"]
    for key, label in names.items():
        row = table["rows"][key]
        per_seed = " ".join(f"{v:.3f}" for v in row["per_seed_iou"])
        lines.append(f"{label:32s} {row['mean_iou']:.3f}   [{per_seed}]")
    return "\n".join(lines)
