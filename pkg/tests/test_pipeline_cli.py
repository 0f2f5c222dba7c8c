import json
import os
from dataclasses import replace
from pathlib import Path

import pytest

from critic_seg import cli
from critic_seg.config import ExperimentConfig, derive_seed, stage_hash
from critic_seg.containers import sha256_file
from critic_seg.pipeline import output_lock
from critic_seg.synthgym import EpisodeConfig, SceneConfig
from critic_seg.training import Phase1Hyper, Phase2Hyper


def tiny_config(out_dir) -> ExperimentConfig:
    """Smallest config whose critic still separates high- from low-value
    frames, so every stage (including the split) runs for real."""
    cfg = ExperimentConfig(out_dir=str(out_dir))
    cfg.scene = SceneConfig()
    cfg.episode = EpisodeConfig()
    cfg.counts = replace(cfg.counts, train_episodes=3, val_episodes=1, test_episodes=1,
                         test_frames_cap=12)
    cfg.dataset = replace(cfg.dataset, strip_after_reward=4, shift_max_px=2)
    cfg.phase1 = Phase1Hyper(epochs=10, batch_size=16, lr=1e-3, shift_max_px=2)
    cfg.phase2 = Phase2Hyper(epochs=1, batch_size=24, n_high_a=6, n_low_a=6, n_low_b=12)
    cfg.seeds = [0]
    cfg.crf_eval_frames = 2
    return cfg


def write_config(cfg, path):
    cfg.save(path)
    return str(path)


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """One tiny end-to-end run shared by the read-only checks."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = tiny_config(root / "out")
    cfg_path = write_config(cfg, root / "config.json")
    for command in ("generate", "prepare", "train-critic", "split", "train-seg", "evaluate", "table1"):
        assert run_cli(command, "--config", cfg_path) == 0, command
    return cfg, cfg_path


class TestEndToEnd:
    def test_artifacts_exist(self, pipeline_run):
        cfg, _ = pipeline_run
        out = cfg.out_dir
        for rel in (
            "archive_train/manifest.json",
            "dataset_train.cst",
            "seed_0/phase1.ckpt",
            "seed_0/splits.cst",
            "seed_0/phase2_full.ckpt",
            "seed_0/eval.json",
            "seed_0/montage_full.png",
            "table1.json",
            "manifests/table1.json",
        ):
            assert os.path.exists(os.path.join(out, rel)), rel

    def test_eval_report_structure(self, pipeline_run):
        cfg, _ = pipeline_run
        with open(os.path.join(cfg.out_dir, "seed_0", "eval.json")) as f:
            report = json.load(f)
        entries = report["entries"]
        for key in ("full", "frozen_encoder", "separate_critic", "no_inject", "full_crf",
                    "baseline_full_mask", "baseline_saliency", "baseline_saliency_crf"):
            assert 0.0 <= entries[key]["mean_iou"] <= 1.0, key
        assert 0.0 <= entries["full_false_positive_intensity"] <= 1.0

    def test_table_aggregates_eval(self, pipeline_run):
        cfg, _ = pipeline_run
        with open(os.path.join(cfg.out_dir, "seed_0", "eval.json")) as f:
            entries = json.load(f)["entries"]
        with open(os.path.join(cfg.out_dir, "table1.json")) as f:
            table = json.load(f)
        for key, row in table["rows"].items():
            if key == "full_false_positive_intensity":
                assert row["per_seed"] == [entries[key]]
            else:
                assert row["per_seed_iou"] == [entries[key]["mean_iou"]]

    def test_rerun_hits_cache(self, pipeline_run):
        cfg, cfg_path = pipeline_run
        ckpt = os.path.join(cfg.out_dir, "seed_0", "phase1.ckpt")
        before = os.path.getmtime(ckpt)
        assert run_cli("train-critic", "--config", cfg_path) == 0
        assert os.path.getmtime(ckpt) == before

    def test_lock_released_after_run(self, pipeline_run):
        cfg, _ = pipeline_run
        assert not os.path.exists(os.path.join(cfg.out_dir, ".lock"))


class TestFailureModes:
    def test_missing_upstream_exits_3(self, tmp_path):
        cfg_path = write_config(tiny_config(tmp_path / "out"), tmp_path / "c.json")
        assert run_cli("split", "--config", cfg_path) == 3

    def test_bad_config_exits_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert run_cli("generate", "--config", str(path)) == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"no_such_key": 1}))
        assert run_cli("generate", "--config", str(path)) == 2

    def test_seed_not_in_config_exits_2(self, tmp_path):
        cfg_path = write_config(tiny_config(tmp_path / "out"), tmp_path / "c.json")
        assert run_cli("generate", "--config", cfg_path, "--seed", "9") == 2

    def test_held_lock_exits_5(self, tmp_path):
        cfg = tiny_config(tmp_path / "out")
        cfg_path = write_config(cfg, tmp_path / "c.json")
        with output_lock(Path(cfg.out_dir)):
            assert run_cli("generate", "--config", cfg_path) == 5

    def test_changed_config_is_refused_downstream(self, tmp_path):
        cfg = tiny_config(tmp_path / "out")
        cfg_path = write_config(cfg, tmp_path / "c.json")
        assert run_cli("generate", "--config", cfg_path) == 0
        # silently regenerated data would orphan downstream artifacts
        changed = replace(cfg, data_seed=cfg.data_seed + 1)
        changed_path = write_config(changed, tmp_path / "c2.json")
        assert run_cli("prepare", "--config", changed_path) == 5


class TestHashing:
    def test_stage_hash_scoped_to_relevant_keys(self, tmp_path):
        a = tiny_config(tmp_path / "a")
        b = replace(a, phase2=replace(a.phase2, lr=a.phase2.lr * 2))
        # phase2 settings do not touch the data stages
        assert stage_hash(a, "generate") == stage_hash(b, "generate")
        assert stage_hash(a, "train_seg") != stage_hash(b, "train_seg")

    def test_stage_hash_chains_upstream(self, tmp_path):
        a = tiny_config(tmp_path / "a")
        assert stage_hash(a, "prepare", upstream="x") != stage_hash(a, "prepare", upstream="y")

    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(0, "phase1") == derive_seed(0, "phase1")
        assert derive_seed(0, "phase1") != derive_seed(1, "phase1")
        assert derive_seed(0, "phase1") != derive_seed(0, "phase2")


class TestDeterminism:
    def test_identical_runs_produce_identical_artifacts(self, tmp_path):
        digests = []
        for name in ("r1", "r2"):
            cfg = tiny_config(tmp_path / name)
            cfg_path = write_config(cfg, tmp_path / f"{name}.json")
            for command in ("generate", "prepare", "train-critic", "split", "train-seg"):
                assert run_cli(command, "--config", cfg_path, "--variant", "full") == 0
            digests.append({
                rel: sha256_file(os.path.join(cfg.out_dir, rel))
                for rel in ("dataset_train.cst", "seed_0/phase1.ckpt", "seed_0/splits.cst",
                            "seed_0/phase2_full.ckpt")
            })
        assert digests[0] == digests[1]
