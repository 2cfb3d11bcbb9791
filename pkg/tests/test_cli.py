"""End-to-end tests for the command-line driver."""

import json
import subprocess
import sys

import pytest

from fuseclip.cli import main

TINY = {
    "data": {"n_main": 96, "n_guided": 32},
    "pretrain": {"steps": 4, "batch_size": 16, "checkpoint_every": 4},
    "diffusion": {
        "steps": 4,
        "batch_size": 16,
        "timesteps": 8,
        "hidden": 16,
        "checkpoint_every": 4,
    },
    "eval": {"n_eval": 60, "n_ids": 4, "n_per_id": 4, "n_gen": 16},
}


def write_tiny_config(dirpath, **extra):
    cfg = json.loads(json.dumps(TINY))
    cfg["data"]["dir"] = str(dirpath / "data")
    for section, values in extra.items():
        cfg.setdefault(section, {}).update(values)
    path = dirpath / "tiny.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared data directory plus one finished pre-training run."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_tiny_config(root)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "pre")]) == 0
    return root, cfg


class TestGenData:
    def test_writes_datasets_and_echo(self, tmp_path, capsys):
        cfg = write_tiny_config(tmp_path)
        assert main(["gen-data", "--config", str(cfg)]) == 0
        data = tmp_path / "data"
        for name in ("world.json", "main.ds", "guided.ds", "config.json"):
            assert (data / name).exists()
        out = capsys.readouterr().out
        assert "main.ds: 96 samples" in out
        assert "guided.ds: 32 samples" in out

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        main(["gen-data", "--config", str(cfg)])
        first = (tmp_path / "data" / "main.ds").read_bytes()
        echo = (tmp_path / "data" / "config.json").read_bytes()
        main(["gen-data", "--config", str(cfg)])
        assert (tmp_path / "data" / "main.ds").read_bytes() == first
        assert (tmp_path / "data" / "config.json").read_bytes() == echo

    def test_no_clobber_skips(self, tmp_path, capsys):
        cfg = write_tiny_config(tmp_path)
        main(["gen-data", "--config", str(cfg)])
        stamp = (tmp_path / "data" / "main.ds").stat().st_mtime_ns
        assert main(["gen-data", "--config", str(cfg), "--no-clobber"]) == 0
        assert "skipping" in capsys.readouterr().out
        assert (tmp_path / "data" / "main.ds").stat().st_mtime_ns == stamp

    def test_missing_parent_exits_2_without_partials(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        out = tmp_path / "no" / "such" / "dir"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 2
        assert not (tmp_path / "no").exists()

    def test_seed_flag_changes_world(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        main(["gen-data", "--config", str(cfg)])
        baseline = (tmp_path / "data" / "world.json").read_text()
        main(["gen-data", "--config", str(cfg), "--seed", "7"])
        assert (tmp_path / "data" / "world.json").read_text() != baseline


class TestPretrainCmd:
    def test_artifacts_written(self, workspace):
        root, _ = workspace
        for name in ("checkpoint.bin", "metrics.jsonl", "timing.jsonl", "config.json"):
            assert (root / "pre" / name).exists()

    def test_loss_mask_flag_visible_in_echo(self, workspace, tmp_path):
        _, cfg = workspace
        out = tmp_path / "run"
        assert (
            main(
                [
                    "pretrain",
                    "--config",
                    str(cfg),
                    "--out",
                    str(out),
                    "--loss-mask",
                    "L1",
                ]
            )
            == 0
        )
        echoed = json.loads((out / "config.json").read_text())
        loss = echoed["pretrain"]["loss"]
        assert loss["use_image_term"] is True
        assert loss["use_id_term"] is False
        assert loss["use_text_term"] is False

    def test_lambda_flag_sets_guided_probability(self, workspace, tmp_path):
        _, cfg = workspace
        out = tmp_path / "run"
        main(["pretrain", "--config", str(cfg), "--out", str(out), "--lambda", "0.5"])
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["pretrain"]["loss"]["guided_probability"] == 0.5

    def test_resume_reproduces_uninterrupted_metrics(self, workspace, tmp_path):
        _, cfg = workspace
        solid = tmp_path / "solid"
        main(
            ["pretrain", "--config", str(cfg), "--out", str(solid), "--set",
             "pretrain.steps=8"]
        )
        split = tmp_path / "split"
        main(["pretrain", "--config", str(cfg), "--out", str(split)])
        main(
            ["pretrain", "--config", str(cfg), "--out", str(split), "--resume",
             "--set", "pretrain.steps=8"]
        )
        assert (split / "metrics.jsonl").read_bytes() == (
            solid / "metrics.jsonl"
        ).read_bytes()

    def test_unknown_config_key_exits_2(self, workspace, tmp_path):
        _, cfg = workspace
        code = main(
            ["pretrain", "--config", str(cfg), "--out", str(tmp_path / "r"),
             "--set", "pretrain.stepz=3"]
        )
        assert code == 2

    def test_missing_data_exits_2(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        code = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "r")])
        assert code == 2


class TestTrainDiffusionCmd:
    def test_untrained_encoder_run(self, workspace, tmp_path):
        root, cfg = workspace
        out = tmp_path / "diff"
        assert main(["train-diffusion", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "checkpoint.bin").exists()

    def test_pretrained_encoder_checkpoint(self, workspace, tmp_path):
        root, cfg = workspace
        out = tmp_path / "diff"
        code = main(
            [
                "train-diffusion",
                "--config",
                str(cfg),
                "--out",
                str(out),
                "--set",
                f"diffusion.encoder_checkpoint={root / 'pre' / 'checkpoint.bin'}",
            ]
        )
        assert code == 0

    def test_world_mismatch_exits_4(self, workspace, tmp_path):
        root, cfg = workspace
        data2 = tmp_path / "w7"
        data2.mkdir()
        cfg2 = write_tiny_config(tmp_path, world={"seed": 7})
        main(["gen-data", "--config", str(cfg2), "--out", str(tmp_path / "data")])
        code = main(
            [
                "train-diffusion",
                "--config",
                str(cfg2),
                "--out",
                str(tmp_path / "diff"),
                "--set",
                f"diffusion.encoder_checkpoint={root / 'pre' / 'checkpoint.bin'}",
            ]
        )
        assert code == 4


class TestEvalCmd:
    def test_full_report(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        out = tmp_path / "rep"
        code = main(
            ["eval", str(root / "pre" / "checkpoint.bin"), "--config", str(cfg),
             "--out", str(out)]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report["metrics"]) == {
            "zero_shot_top1",
            "zero_shot_top5",
            "silhouette",
            "knn_recall_at_1",
        }
        assert (out / "report.csv").exists()
        assert (out / "projection.csv").exists()
        assert "zero_shot_top1" in capsys.readouterr().out

    def test_metrics_subset(self, workspace, tmp_path):
        root, cfg = workspace
        out = tmp_path / "rep"
        main(
            ["eval", str(root / "pre" / "checkpoint.bin"), "--config", str(cfg),
             "--out", str(out), "--metrics", "zero-shot"]
        )
        report = json.loads((out / "report.json").read_text())
        assert set(report["metrics"]) == {"zero_shot_top1", "zero_shot_top5"}
        assert report["per_identity_recall"] == {}
        assert not (out / "projection.csv").exists()

    def test_unknown_metric_exits_2(self, workspace, tmp_path):
        root, cfg = workspace
        code = main(
            ["eval", str(root / "pre" / "checkpoint.bin"), "--config", str(cfg),
             "--out", str(tmp_path / "rep"), "--metrics", "bleu"]
        )
        assert code == 2

    def test_reruns_byte_identical(self, workspace, tmp_path):
        root, cfg = workspace
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            main(
                ["eval", str(root / "pre" / "checkpoint.bin"), "--config", str(cfg),
                 "--out", str(out)]
            )
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()

    def test_world_mismatch_exits_4(self, workspace, tmp_path):
        root, cfg = workspace
        code = main(
            ["eval", str(root / "pre" / "checkpoint.bin"), "--config", str(cfg),
             "--out", str(tmp_path / "rep"), "--set", "world.seed=9"]
        )
        assert code == 4


class TestAblateCmd:
    def test_single_variant_subset(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        out = tmp_path / "abl"
        code = main(
            ["ablate", "--config", str(cfg), "--out", str(out), "--variants", "L1"]
        )
        assert code == 0
        payload = json.loads((out / "ablation.json").read_text())
        assert [r["variant"] for r in payload["rows"]] == ["L1"]
        assert payload["verdict"].startswith("SKIPPED")
        assert (out / "ablation.csv").exists()
        assert (out / "ablation.txt").exists()
        printed = capsys.readouterr().out
        assert "verdict:" in printed

    def test_unknown_variant_exits_2(self, workspace, tmp_path):
        _, cfg = workspace
        code = main(
            ["ablate", "--config", str(cfg), "--out", str(tmp_path / "abl"),
             "--variants", "L9"]
        )
        assert code == 2


class TestUsageAndEnvironment:
    def test_no_command_exits_2(self):
        assert main([]) == 2

    def test_help_exits_0(self):
        assert main(["--help"]) == 0

    def test_unknown_flag_exits_2(self):
        assert main(["gen-data", "--frobnicate"]) == 2

    def test_thread_cap_invalid_exits_2(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FUSECLIP_THREADS", "zebra")
        cfg = write_tiny_config(tmp_path)
        assert main(["gen-data", "--config", str(cfg)]) == 2

    def test_thread_cap_applies(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FUSECLIP_THREADS", "1")
        cfg = write_tiny_config(tmp_path)
        assert main(["gen-data", "--config", str(cfg)]) == 0

    def test_module_invocation(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "fuseclip.cli", "--help"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout
