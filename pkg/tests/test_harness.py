"""Config parsing, metrics files, report rendering, and the CLI end to end."""

import json
import os

import pytest

from stylesplit.harness.checkpoint import read_manifest
from stylesplit.harness.cli import main
from stylesplit.harness.config import (
    SEED_ENV_VAR,
    config_from_dict,
    config_from_manifest,
    config_to_dict,
    load_config,
)
from stylesplit.harness.metrics import MetricsWriter, read_metrics, scan_metrics_dir
from stylesplit.harness.report import markdown_table, write_report
from stylesplit.tensorops import OpError

TINY_YAML = """\
seed: 3
n_samples: 12
steps: 3
resolution: 64
trainer:
  base_channels: 4
  d_t: 16
  disc_width: 8
  batch: 2
  steps_per_phase: 1
  queue_capacity: 16
  swd_projections: 4
  n_patch_positions: 8
weights:
  fft: 0.1
  swd: 0.1
probe:
  fraction: 0.25
  epochs: 10
  eval_samples: 12
"""


def write_tiny_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY_YAML)
    return str(path)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

class TestConfig:
    def test_load_yaml(self, tmp_path):
        cfg = load_config(write_tiny_config(tmp_path))
        assert cfg.seed == 3
        assert cfg.n_samples == 12
        assert cfg.trainer.base_channels == 4
        assert cfg.trainer.seed == 3  # inherited from run seed
        assert cfg.trainer.weights.fft == 0.1
        assert cfg.probe.fraction == 0.25

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("seed: 1\ntrainer:\n  base_chanels: 4\n")
        with pytest.raises(OpError, match="base_chanels"):
            load_config(str(path))

    def test_unknown_top_level_key(self):
        with pytest.raises(OpError, match="stepz"):
            config_from_dict({"stepz": 100})

    def test_validation_names_field(self):
        with pytest.raises(OpError, match="probe.fraction"):
            config_from_dict({"probe": {"fraction": 1.5}})
        with pytest.raises(OpError, match="tau"):
            config_from_dict({"trainer": {"tau": 0.0}})
        with pytest.raises(OpError, match="k_domains"):
            config_from_dict({"trainer": {"k_domains": 1}})
        with pytest.raises(OpError, match="probe.lr"):
            config_from_dict({"probe": {"lr": -0.1}})

    def test_env_seed_override(self, tmp_path, monkeypatch):
        path = write_tiny_config(tmp_path)
        monkeypatch.setenv(SEED_ENV_VAR, "99")
        cfg = load_config(path)
        assert cfg.seed == 99
        assert cfg.trainer.seed == 99

    def test_env_seed_must_be_int(self, tmp_path, monkeypatch):
        path = write_tiny_config(tmp_path)
        monkeypatch.setenv(SEED_ENV_VAR, "not-a-seed")
        with pytest.raises(OpError, match=SEED_ENV_VAR):
            load_config(path)

    def test_manifest_roundtrip(self, tmp_path):
        cfg = load_config(write_tiny_config(tmp_path))
        echoed = json.loads(json.dumps(config_to_dict(cfg)))  # same trip a manifest takes
        back = config_from_manifest(echoed)
        assert back == cfg

    def test_resolution_flows_into_trainer(self):
        cfg = config_from_dict({"resolution": 128})
        assert cfg.trainer.resolution == 128

    def test_resolution_mismatch_rejected(self):
        with pytest.raises(OpError, match="resolution"):
            config_from_dict({"resolution": 128, "trainer": {"resolution": 64}})
        with pytest.raises(OpError, match="resolution"):
            config_from_dict({"resolution": 32})  # below the stride-32 floor

    def test_weights_accepted_inside_trainer_section(self):
        cfg = config_from_dict({"trainer": {"weights": {"rec": 3.0}}})
        assert cfg.trainer.weights.rec == 3.0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class TestMetrics:
    def test_append_and_read(self, tmp_path):
        path = str(tmp_path / "m.jsonl")
        w = MetricsWriter(path)
        w.write("train", step=0, loss=1.5)
        w.write("probe", branch="style", accuracy=0.75)
        records = read_metrics(path)
        assert records == [
            {"kind": "train", "step": 0, "loss": 1.5},
            {"kind": "probe", "branch": "style", "accuracy": 0.75},
        ]

    def test_lines_are_self_contained_json(self, tmp_path):
        path = str(tmp_path / "m.jsonl")
        MetricsWriter(path).write("train", step=1, loss=0.5)
        with open(path) as fh:
            lines = fh.read().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["step"] == 1

    def test_bad_line_reported_by_number(self, tmp_path):
        path = str(tmp_path / "m.jsonl")
        with open(path, "w") as fh:
            fh.write('{"kind": "train", "step": 0}\n')
            fh.write("not json at all\n")
        with pytest.raises(OpError, match="line 2"):
            read_metrics(path)

    def test_scan_dir_merges_sorted(self, tmp_path):
        MetricsWriter(str(tmp_path / "b.jsonl")).write("train", step=1)
        MetricsWriter(str(tmp_path / "a.jsonl")).write("train", step=0)
        records = scan_metrics_dir(str(tmp_path))
        assert [r["step"] for r in records] == [0, 1]  # file-name order


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

class TestReport:
    def test_markdown_table(self):
        text = markdown_table(["a", "b"], [[1, 2.5], ["x", "y"]])
        lines = text.splitlines()
        assert lines[0] == "| a | b |"
        assert set(lines[1]) <= {"|", "-", " ", ":"}
        assert "| 1 | 2.5000 |" in lines  # floats rendered at fixed precision
        assert "| x | y |" in lines

    def test_write_report_outputs(self, tmp_path):
        metrics_dir = tmp_path / "metrics"
        metrics_dir.mkdir()
        w = MetricsWriter(str(metrics_dir / "metrics.jsonl"))
        for step in range(4):
            w.write("train", step=step, phase="A-stylize", total=1.0 / (step + 1), rec=0.5)
        w.write("probe", branch="style", target="style", fraction=0.1,
                accuracy=0.8, macro_f1=0.7, n_train=10, n_eval=100)
        w.write("ablate", variant="no-fft", accuracy=0.78, macro_f1=0.69)
        out = write_report(str(metrics_dir))
        assert os.path.exists(out)
        text = open(out).read()
        assert "| step |" in text or "0.8" in text
        assert "loss_curves.png" in text
        assert os.path.exists(str(metrics_dir / "loss_curves.png"))
        assert os.path.exists(str(metrics_dir / "probe_accuracy.png"))
        assert "no-fft" in text

    def test_report_separate_out_dir(self, tmp_path):
        metrics_dir = tmp_path / "metrics"
        out_dir = tmp_path / "out"
        metrics_dir.mkdir()
        MetricsWriter(str(metrics_dir / "m.jsonl")).write("train", step=0, total=1.0)
        path = write_report(str(metrics_dir), str(out_dir))
        assert path == str(out_dir / "report.md")
        assert os.path.exists(path)


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------

class TestCli:
    def test_pretrain_probe_report(self, tmp_path, capsys):
        cfg_path = write_tiny_config(tmp_path)
        out = str(tmp_path / "run")

        assert main(["pretrain", "--config", cfg_path, "--out", out]) == 0
        ckpt = os.path.join(out, "checkpoint")
        assert os.path.exists(os.path.join(ckpt, "manifest.json"))
        assert os.path.exists(os.path.join(ckpt, "state.f64"))
        manifest = read_manifest(ckpt)
        assert manifest["step"] == 3
        assert manifest["run_config"]["n_samples"] == 12
        train_records = [r for r in read_metrics(os.path.join(out, "metrics.jsonl"))
                         if r["kind"] == "train"]
        assert [r["step"] for r in train_records] == [0, 1, 2]

        rc = main(["probe", "--ckpt", ckpt, "--branch", "style",
                   "--fraction", "0.25", "--target", "style", "--out", out])
        assert rc == 0
        record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert record["branch"] == "style" and record["target"] == "style"
        assert 0.0 <= record["accuracy"] <= 1.0

        assert main(["report", "--metrics", out]) == 0
        assert os.path.exists(os.path.join(out, "report.md"))
        assert os.path.exists(os.path.join(out, "loss_curves.png"))

    def test_probe_fusion_branch(self, tmp_path, capsys):
        cfg_path = write_tiny_config(tmp_path)
        out = str(tmp_path / "run")
        main(["pretrain", "--config", cfg_path, "--out", out])
        rc = main(["probe", "--ckpt", os.path.join(out, "checkpoint"), "--branch", "fusion",
                   "--fraction", "0.25", "--target", "content"])
        assert rc == 0
        record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert record["branch"] == "fusion"

    def test_gradcheck_exit_zero(self, capsys):
        assert main(["gradcheck", "--seeds", "2"]) == 0
        text = capsys.readouterr().out
        assert "ok: worst relative error" in text
        assert "conv2d" in text  # table lists every op

    def test_ablate_runs_variants(self, tmp_path, capsys):
        cfg_path = write_tiny_config(tmp_path)
        out = str(tmp_path / "ablate")
        cache = str(tmp_path / "cache")
        rc = main(["ablate", "--config", cfg_path, "--out", out,
                   "--variants", "full,no-fft", "--cache", cache])
        assert rc == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert [l["variant"] for l in lines] == ["full", "no-fft"]
        records = [r for r in read_metrics(os.path.join(out, "metrics.jsonl"))
                   if r["kind"] == "ablate"]
        assert len(records) == 2
        # both runs were cached as checkpoints
        assert len(os.listdir(cache)) == 2

    def test_bad_arguments_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["probe", "--ckpt", "x", "--branch", "bogus",
                  "--fraction", "0.1", "--target", "style"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["pretrain"])  # missing required args
        assert exc.value.code == 2

    def test_steps_override(self, tmp_path):
        cfg_path = write_tiny_config(tmp_path)
        out = str(tmp_path / "short")
        main(["pretrain", "--config", cfg_path, "--out", out, "--steps", "1"])
        assert read_manifest(os.path.join(out, "checkpoint"))["step"] == 1
