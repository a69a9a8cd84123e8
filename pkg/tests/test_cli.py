"""Command-line surface: subcommands, exit codes, artifacts."""

from __future__ import annotations

import csv
import json

import numpy as np
import pytest

import tsvadlab
from tsvadlab.checkpoint import load_checkpoint, load_model, save_model
from tsvadlab.cli import main
from tsvadlab.model import PretrainModel, TsVadModel, embed_speaker

from tsvadlab.evaluation import SNR_GRID


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    code = main(["synth-data", "--out", str(root / "data"), "--speakers", "5",
                 "--utterances", "12", "--seed", "3"])
    assert code == 0
    return root / "data"


@pytest.fixture(scope="module")
def cli_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_model(path, TsVadModel(method="film", seed=4))
    return path


class TestSynthData:
    def test_deterministic_manifests(self, tmp_path, capsys):
        for sub in ("a", "b"):
            code, _, _ = run(
                ["synth-data", "--out", str(tmp_path / sub), "--speakers", "4",
                 "--utterances", "5", "--seed", "11"],
                capsys,
            )
            assert code == 0
        assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (
            tmp_path / "b" / "manifest.jsonl"
        ).read_bytes()

    def test_too_few_speakers_fails_with_diagnostic(self, tmp_path, capsys):
        code, _, err = run(
            ["synth-data", "--out", str(tmp_path / "x"), "--speakers", "2",
             "--utterances", "4"],
            capsys,
        )
        assert code == 1
        assert err.startswith("error:")
        assert "\n" not in err.strip()

    def test_output_validates_and_config_written(self, cli_dataset):
        ds = tsvadlab.load_dataset(cli_dataset)  # schema-validates on load
        assert len(ds.entries) == 12
        resolved = json.loads((cli_dataset / "config.resolved.json").read_text())
        assert resolved["seed"] == 3


class TestTrainCommands:
    def test_pretrain_emits_checkpoint_and_log(self, cli_dataset, tmp_path, capsys):
        run_dir = tmp_path / "pre"
        config = {
            "bucket_frames": 1200, "val_max_utterances": 1,
            "noise_pool_seconds": 1.0, "eval_interval": 4, "log_interval": 2,
            "schedule": {"warmup_steps": 2, "cycle_steps": 50},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config))
        code, out, _ = run(
            ["pretrain", "--data", str(cli_dataset), "--out-dir", str(run_dir),
             "--steps", "4", "--seed", "1", "--config", str(cfg_path)],
            capsys,
        )
        assert code == 0
        ckpt = run_dir / "checkpoints" / "best.ckpt"
        model, cfg = load_model(ckpt)
        assert cfg["kind"] == "pretrain"
        with open(run_dir / "logs" / "train.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "lr", "loss", "val_metric"]
        assert [r[0] for r in rows[1:]] == ["2", "4"]  # one row per interval
        assert (run_dir / "config.resolved.json").exists()

    def test_finetune_baseline_and_conditioning_validation(
        self, cli_dataset, tmp_path, capsys
    ):
        run_dir = tmp_path / "ft"
        config = {
            "bucket_frames": 1200, "val_max_utterances": 1,
            "noise_pool_seconds": 1.0, "eval_interval": 3, "log_interval": 3,
            "schedule": {"warmup_steps": 2, "cycle_steps": 50},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config))
        code, out, _ = run(
            ["finetune", "--data", str(cli_dataset), "--out-dir", str(run_dir),
             "--conditioning", "mult", "--steps", "3", "--seed", "1",
             "--config", str(cfg_path)],
            capsys,
        )
        assert code == 0
        assert "supervised baseline" in out
        _, cfg = load_model(run_dir / "checkpoints" / "best.ckpt")
        assert cfg["conditioning"] == "mult"

    def test_invalid_conditioning_usage_error(self, cli_dataset, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["finetune", "--data", str(cli_dataset), "--out-dir",
                  str(tmp_path / "x"), "--conditioning", "bogus"])
        assert exc.value.code == 2
        err = capsys.readouterr().err
        for option in ("concat", "add", "mult", "film", "film-pre"):
            assert option in err


class TestEvalCommands:
    def test_eval_printed_map_matches_csv(self, cli_dataset, cli_checkpoint, tmp_path, capsys):
        report = tmp_path / "report.csv"
        code, out, _ = run(
            ["eval", "--model", str(cli_checkpoint), "--data", str(cli_dataset),
             "--report", str(report)],
            capsys,
        )
        assert code == 0
        printed = float(out.split("mAP ")[1].split()[0])
        with open(report) as f:
            row = list(csv.DictReader(f))[0]
        assert printed == float(row["map"])

    def test_eval_refuses_mismatched_conditioning(
        self, cli_dataset, cli_checkpoint, tmp_path, capsys
    ):
        code, _, err = run(
            ["eval", "--model", str(cli_checkpoint), "--data", str(cli_dataset),
             "--report", str(tmp_path / "r.csv"), "--conditioning", "add"],
            capsys,
        )
        assert code == 1
        assert "film" in err and "add" in err

    def test_eval_refuses_pretrain_checkpoint(self, cli_dataset, tmp_path, capsys):
        ckpt = tmp_path / "pre.ckpt"
        save_model(ckpt, PretrainModel(seed=1))
        code, _, err = run(
            ["eval", "--model", str(ckpt), "--data", str(cli_dataset),
             "--report", str(tmp_path / "r.csv")],
            capsys,
        )
        assert code == 1
        assert "pretrain" in err

    def test_sweep_csv_contains_exact_grid(self, cli_dataset, cli_checkpoint, tmp_path, capsys):
        out_csv = tmp_path / "sweep.csv"
        code, _, _ = run(
            ["sweep", "--model", str(cli_checkpoint), "--data", str(cli_dataset),
             "--out", str(out_csv)],
            capsys,
        )
        assert code == 0
        with open(out_csv) as f:
            rows = list(csv.DictReader(f))
        for kind in tsvadlab.NOISE_KINDS:
            snrs = sorted(int(r["snr"]) for r in rows if r["kind"] == kind)
            assert snrs == sorted(SNR_GRID)
        assert any(r["kind"] == "clean" for r in rows)

    def test_compare_self_is_all_zero(self, cli_dataset, cli_checkpoint, tmp_path, capsys):
        out_csv = tmp_path / "sweep.csv"
        run(["sweep", "--model", str(cli_checkpoint), "--data", str(cli_dataset),
             "--out", str(out_csv)], capsys)
        delta_csv = tmp_path / "delta.csv"
        code, out, _ = run(
            ["compare", str(out_csv), str(out_csv), "--out", str(delta_csv)],
            capsys,
        )
        assert code == 0
        with open(delta_csv) as f:
            for row in csv.DictReader(f):
                assert float(row["d_map"]) == 0.0

    def test_export_reps(self, cli_dataset, cli_checkpoint, tmp_path, capsys):
        out_csv = tmp_path / "reps.csv"
        code, out, _ = run(
            ["export-reps", "--model", str(cli_checkpoint), "--data", str(cli_dataset),
             "--out", str(out_csv), "--per-class", "10"],
            capsys,
        )
        assert code == 0
        header = out_csv.read_text().splitlines()[0].split(",")
        assert len(header) == 3 + 64


class TestStream:
    def test_stream_matches_batch_and_line_count(
        self, cli_dataset, cli_checkpoint, capsys
    ):
        ds = tsvadlab.load_dataset(cli_dataset)
        entry = ds.entries_for("test")[0]
        wav = ds.root / entry.wav
        enrol = ds.root / entry.enrolment
        code, out, _ = run(
            ["stream", "--model", str(cli_checkpoint), "--wav", str(wav),
             "--enrolment", str(enrol)],
            capsys,
        )
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == entry.n_frames

        model, _ = load_model(cli_checkpoint)
        feats = tsvadlab.log_mel(ds.wave(entry)).values
        emb = embed_speaker(ds.enrolment_wave(entry))
        batch = model.forward_probs(feats, emb)
        parsed = np.array([[float(v) for v in line.split("\t")[1:]] for line in lines])
        assert np.array_equal(parsed, batch)  # .17g output round-trips exactly

    def test_stream_refuses_pretrain_checkpoint(self, cli_dataset, tmp_path, capsys):
        ckpt = tmp_path / "pre.ckpt"
        save_model(ckpt, PretrainModel(seed=1))
        ds = tsvadlab.load_dataset(cli_dataset)
        entry = ds.entries_for("test")[0]
        code, _, err = run(
            ["stream", "--model", str(ckpt), "--wav", str(ds.root / entry.wav),
             "--enrolment", str(ds.root / entry.enrolment)],
            capsys,
        )
        assert code == 1
        assert "TS-VAD" in err

    def test_stream_refuses_non_causal_flag(self, cli_dataset, tmp_path, capsys):
        model = TsVadModel(method="film", seed=0)
        from tsvadlab.checkpoint import model_config_dict, save_checkpoint

        config = model_config_dict(model)
        config["causal"] = False
        save_checkpoint(
            tmp_path / "nc.ckpt", config,
            {n: p.data for n, p in model.params().items()},
        )
        ds = tsvadlab.load_dataset(cli_dataset)
        entry = ds.entries_for("test")[0]
        code, _, err = run(
            ["stream", "--model", str(tmp_path / "nc.ckpt"),
             "--wav", str(ds.root / entry.wav),
             "--enrolment", str(ds.root / entry.enrolment)],
            capsys,
        )
        assert code == 1
        assert "causal" in err


class TestEntryPoint:
    def test_installed_script_runs(self):
        import subprocess

        result = subprocess.run(
            ["tsvadlab", "--help"], capture_output=True, text=True
        )
        assert result.returncode == 0
        for command in ("synth-data", "pretrain", "finetune", "eval", "sweep",
                        "compare", "export-reps", "stream"):
            assert command in result.stdout
