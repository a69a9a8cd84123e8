"""Command-line entry point tying the pipeline together.

Every run directory gets the fully resolved configuration written next to
its outputs, so any result can be reproduced from the directory contents
plus the recorded seeds. Exit code 0 means the command completed; errors
print one machine-parsable line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .audio import read_wav
from .checkpoint import load_model
from .datagen import build_dataset, load_dataset
from .evaluation import (
    SNR_GRID,
    compare,
    evaluate,
    export_representations,
    format_sweep_table,
    read_sweep_csv,
    snr_sweep,
    write_compare_csv,
    write_representations_csv,
    write_sweep_csv,
)
from .model import CONDITIONING_METHODS, StreamingTsVad, embed_speaker
from .training import TrainConfig, finetune, pretrain

CLI_METHODS = {"concat": "concat", "add": "add", "mult": "mult",
               "film": "film", "film-pre": "film_pre"}


def _write_resolved_config(out_dir: Path, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(config, indent=2, sort_keys=True))


def _train_config(args, task: str) -> TrainConfig:
    base: dict = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    base["task"] = task
    if args.steps is not None:
        base["steps"] = args.steps
    if args.seed is not None:
        base["seed"] = args.seed
    if getattr(args, "conditioning", None):
        base["conditioning"] = CLI_METHODS[args.conditioning]
    if getattr(args, "bucket_frames", None):
        base["bucket_frames"] = args.bucket_frames
    return TrainConfig.from_json(base)


def cmd_synth_data(args) -> int:
    out = build_dataset(
        args.out,
        n_speakers=args.speakers,
        n_utterances=args.utterances,
        seed=args.seed,
    )
    _write_resolved_config(
        Path(args.out),
        {"command": "synth-data", "out": str(out), "speakers": args.speakers,
         "utterances": args.utterances, "seed": args.seed},
    )
    print(f"dataset written to {out}")
    return 0


def cmd_pretrain(args) -> int:
    dataset = load_dataset(args.data)
    cfg = _train_config(args, "pretrain")
    result = pretrain(dataset, args.out_dir, cfg)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(result.checkpoint.read_bytes())
    status = "aborted; last good checkpoint kept" if result.aborted else "done"
    print(f"pretrain {status}: best val loss {result.best_metric:.6f} "
          f"after {result.steps_run} steps -> {result.checkpoint}")
    return 0


def cmd_finetune(args) -> int:
    dataset = load_dataset(args.data)
    cfg = _train_config(args, "finetune")
    result = finetune(dataset, args.out_dir, cfg, init_checkpoint=args.init)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(result.checkpoint.read_bytes())
    status = "aborted; last good checkpoint kept" if result.aborted else "done"
    arm = "pretrained-init" if args.init else "supervised baseline"
    print(f"finetune ({arm}) {status}: best val mAP {result.best_metric:.4f} "
          f"after {result.steps_run} steps -> {result.checkpoint}")
    return 0


def _load_eval_model(args):
    model, config = load_model(args.model)
    if config.get("kind") != "tsvad":
        raise ValueError(
            f"checkpoint {args.model} holds a {config.get('kind')!r} model; "
            "evaluation needs a fine-tuned TS-VAD checkpoint"
        )
    wanted = getattr(args, "conditioning", None)
    if wanted and CLI_METHODS[wanted] != config.get("conditioning"):
        raise ValueError(
            f"checkpoint was trained with conditioning "
            f"{config.get('conditioning')!r}, not {CLI_METHODS[wanted]!r}"
        )
    return model, config


def cmd_eval(args) -> int:
    model, _ = _load_eval_model(args)
    dataset = load_dataset(args.data)
    condition = None
    if args.condition and args.condition != "clean":
        kind, snr = args.condition.split(":")
        condition = (kind, float(snr))
    result = evaluate(model, dataset, split=args.split, condition=condition)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w") as f:
        f.write("ap_ns,ap_ts,ap_nts,map\n")
        f.write(",".join("" if v is None else f"{v:.10f}" for v in result.as_row()) + "\n")
    print(f"mAP {result.map:.10f} (ns {result.ap_ns} ts {result.ap_ts} nts {result.ap_nts})")
    print(f"report written to {report}")
    return 0


def cmd_sweep(args) -> int:
    model, _ = _load_eval_model(args)
    dataset = load_dataset(args.data)
    grid = tuple(int(s) for s in args.snr_grid.split(",")) if args.snr_grid else SNR_GRID
    report = snr_sweep(model, dataset, split=args.split, snr_grid=grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(report, out)
    print(format_sweep_table(report))
    print(f"sweep written to {out}")
    return 0


def cmd_compare(args) -> int:
    a = read_sweep_csv(args.baseline)
    b = read_sweep_csv(args.other)
    delta = compare(a, b)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_compare_csv(delta, args.out)
    for kind, snr, *vals in delta.rows():
        d_map = vals[3]
        print(f"{kind:<12}{snr:>6}  d_mAP {d_map:+.6f}" if d_map is not None else f"{kind} {snr}")
    print(f"average d_mAP seen {delta.average_delta_map(seen=True):+.6f} "
          f"unseen {delta.average_delta_map(seen=False):+.6f}")
    return 0


def cmd_export_reps(args) -> int:
    model, config = load_model(args.model)
    dataset = load_dataset(args.data)
    rows = export_representations(
        model, dataset, split=args.split, n_per_class=args.per_class, seed=args.seed
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_representations_csv(rows, out, d_hidden=model.cfg.d_hidden)
    print(f"{len(rows)} rows written to {out}")
    return 0


def cmd_stream(args) -> int:
    model, config = load_model(args.model)
    if config.get("kind") != "tsvad":
        raise ValueError("streaming needs a fine-tuned TS-VAD checkpoint")
    if not config.get("causal", False):
        raise ValueError("checkpoint is not marked causal; streaming refused")
    wave = read_wav(args.wav)
    enrolment = read_wav(args.enrolment)
    embedding = embed_speaker(enrolment)
    from .audio import log_mel

    feats = log_mel(wave).values
    stream = StreamingTsVad(model, embedding)
    for n in range(feats.shape[0]):
        p_ns, p_ts, p_nts = stream.push(feats[n])
        # .17g round-trips float64 exactly, keeping the printed stream
        # bit-faithful to the batch forward.
        print(f"{n}\t{p_ns:.17g}\t{p_ts:.17g}\t{p_nts:.17g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsvadlab",
        description="Target-speaker VAD laboratory: synthetic data, pretraining, "
                    "fine-tuning, evaluation, streaming.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a labeled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utterances", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("pretrain", help="denoising future-prediction pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out", help="optional extra path for the best checkpoint")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bucket-frames", type=int, dest="bucket_frames")
    p.add_argument("--config", help="JSON training config; flags override")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised TS-VAD training")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out", help="optional extra path for the best checkpoint")
    p.add_argument("--init", help="pretraining checkpoint to copy encoder weights from")
    p.add_argument("--conditioning", choices=sorted(CLI_METHODS), default="film")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bucket-frames", type=int, dest="bucket_frames")
    p.add_argument("--config", help="JSON training config; flags override")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one condition")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--condition", help='"clean" or "<kind>:<snr>"')
    p.add_argument("--conditioning", choices=sorted(CLI_METHODS),
                   help="refuse the checkpoint unless it used this method")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="full SNR x noise-kind evaluation grid")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--snr-grid", dest="snr_grid", help="comma-separated dB values")
    p.add_argument("--conditioning", choices=sorted(CLI_METHODS))
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("compare", help="delta table between two sweep CSVs")
    p.add_argument("baseline")
    p.add_argument("other")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("export-reps", help="dump hidden representations to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--per-class", dest="per_class", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_export_reps)

    p = sub.add_parser("stream", help="frame-by-frame inference over a WAV file")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--enrolment", required=True)
    p.set_defaults(fn=cmd_stream)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # single-line machine-parsable diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
