"""Per-class average precision, SNR sweeps, comparisons, representation export.

AP is step-interpolated over the precision/recall points of a descending
score ranking, with ties broken by stable original order. Frames are
pooled across utterances per condition before ranking; mAP is the exact
arithmetic mean of the per-class APs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import log_mel
from .datagen import (
    Dataset,
    LABEL_NAMES,
    ManifestEntry,
    NoiseBank,
    NOISE_KINDS,
    mix_at_snr,
)
from .model import embed_speaker

logger = logging.getLogger(__name__)

SNR_GRID = (-5, 0, 5, 10, 15, 20)
CLEAN = "clean"
MIXED = "mixed"


class UndefinedApError(ValueError):
    """No positive labels: average precision is undefined for the class."""


def average_precision(scores, labels) -> float:
    """Area under the stepwise precision/recall curve.

    Scores are ranked descending with ties kept in original order;
    AP = sum over positive ranks of (precision at that rank) / n_positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(
            f"scores and labels must be matching 1-D arrays, got "
            f"{scores.shape} vs {labels.shape}"
        )
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedApError("no positive labels present")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    tp = np.cumsum(ranked)
    precision = tp / np.arange(1, len(ranked) + 1)
    # fsum is correctly rounded, so the result does not depend on the
    # summation order and matches any same-definition reimplementation bit
    # for bit.
    return math.fsum(precision[ranked == 1]) / positives


@dataclass(frozen=True)
class ApResult:
    """Per-class AP plus their mean; classes absent from the data are skipped."""

    ap_ns: float | None
    ap_ts: float | None
    ap_nts: float | None
    map: float
    skipped: tuple[str, ...] = ()

    def ap(self, name: str) -> float | None:
        return getattr(self, f"ap_{name}")

    def as_row(self) -> list:
        return [self.ap_ns, self.ap_ts, self.ap_nts, self.map]


def evaluate_frames(probs: np.ndarray, labels: np.ndarray) -> ApResult:
    """One-vs-rest AP per class over pooled frames, using class probabilities
    as scores; mAP is the mean over classes that appear in the data."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != len(LABEL_NAMES):
        raise ValueError(f"probs must be (N, 3), got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ValueError(
            f"labels shape {labels.shape} does not match probs {probs.shape}"
        )
    aps: dict[str, float | None] = {}
    skipped: list[str] = []
    for idx, name in enumerate(LABEL_NAMES):
        binary = (labels == idx).astype(np.int64)
        if binary.sum() == 0:
            aps[name] = None
            skipped.append(name)
            logger.warning("class %r absent from evaluation data; AP skipped", name)
            continue
        aps[name] = average_precision(probs[:, idx], binary)
    present = [v for v in aps.values() if v is not None]
    if not present:
        raise UndefinedApError("no class present in the evaluation data")
    return ApResult(
        ap_ns=aps["ns"],
        ap_ts=aps["ts"],
        ap_nts=aps["nts"],
        map=float(sum(present) / len(present)),
        skipped=tuple(skipped),
    )


def _condition_rng(master_seed: int, kind: str, snr, entry_index: int) -> np.random.Generator:
    kind_tag = NOISE_KINDS.index(kind) if kind in NOISE_KINDS else 101
    snr_tag = 999 if snr is None else int(round(float(snr))) + 500
    return np.random.default_rng([master_seed, 0xE7A1, kind_tag, snr_tag, entry_index])


def _entry_probs(model, dataset: Dataset, entry: ManifestEntry, emb, condition, bank):
    """Class probabilities and labels for one utterance under a condition.

    condition: None / "clean" for clean audio, or (kind, snr_db). The noise
    realization is seeded by (dataset seed, kind, snr, entry index), so any
    sweep cell can be recomputed in isolation bit-exactly.
    """
    wave = dataset.wave(entry)
    if condition not in (None, CLEAN):
        kind, snr = condition
        idx = dataset.entries.index(entry)
        rng = _condition_rng(dataset.meta["master_seed"], kind, snr, idx)
        if kind == MIXED:
            kind = bank.seen_kinds[int(rng.integers(0, len(bank.seen_kinds)))]
        noise = bank.sample(kind, wave.n_samples, rng)
        wave = mix_at_snr(wave, noise, snr)
    feats = log_mel(wave).values
    labels = dataset.labels(entry)
    probs = model.forward_probs(feats.astype(model.dtype), np.asarray(emb, dtype=model.dtype))
    return probs, labels


class _EmbeddingCache:
    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, entry: ManifestEntry) -> np.ndarray:
        if entry.target not in self._cache:
            self._cache[entry.target] = embed_speaker(
                self.dataset.enrolment_wave(entry), speaker_id=entry.target
            ).values
        return self._cache[entry.target]


def evaluate(
    model,
    dataset: Dataset,
    split: str = "test",
    condition=None,
    bank: NoiseBank | None = None,
) -> ApResult:
    """Pooled-frame evaluation of a model on one split and condition."""
    entries = dataset.entries_for(split)
    if not entries:
        raise ValueError(f"dataset has no {split!r} split")
    if bank is None:
        bank = dataset.noise_bank()
    embeddings = _EmbeddingCache(dataset)
    probs_all, labels_all = [], []
    for entry in entries:
        probs, labels = _entry_probs(model, dataset, entry, embeddings(entry), condition, bank)
        probs_all.append(probs)
        labels_all.append(labels)
    return evaluate_frames(np.concatenate(probs_all), np.concatenate(labels_all))


@dataclass(frozen=True)
class SweepReport:
    """AP results per (noise kind, SNR) cell plus the shared clean cell."""

    cells: dict          # (kind, snr_label) -> ApResult; clean under (CLEAN, CLEAN)
    seen: dict           # kind -> bool
    snr_grid: tuple = SNR_GRID

    def conditions_for(self, kind: str) -> list[tuple[str, str]]:
        """The 7 conditions evaluated for a kind: 6 SNRs plus shared clean."""
        return [(kind, str(snr)) for snr in self.snr_grid] + [(CLEAN, CLEAN)]

    def cell(self, kind: str, snr) -> ApResult:
        return self.cells[(kind, str(snr))]

    def _average(self, kinds: list[str], snr) -> float:
        vals = [self.cells[(k, str(snr))].map for k in kinds]
        return float(sum(vals) / len(vals))

    def seen_average(self, snr) -> float:
        return self._average([k for k, s in self.seen.items() if s], snr)

    def unseen_average(self, snr) -> float:
        return self._average([k for k, s in self.seen.items() if not s], snr)

    def rows(self) -> list[list]:
        out = []
        for (kind, snr), result in sorted(self.cells.items()):
            seen = "" if kind == CLEAN else ("seen" if self.seen[kind] else "unseen")
            out.append([kind, snr, seen, *result.as_row()])
        return out


def snr_sweep(
    model,
    dataset: Dataset,
    split: str = "test",
    snr_grid: tuple = SNR_GRID,
    bank: NoiseBank | None = None,
) -> SweepReport:
    """Evaluate every (noise kind, SNR) cell plus clean, marking the holdout
    kind unseen. Cells are independent: recomputing one in isolation gives
    bit-identical numbers."""
    if bank is None:
        bank = dataset.noise_bank()
    cells = {}
    seen = {kind: kind != bank.holdout for kind in bank.kinds}
    for kind in bank.kinds:
        for snr in snr_grid:
            cells[(kind, str(snr))] = evaluate(
                model, dataset, split, condition=(kind, float(snr)), bank=bank
            )
    cells[(CLEAN, CLEAN)] = evaluate(model, dataset, split, condition=None, bank=bank)
    return SweepReport(cells=cells, seen=seen, snr_grid=tuple(snr_grid))


SWEEP_CSV_HEADER = ["kind", "snr", "seen", "ap_ns", "ap_ts", "ap_nts", "map"]


def write_sweep_csv(report: SweepReport, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_CSV_HEADER)
        for row in report.rows():
            writer.writerow(
                [row[0], row[1], row[2]]
                + ["" if v is None else f"{v:.10f}" for v in row[3:]]
            )


def read_sweep_csv(path: str | Path) -> SweepReport:
    cells = {}
    seen = {}
    snrs = set()
    with open(path) as f:
        reader = csv.DictReader(f)
        for row in reader:
            result = ApResult(
                ap_ns=None if row["ap_ns"] == "" else float(row["ap_ns"]),
                ap_ts=None if row["ap_ts"] == "" else float(row["ap_ts"]),
                ap_nts=None if row["ap_nts"] == "" else float(row["ap_nts"]),
                map=float(row["map"]),
            )
            cells[(row["kind"], row["snr"])] = result
            if row["kind"] != CLEAN:
                seen[row["kind"]] = row["seen"] == "seen"
                snrs.add(int(row["snr"]))
    return SweepReport(cells=cells, seen=seen, snr_grid=tuple(sorted(snrs)))


def format_sweep_table(report: SweepReport) -> str:
    """Human-readable table with per-SNR seen/unseen averages."""
    lines = [f"{'kind':<12}{'snr':>6}{'seen':>8}{'ap_ns':>9}{'ap_ts':>9}{'ap_nts':>9}{'mAP':>9}"]
    for kind, snr, seen, ns, ts, nts, mp in report.rows():
        fmt = lambda v: "    -" if v is None else f"{v:9.4f}"
        lines.append(f"{kind:<12}{snr:>6}{seen:>8}{fmt(ns)}{fmt(ts)}{fmt(nts)}{fmt(mp)}")
    lines.append("")
    for snr in report.snr_grid:
        lines.append(
            f"seen average @ {snr:>3} dB: {report.seen_average(snr):.4f}    "
            f"unseen: {report.unseen_average(snr):.4f}"
        )
    lines.append(f"clean: {report.cells[(CLEAN, CLEAN)].map:.4f}")
    return "\n".join(lines)


@dataclass(frozen=True)
class DeltaReport:
    """Cellwise differences between two sweep reports (b minus a)."""

    cells: dict  # (kind, snr) -> list of deltas [d_ns, d_ts, d_nts, d_map]
    seen: dict

    def rows(self) -> list[list]:
        return [[k, s, *v] for (k, s), v in sorted(self.cells.items())]

    def average_delta_map(self, seen: bool | None = None, snr=None) -> float:
        vals = []
        for (kind, s), deltas in self.cells.items():
            if kind == CLEAN:
                if seen is None and (snr is None or snr == CLEAN):
                    vals.append(deltas[3])
                continue
            if seen is not None and self.seen[kind] != seen:
                continue
            if snr is not None and s != str(snr):
                continue
            vals.append(deltas[3])
        return float(sum(vals) / len(vals))


def compare(baseline: SweepReport, other: SweepReport) -> DeltaReport:
    """Per-cell AP and mAP deltas (other - baseline); grids must match."""
    if set(baseline.cells) != set(other.cells):
        raise ValueError(
            f"sweep grids differ: {sorted(set(baseline.cells) ^ set(other.cells))}"
        )
    deltas = {}
    for key in baseline.cells:
        a, b = baseline.cells[key], other.cells[key]
        row = []
        for va, vb in zip(a.as_row(), b.as_row()):
            row.append(None if va is None or vb is None else vb - va)
        deltas[key] = row
    return DeltaReport(cells=deltas, seen=dict(baseline.seen))


def write_compare_csv(report: DeltaReport, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "snr", "d_ap_ns", "d_ap_ts", "d_ap_nts", "d_map"])
        for row in report.rows():
            writer.writerow(
                [row[0], row[1]] + ["" if v is None else f"{v:.10f}" for v in row[2:]]
            )


# ---------------------------------------------------------------------------
# hidden-representation export
# ---------------------------------------------------------------------------


def export_representations(
    model,
    dataset: Dataset,
    split: str = "test",
    conditions: list | None = None,
    n_per_class: int = 1000,
    seed: int = 0,
    bank: NoiseBank | None = None,
) -> list[list]:
    """Sample hidden states from the last Conformer layer output.

    Rows are (condition, snr, true_class, 64 floats), at most
    ``n_per_class`` per (class, condition) drawn uniformly without
    replacement. Conditions default to clean plus mixed seen noise at each
    grid SNR; works for both the TS-VAD model and the pretraining encoder
    (which ignores the speaker embedding).
    """
    if conditions is None:
        conditions = [(CLEAN, None)] + [(MIXED, float(snr)) for snr in SNR_GRID]
    if bank is None:
        bank = dataset.noise_bank()
    entries = dataset.entries_for(split)
    if not entries:
        raise ValueError(f"dataset has no {split!r} split")
    embeddings = _EmbeddingCache(dataset)
    rng = np.random.default_rng([seed, 0x6E95])
    rows: list[list] = []
    for cond_name, snr in conditions:
        hiddens, labels = [], []
        for entry in entries:
            wave = dataset.wave(entry)
            if cond_name != CLEAN:
                idx = dataset.entries.index(entry)
                crng = _condition_rng(dataset.meta["master_seed"], cond_name, snr, idx)
                kind = cond_name
                if kind == MIXED:
                    kind = bank.seen_kinds[int(crng.integers(0, len(bank.seen_kinds)))]
                noise = bank.sample(kind, wave.n_samples, crng)
                wave = mix_at_snr(wave, noise, snr)
            feats = log_mel(wave).values.astype(model.dtype)
            if hasattr(model, "conditioner"):
                hidden, _ = model.encode(feats, embeddings(entry).astype(model.dtype))
            else:
                hidden = model.encode(feats)
            hiddens.append(hidden)
            labels.append(dataset.labels(entry))
        hidden_all = np.concatenate(hiddens)
        label_all = np.concatenate(labels)
        snr_label = "" if snr is None else f"{snr:g}"
        for class_idx, class_name in enumerate(LABEL_NAMES):
            pool = np.flatnonzero(label_all == class_idx)
            if len(pool) > n_per_class:
                pool = rng.choice(pool, size=n_per_class, replace=False)
            elif len(pool) < n_per_class:
                logger.warning(
                    "condition %s/%s class %s: only %d frames available "
                    "(requested %d); exporting all",
                    cond_name, snr_label or CLEAN, class_name, len(pool), n_per_class,
                )
            for i in sorted(pool):
                rows.append([cond_name, snr_label, class_name, *hidden_all[i].tolist()])
    return rows


def write_representations_csv(rows: list[list], path: str | Path, d_hidden: int = 64) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["condition", "snr", "true_class"] + [f"h{i:02d}" for i in range(d_hidden)])
        for row in rows:
            writer.writerow(row[:3] + [f"{v:.8g}" for v in row[3:]])
