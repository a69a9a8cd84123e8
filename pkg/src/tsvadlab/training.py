"""Optimization machinery and the pretraining / fine-tuning loops.

AdamW with decoupled weight decay, cosine annealing with warmup and
restarts (peak halved and cycle length shrunk by 0.9 per restart), global
gradient-norm clipping, and dynamic bucket batching over non-overlapping
utterance segments of at most 10 s.

Buckets are assembled as one concatenated frame axis with a segment
layout, so causal ops never look across segment starts and no frames are
padded; the losses still accept explicit masks for padded callers.

Runs are deterministic given (seed, dataset): the data order and all
augmentation draws come from a dedicated rng stream, so a baseline and a
pretrained fine-tune with the same seed see identical batches.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import FRAME_LENGTH, FRAME_SHIFT, SAMPLE_RATE, Waveform, frame_count, log_mel
from .autodiff import SegmentLayout, Tape, Tensor
from .checkpoint import load_checkpoint, save_model
from .datagen import Dataset, ManifestEntry, MixSpec, augment_wave
from .model import ConformerConfig, PretrainModel, TsVadModel, embed_speaker


class OptimizerAbort(RuntimeError):
    """Raised when a gradient is non-finite; names the parameter."""


class SequenceTooShortError(ValueError):
    """Sequence shorter than the prediction horizon."""


@dataclass(frozen=True)
class OptimizerConfig:
    lr_max: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")


@dataclass(frozen=True)
class ScheduleConfig:
    """Cosine annealing with warmup and restarts.

    Cycle c (0-based) has peak lr_max * lr_decay_per_cycle**c and length
    cycle_steps * cycle_shrink**c; warmup ramps linearly once at the start.
    """

    lr_max: float = 1e-3
    warmup_steps: int = 1000
    cycle_steps: int = 5000
    lr_decay_per_cycle: float = 0.5
    cycle_shrink: float = 0.9
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.cycle_steps <= 0:
            raise ValueError("cycle_steps must be positive")


PRETRAIN_CYCLE_STEPS = 30000  # longer restart cycle for the pretext task


def lr_at_step(step: int, sched: ScheduleConfig) -> float:
    """Learning rate at an optimizer step (0-based).

    Linear ramp 0 -> lr_max over the warmup, then cosine decay within each
    cycle; each restart halves the peak and multiplies the length by the
    shrink factor. Continuous at the warmup/cycle boundary, never
    negative.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < sched.warmup_steps:
        return sched.lr_max * step / sched.warmup_steps
    t = float(step - sched.warmup_steps)
    peak = sched.lr_max
    length = float(sched.cycle_steps)
    while t >= length:
        t -= length
        peak *= sched.lr_decay_per_cycle
        length *= sched.cycle_shrink
        if length < 1.0:
            # shrinking cycles sum to a finite horizon (cycle_steps / (1 -
            # shrink)); past it the peak has decayed away too
            return sched.floor_lr
    cos_term = 0.5 * (1.0 + math.cos(math.pi * t / length))
    return max(sched.floor_lr, peak * cos_term)


class AdamWState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    cfg: OptimizerConfig,
    lr: float,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Bias-corrected moments; weight decay multiplies parameters by
    (1 - lr * weight_decay) independently of the gradient path.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerAbort(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = cfg.betas
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        if cfg.weight_decay:
            p.data = p.data * (1.0 - lr * cfg.weight_decay) - lr * update
        else:
            p.data = p.data - lr * update


def clip_grad_norm(
    grads: dict[str, np.ndarray], max_norm: float = 1.0
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm/g when the global 2-norm g exceeds it."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        grads = {name: g * factor for name, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# segmentation and bucket batching
# ---------------------------------------------------------------------------

MAX_SEGMENT_SECONDS = 10.0


def max_segment_frames(seconds: float = MAX_SEGMENT_SECONDS) -> int:
    return frame_count(int(seconds * SAMPLE_RATE))


@dataclass(frozen=True)
class Segment:
    entry_index: int
    frame_start: int
    frame_end: int

    @property
    def n_frames(self) -> int:
        return self.frame_end - self.frame_start


@dataclass(frozen=True)
class BatchPlan:
    buckets: list[list[Segment]]
    max_frames: int


def plan_buckets(
    entries: list[ManifestEntry],
    max_frames: int = 60000,
    max_segment_seconds: float = MAX_SEGMENT_SECONDS,
) -> BatchPlan:
    """Split utterances into <=10 s segments and pack them into buckets.

    Segments are sorted by length (longest first, stable) and packed
    greedily; a bucket's cost is counted as if all members were padded to
    its longest segment, so every bucket stays within ``max_frames`` under
    either a padded or a concatenated batch layout.
    """
    if not entries:
        raise ValueError("empty manifest: nothing to batch")
    seg_frames = max_segment_frames(max_segment_seconds)
    segments: list[Segment] = []
    for i, entry in enumerate(entries):
        start = 0
        while start < entry.n_frames:
            end = min(start + seg_frames, entry.n_frames)
            segments.append(Segment(i, start, end))
            start = end
    segments.sort(key=lambda s: (-s.n_frames, s.entry_index, s.frame_start))

    buckets: list[list[Segment]] = []
    current: list[Segment] = []
    current_longest = 0
    for seg in segments:
        if not current:
            current = [seg]
            current_longest = seg.n_frames
            continue
        if (len(current) + 1) * current_longest <= max_frames:
            current.append(seg)
        else:
            buckets.append(current)
            current = [seg]
            current_longest = seg.n_frames
    if current:
        buckets.append(current)
    return BatchPlan(buckets=buckets, max_frames=max_frames)


def segment_wave(wave: Waveform, seg: Segment) -> Waveform:
    """Sample span covering exactly the segment's frames."""
    start = seg.frame_start * FRAME_SHIFT
    end = (seg.frame_end - 1) * FRAME_SHIFT + FRAME_LENGTH
    return Waveform(wave.samples[start:end])


# ---------------------------------------------------------------------------
# DN-APC objective
# ---------------------------------------------------------------------------

PRETRAIN_K = 3


def dnapc_loss(
    pred: Tensor, clean: np.ndarray, k: int = PRETRAIN_K, mask: np.ndarray | None = None
) -> Tensor:
    """Summed L1 error predicting clean features k frames ahead.

    sum over n = 0..N-k-1 of ||pred_n - clean_{n+k}||_1; a term survives a
    mask only when both its prediction and its target frame are unmasked.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = pred.shape[0]
    if n <= k:
        raise SequenceTooShortError(f"need more than k={k} frames, got {n}")
    clean = np.asarray(clean)
    pair_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pair_mask = mask[: n - k] & mask[k:]
    return ad.l1_loss(pred[0 : n - k], clean[k:n], pair_mask)


# ---------------------------------------------------------------------------
# training configuration and loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    task: str = "finetune"                  # "pretrain" | "finetune"
    steps: int = 5000
    seed: int = 0
    conditioning: str = "film"
    dtype: str = "float32"
    bucket_frames: int = 60000
    max_segment_seconds: float = MAX_SEGMENT_SECONDS
    optimizer: OptimizerConfig = OptimizerConfig()
    schedule: ScheduleConfig | None = None  # derived from the task when None
    clip_norm: float = 1.0
    apply_noise_prob: float = 0.5
    apply_rir_prob: float = 0.5
    pretrain_k: int = PRETRAIN_K
    eval_interval: int = 200
    log_interval: int = 50
    val_max_utterances: int | None = 32
    noise_pool_seconds: float = 20.0
    conformer: ConformerConfig = ConformerConfig()

    def __post_init__(self):
        if self.task not in ("pretrain", "finetune"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.schedule is None:
            cycle = PRETRAIN_CYCLE_STEPS if self.task == "pretrain" else 5000
            object.__setattr__(
                self,
                "schedule",
                ScheduleConfig(lr_max=self.optimizer.lr_max, cycle_steps=cycle),
            )

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = OptimizerConfig(**{
                **d["optimizer"],
                "betas": tuple(d["optimizer"].get("betas", (0.9, 0.999))),
            })
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = ScheduleConfig(**d["schedule"])
        if "conformer" in d and isinstance(d["conformer"], dict):
            d["conformer"] = ConformerConfig(**d["conformer"])
        return TrainConfig(**d)


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    best_metric: float
    steps_run: int
    aborted: bool = False
    initial_val_metric: float | None = None


class _TrainingData:
    """Batch assembly shared by both loops: waves, features, augmentation."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.bank = dataset.noise_bank(pool_seconds=cfg.noise_pool_seconds).training_view()
        self.mix = MixSpec(
            apply_noise_prob=cfg.apply_noise_prob, apply_rir_prob=cfg.apply_rir_prob
        )
        self.train_entries = dataset.entries_for("train")
        self.val_entries = dataset.entries_for("val")
        if cfg.val_max_utterances is not None:
            self.val_entries = self.val_entries[: cfg.val_max_utterances]
        if not self.train_entries:
            raise ValueError("dataset has no train split")
        self.plan = plan_buckets(
            self.train_entries, cfg.bucket_frames, cfg.max_segment_seconds
        )
        self._embeddings: dict[str, np.ndarray] = {}
        self._clean_feats: dict[tuple, np.ndarray] = {}

    def clean_features(self, entries, seg: Segment, dtype) -> np.ndarray:
        """Log-mel features of the unaugmented segment, cached across epochs."""
        key = (entries[seg.entry_index].id, seg.frame_start, seg.frame_end)
        if key not in self._clean_feats:
            wave, _ = self.clean_segment(entries, seg)
            self._clean_feats[key] = log_mel(wave).values.astype(np.float32)
        return self._clean_feats[key].astype(dtype)

    def embedding(self, entry: ManifestEntry) -> np.ndarray:
        if entry.target not in self._embeddings:
            wave = self.dataset.enrolment_wave(entry)
            self._embeddings[entry.target] = embed_speaker(
                wave, speaker_id=entry.target
            ).values
        return self._embeddings[entry.target]

    def clean_segment(self, entries, seg: Segment) -> tuple[Waveform, ManifestEntry]:
        entry = entries[seg.entry_index]
        return segment_wave(self.dataset.wave(entry), seg), entry

    def augment_wave(self, wave: Waveform, rng: np.random.Generator) -> Waveform:
        return augment_wave(wave, self.mix, self.bank, rng)


def _val_condition_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x7A11D, tag])


def _write_log_row(writer, f, step, lr, loss, val_metric):
    writer.writerow(
        [step, f"{lr:.8g}", f"{loss:.8g}", "" if val_metric is None else f"{val_metric:.8g}"]
    )
    f.flush()


def pretrain(dataset: Dataset, out_dir: str | Path, cfg: TrainConfig) -> TrainResult:
    """Train input projection + encoder + regression head on the denoising
    future-prediction objective; checkpoints the best validation loss.

    Inputs are augmented with noise/reverb online while targets are
    features of the clean waveform. On divergence (non-finite loss or
    gradients) the last good checkpoint is left intact and the run reports
    aborted=True.
    """
    cfg = replace(cfg, task="pretrain") if cfg.task != "pretrain" else cfg
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))

    dtype = np.dtype(cfg.dtype)
    model = PretrainModel(cfg.conformer, seed=cfg.seed, dtype=dtype)
    params = model.params()
    data = _TrainingData(dataset, cfg)
    state = AdamWState()
    data_rng = np.random.default_rng([cfg.seed, 0xDA7A])
    ckpt_path = out_dir / "checkpoints" / "best.ckpt"
    log_path = out_dir / "logs" / "train.csv"

    def batch_for(bucket: list[Segment]):
        noisy, clean, lengths = [], [], []
        for seg in bucket:
            wave, _ = data.clean_segment(data.train_entries, seg)
            aug = data.augment_wave(wave, data_rng)
            clean.append(data.clean_features(data.train_entries, seg, dtype))
            noisy.append(log_mel(aug).values.astype(dtype))
            lengths.append(clean[-1].shape[0])
        return np.concatenate(noisy), np.concatenate(clean), lengths

    def val_loss() -> float:
        rng = _val_condition_rng(cfg.seed, 0)
        total, terms = 0.0, 0
        for entry in data.val_entries:
            wave = data.dataset.wave(entry)
            seg_frames = max_segment_frames(cfg.max_segment_seconds)
            wave = segment_wave(wave, Segment(0, 0, min(entry.n_frames, seg_frames)))
            aug = data.augment_wave(wave, rng)
            clean = log_mel(wave).values.astype(dtype)
            noisy = log_mel(aug).values.astype(dtype)
            if clean.shape[0] <= cfg.pretrain_k:
                continue
            pred = model.forward(noisy)
            total += float(dnapc_loss(pred, clean, cfg.pretrain_k).data)
            terms += clean.shape[0] - cfg.pretrain_k
        return total / max(terms, 1)

    best = math.inf
    initial_val = None
    aborted = False
    step = 0
    with open(log_path, "w", newline="") as log_f:
        writer = csv.writer(log_f)
        writer.writerow(["step", "lr", "loss", "val_metric"])
        initial_val = val_loss()
        best = initial_val
        save_model(ckpt_path, model, {"task": "pretrain", "val_loss": best, "step": 0})
        order: list[int] = []
        loss_accum, loss_count = 0.0, 0
        while step < cfg.steps:
            if not order:
                order = list(data_rng.permutation(len(data.plan.buckets)))
            bucket = data.plan.buckets[order.pop()]
            noisy, clean, lengths = batch_for(bucket)
            layout = SegmentLayout.from_lengths(lengths)
            lr = lr_at_step(step, cfg.schedule)
            try:
                with Tape() as tape:
                    pred = model.forward(noisy, layout)
                    losses = []
                    offset = 0
                    n_terms = 0
                    for length in lengths:
                        if length > cfg.pretrain_k:
                            losses.append(
                                dnapc_loss(pred[offset : offset + length],
                                           clean[offset : offset + length],
                                           cfg.pretrain_k)
                            )
                            n_terms += length - cfg.pretrain_k
                        offset += length
                    if not losses:  # every segment shorter than the horizon
                        continue
                    total = losses[0]
                    for extra in losses[1:]:
                        total = ad.add(total, extra)
                    loss = ad.mul(total, 1.0 / max(n_terms, 1))
                if not np.isfinite(loss.data):
                    raise OptimizerAbort("non-finite training loss")
                grads = ad.grad(loss, params, tape=tape)
                grads, _ = clip_grad_norm(grads, cfg.clip_norm)
                adamw_step(params, grads, state, cfg.optimizer, lr)
            except OptimizerAbort:
                aborted = True
                break
            loss_accum += float(loss.data)
            loss_count += 1
            step += 1
            val = None
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                val = val_loss()
                if val < best:
                    best = val
                    save_model(
                        ckpt_path, model, {"task": "pretrain", "val_loss": best, "step": step}
                    )
            if step % cfg.log_interval == 0 or step == cfg.steps or val is not None:
                _write_log_row(writer, log_f, step, lr, loss_accum / max(loss_count, 1), val)
                loss_accum, loss_count = 0.0, 0
    return TrainResult(
        checkpoint=ckpt_path,
        log=log_path,
        best_metric=best,
        steps_run=step,
        aborted=aborted,
        initial_val_metric=initial_val,
    )


def copy_encoder_weights(model: TsVadModel, pretrained_tensors: dict[str, np.ndarray]) -> int:
    """Copy encoder.* tensors from a pretraining checkpoint into a model.

    Conditioning block and classifier stay freshly initialized. Returns the
    number of tensors copied; raises CheckpointError on any shape mismatch.
    """
    from .checkpoint import CheckpointError

    params = model.params()
    copied = 0
    for name, tensor in params.items():
        if not name.startswith("encoder."):
            continue
        if name not in pretrained_tensors:
            raise CheckpointError(f"pretrained checkpoint lacks encoder tensor {name!r}")
        stored = pretrained_tensors[name]
        if stored.shape != tensor.data.shape:
            raise CheckpointError(
                f"encoder tensor {name!r} shape mismatch: checkpoint {stored.shape} "
                f"vs model {tensor.data.shape}"
            )
        tensor.data = stored.astype(model.dtype)
        copied += 1
    return copied


def finetune(
    dataset: Dataset,
    out_dir: str | Path,
    cfg: TrainConfig,
    init_checkpoint: str | Path | None = None,
) -> TrainResult:
    """Supervised TS-VAD training with 3-class cross-entropy.

    With ``init_checkpoint`` the Conformer encoder weights are copied from
    a pretraining run before training; all parameters are then updated.
    Checkpoint selection uses validation mAP under a fixed noisy condition
    so the baseline and pretrained arms are compared identically.
    """
    from .evaluation import evaluate_frames

    cfg = replace(cfg, task="finetune") if cfg.task != "finetune" else cfg
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))

    dtype = np.dtype(cfg.dtype)
    model = TsVadModel(cfg.conformer, method=cfg.conditioning, seed=cfg.seed, dtype=dtype)
    if init_checkpoint is not None:
        ckpt_config, tensors = load_checkpoint(init_checkpoint)
        if ckpt_config.get("kind") != "pretrain":
            raise ValueError(
                f"--init expects a pretraining checkpoint, got kind={ckpt_config.get('kind')!r}"
            )
        copy_encoder_weights(model, tensors)
    params = model.params()
    data = _TrainingData(dataset, cfg)
    state = AdamWState()
    data_rng = np.random.default_rng([cfg.seed, 0xDA7A])
    ckpt_path = out_dir / "checkpoints" / "best.ckpt"
    log_path = out_dir / "logs" / "train.csv"

    def batch_for(bucket: list[Segment]):
        feats, labels, embs, lengths = [], [], [], []
        for seg in bucket:
            entry = data.train_entries[seg.entry_index]
            wave = segment_wave(data.dataset.wave(entry), seg)
            aug = data.augment_wave(wave, data_rng)
            f = log_mel(aug).values.astype(dtype)
            lab = data.dataset.labels(entry)[seg.frame_start : seg.frame_end]
            emb = data.embedding(entry).astype(dtype)
            feats.append(f)
            labels.append(lab[: f.shape[0]])
            embs.append(np.repeat(emb[None, :], f.shape[0], axis=0))
            lengths.append(f.shape[0])
        return (
            np.concatenate(feats),
            np.concatenate(labels),
            np.concatenate(embs),
            lengths,
        )

    def val_map() -> float:
        rng = _val_condition_rng(cfg.seed, 1)
        probs_all, labels_all = [], []
        for entry in data.val_entries:
            wave = data.dataset.wave(entry)
            aug = data.augment_wave(wave, rng)
            feats = log_mel(aug).values.astype(dtype)
            labels = data.dataset.labels(entry)[: feats.shape[0]]
            probs = model.forward_probs(feats, data.embedding(entry).astype(dtype))
            probs_all.append(probs)
            labels_all.append(labels)
        result = evaluate_frames(np.concatenate(probs_all), np.concatenate(labels_all))
        return result.map

    best = -math.inf
    aborted = False
    step = 0
    initial_val = None
    with open(log_path, "w", newline="") as log_f:
        writer = csv.writer(log_f)
        writer.writerow(["step", "lr", "loss", "val_metric"])
        initial_val = val_map()
        best = initial_val
        save_model(
            ckpt_path, model,
            {"task": "finetune", "val_map": best, "step": 0,
             "init_checkpoint": str(init_checkpoint) if init_checkpoint else None},
        )
        order: list[int] = []
        loss_accum, loss_count = 0.0, 0
        while step < cfg.steps:
            if not order:
                order = list(data_rng.permutation(len(data.plan.buckets)))
            bucket = data.plan.buckets[order.pop()]
            feats, labels, embs, lengths = batch_for(bucket)
            layout = SegmentLayout.from_lengths(lengths)
            lr = lr_at_step(step, cfg.schedule)
            try:
                with Tape() as tape:
                    logits = model.forward_logits(feats, embs, layout)
                    loss = ad.cross_entropy(logits, labels)
                if not np.isfinite(loss.data):
                    raise OptimizerAbort("non-finite training loss")
                grads = ad.grad(loss, params, tape=tape)
                grads, _ = clip_grad_norm(grads, cfg.clip_norm)
                adamw_step(params, grads, state, cfg.optimizer, lr)
            except OptimizerAbort:
                aborted = True
                break
            loss_accum += float(loss.data)
            loss_count += 1
            step += 1
            val = None
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                val = val_map()
                if val > best:
                    best = val
                    save_model(
                        ckpt_path, model,
                        {"task": "finetune", "val_map": best, "step": step,
                         "init_checkpoint": str(init_checkpoint) if init_checkpoint else None},
                    )
            if step % cfg.log_interval == 0 or step == cfg.steps or val is not None:
                _write_log_row(writer, log_f, step, lr, loss_accum / max(loss_count, 1), val)
                loss_accum, loss_count = 0.0, 0
    return TrainResult(
        checkpoint=ckpt_path,
        log=log_path,
        best_metric=best,
        steps_run=step,
        aborted=aborted,
        initial_val_metric=initial_val,
    )
