"""Desk-scale target-speaker voice activity detection laboratory.

Synthetic labeled speech, a numpy reverse-mode autodiff engine, a causal
Conformer TS-VAD model with five speaker-conditioning methods, denoising
predictive-coding pretraining, and SNR-sweep evaluation.
"""

from .audio import (
    FrameSpec,
    LogMelFrames,
    MelFilterbank,
    Waveform,
    build_mel_filterbank,
    frame_count,
    hann_window,
    log_mel,
    power_spectrum,
    read_wav,
    write_wav,
)
from .autodiff import SegmentLayout, Tape, Tensor, grad
from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint, save_model
from .datagen import (
    HOLDOUT_NOISE,
    LABEL_NAMES,
    LabeledUtterance,
    ManifestEntry,
    MixSpec,
    NOISE_KINDS,
    NoiseBank,
    SyntheticSpeakerProfile,
    apply_rir,
    augment,
    build_dataset,
    concat_multi_speaker,
    load_dataset,
    make_profile,
    make_rir,
    mix_at_snr,
    sample_enrolment,
    synth_utterance,
)
from .evaluation import (
    ApResult,
    SweepReport,
    average_precision,
    compare,
    evaluate,
    evaluate_frames,
    export_representations,
    snr_sweep,
)
from .model import (
    ConformerConfig,
    PretrainModel,
    SpeakerEmbedding,
    StreamingTsVad,
    TsVadModel,
    embed_speaker,
    score_combination,
)
from .training import (
    AdamWState,
    BatchPlan,
    OptimizerConfig,
    ScheduleConfig,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    dnapc_loss,
    finetune,
    lr_at_step,
    plan_buckets,
    pretrain,
)

__version__ = "0.1.0"
