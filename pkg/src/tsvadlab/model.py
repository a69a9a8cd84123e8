"""Causal Conformer TS-VAD model with selectable speaker conditioning.

The network maps per-frame log-mel features plus a 256-dimensional speaker
embedding to three class probabilities (non-speech, target speech,
non-target speech). Every path is strictly causal: frame n depends only on
frames [n - span, n], which makes the streaming forward reproduce the
batch forward row for row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .audio import Waveform, log_mel
from .autodiff import SegmentLayout, Tensor

CONDITIONING_METHODS = ("concat", "add", "mult", "film", "film_pre")

EMBED_DIM = 256
_EMBED_PROJECTION_SEED = 0x5EEDBEEF
MIN_ENROLMENT_SECONDS = 5.0
_MIN_SPEECH_FRAMES = 100


class InsufficientEnrolmentError(ValueError):
    """Enrolment audio too short or without usable speech."""


@dataclass(frozen=True)
class ConformerConfig:
    """Encoder geometry; defaults match the small causal two-layer setup."""

    n_layers: int = 2
    d_hidden: int = 64
    n_heads: int = 1
    conv_kernel: int = 31
    attn_max_past: int = 31
    ff_expansion: int = 1
    input_dim: int = 40
    emb_dim: int = EMBED_DIM
    n_classes: int = 3

    def __post_init__(self):
        if self.n_heads != 1:
            raise ValueError("only single-head attention is supported")
        for fld in ("n_layers", "d_hidden", "conv_kernel", "ff_expansion", "input_dim"):
            if getattr(self, fld) <= 0:
                raise ValueError(f"{fld} must be positive")
        if self.attn_max_past < 0:
            raise ValueError("attn_max_past must be >= 0")

    @property
    def receptive_field(self) -> int:
        """Upper bound on past frames that can influence one output frame."""
        per_layer = self.attn_max_past + (self.conv_kernel - 1)
        return self.n_layers * per_layer


@dataclass(frozen=True)
class SpeakerEmbedding:
    """Unit-norm 256-dimensional target-speaker characteristic vector."""

    values: np.ndarray
    speaker_id: str | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must have shape ({EMBED_DIM},), got {values.shape}")
        norm = float(np.linalg.norm(values))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding must be unit-norm, got |e| = {norm}")
        object.__setattr__(self, "values", values)


def _as_embedding_values(e) -> np.ndarray:
    return e.values if isinstance(e, SpeakerEmbedding) else np.asarray(e)


def _as_embedding_rows(e, dtype) -> np.ndarray:
    """Accept one embedding vector or a per-frame embedding matrix."""
    values = _as_embedding_values(e).astype(dtype)
    return values[None, :] if values.ndim == 1 else values


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng, dtype, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = ad.parameter(
            rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype), f"{name}.weight"
        )
        self.bias = (
            ad.parameter(np.zeros(d_out, dtype=dtype), f"{name}.bias") if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def tensors(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias


class LayerNorm:
    def __init__(self, name: str, d: int, dtype):
        self.gain = ad.parameter(np.ones(d, dtype=dtype), f"{name}.gain")
        self.bias = ad.parameter(np.zeros(d, dtype=dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def tensors(self):
        yield self.gain
        yield self.bias


class FeedForward:
    """Pre-norm feed-forward with swish activation."""

    def __init__(self, name: str, d: int, expansion: int, rng, dtype):
        self.norm = LayerNorm(f"{name}.norm", d, dtype)
        self.w1 = Linear(f"{name}.w1", d, d * expansion, rng, dtype)
        self.w2 = Linear(f"{name}.w2", d * expansion, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ad.silu(self.w1(self.norm(x))))

    def tensors(self):
        yield from self.norm.tensors()
        yield from self.w1.tensors()
        yield from self.w2.tensors()


def sinusoid_position_table(n_positions: int, d: int) -> np.ndarray:
    """Fixed sinusoidal embeddings for relative offsets 0..n_positions-1."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, i / d)
    table = np.zeros((n_positions, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


class RelativeAttention:
    """Pre-norm single-head causal attention with relative positions."""

    def __init__(self, name: str, d: int, max_past: int, rng, dtype):
        self.max_past = max_past
        self.norm = LayerNorm(f"{name}.norm", d, dtype)
        self.wq = Linear(f"{name}.wq", d, d, rng, dtype)
        self.wk = Linear(f"{name}.wk", d, d, rng, dtype)
        self.wv = Linear(f"{name}.wv", d, d, rng, dtype)
        self.wo = Linear(f"{name}.wo", d, d, rng, dtype)
        self.w_pos = Linear(f"{name}.w_pos", d, d, rng, dtype, bias=False)
        self.u_bias = ad.parameter(np.zeros(d, dtype=dtype), f"{name}.u_bias")
        self.v_bias = ad.parameter(np.zeros(d, dtype=dtype), f"{name}.v_bias")
        self.sinusoids = ad.constant(sinusoid_position_table(max_past + 1, d).astype(dtype))

    def position_embeddings(self) -> Tensor:
        return ad.matmul(self.sinusoids, self.w_pos.weight)

    def __call__(self, x: Tensor, layout: SegmentLayout | None) -> Tensor:
        h = self.norm(x)
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        ctx = ad.relative_position_attention(
            q, k, v, self.position_embeddings(), self.u_bias, self.v_bias,
            self.max_past, layout=layout,
        )
        return self.wo(ctx)

    def tensors(self):
        yield from self.norm.tensors()
        for lin in (self.wq, self.wk, self.wv, self.wo, self.w_pos):
            yield from lin.tensors()
        yield self.u_bias
        yield self.v_bias


class ConvModule:
    """Pre-norm pointwise/GLU -> causal depthwise -> norm -> swish -> pointwise."""

    def __init__(self, name: str, d: int, kernel: int, rng, dtype):
        self.norm = LayerNorm(f"{name}.norm", d, dtype)
        self.pw1 = Linear(f"{name}.pw1", d, 2 * d, rng, dtype)
        bound = 1.0 / math.sqrt(kernel)
        self.dw_kernel = ad.parameter(
            rng.uniform(-bound, bound, size=(kernel, d)).astype(dtype), f"{name}.dw.kernel"
        )
        self.dw_bias = ad.parameter(np.zeros(d, dtype=dtype), f"{name}.dw.bias")
        self.mid_norm = LayerNorm(f"{name}.mid_norm", d, dtype)
        self.pw2 = Linear(f"{name}.pw2", d, d, rng, dtype)

    def gated_input(self, x: Tensor) -> Tensor:
        return ad.glu(self.pw1(self.norm(x)), axis=-1)

    def after_conv(self, conv_out: Tensor) -> Tensor:
        return self.pw2(ad.silu(self.mid_norm(conv_out)))

    def __call__(self, x: Tensor, layout: SegmentLayout | None) -> Tensor:
        gated = self.gated_input(x)
        conv = ad.causal_conv1d(gated, self.dw_kernel, self.dw_bias, layout=layout)
        return self.after_conv(conv)

    def tensors(self):
        yield from self.norm.tensors()
        yield from self.pw1.tensors()
        yield self.dw_kernel
        yield self.dw_bias
        yield from self.mid_norm.tensors()
        yield from self.pw2.tensors()


class ConformerLayer:
    """Macaron block: half-step FF, attention, conv module, half-step FF, norm."""

    def __init__(self, name: str, cfg: ConformerConfig, rng, dtype):
        d = cfg.d_hidden
        self.ff1 = FeedForward(f"{name}.ff1", d, cfg.ff_expansion, rng, dtype)
        self.attn = RelativeAttention(f"{name}.attn", d, cfg.attn_max_past, rng, dtype)
        self.conv = ConvModule(f"{name}.conv", d, cfg.conv_kernel, rng, dtype)
        self.ff2 = FeedForward(f"{name}.ff2", d, cfg.ff_expansion, rng, dtype)
        self.out_norm = LayerNorm(f"{name}.out_norm", d, dtype)

    def __call__(self, x: Tensor, layout: SegmentLayout | None) -> Tensor:
        x = ad.add(x, ad.mul(self.ff1(x), 0.5))
        x = ad.add(x, self.attn(x, layout))
        x = ad.add(x, self.conv(x, layout))
        x = ad.add(x, ad.mul(self.ff2(x), 0.5))
        return self.out_norm(x)

    def tensors(self):
        for mod in (self.ff1, self.attn, self.conv, self.ff2, self.out_norm):
            yield from mod.tensors()


class ConformerEncoder:
    def __init__(self, name: str, cfg: ConformerConfig, rng, dtype):
        self.cfg = cfg
        self.layers = [
            ConformerLayer(f"{name}.layers.{i}", cfg, rng, dtype)
            for i in range(cfg.n_layers)
        ]

    def __call__(self, x: Tensor, layout: SegmentLayout | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, layout)
        return x

    def tensors(self):
        for layer in self.layers:
            yield from layer.tensors()


# ---------------------------------------------------------------------------
# speaker conditioning variants
# ---------------------------------------------------------------------------


class ConcatConditioner:
    """Concatenate features with the embedding, project to the encoder dim."""

    def __init__(self, cfg: ConformerConfig, rng, dtype):
        self.proj = Linear("cond.proj", cfg.input_dim + cfg.emb_dim, cfg.d_hidden, rng, dtype)

    def __call__(self, y: Tensor, e_rows: Tensor) -> Tensor:
        if e_rows.shape[0] == 1 and y.shape[0] != 1:
            e_rows = ad.broadcast_rows(e_rows, y.shape[0])
        return self.proj(ad.concat([y, e_rows], axis=1))

    def tensors(self):
        yield from self.proj.tensors()


class AddConditioner:
    """Bias the projected features with a projected embedding."""

    def __init__(self, cfg: ConformerConfig, rng, dtype):
        self.lin_y = Linear("cond.lin_y", cfg.input_dim, cfg.d_hidden, rng, dtype)
        self.lin_e = Linear("cond.lin_e", cfg.emb_dim, cfg.d_hidden, rng, dtype)

    def __call__(self, y: Tensor, e_row: Tensor) -> Tensor:
        return ad.add(self.lin_y(y), self.lin_e(e_row))

    def tensors(self):
        yield from self.lin_y.tensors()
        yield from self.lin_e.tensors()


class MultConditioner:
    """Scale the projected features by a projected embedding (Hadamard)."""

    def __init__(self, cfg: ConformerConfig, rng, dtype):
        self.lin_y = Linear("cond.lin_y", cfg.input_dim, cfg.d_hidden, rng, dtype)
        self.lin_e = Linear("cond.lin_e", cfg.emb_dim, cfg.d_hidden, rng, dtype)

    def __call__(self, y: Tensor, e_row: Tensor) -> Tensor:
        return ad.mul(self.lin_y(y), self.lin_e(e_row))

    def tensors(self):
        yield from self.lin_y.tensors()
        yield from self.lin_e.tensors()


class FilmConditioner:
    """Featurewise linear modulation: scale and bias computed from the embedding.

    Features are up-projected and passed through swish, modulated as
    h * gamma + beta, then projected to the encoder dimension. With
    gamma == 1 the block reduces to pure biasing, with beta == 0 to pure
    scaling, and with both to the unmodulated path.
    """

    def __init__(self, cfg: ConformerConfig, rng, dtype, preprocess: bool = False):
        d_mod = cfg.d_hidden
        self.pre1 = self.pre2 = None
        if preprocess:
            d_pre = 2 * cfg.emb_dim
            self.pre1 = Linear("cond.pre1", cfg.emb_dim, d_pre, rng, dtype)
            self.pre2 = Linear("cond.pre2", d_pre, cfg.emb_dim, rng, dtype)
        self.up = Linear("cond.up", cfg.input_dim, d_mod, rng, dtype)
        self.gamma = Linear("cond.gamma", cfg.emb_dim, d_mod, rng, dtype)
        self.beta = Linear("cond.beta", cfg.emb_dim, d_mod, rng, dtype)
        self.down = Linear("cond.down", d_mod, cfg.d_hidden, rng, dtype)

    def __call__(self, y: Tensor, e_row: Tensor) -> Tensor:
        if self.pre1 is not None:
            e_row = self.pre2(ad.silu(self.pre1(e_row)))
        h = ad.silu(self.up(y))
        modulated = ad.add(ad.mul(h, self.gamma(e_row)), self.beta(e_row))
        return self.down(modulated)

    def tensors(self):
        if self.pre1 is not None:
            yield from self.pre1.tensors()
            yield from self.pre2.tensors()
        for lin in (self.up, self.gamma, self.beta, self.down):
            yield from lin.tensors()


def _build_conditioner(method: str, cfg: ConformerConfig, rng, dtype):
    if method == "concat":
        return ConcatConditioner(cfg, rng, dtype)
    if method == "add":
        return AddConditioner(cfg, rng, dtype)
    if method == "mult":
        return MultConditioner(cfg, rng, dtype)
    if method == "film":
        return FilmConditioner(cfg, rng, dtype)
    if method == "film_pre":
        return FilmConditioner(cfg, rng, dtype, preprocess=True)
    raise ValueError(
        f"unknown conditioning method {method!r}; choose one of {CONDITIONING_METHODS}"
    )


def condition(features: np.ndarray, e, method: str, conditioner=None, dtype=np.float64) -> np.ndarray:
    """Apply a conditioning method to raw features; builds a fresh block if needed.

    Mostly useful for experiments; models hold their own conditioner.
    """
    if conditioner is None:
        rng = np.random.default_rng(0)
        conditioner = _build_conditioner(method, ConformerConfig(), rng, dtype)
    y = ad.constant(np.asarray(features, dtype=dtype))
    e_rows = ad.constant(_as_embedding_rows(e, dtype))
    return conditioner(y, e_rows).data


# ---------------------------------------------------------------------------
# full models
# ---------------------------------------------------------------------------


class _ParamSet:
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for t in self._tensors():
            if t.name in out:
                raise ValueError(f"duplicate parameter name {t.name!r}")
            out[t.name] = t
        return out

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors())


class TsVadModel(_ParamSet):
    """Conditioning block + causal Conformer encoder + 3-way frame classifier."""

    kind = "tsvad"

    def __init__(
        self,
        cfg: ConformerConfig = ConformerConfig(),
        method: str = "film",
        seed: int = 0,
        dtype=np.float64,
    ):
        if method not in CONDITIONING_METHODS:
            raise ValueError(
                f"unknown conditioning method {method!r}; choose one of {CONDITIONING_METHODS}"
            )
        self.cfg = cfg
        self.method = method
        self.dtype = np.dtype(dtype)
        self.init_parameters(seed)

    def init_parameters(self, seed: int) -> None:
        """Deterministic re-initialization; same seed gives identical tensors."""
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.conditioner = _build_conditioner(self.method, self.cfg, rng, self.dtype)
        self.encoder = ConformerEncoder("encoder", self.cfg, rng, self.dtype)
        self.classifier = Linear("classifier", self.cfg.d_hidden, self.cfg.n_classes, rng, self.dtype)

    def _tensors(self):
        yield from self.conditioner.tensors()
        yield from self.encoder.tensors()
        yield from self.classifier.tensors()

    def forward_logits(
        self,
        feats: np.ndarray,
        e,
        layout: SegmentLayout | None = None,
    ) -> Tensor:
        feats = np.asarray(feats, dtype=self.dtype)
        e_rows = ad.constant(_as_embedding_rows(e, self.dtype))
        x = self.conditioner(ad.constant(feats), e_rows)
        h = self.encoder(x, layout)
        return self.classifier(h)

    def forward_probs(self, feats: np.ndarray, e) -> np.ndarray:
        """Per-frame (ns, ts, nts) probabilities; rows sum to 1."""
        return ad.softmax(self.forward_logits(feats, e), axis=-1).data

    def encode(self, feats: np.ndarray, e) -> tuple[np.ndarray, np.ndarray]:
        """Last-encoder-layer hidden states plus class probabilities."""
        feats = np.asarray(feats, dtype=self.dtype)
        e_rows = ad.constant(_as_embedding_rows(e, self.dtype))
        x = self.conditioner(ad.constant(feats), e_rows)
        h = self.encoder(x, None)
        probs = ad.softmax(self.classifier(h), axis=-1).data
        return h.data, probs


class PretrainModel(_ParamSet):
    """Input projection + Conformer encoder + future-frame regression head.

    The head is a pointwise (kernel size 1) projection back to the feature
    dimension, i.e. one linear map per frame. After pretraining only the
    encoder weights are kept.
    """

    kind = "pretrain"

    def __init__(self, cfg: ConformerConfig = ConformerConfig(), seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.method = None
        self.dtype = np.dtype(dtype)
        self.init_parameters(seed)

    def init_parameters(self, seed: int) -> None:
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.in_proj = Linear("in_proj", self.cfg.input_dim, self.cfg.d_hidden, rng, self.dtype)
        self.encoder = ConformerEncoder("encoder", self.cfg, rng, self.dtype)
        self.head = Linear("head", self.cfg.d_hidden, self.cfg.input_dim, rng, self.dtype)

    def _tensors(self):
        yield from self.in_proj.tensors()
        yield from self.encoder.tensors()
        yield from self.head.tensors()

    def forward(self, feats: np.ndarray, layout: SegmentLayout | None = None) -> Tensor:
        x = self.in_proj(ad.constant(np.asarray(feats, dtype=self.dtype)))
        h = self.encoder(x, layout)
        return self.head(h)

    def encode(self, feats: np.ndarray) -> np.ndarray:
        x = self.in_proj(ad.constant(np.asarray(feats, dtype=self.dtype)))
        return self.encoder(x, None).data


# ---------------------------------------------------------------------------
# parallel-processing baseline: score combination
# ---------------------------------------------------------------------------


def score_combination(z_ns: float, z_s: float, sim: float) -> tuple[float, float, float]:
    """Combine VAD probabilities with a speaker-similarity score.

    Returns (z_ns, sim * z_s, (1 - sim) * z_s); the similarity is clamped
    to [0, 1] before use, so the outputs are a distribution whenever
    (z_ns, z_s) is one.
    """
    for name, z in (("z_ns", z_ns), ("z_s", z_s)):
        if not np.isfinite(z) or not 0.0 <= z <= 1.0:
            raise ValueError(f"{name} must be a probability in [0, 1], got {z}")
    if abs(z_ns + z_s - 1.0) > 1e-9:
        raise ValueError(f"z_ns + z_s must equal 1, got {z_ns + z_s}")
    sim = min(1.0, max(0.0, float(sim)))
    return z_ns, sim * z_s, (1.0 - sim) * z_s


# ---------------------------------------------------------------------------
# surrogate speaker embedder
# ---------------------------------------------------------------------------


def _embedding_projection() -> np.ndarray:
    rng = np.random.default_rng(_EMBED_PROJECTION_SEED)
    return rng.normal(size=(80, EMBED_DIM)) / math.sqrt(80.0)


_EMBED_PROJECTION = _embedding_projection()


def embed_speaker(enrolment: Waveform, speaker_id: str | None = None) -> SpeakerEmbedding:
    """Deterministic surrogate speaker embedding from enrolment audio.

    Mean and standard deviation of log-mel features over speech frames
    (80 values) pass through a fixed random projection to 256 dimensions,
    then L2 normalization. Requires at least 5 s of enrolment audio with
    at least 1 s of detectable speech.
    """
    if enrolment.duration < MIN_ENROLMENT_SECONDS:
        raise InsufficientEnrolmentError(
            f"enrolment must be at least {MIN_ENROLMENT_SECONDS:.0f} s, "
            f"got {enrolment.duration:.2f} s"
        )
    feats = log_mel(enrolment).values
    frame_energy = np.log(np.exp(feats).sum(axis=1))
    # within 20 dB of the loudest frame, and above the silence floor
    speech = (frame_energy >= frame_energy.max() - math.log(100.0)) & (frame_energy > -15.0)
    if int(speech.sum()) < _MIN_SPEECH_FRAMES:
        raise InsufficientEnrolmentError(
            f"enrolment contains only {int(speech.sum())} speech frames; "
            f"need at least {_MIN_SPEECH_FRAMES}"
        )
    selected = feats[speech]
    stats = np.concatenate([selected.mean(axis=0), selected.std(axis=0)])
    vec = stats @ _EMBED_PROJECTION
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        raise InsufficientEnrolmentError("degenerate enrolment statistics")
    return SpeakerEmbedding(values=vec / norm, speaker_id=speaker_id)


# ---------------------------------------------------------------------------
# streaming inference
# ---------------------------------------------------------------------------


@dataclass
class _LayerState:
    k_buf: np.ndarray       # (max_past + 1, d), newest row last
    v_buf: np.ndarray
    conv_buf: np.ndarray    # (kernel, d), newest row last
    pos_t: np.ndarray       # contiguous transposed position embeddings
    frames_seen: int = 0


class StreamingTsVad:
    """Frame-by-frame inference with bounded state.

    Feeds single feature rows through the same row-local kernels as the
    batch forward, keeping per layer only the attention window
    (max_past + 1 frames of keys/values) and the depthwise-conv history,
    so memory is constant in the stream length. Every arithmetic term is
    accumulated in the same order as the batch path, making per-frame
    outputs bit-identical to `TsVadModel.forward_probs` rows.
    """

    def __init__(self, model: TsVadModel, e):
        self.model = model
        emb = _as_embedding_values(e).astype(model.dtype)
        self._e_row = ad.constant(emb[None, :])
        self.reset()

    def reset(self) -> None:
        cfg = self.model.cfg
        self._states = []
        for layer in self.model.encoder.layers:
            pos = ad.rows_matmul(layer.attn.sinusoids.data, layer.attn.w_pos.weight.data)
            self._states.append(
                _LayerState(
                    k_buf=np.zeros((cfg.attn_max_past + 1, cfg.d_hidden), dtype=self.model.dtype),
                    v_buf=np.zeros((cfg.attn_max_past + 1, cfg.d_hidden), dtype=self.model.dtype),
                    conv_buf=np.zeros((cfg.conv_kernel, cfg.d_hidden), dtype=self.model.dtype),
                    pos_t=np.ascontiguousarray(pos.T),
                )
            )

    def state_size(self) -> int:
        """Total buffered values; constant regardless of stream length."""
        return sum(s.k_buf.size + s.v_buf.size + s.conv_buf.size for s in self._states)

    def _attention_row(self, attn_mod: RelativeAttention, state: _LayerState, h: Tensor) -> np.ndarray:
        q = attn_mod.wq(h).data
        k_row = attn_mod.wk(h).data
        v_row = attn_mod.wv(h).data
        state.k_buf[:-1] = state.k_buf[1:]
        state.k_buf[-1] = k_row[0]
        state.v_buf[:-1] = state.v_buf[1:]
        state.v_buf[-1] = v_row[0]
        state.frames_seen += 1
        width = state.k_buf.shape[0]
        avail = min(width, state.frames_seen)
        d = q.shape[1]

        qu = q + attn_mod.u_bias.data
        qv = q + attn_mod.v_bias.data
        content = np.zeros((1, width), dtype=q.dtype)
        for w in range(avail):
            content[0, w] = ad.row_dots(qu, state.k_buf[width - 1 - w : width - w])[0]
        position = ad.rows_matmul(qv, state.pos_t)
        scores = (content + position) * (1.0 / math.sqrt(d))
        valid = (np.arange(width) < avail)[None, :]
        attn = ad.masked_softmax_rows(scores, valid)
        out = np.zeros((1, d), dtype=q.dtype)
        for w in range(avail):
            out += attn[0, w] * state.v_buf[width - 1 - w : width - w]
        return out

    def _conv_row(self, conv_mod: ConvModule, state: _LayerState, gated: np.ndarray) -> np.ndarray:
        state.conv_buf[:-1] = state.conv_buf[1:]
        state.conv_buf[-1] = gated[0]
        taps = state.conv_buf.shape[0]
        avail = min(taps, state.frames_seen)
        kernel = conv_mod.dw_kernel.data
        out = np.zeros((1, gated.shape[1]), dtype=gated.dtype)
        for t in range(avail):
            out += state.conv_buf[taps - 1 - t : taps - t] * kernel[t]
        return out + conv_mod.dw_bias.data

    def _layer_step(self, layer: ConformerLayer, state: _LayerState, x: Tensor) -> Tensor:
        x = ad.add(x, ad.mul(layer.ff1(x), 0.5))
        ctx = self._attention_row(layer.attn, state, layer.attn.norm(x))
        x = ad.add(x, layer.attn.wo(ad.constant(ctx)))
        gated = layer.conv.gated_input(x).data
        conv_row = self._conv_row(layer.conv, state, gated)
        x = ad.add(x, layer.conv.after_conv(ad.constant(conv_row)))
        x = ad.add(x, ad.mul(layer.ff2(x), 0.5))
        return layer.out_norm(x)

    def push(self, feat_row: np.ndarray) -> np.ndarray:
        """Process one 40-dimensional feature frame; returns (ns, ts, nts)."""
        feat_row = np.asarray(feat_row, dtype=self.model.dtype).reshape(1, -1)
        x = self.model.conditioner(ad.constant(feat_row), self._e_row)
        for layer, state in zip(self.model.encoder.layers, self._states):
            x = self._layer_step(layer, state, x)
        probs = ad.softmax(self.model.classifier(x), axis=-1).data
        return probs[0]
