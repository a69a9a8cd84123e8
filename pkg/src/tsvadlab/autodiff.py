"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Exactly the primitives the model and losses need, recorded on an explicit
tape. Ops executed outside an active tape compute the forward value only,
so inference pays no graph-building cost. All reductions use fixed orders:
forward passes are bit-deterministic and two backward passes over the same
tape yield identical gradients.

Typical use::

    with Tape() as tape:
        y = matmul(x, w)
        loss = l1_loss(y, target)
    grads = grad(loss, params=[w], tape=tape)
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "SegmentLayout",
    "parameter",
    "constant",
    "grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "concat",
    "transpose",
    "broadcast_rows",
    "softmax",
    "layer_norm",
    "sigmoid",
    "silu",
    "relu",
    "glu",
    "causal_conv1d",
    "linear",
    "dropout",
    "cross_entropy",
    "l1_loss",
    "sum_",
    "mean_",
    "relative_position_attention",
    "rows_matmul",
    "row_dots",
    "masked_softmax_rows",
    "causal_attention_math",
    "causal_conv_accumulate",
]


class Tensor:
    """Dense real tensor; ``name`` and ``trainable`` mark model parameters."""

    __slots__ = ("data", "name", "trainable")

    def __init__(self, data, name: str | None = None, trainable: bool = False):
        self.data = np.asarray(data)
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __getitem__(self, key):
        return slice_(self, key)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str) -> Tensor:
    """A named trainable tensor."""
    return Tensor(np.asarray(data), name=name, trainable=True)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data))


@dataclass
class _Node:
    out: Tensor
    backward: object  # callable(g: np.ndarray, acc: dict) -> None


class Tape:
    """Ordered record of executed primitives.

    Recording order is execution order, hence topological; the backward
    pass walks the list once in reverse. A tape is confined to a single
    thread; independent tapes may run concurrently on separate threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_LOCAL = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


def _active() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _record(out: Tensor, backward) -> None:
    tape = _active()
    if tape is not None:
        tape.nodes.append(_Node(out, backward))


def _accum(acc: dict, t: Tensor, delta: np.ndarray) -> None:
    key = id(t)
    if key in acc:
        acc[key] = acc[key] + delta
    else:
        acc[key] = delta


def grad(
    loss: Tensor,
    params: list[Tensor] | dict[str, Tensor],
    tape: Tape | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for the given parameters.

    Parameters that do not participate in the loss receive zero gradients.
    Each tape node is visited exactly once, in reverse execution order.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    tape = tape if tape is not None else _active()
    if tape is None:
        raise ValueError("no active tape: build the loss inside `with Tape():`")

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = acc.pop(id(node.out), None)
        if g is None:
            continue
        node.backward(g, acc)

    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name or f"param_{i}", p) for i, p in enumerate(params)]
    out: dict[str, np.ndarray] = {}
    for name, p in items:
        g = acc.get(id(p))
        out[name] = g if g is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# shared deterministic kernels (also used by the streaming inference path)
# ---------------------------------------------------------------------------


def rows_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` with per-row results independent of the number of rows.

    Streaming inference recomputes single rows that batch inference
    produced inside large matrices, so row values must not depend on the
    row count. BLAS breaks that two ways: single-row products dispatch to
    a different kernel (fixed by duplicating the row), and very narrow
    outputs hit an edge micro-kernel whose accumulation order varies with
    the row count (fixed by summing via einsum, which reduces each output
    element in a fixed order).
    """
    if w.ndim == 2 and w.shape[1] < 5:
        return np.einsum("nk,ko->no", x, w)
    if x.ndim == 2 and x.shape[0] == 1:
        return (np.concatenate([x, x], axis=0) @ w)[:1]
    return x @ w


def causal_conv_accumulate(
    x: np.ndarray, kernel: np.ndarray, blocked: list[np.ndarray] | None
) -> np.ndarray:
    """Depthwise causal convolution, tap 0 = current frame.

    out[n, c] = sum_t x[n - t, c] * kernel[t, c], taps accumulated in fixed
    t order so streaming reproduces batch results bit-exactly. ``blocked``
    optionally lists, per tap, the output rows whose tap would cross a
    segment start; their contributions are zeroed.
    """
    n, _ = x.shape
    k_taps = kernel.shape[0]
    out = np.zeros_like(x)
    for t in range(k_taps):
        if t >= n:
            break
        contrib = x[: n - t] * kernel[t]
        if blocked is not None and len(blocked[t]):
            contrib[blocked[t] - t] = 0.0
        out[t:] += contrib
    return out


def _conv_blocked_rows(n: int, k_taps: int, seg_start: np.ndarray) -> list[np.ndarray]:
    """Per tap, the output rows n with n - t before their segment start."""
    rows = np.arange(n)
    return [
        rows[(rows >= t) & (rows - t < seg_start)] for t in range(k_taps)
    ]


def row_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row dot products; each row reduces independently of the count."""
    return np.einsum("nd,nd->n", a, b)


def masked_softmax_rows(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Row softmax with invalid entries forced to probability zero."""
    scores = np.where(valid, scores, -np.inf)
    shifted = scores - scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def causal_attention_math(
    qu: np.ndarray,
    qv: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    pos: np.ndarray,
    max_past: int,
    seg_start: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Windowed causal attention over a frame sequence.

    Offset column w scores frame n against frame n - w; both the score
    diagonals and the output combination run as fixed-order loops over w,
    so streaming can reproduce any single row bit-exactly from its local
    history. Returns (attention weights, combined output).
    """
    n, d = k.shape
    width = max_past + 1
    content = np.zeros((n, width), dtype=k.dtype)
    for w in range(min(width, n)):
        content[w:, w] = row_dots(qu[w:], k[: n - w])
    # BLAS packs a transposed view through an order that varies with the
    # row count; a contiguous operand keeps per-row results stable.
    position = rows_matmul(qv, np.ascontiguousarray(pos.T))
    scores = (content + position) * (1.0 / math.sqrt(d))
    rows = np.arange(n)
    valid = (rows[:, None] - np.arange(width)[None, :]) >= seg_start[:, None]
    attn = masked_softmax_rows(scores, valid)
    out = np.zeros_like(v)
    for w in range(min(width, n)):
        out[w:] += attn[w:, w, None] * v[: n - w]
    return attn, out


@dataclass(frozen=True)
class SegmentLayout:
    """Maps each row of a stacked batch to the start row of its segment.

    Causal ops never look across segment starts, so several utterance
    segments can share one frame axis.
    """

    seg_start: np.ndarray  # (N,) int64, seg_start[n] <= n

    @staticmethod
    def single(n: int) -> "SegmentLayout":
        return SegmentLayout(seg_start=np.zeros(n, dtype=np.int64))

    @staticmethod
    def from_lengths(lengths: list[int]) -> "SegmentLayout":
        starts = []
        offset = 0
        for length in lengths:
            starts.append(np.full(length, offset, dtype=np.int64))
            offset += length
        return SegmentLayout(seg_start=np.concatenate(starts))

    @property
    def n_rows(self) -> int:
        return len(self.seg_start)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    """x * factor + offset for plain Python scalars, preserving dtype."""
    out = Tensor(x.data * factor + offset if offset else x.data * factor)

    def backward(g, acc):
        _accum(acc, x, g * factor)

    _record(out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(rows_matmul(a.data, b.data))

    def backward(g, acc):
        _accum(acc, a, g @ b.data.T)
        _accum(acc, b, a.data.T @ g)

    _record(out, backward)
    return out


def _elementwise_pair(a, b, op: str):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{op} shape mismatch: {a.data.shape} vs {b.data.shape}"
        ) from None
    return a, b


def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return _scale(a, 1.0, float(b))
    a, b = _elementwise_pair(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g, acc):
        _accum(acc, a, _unbroadcast(g, a.data.shape))
        _accum(acc, b, _unbroadcast(g, b.data.shape))

    _record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _elementwise_pair(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g, acc):
        _accum(acc, a, _unbroadcast(g, a.data.shape))
        _accum(acc, b, _unbroadcast(-g, b.data.shape))

    _record(out, backward)
    return out


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return _scale(a, float(b))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return _scale(b, float(a))
    a, b = _elementwise_pair(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g, acc):
        _accum(acc, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(acc, b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, backward)
    return out


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, acc):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(acc, t, piece)

    _record(out, backward)
    return out


def slice_(x: Tensor, key) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data[key])

    def backward(g, acc):
        full = np.zeros_like(x.data)
        full[key] = g
        _accum(acc, x, full)

    _record(out, backward)
    return out


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.T.copy())

    def backward(g, acc):
        _accum(acc, x, g.T.copy())

    _record(out, backward)
    return out


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Tile a (1, D) row to (n, D); gradient sums back over rows."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ValueError(f"broadcast_rows expects shape (1, D), got {x.data.shape}")
    out = Tensor(np.repeat(x.data, n, axis=0))

    def backward(g, acc):
        _accum(acc, x, g.sum(axis=0, keepdims=True))

    _record(out, backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    expd = np.exp(shifted)
    s = expd / expd.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward(g, acc):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accum(acc, x, (g - inner) * s)

    _record(out, backward)
    return out


# Small enough that normalized rows have variance 1 within 1e-9 while still
# guarding zero-variance rows in double precision.
LAYER_NORM_EPS = 1e-12


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm affine shape mismatch: x {x.data.shape}, "
            f"gain {gain.data.shape}, bias {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = Tensor(x_hat * gain.data + bias.data)

    def backward(g, acc):
        _accum(acc, gain, (g * x_hat).reshape(-1, d).sum(axis=0))
        _accum(acc, bias, g.reshape(-1, d).sum(axis=0))
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - x_hat * (gx * x_hat).mean(
            axis=-1, keepdims=True
        )
        _accum(acc, x, term * inv_std)

    _record(out, backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s)

    def backward(g, acc):
        _accum(acc, x, g * s * (1.0 - s))

    _record(out, backward)
    return out


def silu(x: Tensor) -> Tensor:
    """Swish activation x * sigmoid(x)."""
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s)

    def backward(g, acc):
        _accum(acc, x, g * (s + x.data * s * (1.0 - s)))

    _record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(g, acc):
        _accum(acc, x, g * (x.data > 0))

    _record(out, backward)
    return out


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: split in half along ``axis``, a * sigmoid(b)."""
    x = _as_tensor(x)
    size = x.data.shape[axis]
    if size % 2 != 0:
        raise ValueError(f"glu axis size must be even, got shape {x.data.shape}")
    half = size // 2
    a = np.take(x.data, range(half), axis=axis)
    b = np.take(x.data, range(half, size), axis=axis)
    s = 1.0 / (1.0 + np.exp(-b))
    out = Tensor(a * s)

    def backward(g, acc):
        da = g * s
        db = g * a * s * (1.0 - s)
        _accum(acc, x, np.concatenate([da, db], axis=axis))

    _record(out, backward)
    return out


def causal_conv1d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    layout: SegmentLayout | None = None,
) -> Tensor:
    """Depthwise causal 1-D convolution over the frame axis.

    ``kernel`` has shape (K, C) with tap 0 applied to the current frame and
    increasing taps reaching further into the past; a kernel of
    [1, 0, ..., 0] is the identity map. Left context is implicit zeros, and
    taps never cross segment starts when a layout is given.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    n, c = x.data.shape
    k_taps, kc = kernel.data.shape
    if kc != c:
        raise ValueError(
            f"causal_conv1d channel mismatch: x {x.data.shape}, kernel {kernel.data.shape}"
        )
    blocked = None
    if layout is not None:
        blocked = _conv_blocked_rows(n, k_taps, layout.seg_start)
    y = causal_conv_accumulate(x.data, kernel.data, blocked)
    if bias is not None:
        bias = _as_tensor(bias)
        y = y + bias.data
    out = Tensor(y)

    def backward(g, acc):
        dx = np.zeros_like(x.data)
        dk = np.zeros_like(kernel.data)
        for t in range(k_taps):
            if t >= n:
                break
            g_t = g[t:]
            if blocked is not None and len(blocked[t]):
                g_t = g_t.copy()
                g_t[blocked[t] - t] = 0.0
            dx[: n - t] += g_t * kernel.data[t]
            dk[t] = (g_t * x.data[: n - t]).sum(axis=0)
        _accum(acc, x, dx)
        _accum(acc, kernel, dk)
        if bias is not None:
            _accum(acc, bias, g.sum(axis=0))

    _record(out, backward)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` with ``w`` of shape (in, out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 in train mode needs an rng")
    x = _as_tensor(x)
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = Tensor(x.data * mask)

    def backward(g, acc):
        _accum(acc, x, g * mask)

    _record(out, backward)
    return out


def cross_entropy(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None
) -> Tensor:
    """Mean negative log-likelihood of integer targets over unmasked rows."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    n, _ = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(
            f"cross_entropy target mismatch: logits {logits.data.shape}, targets {targets.shape}"
        )
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: mask excludes every row")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    nll = -log_probs[rows, targets]
    out = Tensor(np.asarray((nll * keep).sum() / count, dtype=logits.data.dtype))

    def backward(g, acc):
        probs = np.exp(log_probs)
        dl = probs
        dl[rows, targets] -= 1.0
        dl *= (keep / count)[:, None] * g
        _accum(acc, logits, dl)

    _record(out, backward)
    return out


def l1_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Summed absolute error; masked rows contribute exactly zero."""
    pred = _as_tensor(pred)
    target = np.asarray(target)
    if pred.data.shape != target.shape:
        raise ValueError(
            f"l1_loss shape mismatch: pred {pred.data.shape}, target {target.shape}"
        )
    diff = pred.data - target
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        diff = diff * keep[:, None]
    out = Tensor(np.asarray(np.abs(diff).sum(), dtype=pred.data.dtype))

    def backward(g, acc):
        _accum(acc, pred, np.sign(diff) * g)

    _record(out, backward)
    return out


def sum_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def backward(g, acc):
        _accum(acc, x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    _record(out, backward)
    return out


def mean_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))

    def backward(g, acc):
        _accum(acc, x, np.full_like(x.data, g / x.data.size))

    _record(out, backward)
    return out


def relative_position_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    pos: Tensor,
    u_bias: Tensor,
    v_bias: Tensor,
    max_past: int,
    layout: SegmentLayout | None = None,
) -> Tensor:
    """Single-head causal attention with relative-position scores.

    Frame n attends to frames [n - max_past, n]. Scores combine a content
    term (q_n + u) . k_j and a position term (q_n + v) . pos[n - j], both
    scaled by 1/sqrt(d); ``pos`` holds one embedding row per past offset.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    pos, u_bias, v_bias = _as_tensor(pos), _as_tensor(u_bias), _as_tensor(v_bias)
    if max_past < 0:
        raise ValueError(f"max_past must be >= 0, got {max_past}")
    n, d = q.data.shape
    if k.data.shape != (n, d) or v.data.shape != (n, d):
        raise ValueError(
            f"attention shape mismatch: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}"
        )
    if pos.data.shape != (max_past + 1, d):
        raise ValueError(
            f"position embedding shape {pos.data.shape} != {(max_past + 1, d)}"
        )
    seg_start = (
        layout.seg_start if layout is not None else np.zeros(n, dtype=np.int64)
    )
    qu = q.data + u_bias.data
    qv = q.data + v_bias.data
    attn, out_data = causal_attention_math(
        qu, qv, k.data, v.data, pos.data, max_past, seg_start
    )
    out = Tensor(out_data)
    scale = 1.0 / math.sqrt(d)
    width = max_past + 1

    def backward(g, acc):
        kd, vd = k.data, v.data
        # d attention weight: da[n, w] = g[n] . v[n - w]
        da = np.zeros_like(attn)
        for w in range(min(width, n)):
            da[w:, w] = row_dots(g[w:], vd[: n - w])
        ds = attn * (da - (attn * da).sum(axis=1, keepdims=True))
        ds *= scale
        # masked / out-of-range entries have attn == 0, hence ds == 0, so
        # the shifted slice accumulations below add only zeros for them.
        dqu = np.zeros_like(qu)
        dk = np.zeros_like(kd)
        dv = np.zeros_like(vd)
        for w in range(min(width, n)):
            ds_w = ds[w:, w, None]
            dqu[w:] += ds_w * kd[: n - w]
            dk[: n - w] += ds_w * qu[w:]
            dv[: n - w] += attn[w:, w, None] * g[w:]
        dqv = ds @ pos.data
        _accum(acc, q, dqu + dqv)
        _accum(acc, k, dk)
        _accum(acc, v, dv)
        _accum(acc, pos, ds.T @ qv)
        _accum(acc, u_bias, dqu.sum(axis=0))
        _accum(acc, v_bias, dqv.sum(axis=0))

    _record(out, backward)
    return out
