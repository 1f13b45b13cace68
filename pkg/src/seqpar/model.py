"""Decoder-only transformer with hand-rolled autodiff, plus the sequential
(single-worker) reference engine.

The per-layer forward/backward are written once, here, and parameterized at
exactly the one place where distributed execution differs from sequential:
how keys and values for the whole sequence are produced from each worker's
local activation block (``kv_fwd``), and how gradients flow back through that
production (``kv_bwd``).  Locally it is two linear maps; distributed it
additionally all-gathers activations forward and reduce-scatters gradients
backward.

Because every engine executes the same kernel calls in the same order, a
distributed run with a single worker is bit-for-bit identical to the
sequential engine, and multi-worker runs differ only by float rounding.

Shapes follow one convention throughout: activations are (batch, rows,
features); token ids and targets are (batch, rows); ``offset`` is the global
sequence position of a block's first row, which drives both the causal mask
and the position-keyed dropout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import nnops, tensor
from .errors import ShapeError
from .nnops import DropoutPolicy, LinearParams
from .tensor import StepCounters

CHECKPOINT_MAGIC = b"SQPR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int
    n_layers: int
    n_heads: int
    ff_dim: int
    vocab: int
    seq_len: int
    batch: int = 1
    dropout: float = 0.0
    causal: bool = True
    precision: str = "double"

    def __post_init__(self) -> None:
        if self.embed_dim < 1 or self.n_heads < 1 or self.ff_dim < 1:
            raise ValueError("model dimensions must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise ShapeError(
                f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}"
            )
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.vocab < 1 or self.seq_len < 1 or self.batch < 1:
            raise ValueError("vocab, seq_len and batch must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        tensor.resolve_dtype(self.precision)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def dtype(self) -> np.dtype:
        return tensor.resolve_dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerParams:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    attn_q: LinearParams
    attn_k: LinearParams
    attn_v: LinearParams
    attn_out: LinearParams
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    ff_in: LinearParams
    ff_out: LinearParams


@dataclass
class Parameters:
    """Full parameter set.  The same container carries gradients.

    On a distributed worker ``pos_table`` holds only that worker's contiguous
    rows of the position table; everything else is a full replica.
    """

    token_table: np.ndarray
    pos_table: np.ndarray
    layers: list[LayerParams]
    final_gain: np.ndarray
    final_bias: np.ndarray
    head: LinearParams

    def named_arrays(self):
        """Yield (name, array) in a fixed order; the order defines the flat
        layout used by gradient sync, optimizers and checkpoints."""
        yield "token_table", self.token_table
        yield "pos_table", self.pos_table
        for i, lp in enumerate(self.layers):
            yield f"layer{i}.ln1_gain", lp.ln1_gain
            yield f"layer{i}.ln1_bias", lp.ln1_bias
            yield f"layer{i}.attn_q.weight", lp.attn_q.weight
            yield f"layer{i}.attn_q.bias", lp.attn_q.bias
            yield f"layer{i}.attn_k.weight", lp.attn_k.weight
            yield f"layer{i}.attn_k.bias", lp.attn_k.bias
            yield f"layer{i}.attn_v.weight", lp.attn_v.weight
            yield f"layer{i}.attn_v.bias", lp.attn_v.bias
            yield f"layer{i}.attn_out.weight", lp.attn_out.weight
            yield f"layer{i}.attn_out.bias", lp.attn_out.bias
            yield f"layer{i}.ln2_gain", lp.ln2_gain
            yield f"layer{i}.ln2_bias", lp.ln2_bias
            yield f"layer{i}.ff_in.weight", lp.ff_in.weight
            yield f"layer{i}.ff_in.bias", lp.ff_in.bias
            yield f"layer{i}.ff_out.weight", lp.ff_out.weight
            yield f"layer{i}.ff_out.bias", lp.ff_out.bias
        yield "final_gain", self.final_gain
        yield "final_bias", self.final_bias
        yield "head.weight", self.head.weight
        yield "head.bias", self.head.bias

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def replace_arrays(self, arrays) -> "Parameters":
        """Rebuild the same structure from a flat list in named order."""
        it = iter(arrays)

        def linear() -> LinearParams:
            w = next(it)
            return LinearParams(weight=w, bias=next(it))

        token_table = next(it)
        pos_table = next(it)
        layers = []
        for _ in self.layers:
            ln1_gain, ln1_bias = next(it), next(it)
            q, k, v, out = linear(), linear(), linear(), linear()
            ln2_gain, ln2_bias = next(it), next(it)
            ff_in, ff_out = linear(), linear()
            layers.append(
                LayerParams(ln1_gain, ln1_bias, q, k, v, out, ln2_gain, ln2_bias, ff_in, ff_out)
            )
        final_gain, final_bias = next(it), next(it)
        head = linear()
        rest = list(it)
        if rest:
            raise ShapeError(f"{len(rest)} extra arrays when rebuilding parameters")
        return Parameters(token_table, pos_table, layers, final_gain, final_bias, head)

    def copy(self) -> "Parameters":
        return self.replace_arrays([a.copy() for a in self.arrays()])

    def zip_map(self, other: "Parameters", fn) -> "Parameters":
        return self.replace_arrays([fn(a, b) for a, b in zip(self.arrays(), other.arrays())])


def param_count(params: Parameters) -> int:
    return sum(int(a.size) for a in params.arrays())


def init_params(cfg: ModelConfig, seed: int) -> Parameters:
    """Scaled-uniform init, drawn in a fixed documented order.

    Weights and embedding tables are U(-1/sqrt(fan_in), +1/sqrt(fan_in)) with
    fan_in the input feature count (the embedding width for both tables).
    Biases start at zero, layernorm gains at one.  Draw order: token table,
    position table, then per layer q, k, v, out, ff_in, ff_out weights, then
    the head weight.
    """
    rng = np.random.default_rng(seed)
    dt = cfg.dtype

    def uniform(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape).astype(dt)

    def linear(d_in: int, d_out: int) -> LinearParams:
        return LinearParams(weight=uniform(d_in, (d_in, d_out)), bias=np.zeros(d_out, dtype=dt))

    e = cfg.embed_dim
    token_table = uniform(e, (cfg.vocab, e))
    pos_table = uniform(e, (cfg.seq_len, e))
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerParams(
                ln1_gain=np.ones(e, dtype=dt),
                ln1_bias=np.zeros(e, dtype=dt),
                attn_q=linear(e, e),
                attn_k=linear(e, e),
                attn_v=linear(e, e),
                attn_out=linear(e, e),
                ln2_gain=np.ones(e, dtype=dt),
                ln2_bias=np.zeros(e, dtype=dt),
                ff_in=linear(e, cfg.ff_dim),
                ff_out=linear(cfg.ff_dim, e),
            )
        )
    return Parameters(
        token_table=token_table,
        pos_table=pos_table,
        layers=layers,
        final_gain=np.ones(e, dtype=dt),
        final_bias=np.zeros(e, dtype=dt),
        head=linear(e, cfg.vocab),
    )


# --- small shape helpers shared by every engine ---


def row_coords(batch: int, rows: int, offset: int) -> tuple[np.ndarray, np.ndarray]:
    """(sample, global position) for each row of a flattened (B*rows, E) block."""
    samples = np.repeat(np.arange(batch, dtype=np.int64), rows)
    positions = np.tile(np.arange(offset, offset + rows, dtype=np.int64), batch)
    return samples, positions


def linear3(x: np.ndarray, p: LinearParams) -> np.ndarray:
    b, m, e = x.shape
    return nnops.linear_fwd(x.reshape(b * m, e), p).reshape(b, m, -1)


def linear3_bwd(x: np.ndarray, p: LinearParams, grad_y: np.ndarray):
    b, m, _ = grad_y.shape
    gx, gw, gb = nnops.linear_bwd(x.reshape(b * m, x.shape[2]), p, grad_y.reshape(b * m, -1))
    return gx.reshape(x.shape), gw, gb


def norm3(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    b, m, e = x.shape
    y, cache = nnops.layernorm_fwd(x.reshape(b * m, e), gain, bias)
    return y.reshape(b, m, e), cache


def norm3_bwd(cache, gain: np.ndarray, grad_y: np.ndarray):
    b, m, e = grad_y.shape
    gx, gg, gb = nnops.layernorm_bwd(cache, gain, grad_y.reshape(b * m, e))
    return gx.reshape(b, m, e), gg, gb


def dropout3(x, policy, layer, tag, samples, positions):
    b, m, e = x.shape
    y, mask = nnops.dropout_fwd(x.reshape(b * m, e), policy, layer, tag, samples, positions)
    return y.reshape(b, m, e), mask


def dropout3_bwd(grad_y, policy, mask):
    b, m, e = grad_y.shape
    return nnops.dropout_bwd(grad_y.reshape(b * m, e), policy, mask).reshape(b, m, e)


# --- attention score block ---


@dataclass
class ScoreCache:
    attn: list  # per (b, h): (aw, aw_dropped, keep_mask_or_None)
    offset: int


def scores_fwd(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    offset: int,
    cfg: ModelConfig,
    policy: DropoutPolicy,
    layer: int,
    counters: StepCounters | None = None,
) -> tuple[np.ndarray, ScoreCache]:
    """Masked, scaled dot-product attention over per-head slices.

    ``q`` holds the local block's rows (global positions offset..offset+m),
    ``k``/``v`` hold the whole sequence; a causal row attends to keys at or
    before its own global position.  Scores are materialized per head and
    sample, which is exactly the activation footprint the counters track.
    """
    bsz, m, e = q.shape
    t = k.shape[1]
    dk = cfg.head_dim
    scale = 1.0 / np.sqrt(dk)
    q_pos = np.arange(offset, offset + m, dtype=np.int64)
    mask = None
    if cfg.causal:
        mask = np.arange(t)[None, :] <= q_pos[:, None]
    ctx = np.empty_like(q)
    attn = []
    for b in range(bsz):
        for h in range(cfg.n_heads):
            cols = slice(h * dk, (h + 1) * dk)
            qbh, kbh, vbh = q[b, :, cols], k[b, :, cols], v[b, :, cols]
            s = tensor.matmul(qbh, tensor.transpose(kbh)) * scale
            if counters is not None:
                counters.add_score_flops(m, dk, t)
            aw = tensor.softmax_rows(s, mask)
            if policy.active:
                keep = nnops.keep_mask(policy, nnops.score_row_keys(policy, layer, b, h, q_pos), t)
                aw_d = nnops.apply_mask(aw, policy, keep)
            else:
                keep, aw_d = None, aw
            ctx[b, :, cols] = tensor.matmul(aw_d, vbh)
            if counters is not None:
                counters.add_score_flops(m, t, dk)
            attn.append((aw, aw_d, keep))
    if counters is not None:
        counters.record_score_footprint(bsz * cfg.n_heads * m * t)
    return ctx, ScoreCache(attn=attn, offset=offset)


def scores_bwd(
    cache: ScoreCache,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    grad_ctx: np.ndarray,
    cfg: ModelConfig,
    policy: DropoutPolicy,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    bsz, m, e = q.shape
    dk = cfg.head_dim
    scale = 1.0 / np.sqrt(dk)
    grad_q = np.zeros_like(q)
    grad_k = np.zeros_like(k)
    grad_v = np.zeros_like(v)
    idx = 0
    for b in range(bsz):
        for h in range(cfg.n_heads):
            cols = slice(h * dk, (h + 1) * dk)
            aw, aw_d, keep = cache.attn[idx]
            idx += 1
            g_ctx = grad_ctx[b, :, cols]
            grad_aw_d = tensor.matmul(g_ctx, tensor.transpose(v[b, :, cols]))
            grad_v[b, :, cols] = tensor.matmul(tensor.transpose(aw_d), g_ctx)
            grad_aw = grad_aw_d if keep is None else nnops.apply_mask(grad_aw_d, policy, keep)
            # softmax backward; masked-out entries have aw == 0, so they stay 0
            grad_s = aw * (grad_aw - np.sum(grad_aw * aw, axis=1, keepdims=True))
            grad_s = grad_s * scale
            grad_q[b, :, cols] = tensor.matmul(grad_s, k[b, :, cols])
            grad_k[b, :, cols] = tensor.matmul(tensor.transpose(grad_s), q[b, :, cols])
    return grad_q, grad_k, grad_v


# --- feed-forward block ---


@dataclass
class FfnCache:
    yh_flat: np.ndarray
    h_pre: np.ndarray
    h_drop: np.ndarray
    hidden_mask: np.ndarray | None


def ffn_fwd(yh, lp: LayerParams, policy, layer, samples, positions):
    b, m, e = yh.shape
    yh_flat = yh.reshape(b * m, e)
    h_pre = nnops.linear_fwd(yh_flat, lp.ff_in)
    h_act = nnops.gelu_fwd(h_pre)
    h_drop, hidden_mask = nnops.dropout_fwd(h_act, policy, layer, "ffn_hidden", samples, positions)
    out = nnops.linear_fwd(h_drop, lp.ff_out).reshape(b, m, e)
    return out, FfnCache(yh_flat, h_pre, h_drop, hidden_mask)


def ffn_bwd(cache: FfnCache, lp: LayerParams, policy, grad_out):
    b, m, e = grad_out.shape
    g = grad_out.reshape(b * m, e)
    grad_h_drop, ff_out_wg, ff_out_bg = nnops.linear_bwd(cache.h_drop, lp.ff_out, g)
    grad_h_act = nnops.dropout_bwd(grad_h_drop, policy, cache.hidden_mask)
    grad_h_pre = nnops.gelu_bwd(cache.h_pre, grad_h_act)
    grad_yh, ff_in_wg, ff_in_bg = nnops.linear_bwd(cache.yh_flat, lp.ff_in, grad_h_pre)
    return grad_yh.reshape(b, m, e), (ff_in_wg, ff_in_bg, ff_out_wg, ff_out_bg)


# --- one full pre-norm layer ---


@dataclass
class LayerCache:
    offset: int
    ln1: tuple
    xh: np.ndarray
    kv_ctx: object
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scores: ScoreCache
    ctx: np.ndarray
    att_mask: np.ndarray | None
    ln2: tuple
    ffn: FfnCache
    ff_mask: np.ndarray | None


def local_kv_fwd(xh: np.ndarray, lp: LayerParams):
    """Single-worker key/value production: project the block itself."""
    return linear3(xh, lp.attn_k), linear3(xh, lp.attn_v), xh


def local_kv_bwd(kv_ctx, lp: LayerParams, grad_k: np.ndarray, grad_v: np.ndarray):
    grad_kx, k_wg, k_bg = linear3_bwd(kv_ctx, lp.attn_k, grad_k)
    grad_vx, v_wg, v_bg = linear3_bwd(kv_ctx, lp.attn_v, grad_v)
    return grad_kx + grad_vx, k_wg, k_bg, v_wg, v_bg


def layer_fwd(
    lp: LayerParams,
    cfg: ModelConfig,
    policy: DropoutPolicy,
    layer: int,
    x: np.ndarray,
    offset: int,
    kv_fwd=local_kv_fwd,
    counters: StepCounters | None = None,
) -> tuple[np.ndarray, LayerCache]:
    """norm -> attention -> dropout -> residual, norm -> ffn -> dropout -> residual.

    ``kv_fwd(xh, lp)`` returns whole-sequence keys and values plus an opaque
    context for the matching ``kv_bwd``.  Locally that is two projections of
    the block itself; distributed it involves an all-gather.
    """
    bsz, m, e = x.shape
    samples, positions = row_coords(bsz, m, offset)
    xh, ln1_cache = norm3(x, lp.ln1_gain, lp.ln1_bias)
    k, v, kv_ctx = kv_fwd(xh, lp)
    q = linear3(xh, lp.attn_q)
    ctx, score_cache = scores_fwd(q, k, v, offset, cfg, policy, layer, counters)
    att = linear3(ctx, lp.attn_out)
    att_drop, att_mask = dropout3(att, policy, layer, "attn_out", samples, positions)
    x_mid = x + att_drop
    yh, ln2_cache = norm3(x_mid, lp.ln2_gain, lp.ln2_bias)
    ff, ffn_cache = ffn_fwd(yh, lp, policy, layer, samples, positions)
    ff_drop, ff_mask = dropout3(ff, policy, layer, "ffn_out", samples, positions)
    x_out = x_mid + ff_drop
    cache = LayerCache(
        offset, ln1_cache, xh, kv_ctx, q, k, v, score_cache, ctx, att_mask,
        ln2_cache, ffn_cache, ff_mask,
    )
    return x_out, cache


def layer_bwd(
    lp: LayerParams,
    cfg: ModelConfig,
    policy: DropoutPolicy,
    layer: int,
    cache: LayerCache,
    grad_out: np.ndarray,
    kv_bwd=local_kv_bwd,
) -> tuple[np.ndarray, LayerParams]:
    """Reverse of :func:`layer_fwd`; returns (grad_x_in, per-layer grads).

    ``kv_bwd(kv_ctx, lp, grad_k, grad_v)`` must return the key/value path's
    gradient w.r.t. this worker's own normalized block (plus the four
    projection grads); distributed it reduce-scatters before returning.
    """
    g_ff = dropout3_bwd(grad_out, policy, cache.ff_mask)
    grad_yh, (ff_in_wg, ff_in_bg, ff_out_wg, ff_out_bg) = ffn_bwd(cache.ffn, lp, policy, g_ff)
    g_ln2_x, ln2_gain_g, ln2_bias_g = norm3_bwd(cache.ln2, lp.ln2_gain, grad_yh)
    grad_mid = grad_out + g_ln2_x
    g_att = dropout3_bwd(grad_mid, policy, cache.att_mask)
    grad_ctx, out_wg, out_bg = linear3_bwd(cache.ctx, lp.attn_out, g_att)
    grad_q, grad_k, grad_v = scores_bwd(cache.scores, cache.q, cache.k, cache.v, grad_ctx, cfg, policy)
    grad_xh_q, q_wg, q_bg = linear3_bwd(cache.xh, lp.attn_q, grad_q)
    grad_xh_kv, k_wg, k_bg, v_wg, v_bg = kv_bwd(cache.kv_ctx, lp, grad_k, grad_v)
    grad_xh = grad_xh_q + grad_xh_kv
    g_ln1_x, ln1_gain_g, ln1_bias_g = norm3_bwd(cache.ln1, lp.ln1_gain, grad_xh)
    grad_in = grad_mid + g_ln1_x
    grads = LayerParams(
        ln1_gain=ln1_gain_g,
        ln1_bias=ln1_bias_g,
        attn_q=LinearParams(q_wg, q_bg),
        attn_k=LinearParams(k_wg, k_bg),
        attn_v=LinearParams(v_wg, v_bg),
        attn_out=LinearParams(out_wg, out_bg),
        ln2_gain=ln2_gain_g,
        ln2_bias=ln2_bias_g,
        ff_in=LinearParams(ff_in_wg, ff_in_bg),
        ff_out=LinearParams(ff_out_wg, ff_out_bg),
    )
    return grad_in, grads


# --- embedding and output head ---


@dataclass
class EmbedCache:
    tokens: np.ndarray
    mask: np.ndarray | None


def embed_fwd(params: Parameters, cfg: ModelConfig, tokens: np.ndarray, offset: int, policy):
    """Token + position embeddings for one contiguous block of the sequence.

    ``params.pos_table`` must hold exactly this block's rows (the full table
    sequentially, the local shard on a distributed worker).
    """
    bsz, m = tokens.shape
    if params.pos_table.shape[0] != m:
        raise ShapeError(
            f"position table has {params.pos_table.shape[0]} rows, block has {m}"
        )
    tok = nnops.embed_tokens(params.token_table, tokens)
    pe = nnops.embed_positions(params.pos_table, 0, m)
    x = tok + pe
    samples, positions = row_coords(bsz, m, offset)
    x, mask = dropout3(x, policy, 0, "embed", samples, positions)
    return x, EmbedCache(tokens=tokens, mask=mask)


def embed_bwd(cache: EmbedCache, vocab: int, policy, grad_x: np.ndarray):
    g = dropout3_bwd(grad_x, policy, cache.mask)
    grad_pe = np.sum(g, axis=0)
    grad_tok = nnops.embed_tokens_bwd((vocab, g.shape[2]), cache.tokens, g)
    return grad_tok, grad_pe


@dataclass
class HeadCache:
    lnf: tuple
    xf: np.ndarray
    logits: np.ndarray
    grad_logits: np.ndarray | None
    shape3: tuple


def head_fwd(x: np.ndarray, params: Parameters, targets: np.ndarray | None):
    """Final layernorm, vocabulary projection and (optionally) the loss."""
    bsz, m, e = x.shape
    xf, lnf_cache = nnops.layernorm_fwd(x.reshape(bsz * m, e), params.final_gain, params.final_bias)
    logits = nnops.linear_fwd(xf, params.head)
    if targets is None:
        return None, HeadCache(lnf_cache, xf, logits, None, (bsz, m, e))
    loss, grad_logits = nnops.cross_entropy(logits, targets.reshape(bsz * m))
    return loss, HeadCache(lnf_cache, xf, logits, grad_logits, (bsz, m, e))


def head_bwd(cache: HeadCache, params: Parameters):
    if cache.grad_logits is None:
        raise ValueError("head_bwd requires a forward pass that computed the loss")
    grad_xf, head_wg, head_bg = nnops.linear_bwd(cache.xf, params.head, cache.grad_logits)
    grad_x, final_gain_g, final_bias_g = nnops.layernorm_bwd(cache.lnf, params.final_gain, grad_xf)
    return grad_x.reshape(cache.shape3), final_gain_g, final_bias_g, head_wg, head_bg


# --- sequential reference engine ---


@dataclass
class SequentialCache:
    embed: EmbedCache
    layers: list[LayerCache]
    head: HeadCache
    policy: DropoutPolicy

    @property
    def logits(self) -> np.ndarray:
        return self.head.logits


def forward(
    params: Parameters,
    cfg: ModelConfig,
    tokens: np.ndarray,
    targets: np.ndarray | None = None,
    policy: DropoutPolicy | None = None,
    counters: StepCounters | None = None,
) -> tuple[float | None, SequentialCache]:
    """Whole-sequence forward pass on one worker."""
    policy = policy if policy is not None else DropoutPolicy.off()
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (batch, seq_len), got shape {tokens.shape}")
    x, e_cache = embed_fwd(params, cfg, tokens, 0, policy)
    layer_caches = []
    for li, lp in enumerate(params.layers):
        x, c = layer_fwd(lp, cfg, policy, li, x, 0, local_kv_fwd, counters)
        layer_caches.append(c)
    loss, h_cache = head_fwd(x, params, targets)
    return loss, SequentialCache(e_cache, layer_caches, h_cache, policy)


def backward(params: Parameters, cfg: ModelConfig, cache: SequentialCache) -> Parameters:
    """Gradients of the mean-over-tokens loss w.r.t. every parameter."""
    policy = cache.policy
    grad_x, final_gain_g, final_bias_g, head_wg, head_bg = head_bwd(cache.head, params)
    layer_grads: list[LayerParams | None] = [None] * len(params.layers)
    for li in range(len(params.layers) - 1, -1, -1):
        grad_x, layer_grads[li] = layer_bwd(
            params.layers[li], cfg, policy, li, cache.layers[li], grad_x, local_kv_bwd,
        )
    grad_tok, grad_pe = embed_bwd(cache.embed, cfg.vocab, policy, grad_x)
    return Parameters(
        token_table=grad_tok,
        pos_table=grad_pe,
        layers=layer_grads,
        final_gain=final_gain_g,
        final_bias=final_bias_g,
        head=LinearParams(head_wg, head_bg),
    )


def sgd_step(params: Parameters, grads: Parameters, lr: float) -> Parameters:
    """Plain SGD; returns fresh parameters, inputs untouched."""
    return params.zip_map(grads, lambda w, g: w - lr * g)


# --- flat vector helpers (gradient sync, optimizers) ---


def flatten_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def unflatten_like(vec: np.ndarray, arrays: list[np.ndarray]) -> list[np.ndarray]:
    needed = sum(a.size for a in arrays)
    if vec.size != needed:
        raise ShapeError(f"flat vector has {vec.size} elements, structure needs {needed}")
    out = []
    pos = 0
    for a in arrays:
        out.append(vec[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    return out


def grad_norm(grads: Parameters) -> float:
    """Euclidean norm over every gradient array, folded in parameter order."""
    total = 0.0
    for _, g in grads.named_arrays():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


# --- checkpoints ---


def save_checkpoint(path, params: Parameters, cfg: ModelConfig, seed: int) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header
    (config, seed, dtype, array names), then per array a u8 rank, u64
    little-endian dims, and raw little-endian element bytes."""
    dt = "<f8" if cfg.precision == "double" else "<f4"
    names = [n for n, _ in params.named_arrays()]
    header = json.dumps(
        {"config": cfg.to_dict(), "seed": seed, "dtype": dt, "arrays": names}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, a in params.named_arrays():
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def load_checkpoint(path) -> tuple[Parameters, ModelConfig, int]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        dt = np.dtype(header["dtype"])
        arrays = []
        for _ in header["arrays"]:
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(n * dt.itemsize), dtype=dt).reshape(shape)
            arrays.append(data.astype(cfg.dtype, copy=True))
    template = init_params(cfg, seed=0)
    expected = [a.shape for a in template.arrays()]
    got = [a.shape for a in arrays]
    if expected != got:
        raise ShapeError("checkpoint array shapes do not match its config")
    return template.replace_arrays(arrays), cfg, header["seed"]
