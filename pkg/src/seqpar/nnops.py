"""Neural-net primitives with hand-written backward passes.

Every op comes as a forward/backward pair over 2-D row batches (rows are
tokens, columns are features).  The backward functions take exactly what the
forward cached, nothing hidden, so each pair can be checked in isolation
against finite differences.

Dropout here is *counter-based*: instead of consuming a stateful RNG stream,
the keep/drop decision for an element is a pure hash of

    (seed, layer index, op tag, sample index, global token position, channel)

so a token keeps the same mask no matter how the sequence is split across
workers.  That property is what makes distributed training with dropout
reproduce single-worker training exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor
from .errors import ShapeError

LAYERNORM_EPS = 1e-5

# Stable ids for the dropout sites in the model.  Values are part of the
# checkpoint/reproducibility story: renumbering them changes every mask.
DROPOUT_TAGS = {
    "embed": 1,
    "attn_score": 2,
    "attn_out": 3,
    "ffn_hidden": 4,
    "ffn_out": 5,
}

# --- counter-based pseudo-random bits (splitmix64 flavour) ---

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_U64_GOLDEN = np.uint64(_GOLDEN)
_U64_MIX_A = np.uint64(_MIX_A)
_U64_MIX_B = np.uint64(_MIX_B)


def mix_key(h: int, word: int) -> int:
    """Fold ``word`` into hash state ``h`` (python ints, mod 2**64)."""
    z = (h + word * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def _mix_array(h: np.ndarray, words: np.ndarray) -> np.ndarray:
    """Vectorised mix_key over uint64 arrays (wraparound arithmetic)."""
    z = h + words.astype(np.uint64) * _U64_GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _U64_MIX_A
    z = (z ^ (z >> np.uint64(27))) * _U64_MIX_B
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class DropoutPolicy:
    """Dropout configuration shared by every worker in a run.

    ``seed`` is the only state; there is no stream to keep in sync.  Engines
    derive a fresh per-step policy with :meth:`at_step` so masks change from
    step to step while remaining a pure function of the coordinates.
    """

    rate: float
    seed: int = 0
    enabled: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    @classmethod
    def off(cls) -> "DropoutPolicy":
        return cls(rate=0.0, enabled=False)

    def at_step(self, step: int) -> "DropoutPolicy":
        return replace(self, seed=mix_key(self.seed & _MASK64, step + 1))

    def fork(self, lane: int) -> "DropoutPolicy":
        """Decorrelated sub-policy for an independent lane of work (e.g. a
        data-parallel replica); workers sharing one sequence must not fork."""
        return replace(self, seed=mix_key(mix_key(self.seed & _MASK64, 0x666F726B), lane + 1))

    @property
    def active(self) -> bool:
        return self.enabled and self.rate > 0.0


def _site_key(policy: DropoutPolicy, layer: int, tag: str) -> int:
    try:
        tag_id = DROPOUT_TAGS[tag]
    except KeyError:
        raise ValueError(f"unknown dropout tag {tag!r}")
    return mix_key(mix_key(policy.seed & _MASK64, tag_id), layer + 1)


def token_row_keys(
    policy: DropoutPolicy, layer: int, tag: str, samples: np.ndarray, positions: np.ndarray
) -> np.ndarray:
    """One hash word per (sample, global position) row of an activation."""
    h0 = np.uint64(_site_key(policy, layer, tag))
    h = _mix_array(np.full(samples.shape, h0, dtype=np.uint64), samples)
    return _mix_array(h, positions)


def score_row_keys(
    policy: DropoutPolicy, layer: int, sample: int, head: int, q_positions: np.ndarray
) -> np.ndarray:
    """One hash word per attention-score row (query position within a head)."""
    h0 = _site_key(policy, layer, "attn_score")
    h0 = mix_key(mix_key(h0, sample + 1), head + 1)
    return _mix_array(np.full(q_positions.shape, np.uint64(h0), dtype=np.uint64), q_positions)


def keep_mask(policy: DropoutPolicy, row_keys: np.ndarray, n_cols: int) -> np.ndarray:
    """Boolean keep-mask of shape (len(row_keys), n_cols)."""
    cols = np.arange(n_cols, dtype=np.uint64)
    words = _mix_array(row_keys[:, None], cols[None, :])
    uniform = (words >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return uniform >= policy.rate


def apply_mask(x: np.ndarray, policy: DropoutPolicy, mask: np.ndarray) -> np.ndarray:
    scale = 1.0 / (1.0 - policy.rate)
    return x * (mask.astype(x.dtype) * x.dtype.type(scale))


def dropout_fwd(
    x: np.ndarray,
    policy: DropoutPolicy,
    layer: int,
    tag: str,
    samples: np.ndarray,
    positions: np.ndarray,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Position-keyed dropout over a (rows, channels) activation.

    ``samples``/``positions`` give the global coordinates of each row.  When
    the policy is inactive the input is returned untouched with a None mask.
    """
    if x.ndim != 2:
        raise ShapeError(f"dropout_fwd expects 2-D activations, got shape {x.shape}")
    if samples.shape != (x.shape[0],) or positions.shape != (x.shape[0],):
        raise ShapeError("dropout coordinates must supply one (sample, position) per row")
    if not policy.active:
        return x, None
    mask = keep_mask(policy, token_row_keys(policy, layer, tag, samples, positions), x.shape[1])
    return apply_mask(x, policy, mask), mask


def dropout_bwd(grad_y: np.ndarray, policy: DropoutPolicy, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return grad_y
    return apply_mask(grad_y, policy, mask)


# --- linear ---


@dataclass(frozen=True)
class LinearParams:
    """Affine map parameters; weight has shape (d_in, d_out)."""

    weight: np.ndarray
    bias: np.ndarray


def linear_fwd(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if p.bias.shape != (p.weight.shape[1],):
        raise ShapeError(f"bias shape {p.bias.shape} does not match weight {p.weight.shape}")
    return tensor.matmul(x, p.weight) + p.bias


def linear_bwd(
    x: np.ndarray, p: LinearParams, grad_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_weight, grad_bias)."""
    grad_x = tensor.matmul(grad_y, tensor.transpose(p.weight))
    grad_w = tensor.matmul(tensor.transpose(x), grad_y)
    grad_b = np.sum(grad_y, axis=0)
    return grad_x, grad_w, grad_b


# --- layer normalization ---


def layernorm_fwd(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LAYERNORM_EPS
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Per-row normalization; cache is (xhat, inv_std)."""
    mu = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    y = xhat * gain + bias
    return tensor.check_finite(y, "layernorm output"), (xhat, inv_std)


def layernorm_bwd(
    cache: tuple[np.ndarray, np.ndarray], gain: np.ndarray, grad_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_gain, grad_bias).

    Standard result of differentiating through the row mean and variance:
        grad_x = inv_std * (g - mean(g) - xhat * mean(g * xhat))
    with g = grad_y * gain, means taken per row.
    """
    xhat, inv_std = cache
    grad_gain = np.sum(grad_y * xhat, axis=0)
    grad_bias = np.sum(grad_y, axis=0)
    g = grad_y * gain
    grad_x = inv_std * (
        g - np.mean(g, axis=1, keepdims=True) - xhat * np.mean(g * xhat, axis=1, keepdims=True)
    )
    return grad_x, grad_gain, grad_bias


# --- GeLU (tanh approximation) ---

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    sech2 = 1.0 - t**2
    local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return grad_y * local


# --- embeddings ---


def embed_tokens(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Row gather: ids of any shape -> embeddings of shape ids.shape + (E,)."""
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ValueError(f"token id out of range for vocab {table.shape[0]}")
    return table[ids]


def embed_tokens_bwd(table_shape: tuple[int, int], ids: np.ndarray, grad_rows: np.ndarray) -> np.ndarray:
    """Scatter-add of row gradients back into a dense table gradient."""
    grad_table = np.zeros(table_shape, dtype=grad_rows.dtype)
    np.add.at(grad_table, ids.reshape(-1), grad_rows.reshape(-1, table_shape[1]))
    return grad_table


def embed_positions(pe: np.ndarray, offset: int, length: int) -> np.ndarray:
    """Contiguous slice of the position table for one sequence segment."""
    if offset < 0 or offset + length > pe.shape[0]:
        raise ValueError(
            f"position window [{offset}, {offset + length}) outside table of {pe.shape[0]} rows"
        )
    return pe[offset : offset + length]


# --- loss ---


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows, with the gradient w.r.t. the logits.

    The loss is the *mean* of the per-token losses, so a partial loss over a
    token subset averages back to the full loss, and the gradient is simply
    (softmax - onehot) / n_rows.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got shape {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} logit rows")
    if np.any(targets < 0) or np.any(targets >= v):
        raise ValueError(f"target id out of range for vocab {v}")
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = np.sum(exp, axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    loss = float(-np.mean(log_probs[np.arange(n), targets]))
    grad = exp / sum_exp
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    if not math.isfinite(loss):
        raise ValueError("cross_entropy produced a non-finite loss")
    return loss, tensor.check_finite(grad.astype(logits.dtype, copy=False), "cross_entropy grad")
