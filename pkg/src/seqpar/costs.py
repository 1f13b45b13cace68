"""Closed-form per-step cost estimates for each engine.

The formulas mirror what the runtime counters in :mod:`seqpar.tensor`
measure, so an estimate for a config can be checked against an instrumented
run to the last flop.  Score flops accumulate over layers; the score-element
figure is a peak (one layer's scores are live at a time), so it carries no
layer factor.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import PartitionError
from .model import ModelConfig

# Worker-count / sequence-length pairs that hold the per-worker attention
# workload ratio to small integers: with block length l/n, per-worker score
# elements are (l/n) * l, giving exactly 1 : 6 : 18 : 54 : 144 across the
# schedule.
WEAK_SCALING_SCHEDULE = (
    (6, 348),
    (36, 2088),
    (108, 6264),
    (324, 18792),
    (864, 50112),
)

ENGINES = ("sequential", "sharded", "baseline")


@dataclass(frozen=True)
class CostEstimate:
    """Per-step, per-worker costs (worst worker where they differ)."""

    engine: str
    workers: int
    seq_len: int
    block: int

    score_flops: int            # forward QK^T + weights@V, summed over layers
    score_elements_peak: int    # live score entries of one layer
    proj_flops: int             # q/k/v/out projections, forward, all layers
    ffn_flops: int              # both ffn matmuls, forward, all layers
    head_flops: int             # vocabulary projection, forward

    collectives_per_step: int   # ledger records one training step produces
    comm_elements_per_step: int # payload elements crossing workers per step

    complexity: dict


def estimate(
    cfg: ModelConfig, workers: int, engine: str = "sharded", *, fused: bool = True
) -> CostEstimate:
    """Closed-form cost of one training step of ``engine`` on ``workers``.

    Figures describe the busiest worker: for the sharded engine every worker
    is identical; for the baseline, rank 0 does all attention/ffn/head work
    and holds the full score footprint.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}")
    if engine == "sequential" and workers != 1:
        raise ValueError("the sequential engine runs on exactly one worker")
    if cfg.seq_len % workers != 0:
        raise PartitionError(
            f"sequence length {cfg.seq_len} not divisible by {workers} workers"
        )
    l, b, h, dk, e, f, layers = (
        cfg.seq_len, cfg.batch, cfg.n_heads, cfg.head_dim,
        cfg.embed_dim, cfg.ff_dim, cfg.n_layers,
    )
    block = l // workers
    # Rows this worker pushes through attention scores / ffn / head, and the
    # rows its key/value projections see.
    if engine == "sharded":
        q_rows, kv_rows, ffn_rows, head_rows = block, l, block, block
        per_layer = 2 if fused else 4
        collectives = per_layer * layers + 1
        # One b*l*e payload per layer-tagged collective (fused gathers the
        # normalized block; unfused gathers keys and values separately), plus
        # the flat gradient sync (replicated params + 1 piggybacked loss).
        shared = sum(
            a.size for n, a in _template(cfg).named_arrays() if n != "pos_table"
        )
        comm_elements = per_layer * layers * b * l * e + shared + 1
    elif engine == "baseline":
        q_rows, kv_rows, ffn_rows, head_rows = l, l, l, l
        collectives = 8 * layers + 5
        param_total = sum(a.size for a in _template(cfg).arrays())
        comm_elements = (8 * layers + 4) * b * l * e + param_total
    else:
        q_rows, kv_rows, ffn_rows, head_rows = l, l, l, l
        collectives = 0
        comm_elements = 0

    score_flops = layers * b * h * (2 * q_rows * dk * l + 2 * q_rows * l * dk)
    score_elements_peak = b * h * q_rows * l
    proj_flops = layers * (2 * b * q_rows * e * e * 2 + 2 * b * kv_rows * e * e * 2)
    ffn_flops = layers * (2 * b * ffn_rows * e * f) * 2
    head_flops = 2 * b * head_rows * e * cfg.vocab

    return CostEstimate(
        engine=engine,
        workers=workers,
        seq_len=l,
        block=block,
        score_flops=score_flops,
        score_elements_peak=score_elements_peak,
        proj_flops=proj_flops,
        ffn_flops=ffn_flops,
        head_flops=head_flops,
        collectives_per_step=collectives,
        comm_elements_per_step=comm_elements,
        complexity=_complexity(engine),
    )


def _complexity(engine: str) -> dict:
    per_worker_scores = "O(seq^2 / workers)" if engine == "sharded" else "O(seq^2)"
    return {
        "score_compute_per_worker": per_worker_scores,
        "score_memory_per_worker": per_worker_scores,
        "comm_per_step": "O(layers * seq * embed)" if engine != "sequential" else "O(1)",
    }


_TEMPLATES: dict = {}


def _template(cfg: ModelConfig):
    """Zero-seed parameter set used only for size arithmetic (cached)."""
    key = (cfg.embed_dim, cfg.n_layers, cfg.n_heads, cfg.ff_dim, cfg.vocab, cfg.seq_len)
    if key not in _TEMPLATES:
        from . import model

        _TEMPLATES[key] = model.init_params(cfg, 0)
    return _TEMPLATES[key]


def weak_scaling_ratios(
    cfg: ModelConfig, schedule=WEAK_SCALING_SCHEDULE
) -> list[int]:
    """Per-worker attention workload of each schedule point relative to the
    first, using the peak score-element figure.  The schedule is built so
    these come out as exact integers; a non-integer ratio means the schedule
    or the estimate is wrong, so it raises."""
    elements = []
    for workers, seq_len in schedule:
        point = replace(cfg, seq_len=seq_len)
        elements.append(estimate(point, workers, "sharded").score_elements_peak)
    base = elements[0]
    ratios = []
    for e in elements:
        if e % base != 0:
            raise ValueError(f"non-integer workload ratio {e}/{base}")
        ratios.append(e // base)
    return ratios
