"""Sequence-parallel engine with distributed attention.

Each worker owns a contiguous block of the sequence: its token ids, its rows
of the position table, and a full replica of every other parameter.  Per
layer, the forward pass all-gathers the post-layernorm activation once and
recomputes keys/values from it locally, so attention for the worker's own
query rows runs against the whole sequence; the backward pass reduce-scatters
the key/value path's gradient once.  Gradients of replicated parameters are
averaged in a single flat all-reduce per step; position rows never leave
their owner.

Communication per training step with L layers:
    forward   L all-gathers
    backward  L reduce-scatters
    sync      1 all-reduce
Nothing else crosses worker boundaries.

The ``fused=False`` ablation gathers keys and values separately (two
all-gathers forward, two reduce-scatters backward per layer) instead of
gathering the activation they are projected from; results agree to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model, tensor
from .collectives import Communicator, WorkerGroup, run_workers
from .errors import PartitionError, ShapeError
from .model import ModelConfig, Parameters
from .nnops import DropoutPolicy
from .tensor import StepCounters


@dataclass(frozen=True)
class ShardSpec:
    """Which contiguous block of the sequence a worker owns."""

    rank: int
    workers: int
    seq_len: int

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError("worker count must be positive")
        if not 0 <= self.rank < self.workers:
            raise ValueError(f"rank {self.rank} outside worker range [0, {self.workers})")
        if self.seq_len % self.workers != 0:
            raise PartitionError(
                f"sequence length {self.seq_len} not divisible by {self.workers} workers"
            )

    @property
    def block(self) -> int:
        return self.seq_len // self.workers

    @property
    def offset(self) -> int:
        return self.rank * self.block


@dataclass
class DistParameters:
    """A worker's view of the parameters: full replica of everything except
    the position table, of which only the owned rows are present."""

    spec: ShardSpec
    params: Parameters


def shard_params(full: Parameters, spec: ShardSpec) -> DistParameters:
    """Deep-copy ``full`` for one worker, slicing out its position rows."""
    if full.pos_table.shape[0] != spec.seq_len:
        raise ShapeError(
            f"position table has {full.pos_table.shape[0]} rows, expected {spec.seq_len}"
        )
    p = full.copy()
    p.pos_table = np.ascontiguousarray(full.pos_table[spec.offset : spec.offset + spec.block])
    return DistParameters(spec=spec, params=p)


def slice_batch(x: np.ndarray, spec: ShardSpec) -> np.ndarray:
    """This worker's columns of a (batch, seq_len) token or target array."""
    if x.shape[1] != spec.seq_len:
        raise ShapeError(f"expected {spec.seq_len} columns, got {x.shape[1]}")
    return np.ascontiguousarray(x[:, spec.offset : spec.offset + spec.block])


def reassemble_positions(workers: list[DistParameters]) -> np.ndarray:
    """Concatenate position-table shards back into the full table."""
    ordered = sorted(workers, key=lambda d: d.spec.rank)
    return np.concatenate([d.params.pos_table for d in ordered], axis=0)


def reassemble_params(workers: list[DistParameters]) -> Parameters:
    """Full parameter set from worker replicas (rank 0's copy + all PE rows)."""
    full = workers[0].params.copy()
    full.pos_table = reassemble_positions(workers)
    return full


@dataclass
class ShardedCache:
    embed: model.EmbedCache
    layers: list[model.LayerCache]
    head: model.HeadCache
    policy: DropoutPolicy
    fused: bool


def forward(
    comm: Communicator,
    group: WorkerGroup,
    dist: DistParameters,
    cfg: ModelConfig,
    tokens_seg: np.ndarray,
    targets_seg: np.ndarray | None,
    *,
    policy: DropoutPolicy | None = None,
    step: int = 0,
    counters: StepCounters | None = None,
    fused: bool = True,
) -> tuple[float | None, ShardedCache]:
    """Forward over this worker's block; returns its partial loss (the mean
    cross-entropy over its own tokens)."""
    spec, params = dist.spec, dist.params
    # spec.rank is the position inside the sequence group; collectives
    # address workers by their group member id (world rank).
    wrank = group.members[spec.rank]
    policy = policy if policy is not None else DropoutPolicy.off()
    if tokens_seg.shape[1] != spec.block:
        raise ShapeError(f"token block has {tokens_seg.shape[1]} columns, expected {spec.block}")
    x, e_cache = model.embed_fwd(params, cfg, tokens_seg, spec.offset, policy)
    caches = []
    for li, lp in enumerate(params.layers):
        if fused:
            def kv_fwd(xh, lp, _li=li):
                xh_full = comm.all_gather(
                    group, wrank, xh, dim=1, step=step, phase="forward", layer=_li
                )
                return model.linear3(xh_full, lp.attn_k), model.linear3(xh_full, lp.attn_v), xh_full
        else:
            def kv_fwd(xh, lp, _li=li):
                k = comm.all_gather(
                    group, wrank, model.linear3(xh, lp.attn_k),
                    dim=1, step=step, phase="forward", layer=_li,
                )
                v = comm.all_gather(
                    group, wrank, model.linear3(xh, lp.attn_v),
                    dim=1, step=step, phase="forward", layer=_li,
                )
                return k, v, xh
        x, c = model.layer_fwd(lp, cfg, policy, li, x, spec.offset, kv_fwd, counters)
        caches.append(c)
    partial_loss, h_cache = model.head_fwd(x, params, targets_seg)
    return partial_loss, ShardedCache(e_cache, caches, h_cache, policy, fused)


def backward(
    comm: Communicator,
    group: WorkerGroup,
    dist: DistParameters,
    cfg: ModelConfig,
    cache: ShardedCache,
    *,
    step: int = 0,
) -> Parameters:
    """Gradients of this worker's partial loss, with cross-worker credit
    collected through one reduce-scatter per layer.

    The returned position-row gradient is already scaled so that, like the
    replicated parameters after averaging, it equals the gradient of the
    group-mean loss: the reduce-scatter hands the owner the *sum* of every
    worker's contribution to its rows, so the owner divides by the group
    size once.
    """
    spec, params = dist.spec, dist.params
    wrank = group.members[spec.rank]
    policy = cache.policy
    grad_x, final_gain_g, final_bias_g, head_wg, head_bg = model.head_bwd(cache.head, params)
    layer_grads: list[model.LayerParams | None] = [None] * len(params.layers)
    for li in range(len(params.layers) - 1, -1, -1):
        if cache.fused:
            def kv_bwd(kv_ctx, lp, grad_k, grad_v, _li=li):
                grad_full, k_wg, k_bg, v_wg, v_bg = model.local_kv_bwd(kv_ctx, lp, grad_k, grad_v)
                grad_seg = comm.reduce_scatter(
                    group, wrank, grad_full, dim=1, step=step, phase="backward", layer=_li
                )
                return grad_seg, k_wg, k_bg, v_wg, v_bg
        else:
            def kv_bwd(kv_ctx, lp, grad_k, grad_v, _li=li):
                gk_seg = comm.reduce_scatter(
                    group, wrank, grad_k, dim=1, step=step, phase="backward", layer=_li
                )
                gv_seg = comm.reduce_scatter(
                    group, wrank, grad_v, dim=1, step=step, phase="backward", layer=_li
                )
                grad_kx, k_wg, k_bg = model.linear3_bwd(kv_ctx, lp.attn_k, gk_seg)
                grad_vx, v_wg, v_bg = model.linear3_bwd(kv_ctx, lp.attn_v, gv_seg)
                return grad_kx + grad_vx, k_wg, k_bg, v_wg, v_bg
        grad_x, layer_grads[li] = model.layer_bwd(
            params.layers[li], cfg, policy, li, cache.layers[li], grad_x, kv_bwd
        )
    grad_tok, grad_pe = model.embed_bwd(cache.embed, cfg.vocab, policy, grad_x)
    if group.size > 1:
        grad_pe = grad_pe / group.size
    return Parameters(
        token_table=grad_tok,
        pos_table=grad_pe,
        layers=layer_grads,
        final_gain=final_gain_g,
        final_bias=final_bias_g,
        head=model.LinearParams(head_wg, head_bg),
    )


def sync(
    comm: Communicator,
    group: WorkerGroup,
    rank: int,
    grads: Parameters,
    *,
    step: int = 0,
    extra: float | None = None,
) -> tuple[Parameters, float | None]:
    """Average every gradient except the position rows across the group.

    All gradients travel in one flat all-reduce, so the ledger gains exactly
    one sync record per step.  ``extra`` (typically this worker's partial
    loss) rides along as a single trailing element and comes back averaged.
    """
    shared = [(n, a) for n, a in grads.named_arrays() if n != "pos_table"]
    vec = model.flatten_arrays([a for _, a in shared])
    if extra is not None:
        vec = np.concatenate([vec, np.array([extra], dtype=vec.dtype)])
    out = comm.all_reduce_mean(group, rank, vec, step=step, phase="sync")
    extra_mean = float(out[-1]) if extra is not None else None
    if extra is not None:
        out = out[: vec.size - 1]
    averaged = iter(model.unflatten_like(out, [a for _, a in shared]))
    merged = [a if n == "pos_table" else next(averaged) for n, a in grads.named_arrays()]
    return grads.replace_arrays(merged), extra_mean


def train_step(
    comm: Communicator,
    group: WorkerGroup,
    dist: DistParameters,
    cfg: ModelConfig,
    tokens_seg: np.ndarray,
    targets_seg: np.ndarray,
    *,
    lr: float,
    policy: DropoutPolicy | None = None,
    step: int = 0,
    fused: bool = True,
) -> tuple[float, StepCounters]:
    """forward -> backward -> gradient sync -> SGD; returns the group-mean
    loss (identical on every worker) and this worker's counters."""
    counters = StepCounters()
    with tensor.counting(counters):
        partial_loss, cache = forward(
            comm, group, dist, cfg, tokens_seg, targets_seg,
            policy=policy, step=step, counters=counters, fused=fused,
        )
        grads = backward(comm, group, dist, cfg, cache, step=step)
        grads, mean_loss = sync(
            comm, group, group.members[dist.spec.rank], grads, step=step, extra=partial_loss
        )
        dist.params = model.sgd_step(dist.params, grads, lr)
    return mean_loss, counters


@dataclass
class ShardedRun:
    """Everything the orchestrator gets back from a multi-step run."""

    comm: Communicator
    workers: list[DistParameters]
    step_losses: list[float]
    partial_losses: list[list[float]]  # [worker][step]
    counters: list[list[StepCounters]]  # [worker][step]
    grad_norms: list[list[float]]  # [worker][step], post-sync
    last_grads: list[Parameters] | None  # post-sync grads of the final step


def run_steps(
    cfg: ModelConfig,
    params_full: Parameters,
    n_workers: int,
    batches: list[tuple[np.ndarray, np.ndarray]],
    *,
    lr: float,
    policy: DropoutPolicy | None = None,
    fused: bool = True,
    optimizer: str = "sgd",
    keep_last_grads: bool = False,
    timeout: float = 60.0,
) -> ShardedRun:
    """Drive ``len(batches)`` training steps on ``n_workers`` worker threads.

    ``batches`` holds full-width (tokens, targets) pairs; each worker slices
    out its own block.  The per-step dropout policy is derived on every
    worker identically via ``policy.at_step(step)``.
    """
    from . import optim

    comm = Communicator(n_workers, timeout=timeout)
    group = comm.group("sequence", tuple(range(n_workers)))
    base_policy = policy if policy is not None else DropoutPolicy.off()

    def worker(rank: int):
        spec = ShardSpec(rank, n_workers, cfg.seq_len)
        dist = shard_params(params_full, spec)
        update = optim.make_update(optimizer, dist.params, lr)
        losses, partials, counts, norms, grads_out = [], [], [], [], None
        for s, (tokens, targets) in enumerate(batches):
            step_policy = base_policy.at_step(s) if base_policy.active else base_policy
            tok_seg, tgt_seg = slice_batch(tokens, spec), slice_batch(targets, spec)
            counters = StepCounters()
            with tensor.counting(counters):
                partial, cache = forward(
                    comm, group, dist, cfg, tok_seg, tgt_seg,
                    policy=step_policy, step=s, counters=counters, fused=fused,
                )
                grads = backward(comm, group, dist, cfg, cache, step=s)
                grads, mean_loss = sync(comm, group, rank, grads, step=s, extra=partial)
                dist.params = update(dist.params, grads)
            if keep_last_grads and s == len(batches) - 1:
                grads_out = grads
            losses.append(mean_loss)
            partials.append(partial)
            counts.append(counters)
            norms.append(model.grad_norm(grads))
        return dist, losses, partials, counts, norms, grads_out

    results = run_workers(n_workers, worker, comm=comm)
    return ShardedRun(
        comm=comm,
        workers=[r[0] for r in results],
        step_losses=results[0][1],
        partial_losses=[r[2] for r in results],
        counters=[r[3] for r in results],
        grad_norms=[r[4] for r in results],
        last_grads=[r[5] for r in results] if keep_last_grads else None,
    )
