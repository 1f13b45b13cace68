"""Experiment runner: one entry point that builds a model, drives the
chosen engine for a number of steps, and writes every artifact of the run.

Output files (all under the run's output directory):
    steps.jsonl     one StepReport per training step
    ledger.jsonl    every collective the run performed
    summary.json    machine-readable run summary (incl. estimate-vs-measured)
    summary.txt     the same, human-readable, with a coarse loss curve
    checkpoint.bin  final parameters with config header
    synthetic_corpus.txt   only when no dataset path was given

Config precedence, weakest to strongest: RunConfig defaults, CLI flags,
config-file values, then the ``SEQPAR_OUTPUT_DIR`` environment variable for
the output directory alone.
"""

from __future__ import annotations

import json
import os
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import baseline, costs, data, hybrid, model, optim, reporting, sharded, tensor
from .collectives import CommLedger
from .hybrid import GridLayout
from .model import ModelConfig, Parameters
from .nnops import DropoutPolicy
from .reporting import StepReport
from .tensor import StepCounters

ENGINES = ("sequential", "sharded", "baseline", "hybrid")

OUTPUT_DIR_ENV = "SEQPAR_OUTPUT_DIR"

# Trailing-window width for the smoothed loss in summaries.
SMOOTH_WINDOW = 50


def default_model() -> ModelConfig:
    """Small byte-level config that trains visibly in a few hundred steps."""
    return ModelConfig(
        embed_dim=64, n_layers=2, n_heads=8, ff_dim=256,
        vocab=256, seq_len=128, batch=4, dropout=0.0,
    )


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; flags, config files and tests all build this."""

    model: ModelConfig = field(default_factory=default_model)
    engine: str = "sequential"
    workers: int = 1          # sequence-group size
    replicas: int = 1         # data-parallel grid rows (hybrid only)
    steps: int = 10
    lr: float = 0.1
    optimizer: str = "sgd"
    seed: int = 0
    dataset: str | None = None
    synthetic_bytes: int = 1_000_000
    out_dir: str = "runs/latest"
    fused: bool = True
    equivalence_check: bool = False

    def __post_init__(self) -> None:
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}, expected one of {ENGINES}")
        if self.workers < 1 or self.replicas < 1:
            raise ValueError("workers and replicas must be positive")
        if self.engine == "sequential" and (self.workers != 1 or self.replicas != 1):
            raise ValueError("the sequential engine runs on a single worker")
        if self.engine in ("sharded", "baseline") and self.replicas != 1:
            raise ValueError(f"the {self.engine} engine takes replicas=1; use engine=hybrid")
        if self.model.seq_len % self.workers != 0:
            raise ValueError(
                f"sequence length {self.model.seq_len} not divisible by {self.workers} workers"
            )
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.optimizer not in optim.OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer != "sgd" and self.engine in ("baseline", "hybrid"):
            raise ValueError(f"the {self.engine} engine supports only sgd")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "engine": self.engine,
            "workers": self.workers,
            "replicas": self.replicas,
            "steps": self.steps,
            "lr": self.lr,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "dataset": self.dataset,
            "synthetic_bytes": self.synthetic_bytes,
            "out_dir": self.out_dir,
            "fused": self.fused,
            "equivalence_check": self.equivalence_check,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        extra = set(d) - {f for f in cls.__dataclass_fields__}
        if extra:
            raise ValueError(f"unknown run-config keys: {sorted(extra)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class RunResult:
    config: RunConfig
    out_dir: str
    reports: list[StepReport]
    summary: dict
    final_params: Parameters


def _policy(rc: RunConfig) -> DropoutPolicy:
    if rc.model.dropout > 0.0:
        return DropoutPolicy(rate=rc.model.dropout, seed=rc.seed)
    return DropoutPolicy.off()


def _resolve_out_dir(rc: RunConfig) -> str:
    return os.environ.get(OUTPUT_DIR_ENV) or rc.out_dir


def _corpus(rc: RunConfig, out_dir: str) -> np.ndarray:
    if rc.dataset is not None:
        return data.read_bytes(rc.dataset)
    path = os.path.join(out_dir, "synthetic_corpus.txt")
    data.write_synthetic_corpus(path, n_bytes=rc.synthetic_bytes, seed=rc.seed)
    return data.read_bytes(path)


def _sequential_steps(
    cfg: ModelConfig,
    params: Parameters,
    batches: list[tuple[np.ndarray, np.ndarray]],
    *,
    lr: float,
    policy: DropoutPolicy,
    optimizer: str = "sgd",
):
    """Single-worker training loop; the oracle everything else is judged by."""
    update = optim.make_update(optimizer, params, lr)
    losses, norms, counts = [], [], []
    for s, (tokens, targets) in enumerate(batches):
        step_policy = policy.at_step(s) if policy.active else policy
        counters = StepCounters()
        with tensor.counting(counters):
            loss, cache = model.forward(
                params, cfg, tokens, targets, policy=step_policy, counters=counters
            )
            grads = model.backward(params, cfg, cache)
            params = update(params, grads)
        losses.append(loss)
        norms.append(model.grad_norm(grads))
        counts.append(counters)
    return params, losses, norms, counts


def _collectives_by_kind(ledger: CommLedger, step: int) -> dict[str, int]:
    return dict(sorted(Counter(r.kind for r in ledger.select(step=step)).items()))


def run_experiment(rc: RunConfig, *, echo=None) -> RunResult:
    """Execute ``rc`` and write all report files.  ``echo`` (e.g. ``print``)
    receives progress lines; None keeps the run silent."""
    say = echo or (lambda *_: None)
    out_dir = _resolve_out_dir(rc)
    os.makedirs(out_dir, exist_ok=True)
    cfg = rc.model
    corpus = _corpus(rc, out_dir)
    policy = _policy(rc)
    params0 = model.init_params(cfg, rc.seed)
    say(f"engine={rc.engine} workers={rc.workers} replicas={rc.replicas} "
        f"steps={rc.steps} params={model.param_count(params0)}")

    t0 = time.perf_counter()
    if rc.engine == "hybrid":
        batches_grid = [
            [data.batch_at(corpus, cfg.seq_len, cfg.batch, s * rc.replicas + d)
             for d in range(rc.replicas)]
            for s in range(rc.steps)
        ]
        run = hybrid.run_steps(
            cfg, params0, GridLayout(rc.replicas, rc.workers), batches_grid,
            lr=rc.lr, policy=policy, fused=rc.fused, timeout=600.0,
        )
        losses, norms = run.step_losses, run.grad_norms[0]
        counts = [
            max((run.counters[w][s] for w in range(len(run.counters))),
                key=lambda c: c.attn_score_flops)
            for s in range(rc.steps)
        ]
        ledger = run.comm.ledger
        final_params = hybrid.reassemble_params(run)
    else:
        batches = [data.batch_at(corpus, cfg.seq_len, cfg.batch, s) for s in range(rc.steps)]
        if rc.engine == "sequential":
            final_params, losses, norms, counts = _sequential_steps(
                cfg, params0, batches, lr=rc.lr, policy=policy, optimizer=rc.optimizer
            )
            ledger = CommLedger()
        elif rc.engine == "sharded":
            run = sharded.run_steps(
                cfg, params0, rc.workers, batches,
                lr=rc.lr, policy=policy, fused=rc.fused,
                optimizer=rc.optimizer, timeout=600.0,
            )
            losses, norms = run.step_losses, run.grad_norms[0]
            counts = [run.counters[0][s] for s in range(rc.steps)]
            ledger = run.comm.ledger
            final_params = sharded.reassemble_params(run.workers)
        else:
            run = baseline.run_steps(
                cfg, params0, rc.workers, batches, lr=rc.lr, policy=policy, timeout=600.0,
            )
            losses, norms = run.step_losses, run.grad_norms[0]
            counts = [run.counters[0][s] for s in range(rc.steps)]
            ledger = run.comm.ledger
            final_params = run.workers[0]
    elapsed = time.perf_counter() - t0

    reports = [
        reporting.from_counters(
            s, rc.engine, losses[s], norms[s], counts[s], _collectives_by_kind(ledger, s)
        )
        for s in range(rc.steps)
    ]
    stride = max(1, rc.steps // 10)
    for r in reports[::stride]:
        say(f"step {r.step:5d}  loss {r.loss:.4f}")

    window = losses[-min(SMOOTH_WINDOW, len(losses)):]
    est_engine = "sharded" if rc.engine == "hybrid" else rc.engine
    est = costs.estimate(cfg, rc.workers, est_engine, fused=rc.fused)
    summary = {
        "engine": rc.engine,
        "workers": rc.workers,
        "replicas": rc.replicas,
        "steps": rc.steps,
        "seed": rc.seed,
        "optimizer": rc.optimizer,
        "lr": rc.lr,
        "param_count": model.param_count(params0),
        "initial_loss": losses[0],
        "final_loss": losses[-1],
        "smoothed_final_loss": float(sum(window) / len(window)),
        "elapsed_seconds": round(elapsed, 3),
        "ledger_records": len(ledger.records),
        "collectives_step0": _collectives_by_kind(ledger, 0),
        "measured_score_flops": counts[0].attn_score_flops,
        "estimated_score_flops": est.score_flops,
        "score_flops_delta": counts[0].attn_score_flops - est.score_flops,
        "measured_score_elements_peak": counts[0].attn_score_elements_peak,
        "estimated_score_elements_peak": est.score_elements_peak,
        "estimated_collectives_per_step": est.collectives_per_step,
    }

    if rc.equivalence_check:
        summary["max_param_delta"] = _oracle_delta(rc, cfg, params0, corpus, policy, final_params)
        summary["equivalence_pass"] = bool(summary["max_param_delta"] < 1e-8)
        say(f"equivalence max |delta param| = {summary['max_param_delta']:.3e}")

    _write_outputs(out_dir, rc, reports, ledger, summary, final_params)
    say(f"final loss {losses[-1]:.4f} (smoothed {summary['smoothed_final_loss']:.4f}) "
        f"in {elapsed:.1f}s; artifacts in {out_dir}")
    return RunResult(rc, out_dir, reports, summary, final_params)


def _oracle_delta(rc, cfg, params0, corpus, policy, final_params) -> float:
    """Max |param difference| against a sequential rerun with the same seed."""
    if rc.engine == "hybrid":
        oracle_batches = []
        for s in range(rc.steps):
            rows = [data.batch_at(corpus, cfg.seq_len, cfg.batch, s * rc.replicas + d)
                    for d in range(rc.replicas)]
            oracle_batches.append((
                np.concatenate([t for t, _ in rows], axis=0),
                np.concatenate([g for _, g in rows], axis=0),
            ))
    else:
        oracle_batches = [
            data.batch_at(corpus, cfg.seq_len, cfg.batch, s) for s in range(rc.steps)
        ]
    oracle, _, _, _ = _sequential_steps(
        cfg, params0, oracle_batches, lr=rc.lr, policy=policy, optimizer=rc.optimizer
    )
    return max(
        float(np.max(np.abs(a - b))) if a.size else 0.0
        for a, b in zip(final_params.arrays(), oracle.arrays())
    )


def _write_outputs(out_dir, rc, reports, ledger, summary, final_params) -> None:
    reporting.write_jsonl(os.path.join(out_dir, "steps.jsonl"), reports)
    with open(os.path.join(out_dir, "ledger.jsonl"), "w", encoding="ascii") as f:
        f.write(ledger.to_jsonl())
    summary = dict(summary)
    summary["files"] = ["steps.jsonl", "ledger.jsonl", "summary.json", "summary.txt",
                        "checkpoint.bin"]
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="ascii") as f:
        json.dump({"config": rc.to_dict(), "summary": summary}, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="ascii") as f:
        f.write(_summary_text(rc, reports, summary))
    model.save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), final_params, rc.model, rc.seed)


def _summary_text(rc, reports, summary) -> str:
    lines = [
        f"engine            {summary['engine']}",
        f"grid              {summary['replicas']} x {summary['workers']} workers",
        f"steps             {summary['steps']}",
        f"optimizer         {summary['optimizer']} (lr {summary['lr']})",
        f"parameters        {summary['param_count']}",
        f"initial loss      {summary['initial_loss']:.6f}",
        f"final loss        {summary['final_loss']:.6f}",
        f"smoothed loss     {summary['smoothed_final_loss']:.6f}",
        f"elapsed           {summary['elapsed_seconds']} s",
        f"ledger records    {summary['ledger_records']}",
        f"collectives/step  {summary['collectives_step0']}"
        f" (estimated total {summary['estimated_collectives_per_step']})",
        f"score flops       measured {summary['measured_score_flops']}"
        f" estimated {summary['estimated_score_flops']}"
        f" delta {summary['score_flops_delta']}",
        f"score elements    measured {summary['measured_score_elements_peak']}"
        f" estimated {summary['estimated_score_elements_peak']}",
    ]
    if "max_param_delta" in summary:
        lines.append(
            f"equivalence       max |delta param| {summary['max_param_delta']:.3e}"
            f" ({'pass' if summary['equivalence_pass'] else 'FAIL'})"
        )
    lines.append("")
    lines.append("loss curve:")
    stride = max(1, len(reports) // 20)
    for r in reports[::stride]:
        lines.append(f"  step {r.step:5d}  loss {r.loss:.6f}")
    if reports[-1].step % stride != 0:
        lines.append(f"  step {reports[-1].step:5d}  loss {reports[-1].loss:.6f}")
    return "\n".join(lines) + "\n"


def verify_equivalence(
    cfg: ModelConfig,
    *,
    engines: tuple[str, ...] = ("sharded", "baseline"),
    workers: tuple[int, ...] = (1, 2, 4),
    replicas: tuple[int, ...] = (2,),
    steps: int = 3,
    lr: float = 0.2,
    seed: int = 0,
    tolerance: float = 1e-8,
) -> list[dict]:
    """Train each engine/grid combination against the sequential oracle on
    identical synthetic batches; one result row per combination."""
    rng = np.random.default_rng(seed)
    batches = [
        (
            rng.integers(0, cfg.vocab, size=(cfg.batch, cfg.seq_len)),
            rng.integers(0, cfg.vocab, size=(cfg.batch, cfg.seq_len)),
        )
        for _ in range(steps)
    ]
    policy = DropoutPolicy(rate=cfg.dropout, seed=seed) if cfg.dropout > 0 else DropoutPolicy.off()
    params0 = model.init_params(cfg, seed)
    oracle, oracle_losses, _, _ = _sequential_steps(
        cfg, params0, batches, lr=lr, policy=policy
    )

    rows = []
    for engine in engines:
        if engine == "hybrid":
            if policy.active:
                raise ValueError("hybrid verification requires dropout off")
            for d in replicas:
                for n in workers:
                    if cfg.seq_len % n:
                        continue
                    grid_batches = [
                        [
                            (
                                rng.integers(0, cfg.vocab, size=(cfg.batch, cfg.seq_len)),
                                rng.integers(0, cfg.vocab, size=(cfg.batch, cfg.seq_len)),
                            )
                            for _ in range(d)
                        ]
                        for _ in range(steps)
                    ]
                    combined = [
                        (
                            np.concatenate([t for t, _ in row], axis=0),
                            np.concatenate([g for _, g in row], axis=0),
                        )
                        for row in grid_batches
                    ]
                    hybrid_oracle, _, _, _ = _sequential_steps(
                        cfg, params0, combined, lr=lr, policy=policy
                    )
                    run = hybrid.run_steps(
                        cfg, params0, GridLayout(d, n), grid_batches, lr=lr, policy=policy
                    )
                    got = hybrid.reassemble_params(run)
                    rows.append(_verify_row(engine, n, d, got, hybrid_oracle, None, None, tolerance))
            continue
        for n in workers:
            if cfg.seq_len % n:
                continue
            if engine == "sharded":
                run = sharded.run_steps(cfg, params0, n, batches, lr=lr, policy=policy)
                got = sharded.reassemble_params(run.workers)
                loss = run.step_losses[-1]
            else:
                run = baseline.run_steps(cfg, params0, n, batches, lr=lr, policy=policy)
                got = run.workers[0]
                loss = run.step_losses[-1]
            rows.append(_verify_row(engine, n, 1, got, oracle, loss, oracle_losses[-1], tolerance))
    return rows


def _verify_row(engine, workers, replicas, got, oracle, loss, oracle_loss, tolerance) -> dict:
    delta = max(
        float(np.max(np.abs(a - b))) if a.size else 0.0
        for a, b in zip(got.arrays(), oracle.arrays())
    )
    row = {
        "engine": engine,
        "workers": workers,
        "replicas": replicas,
        "max_param_delta": delta,
        "pass": bool(delta < tolerance),
    }
    if loss is not None:
        row["loss_delta"] = abs(loss - oracle_loss)
    return row
