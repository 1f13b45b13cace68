"""Command-line interface.

    seqpar train  --engine sharded --workers 2 --steps 200 --out runs/demo
    seqpar verify --engines sharded,baseline,hybrid --workers 1,2,4
    seqpar cost   --seq-len 348 --workers 6 [--weak-scaling]
    seqpar ledger runs/demo/ledger.jsonl [--step 0]

Flags mirror the run-config fields.  ``--config FILE`` loads a JSON run
config (same keys as the flags, model fields nested under "model") whose
values override any flags; the ``SEQPAR_OUTPUT_DIR`` environment variable
overrides the output directory last.  Any engine error exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from dataclasses import replace

from . import costs, runner
from .collectives import CommLedger
from .model import ModelConfig
from .runner import RunConfig


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    m = runner.default_model()
    g = p.add_argument_group("model")
    g.add_argument("--embed-dim", type=int, default=m.embed_dim)
    g.add_argument("--layers", type=int, default=m.n_layers)
    g.add_argument("--heads", type=int, default=m.n_heads)
    g.add_argument("--ff-dim", type=int, default=m.ff_dim)
    g.add_argument("--vocab", type=int, default=m.vocab)
    g.add_argument("--seq-len", type=int, default=m.seq_len)
    g.add_argument("--batch", type=int, default=m.batch)
    g.add_argument("--dropout", type=float, default=m.dropout)
    g.add_argument("--precision", choices=("double", "single"), default=m.precision)


def _model_from(args) -> ModelConfig:
    return ModelConfig(
        embed_dim=args.embed_dim, n_layers=args.layers, n_heads=args.heads,
        ff_dim=args.ff_dim, vocab=args.vocab, seq_len=args.seq_len,
        batch=args.batch, dropout=args.dropout, precision=args.precision,
    )


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _cmd_train(args) -> int:
    run_dict = {
        "model": _model_from(args).to_dict(),
        "engine": args.engine,
        "workers": args.workers,
        "replicas": args.replicas,
        "steps": args.steps,
        "lr": args.lr,
        "optimizer": args.optimizer,
        "seed": args.seed,
        "dataset": args.dataset,
        "synthetic_bytes": args.synthetic_bytes,
        "out_dir": args.out,
        "fused": not args.no_fuse,
        "equivalence_check": args.check,
    }
    if args.config:
        with open(args.config, "r", encoding="ascii") as f:
            overrides = json.load(f)
        model_overrides = overrides.pop("model", {})
        run_dict["model"].update(model_overrides)
        run_dict.update(overrides)
    rc = RunConfig.from_dict(run_dict)
    result = runner.run_experiment(rc, echo=print)
    if rc.equivalence_check and not result.summary.get("equivalence_pass", True):
        return 1
    return 0


def _cmd_verify(args) -> int:
    cfg = _model_from(args)
    rows = runner.verify_equivalence(
        cfg,
        engines=tuple(args.engines.split(",")),
        workers=_int_list(args.workers),
        replicas=_int_list(args.replicas),
        steps=args.steps,
        lr=args.lr,
        seed=args.seed,
        tolerance=args.tolerance,
    )
    print(f"{'engine':<10} {'grid':>7} {'max |delta param|':>18}  result")
    for r in rows:
        grid = f"{r['replicas']}x{r['workers']}"
        print(f"{r['engine']:<10} {grid:>7} {r['max_param_delta']:>18.3e}  "
              f"{'pass' if r['pass'] else 'FAIL'}")
    return 0 if all(r["pass"] for r in rows) else 1


def _cmd_cost(args) -> int:
    cfg = _model_from(args)
    if args.weak_scaling:
        ratios = costs.weak_scaling_ratios(cfg)
        print(f"{'workers':>8} {'seq_len':>8} {'score elems/worker':>20} {'ratio':>6}")
        for (n, l), ratio in zip(costs.WEAK_SCALING_SCHEDULE, ratios):
            est = costs.estimate(replace(cfg, seq_len=l), n, "sharded")
            print(f"{n:>8} {l:>8} {est.score_elements_peak:>20} {ratio:>6}")
        return 0
    for n in _int_list(args.workers):
        est = costs.estimate(cfg, n, args.engine, fused=not args.no_fuse)
        print(f"engine={est.engine} workers={n} block={est.block}")
        print(f"  score flops (fwd)       {est.score_flops}")
        print(f"  score elements (peak)   {est.score_elements_peak}")
        print(f"  projection flops (fwd)  {est.proj_flops}")
        print(f"  ffn flops (fwd)         {est.ffn_flops}")
        print(f"  head flops (fwd)        {est.head_flops}")
        print(f"  collectives per step    {est.collectives_per_step}")
        print(f"  comm elements per step  {est.comm_elements_per_step}")
        for k, v in est.complexity.items():
            print(f"  {k:<23} {v}")
    return 0


def _cmd_ledger(args) -> int:
    with open(args.path, "r", encoding="ascii") as f:
        ledger = CommLedger.from_jsonl(f.read())
    records = ledger.records
    if args.step is not None:
        records = [r for r in records if r.step == args.step]
    if not records:
        print("no records")
        return 0
    steps = sorted({r.step for r in records})
    print(f"{len(records)} records over steps {steps[0]}..{steps[-1]}")
    by_kind = Counter(r.kind for r in records)
    for kind in sorted(by_kind):
        print(f"  {kind:<16} {by_kind[kind]}")
    per_step = Counter(r.step for r in records)
    sizes = sorted(set(per_step.values()))
    print(f"records per step: {sizes[0]}" + (f"..{sizes[-1]}" if len(sizes) > 1 else ""))
    layer_tagged = [r for r in records if r.layer is not None]
    print(f"layer-tagged: {len(layer_tagged)} "
          f"({len(layer_tagged) // max(1, len(per_step))} per step)")
    by_phase = Counter(r.phase for r in records)
    for phase in sorted(by_phase):
        print(f"  phase {phase:<10} {by_phase[phase]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="seqpar",
        description="Train small byte-level transformers with sequence-parallel workers.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training experiment and write artifacts")
    _add_model_flags(t)
    t.add_argument("--engine", choices=runner.ENGINES, default="sequential")
    t.add_argument("--workers", type=int, default=1, help="sequence-group size")
    t.add_argument("--replicas", type=int, default=1, help="data-parallel rows (hybrid)")
    t.add_argument("--steps", type=int, default=10)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dataset", default=None, help="byte corpus path; omit for synthetic")
    t.add_argument("--synthetic-bytes", type=int, default=1_000_000)
    t.add_argument("--out", default="runs/latest", help="output directory")
    t.add_argument("--no-fuse", action="store_true",
                   help="gather keys and values separately (ablation)")
    t.add_argument("--check", action="store_true",
                   help="also run the sequential oracle and report max param delta")
    t.add_argument("--config", default=None, help="JSON run config; overrides flags")
    t.set_defaults(fn=_cmd_train)

    v = sub.add_parser("verify", help="oracle-equivalence matrix over engines and grids")
    _add_model_flags(v)
    v.add_argument("--engines", default="sharded,baseline")
    v.add_argument("--workers", default="1,2,4")
    v.add_argument("--replicas", default="2")
    v.add_argument("--steps", type=int, default=3)
    v.add_argument("--lr", type=float, default=0.2)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, default=1e-8)
    v.set_defaults(fn=_cmd_verify)

    c = sub.add_parser("cost", help="closed-form cost estimates")
    _add_model_flags(c)
    c.add_argument("--engine", choices=costs.ENGINES, default="sharded")
    c.add_argument("--workers", default="1")
    c.add_argument("--no-fuse", action="store_true")
    c.add_argument("--weak-scaling", action="store_true",
                   help="print the fixed worker/sequence-length schedule table")
    c.set_defaults(fn=_cmd_cost)

    led = sub.add_parser("ledger", help="summarize a ledger.jsonl export")
    led.add_argument("path")
    led.add_argument("--step", type=int, default=None)
    led.set_defaults(fn=_cmd_ledger)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
