"""Command-line interface.

Subcommands: train, eval, cost, sweep, analyze, baseline. Exit codes:
0 success, 2 usage/config errors, 3 numeric failure during training,
4 corrupt checkpoint. Environment variables GATEVIT_OUT and
GATEVIT_THREADS override only the output directory and thread count.

Heavy imports happen after the thread count is fixed so the numeric
backend sees the right limits; the default of one thread keeps runs
bitwise reproducible.
"""

import argparse
import json
import os
import sys


def build_parser():
    p = argparse.ArgumentParser(prog="gatevit",
                                description="adaptive-gated ViT workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads for the numeric backend (default 1)")
        sp.add_argument("--overwrite", action="store_true",
                        help="allow writing into a non-empty run directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True,
                            help="trained model checkpoint")

    common(sub.add_parser("train", help="train a model and write a run dir"))
    common(sub.add_parser("eval", help="evaluate a checkpoint"),
           checkpoint=True)

    sp = sub.add_parser("cost", help="print the analytic FLOPs table")
    common(sp)
    sp.add_argument("--policies", help="policies.jsonl to cost a sample from")
    sp.add_argument("--sample", type=int, default=0,
                    help="sample id within --policies")

    common(sub.add_parser("sweep", help="train one run per sweep budget"))

    sp = sub.add_parser("analyze", help="recompute stats from a run dir")
    sp.add_argument("--run", required=True, help="existing run directory")
    sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("baseline", help="upperbound / random / random_plus")
    common(sp, checkpoint=True)
    sp.add_argument("--kind", required=True,
                    choices=("upperbound", "random", "random_plus"))
    sp.add_argument("--match-run", dest="match_run",
                    help="run dir whose learned policy sets the usage profile")
    return p


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _resolve_out(args, rc):
    out = os.environ.get("GATEVIT_OUT") or args.out or rc.out
    if not out:
        raise_config("an output directory is required (--out, config 'out', "
                     "or GATEVIT_OUT)")
    return out


def raise_config(msg):
    from .errors import ConfigError
    raise ConfigError(msg)


def _load(args):
    from dataclasses import replace

    from .runconfig import load_config
    rc = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        rc = replace(rc, seed=args.seed)
    return rc


def _print_cost_table(report):
    parts = ("qkv_proj", "attn_logits", "attn_apply", "out_proj", "ffn",
             "decision_net", "norms_residual")
    header = f"{'block':>5} " + " ".join(f"{k:>14}" for k in parts) \
        + f" {'total':>14}"
    print(header)
    for i, blk in enumerate(report.per_block):
        row = f"{i:>5} " + " ".join(f"{blk[k]:>14}" for k in parts)
        print(row + f" {sum(blk.values()):>14}")
    print(f"{'embed':>5} {report.embed:>14}")
    print(f"{'class':>5} {report.classifier:>14}")
    print(f"total flops: {report.total}  ({report.gflops:.3g} GFLOPs)")
    print(f"mean kept: patches {report.kept_patches:.2f}  "
          f"heads {report.kept_heads:.2f}  blocks {report.kept_blocks:.2f}")


def _cmd_train(args):
    from .harness import run_train
    rc = _load(args)
    out = _resolve_out(args, rc)
    result = run_train(rc, out, overwrite=args.overwrite)
    print(f"run complete: top1={result['row']['top1']:.4f} "
          f"gflops={result['row']['gflops']:.3g} -> {out}")
    return 0


def _cmd_eval(args):
    from .harness import run_eval
    rc = _load(args)
    out = _resolve_out(args, rc)
    if not os.path.exists(args.checkpoint):
        raise_config(f"checkpoint not found: {args.checkpoint}")
    result = run_eval(rc, args.checkpoint, out, overwrite=args.overwrite)
    print(f"eval: top1={result['row']['top1']:.4f} "
          f"gflops={result['row']['gflops']:.3g} -> {out}")
    return 0


def _cmd_cost(args):
    from .costmodel import policy_flops, static_flops
    from .harness import read_policies
    from .training import gates_from_record
    rc = _load(args)
    if args.policies:
        records = read_policies(args.policies)
        rec = next((r for r in records if r["sample_id"] == args.sample), None)
        if rec is None:
            raise_config(f"sample {args.sample} not in {args.policies}")
        report = policy_flops(rc.model, gates_from_record(rec), rc.head_mode)
        print(f"policy cost for sample {args.sample}:")
    else:
        report = static_flops(rc.model)
        print("static cost (all patches, heads and blocks active):")
    _print_cost_table(report)
    out = os.environ.get("GATEVIT_OUT") or args.out
    if out:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, "cost.json")
        with open(path, "w") as f:
            f.write(report.to_json() + "\n")
        print(f"wrote {path}")
    return 0


def _cmd_sweep(args):
    from .harness import sweep_budgets
    rc = _load(args)
    out = _resolve_out(args, rc)
    rows = sweep_budgets(rc, out, overwrite=args.overwrite)
    for r in rows:
        print(f"gamma=({r['gamma_p']:.3g},{r['gamma_h']:.3g},"
              f"{r['gamma_b']:.3g}) top1={r['top1']:.4f} "
              f"gflops={r['gflops']:.3g}")
    return 0


def _cmd_analyze(args):
    from .harness import analyze_policies, read_policies, write_stats
    from .runconfig import load_config, make_datasets
    run_dir = args.run
    cfg_path = os.path.join(run_dir, "config.json")
    pol_path = os.path.join(run_dir, "policies.jsonl")
    for path in (cfg_path, pol_path):
        if not os.path.exists(path):
            raise_config(f"missing run artifact: {path}")
    rc = load_config(cfg_path)
    _, val_ds = make_datasets(rc)
    records = read_policies(pol_path)
    stats = analyze_policies(records, val_ds, rc.model, rc.head_mode)
    stats_dir = os.path.join(run_dir, "stats")
    os.makedirs(stats_dir, exist_ok=True)
    write_stats(stats, stats_dir)
    print(f"wrote stats under {stats_dir}")
    return 0


def _cmd_baseline(args):
    from .harness import (policy_profile, read_policies, run_baseline)
    rc = _load(args)
    out = _resolve_out(args, rc)
    if not os.path.exists(args.checkpoint):
        raise_config(f"checkpoint not found: {args.checkpoint}")
    profile = None
    if args.match_run:
        pol_path = os.path.join(args.match_run, "policies.jsonl")
        if not os.path.exists(pol_path):
            raise_config(f"--match-run has no policies.jsonl: {args.match_run}")
        profile = policy_profile(read_policies(pol_path), rc.model)
    result = run_baseline(args.kind, rc, args.checkpoint, out,
                          profile=profile, overwrite=args.overwrite)
    print(f"{args.kind}: top1={result['row']['top1']:.4f} "
          f"gflops={result['row']['gflops']:.3g} -> {out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cost": _cmd_cost,
    "sweep": _cmd_sweep,
    "analyze": _cmd_analyze,
    "baseline": _cmd_baseline,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads is None:
        threads = int(os.environ.get("GATEVIT_THREADS", "1"))
    _set_threads(threads)

    from .errors import (CheckpointError, ConfigError, DataError,
                         NonFiniteError)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
