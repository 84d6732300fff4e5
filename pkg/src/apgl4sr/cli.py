"""Command-line entry point: ``apgl4sr <command> ...``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from . import container
from .bench import bench_svd
from .dataio import Dataset, build_dataset, five_core_filter, parse_log
from .evaluation import evaluate
from .export import export_projection
from .graphbuild import GraphBuildConfig, SparseGraph, build_graph
from .synth import gen_synthetic, write_log
from .trainer import APGL4SR, TrainConfig, fit, load_config, parse_config_text

log = logging.getLogger("apgl4sr")


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _override_pairs(pairs: list[str] | None) -> dict:
    if not pairs:
        return {}
    return parse_config_text("\n".join(pairs))


def cmd_gen_synth(args) -> int:
    ilog = gen_synthetic(
        num_items=args.num_items,
        num_clusters=args.num_clusters,
        num_users=args.num_users,
        seq_len_range=(args.min_len, args.max_len),
        cross_cluster_prob=args.cross_prob,
        user_globality_mix=args.globality_mix,
        seed=args.seed or 0,
    )
    write_log(ilog, args.out)
    print(f"wrote {len(ilog)} interactions to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    ilog = parse_log(args.input, delimiter=args.delimiter.encode().decode("unicode_escape"), strict=args.strict)
    ilog = five_core_filter(ilog, args.min_count)
    data = build_dataset(ilog, args.max_len)
    data.save(args.out)
    print(f"{data.num_users} users, {data.num_items} items, {len(ilog)} interactions -> {args.out}")
    return 0


def cmd_build_graph(args) -> int:
    data = Dataset.load(args.dataset)
    cfg = GraphBuildConfig(window=args.window, self_loop_weight=args.self_loop_weight)
    graph = build_graph(data.train_views(), data.num_items, cfg)
    graph.save(args.out)
    print(f"graph: {graph.n} nodes, {graph.nnz} stored entries -> {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    overrides = _override_pairs(args.set)
    for flag in ("seed", "max_epochs", "patience"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = value
    for flag in ("disable_agcl", "disable_pge", "freeze_perturbation"):
        if getattr(args, flag):
            overrides[flag] = True
    return load_config(args.config, **overrides)


def cmd_train(args) -> int:
    data = Dataset.load(args.dataset)
    graph = SparseGraph.load(args.graph)
    base = _train_config(args)
    out = Path(args.out)
    axes = []
    for spec in args.grid or []:
        key, _, values = spec.partition("=")
        axes.append([(key.strip(), v) for v in values.split(",")])
    runs = [()] if not axes else list(itertools.product(*axes))
    summary = []
    for combo in runs:
        changes = parse_config_text("\n".join(f"{k}={v}" for k, v in combo)) if combo else {}
        cfg = base.replace(**changes)
        run_dir = out if not combo else out / "_".join(f"{k}-{v}" for k, v in combo)
        result = fit(data, graph, cfg, run_dir)
        test = evaluate(result.model, data, "test", exclude_seen=cfg.exclude_seen)
        test.write_json(run_dir / "test_metrics.json")
        summary.append({"run": str(run_dir), "best_epoch": result.best_epoch,
                        "valid_" + cfg.metric: result.best_metric, **test.to_dict()})
        print(f"{run_dir}: best epoch {result.best_epoch}, test ndcg@20 {test.ndcg[20]:.4f} hr@20 {test.hr[20]:.4f}")
    if len(summary) > 1:
        (out / "grid_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_eval(args) -> int:
    data = Dataset.load(args.dataset)
    graph = SparseGraph.load(args.graph)
    model = APGL4SR.load(args.checkpoint, graph)
    report = evaluate(model, data, args.split, exclude_seen=not args.no_exclude_seen)
    if args.seed is not None:
        report.seed = args.seed
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_bench_svd(args) -> int:
    report = bench_svd(_ints(args.sizes), d=args.d, rank=args.rank, nnz_per_row=args.nnz_per_row,
                       reps=args.reps, seed=args.seed or 0, dense=not args.no_dense)
    for p in report.points:
        dense = f"{p.dense_seconds:.5f}" if p.dense_seconds is not None else "skipped"
        print(f"|V|={p.num_items:6d}  factored {p.factored_seconds:.5f}s  dense {dense}")
    print(f"log-log slope: factored {report.factored_slope:.3f}, dense {report.dense_slope:.3f}")
    if args.out:
        report.write_json(args.out)
    return 0


def cmd_project(args) -> int:
    graph = SparseGraph.load(args.graph)
    model = APGL4SR.load(args.checkpoint, graph)
    coords = export_projection(model, args.out)
    print(f"wrote {len(coords)} rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck

    report = run_gradcheck(seed=args.seed or 0, h=args.h, rtol=args.rtol, atol=args.atol)
    worst = max(report.values())
    for name, err in report.items():
        print(f"{'ok  ' if err < args.rtol else 'FAIL'} {name:24s} max rel err {err:.3e}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return 0 if worst < args.rtol else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="key=value training config file")
    common.add_argument("--out", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="apgl4sr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic interaction log")
    p.add_argument("--num-items", type=int, default=200)
    p.add_argument("--num-clusters", type=int, default=4)
    p.add_argument("--num-users", type=int, default=2000)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--cross-prob", type=float, default=0.3)
    p.add_argument("--globality-mix", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("prepare", parents=[common], help="filter and index an interaction log")
    p.add_argument("--input", required=True)
    p.add_argument("--delimiter", default="\\t")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("build-graph", parents=[common], help="build the global item graph")
    p.add_argument("--dataset", required=True)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--self-loop-weight", type=float, default=1.0)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", parents=[common], help="train and keep the best checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid over config values")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--disable-agcl", action="store_true")
    p.add_argument("--disable-pge", action="store_true")
    p.add_argument("--freeze-perturbation", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="full-ranking HR/NDCG of a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--no-exclude-seen", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-svd", parents=[common], help="factored vs dense propagation scaling")
    p.add_argument("--sizes", default="1000,2000,4000,8000")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--nnz-per-row", type=int, default=10)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--no-dense", action="store_true")
    p.set_defaults(func=cmd_bench_svd)

    p = sub.add_parser("project", parents=[common], help="2-D SVD projection of item embeddings to CSV")
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--atol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # per-command defaults live here: set_defaults on one subparser would leak
    # into the shared parent options of every other subparser
    default_out = {"gen-synth": "synthetic.tsv", "train": "run", "project": "projection.csv"}
    if args.out is None and args.command in default_out:
        args.out = default_out[args.command]
    if args.command in ("prepare", "build-graph") and args.out is None:
        build_parser().error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, container.ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
