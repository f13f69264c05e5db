"""Command-line entry point: ``treereg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import export_csv, gen_parabola, gen_signal_noise, ingest_csv
from .models import load_checkpoint
from .regularizers import KINDS, RegularizerSpec
from .training import (DEFAULT_LAMBDAS, ExperimentConfig, atomic_write, evaluate_run, extract_proxy, load_dataset,
                       preset, run_sweep, save_run, split_aucs, per_output_path_lengths, train_model)
from .tree import DecisionTree, TreeConfig

log = logging.getLogger("treereg")


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = preset(args.task)
    if getattr(args, "kind", None):
        cfg = replace(cfg, regularizer=replace(cfg.regularizer, kind=args.kind))
    if getattr(args, "lam", None) is not None:
        cfg = replace(cfg, regularizer=replace(cfg.regularizer, lam=args.lam))
    if getattr(args, "epochs", None):
        cfg = replace(cfg, epochs=args.epochs)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "data", None):
        cfg = replace(cfg, data=replace(cfg.data, task="csv", path=args.data))
    return replace(cfg, out_dir=str(args.out))


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.task == "parabola":
        ds = gen_parabola(args.n or 500, args.flip_rate, args.seed)
    else:
        ds = gen_signal_noise(args.n or 100, args.T, args.seed)
    path = out / f"{args.task}.csv" if not out.suffix else out
    export_csv(ds, path, with_split=True)
    meta = {"task": args.task, "n": len(ds), "seed": args.seed, "file": str(path)}
    if args.task == "parabola":
        meta["flip_rate"] = args.flip_rate
    else:
        meta["T"] = args.T
    atomic_write(path.parent / "resolved_config.json", json.dumps(meta, indent=2))
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    res = train_model(cfg, progress=args.verbose)
    metrics = save_run(res, cfg.out_dir)
    print(json.dumps(metrics))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    lambdas = args.lambdas if args.lambdas else DEFAULT_LAMBDAS
    records = run_sweep(cfg, lambdas, kinds=args.kinds, out_dir=cfg.out_dir)
    failed = [r for r in records if r.status != "ok"]
    print(Path(cfg.out_dir) / "tradeoff.csv")
    if failed:
        print(f"{len(failed)} of {len(records)} runs failed", file=sys.stderr)
    return 0


def _checkpoint_and_data(args):
    model, w, meta = load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.from_dict(meta["config"]) if "config" in meta else preset(args.task)
    if args.data:
        cfg = replace(cfg, data=replace(cfg.data, task="csv", path=args.data))
    return model, w, cfg, load_dataset(cfg.data)


def cmd_extract_tree(args) -> int:
    model, w, cfg, ds = _checkpoint_and_data(args)
    tree_cfg = cfg.tree
    if args.min_leaf is not None:
        tree_cfg = replace(tree_cfg, min_leaf_samples=args.min_leaf)
    proxy = extract_proxy(model, w, ds, tree_cfg, args.out, output=args.output)
    info = {"fidelity": proxy.fidelity, "nodes": proxy.tree.node_count, "files": {k: str(v) for k, v in proxy.files.items()}}
    atomic_write(Path(args.out) / "resolved_config.json", json.dumps(dict(cfg.to_dict(), tree=vars(tree_cfg)), indent=2))
    print(json.dumps(info))
    return 0


def cmd_eval(args) -> int:
    model, w, cfg, ds = _checkpoint_and_data(args)
    metrics = {"auc": split_aucs(model, w, ds, args.split),
               "path_length": per_output_path_lengths(model, w, ds, cfg.tree),
               "num_params": model.num_params}
    metrics["path_length_sum"] = float(sum(metrics["path_length"]))
    out = Path(args.out)
    atomic_write(out / "metrics.json", json.dumps(metrics, indent=2))
    atomic_write(out / "resolved_config.json", json.dumps(cfg.to_dict(), indent=2))
    print(json.dumps(metrics))
    return 0


def cmd_export_dot(args) -> int:
    tree = DecisionTree.from_json(Path(args.tree).read_text())
    names = args.feature_names.split(",") if args.feature_names else None
    out = Path(args.out)
    atomic_write(out, tree.to_dot(names))
    atomic_write(out.with_name(out.stem + ".resolved_config.json"),
                 json.dumps({"tree": str(args.tree), "feature_names": names}, indent=2))
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treereg", description="Tree regularization of deep models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset as CSV")
    g.add_argument("--task", choices=["parabola", "signal-noise"], required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--T", type=int, default=50)
    g.add_argument("--flip-rate", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def run_args(sp):
        sp.add_argument("--config", help="ExperimentConfig JSON")
        sp.add_argument("--task", choices=["parabola", "signal-noise"], default="signal-noise",
                        help="preset used when no --config is given")
        sp.add_argument("--data", help="CSV dataset (overrides the generator)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model")
    run_args(t)
    t.add_argument("--kind", choices=KINDS)
    t.add_argument("--lam", type=float)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="lambda sweep over regularizer kinds")
    run_args(s)
    s.add_argument("--kinds", nargs="+", choices=KINDS, default=["l1", "l2", "tree"])
    s.add_argument("--lambdas", nargs="+", type=float)
    s.set_defaults(func=cmd_sweep)

    for name, func, helptext in (("extract-tree", cmd_extract_tree, "fit a proxy tree to a checkpoint"),
                                 ("eval", cmd_eval, "AUC and path length of a checkpoint")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True, help="checkpoint prefix (without .bin/.json)")
        e.add_argument("--task", choices=["parabola", "signal-noise"], default="signal-noise")
        e.add_argument("--data", help="CSV dataset to evaluate on")
        e.add_argument("--out", required=True)
        if name == "extract-tree":
            e.add_argument("--min-leaf", type=int)
            e.add_argument("--output", type=int, default=0, help="output node to explain")
        else:
            e.add_argument("--split", choices=["train", "valid", "test"], default="test")
        e.set_defaults(func=func)

    x = sub.add_parser("export-dot", help="convert a tree JSON to DOT")
    x.add_argument("--tree", required=True)
    x.add_argument("--feature-names")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_dot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"treereg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
