"""Command-line entry points.

Subcommands: train / eval / ensemble / diagnose / gradcheck / gen-data.
Exit codes: 0 success, 1 bad configuration or input, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import ast
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .contrast import (NEG_STRATEGIES, POS_STRATEGIES, ContrastConfig)
from .data import (MODALITIES, default_topology, derive_dataset,
                   generate_synthetic, load_dataset, save_dataset)
from .diagnostics import (class_centroids, distance_report, export_embeddings,
                          per_class_accuracy, rank_report, write_distance_csv)
from .errors import NonFiniteError, SkelContrastError
from .training import (TrainConfig, ensemble_eval, evaluate,
                       gradcheck_full_loss, load_checkpoint, save_checkpoint,
                       train)

_CONTRAST_KEYS = {f: True for f in
                  ("tau", "alpha", "k_hard_pos", "k_hard_neg", "k_rand_neg",
                   "lam", "margin", "loss_kind", "pos_strategy",
                   "neg_strategy", "sum_positives")}


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _read_config_file(path) -> dict:
    """key=value lines; '#' comments; values are python literals or strings."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SkelContrastError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = _parse_value(value.strip())
    return out


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(_read_config_file(args.config))
    for key in ("dataset_path", "test_dataset_path", "modality", "class_count",
                "per_class", "test_per_class", "frames", "joints", "channels",
                "block_channels", "kernel", "attn_channels", "embed_dim",
                "bank_capacity", "epochs", "batch_size", "lr", "momentum",
                "weight_decay", "seed", "out_dir"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    for key in _CONTRAST_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag

    contrast_kwargs = {k: values.pop(k) for k in list(values)
                       if k in _CONTRAST_KEYS}
    if isinstance(values.get("block_channels"), str):
        values["block_channels"] = tuple(
            int(c) for c in values["block_channels"].split(","))
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise SkelContrastError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig(contrast=ContrastConfig(**contrast_kwargs), **values)


def _write_metrics_csv(path, metrics):
    with open(path, "w") as f:
        f.write("epoch,loss,loss_ce,loss_nce,train_acc,test_acc,seconds\n")
        for m in metrics:
            test = "" if m.test_acc is None else f"{m.test_acc:.17g}"
            f.write(f"{m.epoch},{m.loss:.17g},{m.loss_ce:.17g},"
                    f"{m.loss_nce:.17g},{m.train_acc:.17g},{test},"
                    f"{m.seconds:.3f}\n")


def _cmd_train(args) -> int:
    config = _train_config(args)
    result = train(config)
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_metrics_csv(out_dir / "metrics.csv", result.metrics)
        save_checkpoint(out_dir / "model.skcp", result.params, result.arch,
                        config.modality, config.embed_dim)
    last = result.metrics[-1]
    summary = {
        "epochs": config.epochs,
        "final_loss": last.loss,
        "final_train_acc": last.train_acc,
        "final_test_acc": last.test_acc,
        "contrast_enabled": config.contrast.lam != 0.0,
        "contrast_seconds": result.contrast_seconds,
        "contrast_overhead": result.contrast_overhead,
        "total_seconds": result.total_seconds,
    }
    if out_dir:
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
        summary["out_dir"] = str(out_dir)
    print(json.dumps(summary, indent=2))
    return 0


def _load_eval_dataset(path, modality, topology_joints):
    ds = load_dataset(path, split="test")
    if modality != "joint":
        ds = derive_dataset(ds, default_topology(topology_joints), modality)
    return ds


def _cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    ds = _load_eval_dataset(args.dataset, meta.modality, meta.arch.joints)
    result = evaluate(params, meta.arch, ds, embed=False)
    print(json.dumps({
        "accuracy": result.accuracy,
        "per_class": {str(k): v for k, v in result.per_class.items()},
        "samples": len(ds.sequences),
        "modality": meta.modality,
    }, indent=2))
    return 0


def _cmd_ensemble(args) -> int:
    models = []
    for path in args.checkpoints:
        params, meta = load_checkpoint(path)
        models.append((params, meta.arch, meta.modality))
    ds = load_dataset(args.dataset, split="test")
    result = ensemble_eval(models, ds)
    print(json.dumps({
        "accuracy": result.accuracy,
        "per_class": {str(k): v for k, v in result.per_class.items()},
        "modalities": [m for _, _, m in models],
    }, indent=2))
    return 0


def _cmd_diagnose(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    train_ds = _load_eval_dataset(args.train_dataset, meta.modality,
                                  meta.arch.joints)
    test_ds = _load_eval_dataset(args.dataset, meta.modality, meta.arch.joints)

    train_ev = evaluate(params, meta.arch, train_ds)
    test_ev = evaluate(params, meta.arch, test_ds)
    source = "raw_graphs" if args.raw_graphs else "embeddings"
    train_emb = getattr(train_ev, source)
    test_emb = getattr(test_ev, source)

    centroids = class_centroids(list(zip(train_emb, train_ev.labels)),
                                train_ds.class_count)
    report = distance_report(test_emb, test_ev.labels, test_ev.predictions,
                             centroids)
    buckets = rank_report(report.rows)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_distance_csv(report, out_dir / "distances.csv")
    export_embeddings(test_emb, test_ev.features, test_ev.labels,
                      test_ev.predictions, out_dir / "embeddings.tsv")
    print(json.dumps({
        "accuracy": test_ev.accuracy,
        "embedding_source": source,
        "mean_d_all": report.mean_d_all,
        "mean_d_cor_correct": report.mean_d_cor_correct,
        "mean_d_cor_incorrect": report.mean_d_cor_incorrect,
        "rank_buckets": [{"label": b.label, "count": b.count,
                          "accuracy": b.accuracy} for b in buckets],
        "out_dir": str(out_dir),
    }, indent=2))
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck_full_loss(seed=args.seed, epsilon=args.epsilon,
                                 tolerance=args.tolerance)
    print(report)
    return 0 if report.passed else 1


def _cmd_gen_data(args) -> int:
    ds = generate_synthetic(args.classes, args.per_class, frames=args.frames,
                            joints=args.joints, channels=args.channels,
                            seed=args.seed, split=args.split)
    save_dataset(ds, args.out)
    print(json.dumps({"out": str(args.out), "classes": args.classes,
                      "sequences": len(ds.sequences)}))
    return 0


def _add_train_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--config", help="key=value config file; flags override it")
    g.add_argument("--dataset-path")
    g.add_argument("--test-dataset-path")
    g.add_argument("--modality", choices=MODALITIES)
    g.add_argument("--class-count", type=int)
    g.add_argument("--per-class", type=int)
    g.add_argument("--test-per-class", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--joints", type=int)
    g.add_argument("--channels", type=int)
    m = p.add_argument_group("model")
    m.add_argument("--block-channels", help="comma list, e.g. 8,16,32")
    m.add_argument("--kernel", type=int)
    m.add_argument("--attn-channels", type=int)
    m.add_argument("--embed-dim", type=int)
    m.add_argument("--bank-capacity", type=int)
    o = p.add_argument_group("optimization")
    o.add_argument("--epochs", type=int)
    o.add_argument("--batch-size", type=int)
    o.add_argument("--lr", type=float)
    o.add_argument("--momentum", type=float)
    o.add_argument("--weight-decay", type=float)
    o.add_argument("--seed", type=int)
    o.add_argument("--out-dir")
    c = p.add_argument_group("contrast")
    c.add_argument("--lam", type=float, help="contrast weight; 0 disables")
    c.add_argument("--tau", type=float)
    c.add_argument("--alpha", type=float)
    c.add_argument("--k-hard-pos", type=int)
    c.add_argument("--k-hard-neg", type=int)
    c.add_argument("--k-rand-neg", type=int)
    c.add_argument("--margin", type=float)
    c.add_argument("--loss-kind", choices=("infonce", "triplet"))
    c.add_argument("--pos-strategy", choices=POS_STRATEGIES)
    c.add_argument("--neg-strategy", choices=NEG_STRATEGIES)
    c.add_argument("--sum-positives", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelcontrast",
        description="Graph-contrastive skeleton action recognition, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="joint-stream SKGC file")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ensemble", help="softmax-score ensemble of checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--dataset", required=True, help="joint-stream SKGC file")
    p.set_defaults(fn=_cmd_ensemble)

    p = sub.add_parser("diagnose", help="embedding distance/rank reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-dataset", required=True,
                   help="SKGC file used for class centroids")
    p.add_argument("--dataset", required=True, help="SKGC file to report on")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--raw-graphs", action="store_true",
                   help="use flattened adaptive graphs instead of projections")
    p.set_defaults(fn=_cmd_diagnose)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full objective")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic SKGC dataset file")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--joints", type=int, default=8)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NonFiniteError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2
    except (SkelContrastError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
