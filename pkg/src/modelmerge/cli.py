"""Command-line entry point: ``modelmerge <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (a JSON document with optional
sections ``data``, ``arch``, ``train``, ``gma``, ``soma``, ``valuation`` and
top-level ``val_fraction``/``fitness``); explicit flags override it.

Exit status: 0 on success, 2 on usage errors (bad flags, missing files,
invalid config), 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import ShardSpec, load_delimited, write_shards
from .errors import MergeError
from .gma import GmaConfig, gma_run
from .merge_core import SourceBank, direct_average
from .nn import Architecture, TrainConfig
from .pipeline import compare_rows, evaluate, fitness_by_name, train_sources, write_compare_csv
from .serialization import load_model, save_coeffs, save_model
from .soma import SomaConfig, soma_run
from .valuation import ModelUtility, estimate_shapley, sample_bound


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def _build(cls, section: dict, overrides: dict):
    """Instantiate dataclass ``cls`` from a config section plus non-None flag values."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    values = dict(section)
    values.update({k: v for k, v in overrides.items() if v is not None and k in names})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"no such file or directory: {p}")


def _load_split(data_dir, split: str):
    _require(data_dir)
    manifest_path = Path(data_dir) / "manifest.json"
    _require(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    name = manifest[split]
    return load_delimited(Path(data_dir) / name, class_count=manifest["class_count"])


def _load_models(paths):
    _require(*paths)
    return [load_model(p) for p in paths]


def _validation(args, cfg):
    val = _load_split(args.data, "validation")
    fraction = args.val_fraction if args.val_fraction is not None else cfg.get("val_fraction", 1.0)
    if not 0 < fraction <= 1:
        raise UsageError("--val-fraction must lie in (0, 1]")
    return val.sample_fraction(fraction, args.val_seed)


def _soma_cfg(args, cfg) -> SomaConfig:
    patience = args.patience
    return _build(
        SomaConfig,
        cfg.get("soma", {}),
        {
            "eta": args.eta,
            "rho": args.rho,
            "batch_size": args.batch_size,
            "max_iterations": args.max_iterations,
            "seed": args.seed,
            "patience": None if patience is not None and patience <= 0 else patience,
        },
    )


# subcommands -------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> None:
    spec = _build(
        ShardSpec,
        cfg.get("data", {}),
        {
            "n_shards": args.n_shards,
            "samples_per_shard": args.samples_per_shard,
            "feature_dim": args.feature_dim,
            "class_count": args.classes,
            "skew": args.skew,
            "noise": args.noise,
            "seed": args.seed,
            "val_samples": args.val_samples,
            "test_samples": args.test_samples,
        },
    )
    write_shards(spec, args.out)
    print(f"wrote {spec.n_shards} shards to {args.out}")


def cmd_train(args, cfg) -> None:
    _require(args.data, Path(args.data) / "manifest.json")
    manifest = json.loads((Path(args.data) / "manifest.json").read_text())
    shards = [load_delimited(Path(args.data) / s, class_count=manifest["class_count"]) for s in manifest["shards"]]
    arch_cfg = cfg.get("arch", {})
    hidden = tuple(args.hidden) if args.hidden else tuple(arch_cfg.get("hidden", (16,)))
    normalize = args.normalize if args.normalize is not None else arch_cfg.get("normalize", True)
    arch = Architecture(shards[0].dim, hidden, manifest["class_count"], normalize=normalize)
    hyper = _build(
        TrainConfig,
        cfg.get("train", {}),
        {
            "learning_rate": args.lr,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "seed": args.seed,
            "init_seed": args.init_seed,
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, model in enumerate(train_sources(shards, arch, hyper)):
        save_model(model, out / f"source{i}.json")
    print(f"trained {len(shards)} source models into {out}")


def cmd_merge(args, cfg) -> None:
    bank = SourceBank(_load_models(args.models))
    method = args.method
    if method == "average":
        model = direct_average(bank)
        save_model(model, args.out)
        return
    val = _validation(args, cfg)
    fitness = fitness_by_name(args.fitness or cfg.get("fitness", "error"))
    if method == "soma":
        result = soma_run(bank, val, _soma_cfg(args, cfg), fitness)
        save_model(result.model, args.out)
        if args.coeffs:
            save_coeffs(result.coeffs, bank.template, args.coeffs)
        if args.log:
            result.write_log(args.log)
        print(f"soma: best validation fitness {result.best_fitness:.6g}")
        return
    gcfg = _build(
        GmaConfig,
        cfg.get("gma", {}),
        {
            "K": args.K,
            "p1": args.p1,
            "p2": args.p2,
            "p3": args.p3,
            "max_generations": args.generations,
            "seed": args.seed,
        },
    )
    result = gma_run(bank, val, fitness, gcfg, track=bool(args.coeffs))
    save_model(result.model, args.out)
    if args.coeffs and result.coeffs is not None:
        save_coeffs(result.coeffs, bank.template, args.coeffs)
    if args.log:
        result.write_log(args.log)
    print(f"gma: best validation fitness {result.fitness:.6g}")


def cmd_eval(args, cfg) -> None:
    (model,) = _load_models([args.model])
    report = {split: evaluate(model, _load_split(args.data, split)) for split in ("validation", "test")}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_compare(args, cfg) -> None:
    models = _load_models(args.models)
    labels = args.labels or [Path(p).stem for p in args.models]
    if len(labels) != len(models):
        raise UsageError("--labels must name every model")
    val = _load_split(args.data, "validation")
    test = _load_split(args.data, "test")
    rows = compare_rows(list(zip(labels, models)), val, test)
    write_compare_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_shapley(args, cfg) -> None:
    bank = SourceBank(_load_models(args.models))
    val = _validation(args, cfg)
    test = _load_split(args.data, "test")
    vcfg = cfg.get("valuation", {})
    T = args.T if args.T is not None else vcfg.get("T", 10)
    epsilon = args.epsilon if args.epsilon is not None else vcfg.get("epsilon", 0.1)
    delta = args.delta if args.delta is not None else vcfg.get("delta", 0.05)
    seed = args.test_seed if args.test_seed is not None else vcfg.get("seed", 0)
    if T < 1:
        raise UsageError("--T must be at least 1")
    utility = ModelUtility(bank, val, test, _soma_cfg(args, cfg))
    report = estimate_shapley(
        utility, T, epsilon, delta, np.random.default_rng(seed), with_exact=args.exact, workers=args.workers
    )
    report.average_theta = utility.full_coeffs().average_weights()
    report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    print(f"estimates {np.round(report.estimates, 6).tolist()} (sum {report.estimates.sum():.6g}, U(I) {report.u_total:.6g})")


def cmd_bound(args, cfg) -> None:
    T = sample_bound(args.n, args.epsilon, args.delta, cross_sign=args.cross_sign)
    print(T)


# parser ------------------------------------------------------------------------


def _add_soma_flags(p) -> None:
    g = p.add_argument_group("SOMA")
    g.add_argument("--eta", type=float)
    g.add_argument("--rho", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--max-iterations", type=int)
    g.add_argument("--patience", type=int, help="stop after this many passes without improvement (<=0 disables)")


def _add_val_flags(p) -> None:
    p.add_argument("--val-fraction", type=float, help="fraction of the validation set to use")
    p.add_argument("--val-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modelmerge", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON experiment configuration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic heterogeneous shards")
    p.add_argument("--out", required=True)
    p.add_argument("--n-shards", type=int)
    p.add_argument("--samples-per-shard", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--skew", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--val-samples", type=int)
    p.add_argument("--test-samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one source model per shard")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init-seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="merge source models")
    p.add_argument("--method", choices=("average", "gma", "soma"), required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="convergence CSV")
    p.add_argument("--coeffs", help="write merge coefficients here")
    p.add_argument("--fitness", choices=("error", "loss"))
    p.add_argument("--seed", type=int)
    _add_val_flags(p)
    _add_soma_flags(p)
    g = p.add_argument_group("GMA")
    g.add_argument("--K", type=int)
    g.add_argument("--p1", type=float)
    g.add_argument("--p2", type=float)
    g.add_argument("--p3", type=float)
    g.add_argument("--generations", type=int)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="validation and test metrics of one model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="CSV of validation/test metrics for several models")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("shapley", help="estimate source Shapley values by group testing")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--T", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--test-seed", type=int, help="seed for drawing the group tests")
    p.add_argument("--seed", type=int, help="base seed for the SOMA merges")
    p.add_argument("--exact", action="store_true", help="also enumerate exact values (2^n merges)")
    p.add_argument("--workers", type=int, default=1)
    _add_val_flags(p)
    _add_soma_flags(p)
    p.set_defaults(func=cmd_shapley)

    p = sub.add_parser("bound", help="number of group tests for an (epsilon, delta) guarantee")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--cross-sign", type=int, choices=(1, -1), default=1)
    p.set_defaults(func=cmd_bound)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.command in ("merge",) and args.method != "average" and args.data is None:
            raise UsageError("--data is required for gma and soma")
        args.func(args, cfg)
    except UsageError as exc:
        print(f"modelmerge: error: {exc}", file=sys.stderr)
        return 2
    except (MergeError, ValueError, KeyError, OSError, ArithmeticError) as exc:
        print(f"modelmerge: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
