"""Command-line pipeline: data generation, training, evaluation, diagnostics.

Every subcommand reads one JSON config (optionally overridden with repeatable
``--set section.key=value`` flags) and writes its artifacts under
``output_dir/<command>/<tag>/`` next to an echo of the resolved config.
Wall-clock numbers are confined to ``train_log.jsonl`` and ``timing.json``;
all other artifacts are byte-stable across reruns of the same config+seed.

Exit codes: 0 success, 1 domain/data error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import RunConfig, apply_overrides, load_config
from .diagnostics import (
    bound_rhs,
    collect_bound_inputs,
    hutchinson_trace,
    landscape_slice,
    restrict_scope,
)
from .evaluation import ExperimentPlan, evaluate, run_experiment
from .exceptions import InvalidConfigError, TailsamError
from .model import EmbeddingModel, gradient_check, load_checkpoint, save_checkpoint
from .optimizers import train
from .weighting import emit_weight_profile

GRADCHECK_TOL = 1e-5


def _style(text: str, ok: bool) -> str:
    if os.environ.get("NO_COLOR") or not sys.stdout.isatty():
        return text
    color = "32" if ok else "31"
    return f"\x1b[{color}m{text}\x1b[0m"


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _out_dir(cfg: RunConfig, args, command: str) -> Path:
    out = Path(cfg.output_dir) / command / args.tag
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", {"command": command, "tag": args.tag,
                                               "config": cfg.to_dict()})
    return out


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.set)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.model.init_seed = args.seed
        cfg.optimizer.seed = args.seed
        cfg.analysis.seed = args.seed
    return cfg


def _zipf_config(cfg: RunConfig) -> data_mod.ZipfConfig:
    d = cfg.data
    return data_mod.ZipfConfig(
        n_items=d.n_items,
        alpha=d.alpha,
        n_sequences=d.n_sequences,
        seq_len_range=(d.seq_len_min, d.seq_len_max),
        seed=d.seed,
        l_max=d.l_max,
    )


def _data_dir(cfg: RunConfig, args) -> Path:
    if cfg.data.dir:
        return Path(cfg.data.dir)
    return Path(cfg.output_dir) / "gen-data" / args.tag


def _load_full_dataset(cfg: RunConfig, args):
    """Full (unsplit) dataset plus the size of the dense item space."""
    if cfg.data.source == "zipf":
        ddir = _data_dir(cfg, args)
        seq_path = ddir / "sequences.jsonl"
        freq_path = ddir / "frequency.json"
        if not seq_path.exists() or not freq_path.exists():
            raise TailsamError(
                f"data files missing under {ddir}; run gen-data first"
            )
        dataset = data_mod.load_sequences(seq_path, l_max=cfg.data.l_max)
        table = data_mod.load_frequency_table(freq_path)
        return dataset, table.n_items
    if cfg.data.source == "file":
        if not cfg.data.interactions:
            raise InvalidConfigError("data.interactions is required for file source")
        log = data_mod.load_interactions(cfg.data.interactions)
        dataset, _ = data_mod.build_sequences(
            log, cfg.data.l_max, min_count=cfg.min_count()
        )
        dataset, mapping = data_mod.reindex_contiguous(dataset)
        return dataset, len(mapping)
    raise InvalidConfigError(f"unknown data source {cfg.data.source!r}")


def _bundle(cfg: RunConfig, args):
    """Split the data and build the train-side frequency table."""
    dataset, n_items = _load_full_dataset(cfg, args)
    train_ds, val_ds, test_ds = data_mod.split_8_1_1(dataset, cfg.data.seed)
    table = data_mod.frequency_table(train_ds, n_items=n_items)
    return train_ds, val_ds, test_ds, table, n_items


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    return Path(cfg.output_dir) / "train" / args.tag / "checkpoint.json"


def cmd_gen_data(cfg: RunConfig, args) -> int:
    if cfg.data.source != "zipf":
        raise InvalidConfigError("gen-data only supports data.source == 'zipf'")
    out = _out_dir(cfg, args, "gen-data")
    log, dataset, table = data_mod.generate_zipf_dataset(_zipf_config(cfg))
    data_mod.save_interactions(log, out / "interactions.tsv")
    data_mod.save_sequences(dataset, out / "sequences.jsonl")
    data_mod.save_frequency_table(table, out / "frequency.json")
    print(f"gen-data: {len(log)} interactions, {len(dataset)} examples -> {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "train")
    train_ds, _, _, table, n_items = _bundle(cfg, args)
    model = EmbeddingModel(n_items, cfg.model.d_emb)
    theta0 = model.init_params(cfg.model.init_seed)
    theta, reports = train(
        model, theta0, train_ds, table, cfg.optimizer_config(),
        cfg.optimizer.epochs, cfg.optimizer.seed,
    )
    save_checkpoint(out / "checkpoint.json", model, theta, cfg.model.init_seed)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(json.dumps(dataclasses.asdict(rep), sort_keys=True) + "\n")
    final = reports[-1].mean_loss if reports else float("nan")
    print(f"train[{cfg.optimizer.variant}]: {len(reports)} epochs, "
          f"final mean loss {final:.4f} -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "eval")
    _, _, test_ds, table, _ = _bundle(cfg, args)
    model, theta, _ = load_checkpoint(_checkpoint_path(cfg, args))
    report = evaluate(model, theta, test_ds, table, k=cfg.eval.k,
                      seed=cfg.optimizer.seed)
    _write_json(out / "metrics.json", report.to_dict())
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scope", "ndcg_at_k", "hr_at_k", "n_examples"])
        for scope in ("overall", "head", "tail"):
            s = report.scope(scope)
            writer.writerow([scope, repr(s.ndcg_at_k), repr(s.hr_at_k), s.n_examples])
    print(f"eval: overall ndcg@{report.k} {report.overall.ndcg_at_k:.4f}, "
          f"tail {report.tail.ndcg_at_k:.4f} -> {out}")
    return 0


def cmd_landscape(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "landscape")
    train_ds, _, _, table, _ = _bundle(cfg, args)
    model, theta, _ = load_checkpoint(_checkpoint_path(cfg, args))
    grid = landscape_slice(
        model, theta, train_ds, table,
        scope=cfg.analysis.scope,
        grid_half_width=cfg.analysis.half_width,
        resolution=cfg.analysis.resolution,
        seed=cfg.analysis.seed,
    )
    with open(out / "landscape.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "beta", "loss"])
        for alpha, beta, value in grid.rows():
            writer.writerow([repr(alpha), repr(beta), repr(value)])
    print(f"landscape: {cfg.analysis.resolution}x{cfg.analysis.resolution} grid "
          f"({grid.scope} scope) -> {out}")
    return 0


def _scoped_subsample(cfg, dataset, table):
    scoped = restrict_scope(dataset, table, cfg.analysis.scope)
    cap = cfg.analysis.subsample
    if cap and len(scoped) > cap:
        rng = np.random.default_rng(cfg.analysis.seed)
        keep = np.sort(rng.choice(len(scoped), size=cap, replace=False))
        scoped = scoped.subset(keep)
    return scoped


def cmd_trace(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "trace")
    train_ds, _, _, table, _ = _bundle(cfg, args)
    model, theta, _ = load_checkpoint(_checkpoint_path(cfg, args))
    scoped = _scoped_subsample(cfg, train_ds, table)
    report = hutchinson_trace(
        model, theta, scoped, table, cfg.scheme(),
        n_probes=cfg.analysis.n_probes, seed=cfg.analysis.seed, scope="overall",
    )
    _write_json(out / "trace.json", {
        "estimate": report.estimate,
        "std_error": report.std_error,
        "n_probes": report.n_probes,
        "scope": cfg.analysis.scope,
        "n_examples": len(scoped),
    })
    print(f"trace[{cfg.analysis.scope}]: {report.estimate:.4f} "
          f"(se {report.std_error:.4f}) -> {out}")
    return 0


def cmd_bound(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "bound")
    train_ds, _, _, table, _ = _bundle(cfg, args)
    model, theta, _ = load_checkpoint(_checkpoint_path(cfg, args))
    inputs = collect_bound_inputs(
        model, theta, train_ds, table, cfg.scheme(),
        rho=cfg.analysis.rho, lam=cfg.optimizer.lam, delta=cfg.analysis.delta,
        n_probes=cfg.analysis.n_probes, seed=cfg.analysis.seed,
    )
    report = bound_rhs(inputs)
    _write_json(out / "bound.json", {
        "inputs": dataclasses.asdict(inputs),
        "components": report.components,
        "complexity_pieces": report.complexity_pieces,
        "total": report.total,
        "remainder": report.remainder,
        "remainder_scale": report.remainder_scale,
        "sharpness_evaluation": "closed-form perturbation (first-order)",
    })
    print(f"bound: total {report.total:.4f}, "
          f"curvature {report.components['curvature']:.6f} -> {out}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "gradcheck")
    max_err = gradient_check(seed=cfg.model.init_seed)
    ok = max_err < GRADCHECK_TOL
    _write_json(out / "gradcheck.json", {
        "max_relative_error": max_err,
        "tolerance": GRADCHECK_TOL,
        "passed": ok,
    })
    verdict = _style("PASS" if ok else "FAIL", ok)
    print(f"gradcheck: max relative error {max_err:.3e} "
          f"(tolerance {GRADCHECK_TOL:.0e}) {verdict}")
    return 0 if ok else 1


def cmd_weights(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "weights")
    _, _, _, table, _ = _bundle(cfg, args)
    emit_weight_profile(cfg.scheme(), table, out / "weights.csv")
    print(f"weights[{cfg.weighting.kind}]: {table.n_items} items -> {out}")
    return 0


def cmd_experiment(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args, "experiment")
    train_ds, _, test_ds, table, n_items = _bundle(cfg, args)
    plan = ExperimentPlan(
        variants=tuple(cfg.eval.variants),
        seeds=tuple(cfg.eval.seeds),
        epochs=cfg.optimizer.epochs,
        optimizer=cfg.optimizer_config(),
        d_emb=cfg.model.d_emb,
        k=cfg.eval.k,
        timing=cfg.eval.timing,
        jobs=args.jobs,
    )
    report = run_experiment(train_ds, test_ds, table, n_items, plan)
    _write_json(out / "report.json", report.metrics_dict())
    _write_json(out / "timing.json", report.timing)
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh).writerows(report.csv_rows())
    for variant in plan.variants:
        tail = report.summary[variant]["tail"]["ndcg_at_k"]["mean"]
        print(f"experiment[{variant}]: tail ndcg@{plan.k} mean {tail:.4f}")
    if report.improvements:
        gain = report.improvements["tail"]["ndcg_at_k"]
        if gain is not None:
            print(f"experiment: eisam tail ndcg gain over best baseline "
                  f"{100 * gain:+.2f}%")
    print(f"experiment -> {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
    "trace": cmd_trace,
    "bound": cmd_bound,
    "gradcheck": cmd_gradcheck,
    "weights": cmd_weights,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailsam",
        description="long-tail sharpness-aware training pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON config path or a profile name (e.g. 'smoke')")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, default=None,
                       help="override every section seed at once")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker cap for parallel experiment cells")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--tag", default="default",
                       help="run directory name under output_dir/<command>/")
        if name in ("eval", "landscape", "trace", "bound"):
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (default: output_dir/train/<tag>/)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TailsamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
