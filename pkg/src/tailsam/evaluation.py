"""Ranking metrics with head/tail breakdown and the multi-variant experiment driver."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import FrequencyTable, SequenceDataset
from .exceptions import EmptyDatasetError, InvalidConfigError
from .model import EmbeddingModel
from .optimizers import (
    EpochReport,
    OptimizerConfig,
    OptState,
    PackedDataset,
    make_step_fn,
    train_epoch,
)

EVAL_CHUNK = 2048


def ndcg_at_k(rank: int, k: int) -> float:
    """Discounted gain of a single relevant item: 1/log2(rank+1) inside the cutoff."""
    if rank < 1 or k < 1:
        raise InvalidConfigError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hr_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise InvalidConfigError("rank and k must be >= 1")
    return 1.0 if rank <= k else 0.0


@dataclass(frozen=True)
class ScopeMetrics:
    ndcg_at_k: float
    hr_at_k: float
    n_examples: int


@dataclass(frozen=True)
class MetricReport:
    overall: ScopeMetrics
    head: ScopeMetrics
    tail: ScopeMetrics
    k: int
    seed: int

    def scope(self, name: str) -> ScopeMetrics:
        return getattr(self, name)

    def to_dict(self) -> dict:
        out = {"k": self.k, "seed": self.seed}
        for name in ("overall", "head", "tail"):
            s = self.scope(name)
            out[name] = {
                "ndcg_at_k": s.ndcg_at_k,
                "hr_at_k": s.hr_at_k,
                "n_examples": s.n_examples,
            }
        return out


def target_ranks(
    model: EmbeddingModel, theta: np.ndarray, packed: PackedDataset, chunk: int = EVAL_CHUNK
) -> np.ndarray:
    """Rank of each true target among all items: descending logit, ties to lower id."""
    params = model.to_params(theta)
    item_ids = np.arange(model.n_items)
    ranks = np.empty(len(packed), dtype=np.int64)
    for start in range(0, len(packed), chunk):
        stop = min(start + chunk, len(packed))
        batch = packed.batch(np.arange(start, stop))
        gathered = params.embeddings[batch.padded] * batch.mask[:, :, None]
        hidden = gathered.sum(axis=1) / batch.lengths[:, None]
        logits = hidden @ params.embeddings.T + params.bias
        target_logit = logits[np.arange(batch.size), batch.targets]
        better = (logits > target_logit[:, None]).sum(axis=1)
        tied_lower = (
            (logits == target_logit[:, None]) & (item_ids[None, :] < batch.targets[:, None])
        ).sum(axis=1)
        ranks[start:stop] = 1 + better + tied_lower
    return ranks


def _scope_metrics(ndcg: np.ndarray, hits: np.ndarray, mask: np.ndarray) -> ScopeMetrics:
    n = int(mask.sum())
    if n == 0:
        return ScopeMetrics(0.0, 0.0, 0)
    return ScopeMetrics(float(ndcg[mask].mean()), float(hits[mask].mean()), n)


def evaluate(
    model: EmbeddingModel,
    theta: np.ndarray,
    test: SequenceDataset,
    table: FrequencyTable,
    k: int = 10,
    seed: int = 0,
) -> MetricReport:
    """Full-vocabulary ranking metrics, split by the target's head/tail group."""
    if len(test) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    packed = PackedDataset(test)
    ranks = target_ranks(model, theta, packed)
    hits = (ranks <= k).astype(np.float64)
    ndcg = np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0)
    head_mask = table.head_mask(model.n_items)
    in_head = head_mask[packed.targets]
    return MetricReport(
        overall=_scope_metrics(ndcg, hits, np.ones_like(in_head)),
        head=_scope_metrics(ndcg, hits, in_head),
        tail=_scope_metrics(ndcg, hits, ~in_head),
        k=k,
        seed=seed,
    )


@dataclass(frozen=True)
class ExperimentPlan:
    """What to run: variants x seeds on a shared split, epoch-interleaved."""

    variants: tuple[str, ...]
    seeds: tuple[int, ...]
    epochs: int
    optimizer: OptimizerConfig
    d_emb: int = 32
    k: int = 10
    timing: bool = True
    jobs: int = 1

    def __post_init__(self):
        if not self.variants or not self.seeds:
            raise InvalidConfigError("need at least one variant and one seed")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be >= 0")


@dataclass
class ExperimentReport:
    cells: dict  # variant -> seed -> MetricReport
    epoch_logs: dict  # variant -> seed -> list[EpochReport]
    summary: dict  # variant -> scope -> metric -> {mean, std}
    improvements: dict  # scope -> metric -> relative gain of eisam over best baseline
    timing: dict  # variant -> {seconds_per_epoch, ratio_to_sam}
    final_params: dict  # variant -> seed -> flat parameter vector

    def metrics_dict(self) -> dict:
        """Deterministic part of the report (no wall-clock numbers)."""
        return {
            "cells": {
                v: {str(s): r.to_dict() for s, r in per_seed.items()}
                for v, per_seed in self.cells.items()
            },
            "summary": self.summary,
            "improvements": self.improvements,
        }

    def csv_rows(self):
        rows = [("variant", "seed", "scope", "ndcg_at_k", "hr_at_k", "n_examples")]
        for variant in sorted(self.cells):
            for seed in sorted(self.cells[variant]):
                report = self.cells[variant][seed]
                for scope in ("overall", "head", "tail"):
                    s = report.scope(scope)
                    rows.append(
                        (variant, seed, scope, repr(s.ndcg_at_k), repr(s.hr_at_k), s.n_examples)
                    )
        return rows


def _train_cell_interleaved(model, packed, table, plan, seed):
    """Train every variant for one seed, alternating epochs across variants.

    All variants start from the same seeded initial parameters, and epoch e of
    each variant runs back-to-back with epoch e of the others so per-epoch
    wall times are comparable.
    """
    theta0 = model.init_params(seed)
    runs = {}
    for variant in plan.variants:
        cfg = replace(plan.optimizer, variant=variant)
        runs[variant] = {
            "cfg": cfg,
            "theta": theta0.copy(),
            "state": OptState.fresh(model.d, cfg),
            "step_fn": make_step_fn(model, cfg, table),
            "log": [],
        }
    for epoch in range(plan.epochs):
        for variant in plan.variants:
            run = runs[variant]
            run["theta"], run["state"], report = train_epoch(
                model, run["theta"], run["state"], packed, run["step_fn"],
                run["cfg"], epoch, seed,
            )
            run["log"].append(report)
    return {v: (run["theta"], run["log"]) for v, run in runs.items()}


def run_experiment(
    train_ds: SequenceDataset,
    test_ds: SequenceDataset,
    table: FrequencyTable,
    n_items: int,
    plan: ExperimentPlan,
) -> ExperimentReport:
    """Train variants x seeds from shared per-seed inits, evaluate on one test split.

    Seeds run in parallel only when ``plan.jobs > 1`` and timing is disabled;
    timed runs stay serial so the per-epoch numbers are honest.
    """
    model = EmbeddingModel(n_items, plan.d_emb)
    packed = PackedDataset(train_ds)

    def one_seed(seed):
        return seed, _train_cell_interleaved(model, packed, table, plan, seed)

    if plan.jobs > 1 and not plan.timing:
        with ThreadPoolExecutor(max_workers=plan.jobs) as pool:
            seed_results = dict(pool.map(one_seed, plan.seeds))
    else:
        seed_results = dict(one_seed(s) for s in plan.seeds)

    cells: dict = {v: {} for v in plan.variants}
    epoch_logs: dict = {v: {} for v in plan.variants}
    final_params: dict = {v: {} for v in plan.variants}
    for seed in plan.seeds:
        for variant in plan.variants:
            theta, log = seed_results[seed][variant]
            cells[variant][seed] = evaluate(
                model, theta, test_ds, table, k=plan.k, seed=seed
            )
            epoch_logs[variant][seed] = log
            final_params[variant][seed] = theta
    summary = _summarize(cells, plan)
    improvements = _improvements(summary, plan)
    timing = _timing(epoch_logs, plan)
    return ExperimentReport(cells, epoch_logs, summary, improvements, timing, final_params)


def _summarize(cells, plan) -> dict:
    out: dict = {}
    for variant in plan.variants:
        out[variant] = {}
        for scope in ("overall", "head", "tail"):
            out[variant][scope] = {}
            for metric in ("ndcg_at_k", "hr_at_k"):
                values = np.array(
                    [getattr(cells[variant][s].scope(scope), metric) for s in plan.seeds]
                )
                out[variant][scope][metric] = {
                    "mean": float(values.mean()),
                    "std": float(values.std()),
                }
    return out


def _improvements(summary, plan) -> dict:
    """Relative gain of the item-wise variant over the best other variant."""
    baselines = [v for v in plan.variants if v != "eisam"]
    if "eisam" not in plan.variants or not baselines:
        return {}
    out: dict = {}
    for scope in ("overall", "head", "tail"):
        out[scope] = {}
        for metric in ("ndcg_at_k", "hr_at_k"):
            best = max(summary[v][scope][metric]["mean"] for v in baselines)
            ours = summary["eisam"][scope][metric]["mean"]
            out[scope][metric] = (ours - best) / best if best > 0 else None
    return out


def _timing(epoch_logs, plan) -> dict:
    out: dict = {}
    per_variant = {}
    for variant in plan.variants:
        seconds = [
            rep.wall_seconds for s in plan.seeds for rep in epoch_logs[variant][s]
        ]
        per_variant[variant] = float(np.mean(seconds)) if seconds else 0.0
        out[variant] = {"seconds_per_epoch": per_variant[variant]}
    if "sam" in per_variant and per_variant["sam"] > 0:
        for variant in plan.variants:
            out[variant]["ratio_to_sam"] = per_variant[variant] / per_variant["sam"]
    return out
