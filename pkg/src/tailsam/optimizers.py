"""Training-step algebra: plain, re-weighted, SAM-family, and item-wise steps.

Every step works on a flat parameter vector through a small objective
interface (``losses`` / ``loss_and_grads``), so the same code drives both the
embedding scorer and the quadratic surrogates used in tests.

The item-wise variant ("eisam") minimizes

    batch loss  +  lam * [ weighted loss at (theta + eps_hat) - weighted loss at theta ]

where the weighted loss upweights rare target items and
``eps_hat = rho * g_w / ||g_w||`` is the closed-form worst-case perturbation
of the weighted loss. Its gradient is assembled from three weight-vector
backpropagations: g_w at theta (direction), g1 = weighted gradient at
theta + eps_hat, and g2 = plain gradient minus lam * g_w (reusing g_w), with
the final update ``lam * g1 + g2`` handed to the base optimizer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .data import FrequencyTable, SequenceDataset
from .exceptions import (
    InvalidConfigError,
    NonFiniteGradientError,
    ZeroFrequencyTargetError,
    ZeroGradientError,
)
from .model import Batch
from .weighting import WeightingScheme, weights_for_table

VARIANTS = ("plain", "rw", "sam", "group_sam", "eisam")
BASES = ("sgd", "adam")
ESTIMATORS = ("unbiased", "grouped")

ZERO_GRAD_TOL = 1e-12


class BatchObjective(Protocol):
    """What a step needs from a model: per-example losses and weighted gradients."""

    d: int
    loss_cap: float

    def losses(self, theta: np.ndarray, batch: Batch) -> np.ndarray: ...

    def loss_and_grads(
        self, theta: np.ndarray, batch: Batch, weight_rows
    ) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class OptimizerConfig:
    variant: str = "eisam"
    rho: float = 0.05
    lam: float = 0.5
    lr: float = 5e-4
    base: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 64
    scheme: WeightingScheme = WeightingScheme()
    estimator: str = "unbiased"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}")
        if self.base not in BASES:
            raise InvalidConfigError(f"unknown base optimizer {self.base!r}")
        if self.estimator not in ESTIMATORS:
            raise InvalidConfigError(f"unknown estimator mode {self.estimator!r}")
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise InvalidConfigError("rho must be finite and >= 0")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise InvalidConfigError("lam must be finite and >= 0")
        if not self.lr > 0:
            raise InvalidConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")


@dataclass
class OptState:
    """Base-optimizer state: step counter plus Adam moment vectors."""

    step_count: int
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def fresh(cls, d: int, cfg: OptimizerConfig) -> "OptState":
        if cfg.base == "adam":
            return cls(0, np.zeros(d), np.zeros(d))
        return cls(0)

    def copy(self) -> "OptState":
        return OptState(
            self.step_count,
            None if self.m is None else self.m.copy(),
            None if self.v is None else self.v.copy(),
        )


@dataclass(frozen=True)
class StepReport:
    """Per-step diagnostics.

    ``g1_norm`` is the perturbed-gradient component and ``g2_norm`` the
    unperturbed component of the applied update (for plain/rw steps the whole
    update sits in g2). ``eps_norm`` is rho when a perturbation was applied,
    else 0.
    """

    loss: float
    weighted_loss: float
    gw_norm: float
    eps_norm: float
    g1_norm: float
    g2_norm: float
    clamped: bool
    fallback: bool
    wall_nanos: int


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    mean_loss: float
    mean_weighted_loss: float
    wall_seconds: float
    clamped_steps: int
    fallback_steps: int
    n_steps: int


@dataclass(frozen=True)
class ItemWeights:
    """Dense per-item arrays derived from a frequency table and a scheme.

    ``w = f / q`` is the per-sample weight that makes the batch-mean weighted
    loss an unbiased estimator of ``sum_i f(q_i) * (mean loss of item i)``
    under uniform example sampling.
    """

    q: np.ndarray
    f: np.ndarray
    w: np.ndarray

    @classmethod
    def from_table(
        cls, table: FrequencyTable, scheme: WeightingScheme, n_items: int
    ) -> "ItemWeights":
        q = table.freq_array(n_items)
        f_map = weights_for_table(scheme, table)
        f = np.zeros(n_items, dtype=np.float64)
        for item, value in f_map.items():
            f[item] = value
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(q > 0, f / np.where(q > 0, q, 1.0), 0.0)
        return cls(q, f, w)

    def sample_weights(self, targets: np.ndarray) -> np.ndarray:
        if (self.q[targets] == 0).any():
            raise ZeroFrequencyTargetError(
                "batch contains a target with zero training frequency"
            )
        return self.w[targets]


class PackedDataset:
    """Whole-dataset padded arrays; slicing rows is how batches are made."""

    def __init__(self, dataset: SequenceDataset):
        full = Batch.from_examples(dataset.examples)
        self.padded = full.padded
        self.mask = full.mask
        self.lengths = full.lengths
        self.targets = full.targets

    def __len__(self):
        return self.targets.shape[0]

    def batch(self, indices) -> Batch:
        indices = np.asarray(indices)
        lengths = self.lengths[indices]
        width = int(lengths.max())
        return Batch(
            self.padded[indices, :width],
            self.mask[indices, :width],
            lengths,
            self.targets[indices],
        )

    def full_batch(self) -> Batch:
        return Batch(self.padded, self.mask, self.lengths, self.targets)


def epsilon_hat(g_w: np.ndarray, rho: float) -> np.ndarray:
    """Closed-form worst-case perturbation ``rho * g_w / ||g_w||_2``.

    A zero radius returns the zero vector; a (near-)zero gradient with a
    positive radius is degenerate and raises, letting the caller fall back
    to an unperturbed step.
    """
    if rho == 0.0:
        return np.zeros_like(g_w)
    norm = float(np.linalg.norm(g_w))
    if norm < ZERO_GRAD_TOL:
        raise ZeroGradientError(f"gradient norm {norm} too small for rho={rho}")
    return (rho / norm) * g_w


def weighted_batch_loss_and_grad(
    model: BatchObjective,
    theta: np.ndarray,
    batch: Batch,
    item_weights: ItemWeights,
    mode: str = "unbiased",
) -> tuple[float, np.ndarray]:
    """Minibatch value and gradient of the item-weighted loss.

    ``unbiased`` weighs example k by ``f(q_k)/q_k`` and takes the batch mean;
    averaged over uniformly drawn batches this reproduces the dataset-level
    weighted loss exactly. ``grouped`` instead weighs within-batch per-item
    mean losses by ``f(q_i)`` (an ablation estimator, biased at batch level).
    """
    row = _weighted_row(batch, item_weights, mode)
    losses, grads = model.loss_and_grads(theta, batch, [row])
    return float(row @ losses), grads[0]


def _weighted_row(batch: Batch, iw: ItemWeights, mode: str) -> np.ndarray:
    if mode == "unbiased":
        return iw.sample_weights(batch.targets) / batch.size
    if mode == "grouped":
        if (iw.q[batch.targets] == 0).any():
            raise ZeroFrequencyTargetError(
                "batch contains a target with zero training frequency"
            )
        counts = np.bincount(batch.targets, minlength=iw.f.shape[0])
        return iw.f[batch.targets] / counts[batch.targets]
    raise InvalidConfigError(f"unknown estimator mode {mode!r}")


def _plain_row(batch: Batch) -> np.ndarray:
    return np.full(batch.size, 1.0 / batch.size)


def base_update(
    state: OptState, theta: np.ndarray, total_grad: np.ndarray, cfg: OptimizerConfig
) -> tuple[np.ndarray, OptState]:
    """Apply one SGD or bias-corrected Adam update with the supplied gradient."""
    if not np.isfinite(total_grad).all():
        raise NonFiniteGradientError(state.step_count)
    t = state.step_count + 1
    if cfg.base == "sgd":
        return theta - cfg.lr * total_grad, OptState(t)
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * total_grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * total_grad**2
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    theta2 = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    return theta2, OptState(t, m, v)


def _finish(
    state, theta, total, cfg, *, loss, weighted_loss, gw_norm, eps_norm,
    g1, g2, clamped, fallback, started
):
    theta2, state2 = base_update(state, theta, total, cfg)
    report = StepReport(
        loss=loss,
        weighted_loss=weighted_loss,
        gw_norm=gw_norm,
        eps_norm=eps_norm,
        g1_norm=float(np.linalg.norm(g1)),
        g2_norm=float(np.linalg.norm(g2)),
        clamped=clamped,
        fallback=fallback,
        wall_nanos=time.perf_counter_ns() - started,
    )
    return theta2, state2, report


def _clamped(model: BatchObjective, losses: np.ndarray) -> bool:
    cap = getattr(model, "loss_cap", np.inf)
    return bool(np.isfinite(cap) and (losses >= cap).any())


def plain_step(model, theta, state, batch, cfg):
    started = time.perf_counter_ns()
    row = _plain_row(batch)
    losses, grads = model.loss_and_grads(theta, batch, [row])
    g = grads[0]
    loss = float(row @ losses)
    return _finish(
        state, theta, g, cfg, loss=loss, weighted_loss=loss,
        gw_norm=float(np.linalg.norm(g)), eps_norm=0.0, g1=np.zeros(1), g2=g,
        clamped=_clamped(model, losses), fallback=False, started=started,
    )


def rw_step(model, theta, state, batch, item_weights, cfg):
    """Re-weighted baseline: one step on the f-weighted, batch-normalized loss."""
    started = time.perf_counter_ns()
    f_k = item_weights.f[batch.targets]
    total_f = float(f_k.sum())
    fallback = not (total_f > 0 and np.isfinite(total_f))
    row = _plain_row(batch) if fallback else f_k / total_f
    losses, grads = model.loss_and_grads(theta, batch, [row])
    g = grads[0]
    return _finish(
        state, theta, g, cfg, loss=float(losses.mean()),
        weighted_loss=float(row @ losses), gw_norm=float(np.linalg.norm(g)),
        eps_norm=0.0, g1=np.zeros(1), g2=g,
        clamped=_clamped(model, losses), fallback=fallback, started=started,
    )


def sam_step(model, theta, state, batch, cfg):
    """Two-pass flat-minimum step: ascend along the normalized batch gradient,
    descend with the gradient taken at the perturbed point."""
    started = time.perf_counter_ns()
    row = _plain_row(batch)
    losses, grads = model.loss_and_grads(theta, batch, [row])
    g = grads[0]
    loss = float(row @ losses)
    clamped = _clamped(model, losses)
    try:
        eps = epsilon_hat(g, cfg.rho)
    except ZeroGradientError:
        return _finish(
            state, theta, g, cfg, loss=loss, weighted_loss=loss,
            gw_norm=float(np.linalg.norm(g)), eps_norm=0.0, g1=np.zeros(1), g2=g,
            clamped=clamped, fallback=True, started=started,
        )
    _, pert = model.loss_and_grads(theta + eps, batch, [row])
    g1 = pert[0]
    return _finish(
        state, theta, g1, cfg, loss=loss, weighted_loss=loss,
        gw_norm=float(np.linalg.norm(g)), eps_norm=cfg.rho if cfg.rho > 0 else 0.0,
        g1=g1, g2=np.zeros(1), clamped=clamped, fallback=False, started=started,
    )


def eisam_step(model, theta, state, batch, item_weights, cfg):
    """Item-wise sharpness step per the three-backpropagation recipe.

    One fused pass at theta yields the plain gradient and the weighted
    gradient g_w (two weight rows, one forward); the second pass evaluates the
    weighted gradient at theta + eps_hat. The update is
    ``lam * g1 + (g_plain - lam * g_w)``. A degenerate perturbation falls back
    to the plain gradient and is flagged.
    """
    started = time.perf_counter_ns()
    plain_row = _plain_row(batch)
    w_row = _weighted_row(batch, item_weights, cfg.estimator)
    losses, grads = model.loss_and_grads(theta, batch, [plain_row, w_row])
    g_plain, g_w = grads[0], grads[1]
    loss = float(plain_row @ losses)
    weighted_loss = float(w_row @ losses)
    gw_norm = float(np.linalg.norm(g_w))
    clamped = _clamped(model, losses)
    try:
        eps = epsilon_hat(g_w, cfg.rho)
    except ZeroGradientError:
        return _finish(
            state, theta, g_plain, cfg, loss=loss, weighted_loss=weighted_loss,
            gw_norm=gw_norm, eps_norm=0.0, g1=np.zeros(1), g2=g_plain,
            clamped=clamped, fallback=True, started=started,
        )
    _, pert = model.loss_and_grads(theta + eps, batch, [w_row])
    g1 = pert[0]
    g2 = g_plain - cfg.lam * g_w
    total = cfg.lam * g1 + g2
    return _finish(
        state, theta, total, cfg, loss=loss, weighted_loss=weighted_loss,
        gw_norm=gw_norm, eps_norm=cfg.rho if cfg.rho > 0 else 0.0,
        g1=g1, g2=g2, clamped=clamped, fallback=False, started=started,
    )


def group_sam_step(model, theta, state, batch, head_mask, cfg):
    """Per-group perturbation baseline over the head/tail partition.

    Each group present in the batch gets its own ascent direction from its
    group-mean gradient; the update is the plain batch gradient plus
    ``lam * sum_g [grad_g at (theta + eps_g) - grad_g at theta]``. Group
    gradients are evaluated as masked full-batch passes, so each group costs
    a full evaluation (the group loop is what makes this variant expensive).
    """
    started = time.perf_counter_ns()
    in_head = head_mask[batch.targets]
    group_masks = [m for m in (in_head, ~in_head) if m.any()]
    rows = [m.astype(np.float64) / m.sum() for m in group_masks]
    losses, grads = model.loss_and_grads(theta, batch, rows)
    loss = float(losses.mean())
    clamped = _clamped(model, losses)
    shares = [m.sum() / batch.size for m in group_masks]
    g_batch = sum(share * g for share, g in zip(shares, grads))
    total = g_batch.copy()
    correction = np.zeros_like(total)
    fallback = False
    perturbed = False
    for row, g_g in zip(rows, grads):
        try:
            eps_g = epsilon_hat(g_g, cfg.rho)
        except ZeroGradientError:
            fallback = True
            continue
        perturbed = perturbed or cfg.rho > 0
        _, pert = model.loss_and_grads(theta + eps_g, batch, [row])
        correction += pert[0] - g_g
    total += cfg.lam * correction
    return _finish(
        state, theta, total, cfg, loss=loss, weighted_loss=loss,
        gw_norm=float(np.linalg.norm(g_batch)),
        eps_norm=cfg.rho if perturbed else 0.0,
        g1=correction, g2=g_batch, clamped=clamped, fallback=fallback,
        started=started,
    )


def make_step_fn(
    model: BatchObjective,
    cfg: OptimizerConfig,
    table: FrequencyTable | None,
    n_items: int | None = None,
):
    """Bind a variant to its precomputed tables; returns step(theta, state, batch)."""
    needs_table = cfg.variant in ("rw", "eisam", "group_sam")
    if needs_table and table is None:
        raise InvalidConfigError(f"variant {cfg.variant!r} needs a frequency table")
    if cfg.variant == "plain":
        return lambda theta, state, batch: plain_step(model, theta, state, batch, cfg)
    if cfg.variant == "sam":
        return lambda theta, state, batch: sam_step(model, theta, state, batch, cfg)
    n_items = n_items if n_items is not None else getattr(model, "n_items")
    if cfg.variant == "group_sam":
        head = table.head_mask(n_items)
        return lambda theta, state, batch: group_sam_step(
            model, theta, state, batch, head, cfg
        )
    iw = ItemWeights.from_table(table, cfg.scheme, n_items)
    if cfg.variant == "rw":
        return lambda theta, state, batch: rw_step(model, theta, state, batch, iw, cfg)
    return lambda theta, state, batch: eisam_step(model, theta, state, batch, iw, cfg)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded full permutation cut into batches; the last partial batch is kept."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train_epoch(
    model, theta, state, packed: PackedDataset, step_fn, cfg, epoch: int, seed: int
) -> tuple[np.ndarray, OptState, EpochReport]:
    """One full pass over the data; shuffling derives from (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    started = time.perf_counter()
    losses = []
    weighted = []
    clamped_steps = 0
    fallback_steps = 0
    n_steps = 0
    for indices in batch_indices(len(packed), cfg.batch_size, rng):
        batch = packed.batch(indices)
        theta, state, report = step_fn(theta, state, batch)
        losses.append(report.loss)
        weighted.append(report.weighted_loss)
        clamped_steps += report.clamped
        fallback_steps += report.fallback
        n_steps += 1
    report = EpochReport(
        epoch=epoch,
        mean_loss=float(np.mean(losses)) if losses else 0.0,
        mean_weighted_loss=float(np.mean(weighted)) if weighted else 0.0,
        wall_seconds=time.perf_counter() - started,
        clamped_steps=clamped_steps,
        fallback_steps=fallback_steps,
        n_steps=n_steps,
    )
    return theta, state, report


def train(
    model: BatchObjective,
    theta0: np.ndarray,
    dataset: SequenceDataset,
    table: FrequencyTable | None,
    cfg: OptimizerConfig,
    epochs: int,
    seed: int,
) -> tuple[np.ndarray, list[EpochReport]]:
    """Run ``epochs`` shuffled passes; deterministic given (cfg, seed)."""
    if len(dataset) == 0:
        raise InvalidConfigError("cannot train on an empty dataset")
    packed = PackedDataset(dataset)
    step_fn = make_step_fn(model, cfg, table)
    theta = np.asarray(theta0, dtype=np.float64).copy()
    state = OptState.fresh(theta.size, cfg)
    reports = []
    for epoch in range(epochs):
        theta, state, report = train_epoch(
            model, theta, state, packed, step_fn, cfg, epoch, seed
        )
        reports.append(report)
    return theta, reports
