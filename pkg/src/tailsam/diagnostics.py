"""Curvature probes, loss-surface slices, and the risk-bound calculator.

Second-order information comes from central finite differences over the
exact first-order gradients (Hessian-vector products), so no second-order
differentiation machinery is needed. Traces are estimated stochastically
with Rademacher probes; each probe draws its randomness from
``(seed, probe_index)`` so serial and parallel evaluation agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FrequencyTable, SequenceDataset
from .exceptions import DomainError, EmptyScopeError, InvalidConfigError
from .optimizers import BatchObjective, ItemWeights, PackedDataset, epsilon_hat
from .weighting import WeightingScheme, weights_for_table

DEFAULT_CHUNK = 4096

SCOPES = ("overall", "head", "tail")


def restrict_scope(
    dataset: SequenceDataset, table: FrequencyTable, scope: str
) -> SequenceDataset:
    """Keep only examples whose target belongs to the requested item group."""
    if scope not in SCOPES:
        raise InvalidConfigError(f"scope must be one of {SCOPES}")
    if scope == "overall":
        return dataset
    members = table.head if scope == "head" else table.tail
    indices = [i for i, (_, t) in enumerate(dataset.examples) if t in members]
    if not indices:
        raise EmptyScopeError(f"no example with a {scope} target")
    return dataset.subset(indices)


def dataset_losses(
    model: BatchObjective, theta, packed: PackedDataset, chunk: int = DEFAULT_CHUNK
) -> np.ndarray:
    parts = []
    for start in range(0, len(packed), chunk):
        batch = packed.batch(np.arange(start, min(start + chunk, len(packed))))
        parts.append(model.losses(theta, batch))
    return np.concatenate(parts)


def dataset_weighted_grad(
    model: BatchObjective,
    theta,
    packed: PackedDataset,
    row: np.ndarray,
    chunk: int = DEFAULT_CHUNK,
) -> np.ndarray:
    """Gradient of ``sum_j row[j] * loss_j`` over the whole dataset, chunked."""
    total = np.zeros(model.d)
    for start in range(0, len(packed), chunk):
        stop = min(start + chunk, len(packed))
        batch = packed.batch(np.arange(start, stop))
        _, grads = model.loss_and_grads(theta, batch, [row[start:stop]])
        total += grads[0]
    return total


def weighted_loss_row(packed: PackedDataset, iw: ItemWeights) -> np.ndarray:
    """Per-example coefficients whose weighted sum IS the item-weighted loss.

    ``sum_i f(q_i) * mean_i(loss)`` expands exactly to
    ``(1/N) * sum_j (f(q_tj)/q_tj) * loss_j``.
    """
    return iw.sample_weights(packed.targets) / len(packed)


def hvp_fd(
    model: BatchObjective,
    theta: np.ndarray,
    dataset: SequenceDataset | PackedDataset,
    table: FrequencyTable,
    scheme: WeightingScheme,
    v: np.ndarray,
    h: float | None = None,
) -> np.ndarray:
    """Hessian-vector product of the item-weighted loss via central differences.

    The step is scaled by the parameter norm and by ``1/||v||`` so the probe
    magnitude, not its length, sets the finite-difference accuracy.
    """
    packed = dataset if isinstance(dataset, PackedDataset) else PackedDataset(dataset)
    v = np.asarray(v, dtype=np.float64)
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        return np.zeros_like(v)
    if h is None:
        h = 1e-4 * max(1.0, float(np.linalg.norm(theta)))
    if not h > 0:
        raise InvalidConfigError("h must be > 0")
    step = h / v_norm
    n_items = _item_space(model, table)
    row = weighted_loss_row(packed, ItemWeights.from_table(table, scheme, n_items))
    g_plus = dataset_weighted_grad(model, theta + step * v, packed, row)
    g_minus = dataset_weighted_grad(model, theta - step * v, packed, row)
    return (g_plus - g_minus) / (2 * step)


def _item_space(model: BatchObjective, table: FrequencyTable) -> int:
    return getattr(model, "n_items", table.n_items)


@dataclass(frozen=True)
class TraceReport:
    estimate: float
    std_error: float
    n_probes: int
    scope: str


def hutchinson_trace(
    model: BatchObjective,
    theta: np.ndarray,
    dataset: SequenceDataset,
    table: FrequencyTable,
    scheme: WeightingScheme,
    n_probes: int,
    seed: int,
    scope: str = "overall",
    h: float | None = None,
) -> TraceReport:
    """Trace of the weighted-loss Hessian as the mean of ``v' H v`` samples."""
    if n_probes < 1:
        raise InvalidConfigError("n_probes must be >= 1")
    scoped = restrict_scope(dataset, table, scope)
    packed = PackedDataset(scoped)
    samples = np.empty(n_probes)
    for k in range(n_probes):
        rng = np.random.default_rng([seed, k])
        v = rng.integers(0, 2, size=model.d).astype(np.float64) * 2.0 - 1.0
        hv = hvp_fd(model, theta, packed, table, scheme, v, h=h)
        samples[k] = float(v @ hv)
    estimate = float(samples.mean())
    std_error = float(samples.std(ddof=1) / math.sqrt(n_probes)) if n_probes > 1 else 0.0
    return TraceReport(estimate, std_error, n_probes, scope)


@dataclass(frozen=True)
class LandscapeGrid:
    """Loss values over a 2-D slice spanned by two orthonormal directions."""

    directions: np.ndarray  # (2, d), unit norm, orthogonal
    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray  # (len(alphas), len(betas))
    scope: str

    def __post_init__(self):
        d1, d2 = self.directions
        if (
            abs(np.linalg.norm(d1) - 1.0) > 1e-10
            or abs(np.linalg.norm(d2) - 1.0) > 1e-10
            or abs(float(d1 @ d2)) > 1e-10
        ):
            raise InvalidConfigError("slice directions must be orthonormal")
        if not np.isfinite(self.values).all():
            raise InvalidConfigError("slice values must be finite")

    def rows(self):
        """(alpha, beta, loss) triples in row-major order."""
        for r, a in enumerate(self.alphas):
            for c, b in enumerate(self.betas):
                yield float(a), float(b), float(self.values[r, c])


def _slice_directions(model, theta, seed):
    """Two seeded directions, block-rescaled to the parameter norms, orthonormalized.

    Per-block rescaling shapes each direction like the parameters themselves
    (a gaussian segment of an embedding row is scaled to that row's norm);
    Gram-Schmidt afterwards restores exact unit norm and orthogonality.
    """
    dirs = []
    blocks = model.parameter_blocks() if hasattr(model, "parameter_blocks") else None
    for idx in range(2):
        rng = np.random.default_rng([seed, idx])
        vec = rng.standard_normal(model.d)
        if blocks is not None:
            for start, stop in blocks:
                seg_norm = float(np.linalg.norm(vec[start:stop]))
                ref_norm = float(np.linalg.norm(theta[start:stop]))
                if seg_norm > 0 and ref_norm > 0:
                    vec[start:stop] *= ref_norm / seg_norm
        dirs.append(vec)
    d1 = dirs[0] / np.linalg.norm(dirs[0])
    d2 = dirs[1] - (dirs[1] @ d1) * d1
    d2 = d2 / np.linalg.norm(d2)
    return np.stack([d1, d2])


def landscape_slice(
    model: BatchObjective,
    theta: np.ndarray,
    dataset: SequenceDataset,
    table: FrequencyTable,
    scope: str = "tail",
    grid_half_width: float = 0.5,
    resolution: int = 21,
    seed: int = 0,
    directions: np.ndarray | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> LandscapeGrid:
    """Mean loss over the scoped examples on a (2*half_width)^2 grid.

    The center cell evaluates at theta itself, so ``values[mid, mid]`` equals
    the unperturbed scope loss exactly.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise InvalidConfigError("resolution must be odd and >= 3")
    scoped = restrict_scope(dataset, table, scope)
    packed = PackedDataset(scoped)
    if directions is None:
        directions = _slice_directions(model, theta, seed)
    else:
        directions = np.asarray(directions, dtype=np.float64)
    coords = np.linspace(-grid_half_width, grid_half_width, resolution)
    values = np.empty((resolution, resolution))
    for r, alpha in enumerate(coords):
        for c, beta in enumerate(coords):
            point = theta + alpha * directions[0] + beta * directions[1]
            values[r, c] = float(dataset_losses(model, point, packed, chunk).mean())
    return LandscapeGrid(directions, coords.copy(), coords.copy(), values, scope)


def empirical_item_sharpness(
    model: BatchObjective,
    theta: np.ndarray,
    dataset: SequenceDataset,
    table: FrequencyTable,
    scheme: WeightingScheme,
    rho: float,
) -> dict[int, float]:
    """Per-item mean-loss increase under the shared closed-form perturbation.

    The perturbation direction comes from the dataset-level weighted gradient;
    every item with at least one example gets ``L_i(theta+eps) - L_i(theta)``.
    """
    if rho < 0:
        raise InvalidConfigError("rho must be >= 0")
    packed = PackedDataset(dataset)
    n_items = _item_space(model, table)
    iw = ItemWeights.from_table(table, scheme, n_items)
    row = weighted_loss_row(packed, iw)
    g_w = dataset_weighted_grad(model, theta, packed, row)
    eps = epsilon_hat(g_w, rho)
    base = dataset_losses(model, theta, packed)
    moved = dataset_losses(model, theta + eps, packed)
    out: dict[int, float] = {}
    for item in np.unique(packed.targets):
        sel = packed.targets == item
        out[int(item)] = float(moved[sel].mean() - base[sel].mean())
    return out


def bw_constant(table: FrequencyTable, scheme: WeightingScheme, cap: float) -> float:
    """Weighted loss ceiling ``sum_i f(q_i) * q_i * cap`` over positive-count items."""
    if not cap > 0:
        raise DomainError("loss cap must be > 0")
    weights = weights_for_table(scheme, table)
    return float(
        sum(weights[item] * q * cap for item, q in table.freqs.items() if q > 0)
    )


@dataclass(frozen=True)
class BoundInputs:
    """Measured and configured quantities the bound calculator consumes."""

    rho: float
    lam: float
    delta: float
    d: int
    n: int
    loss_cap: float  # per-example loss ceiling
    weighted_cap: float  # item-weighted ceiling, see bw_constant
    theta_norm: float
    trace_hw: float
    q_min: float
    n_items: int
    objective: float  # empirical loss plus lam * weighted sharpness

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise DomainError("delta must lie in (0, 1)")
        if self.n < 2:
            raise DomainError("n must be >= 2")
        if not self.q_min > 0:
            raise DomainError("q_min must be > 0")
        if not self.rho > 0:
            raise DomainError("rho must be > 0")
        if self.lam < 0:
            raise DomainError("lam must be >= 0")
        if self.n_items < 1 or self.d < 1:
            raise DomainError("n_items and d must be >= 1")


@dataclass(frozen=True)
class BoundReport:
    total: float
    components: dict[str, float]
    complexity_pieces: dict[str, float]
    remainder: float  # always 0; the unevaluated higher-order term
    remainder_scale: float


def bound_rhs(inputs: BoundInputs) -> BoundReport:
    """Balanced-distribution risk bound, reported as a component breakdown.

    total = (2/(I*q_min)) * objective
            - lam*rho^2*trace / (2*I*q_min*(sqrt(d)+sqrt(2 ln n))^2)
            + (1/(I*q_min)) * (40*(B + lam*B_w)/(3n)) * ln(2/delta)
            + (1/(I*q_min)) * lam * C / n

    with C = 2 + 2*B_w + 2d*ln(1 + ||theta||^2/(d*rho^2))
           + 4d*ln(sqrt(d) + sqrt(2 ln n))
           + 4*ln(pi^2*sqrt(n)*(1 + n*B_w)^2 / (3*delta)).

    Natural logarithms throughout. The higher-order remainder cannot be
    evaluated; it is reported as zero with its asymptotic scale attached and
    never folded into the total.
    """
    sd = math.sqrt(inputs.d) + math.sqrt(2 * math.log(inputs.n))
    inv = 1.0 / (inputs.n_items * inputs.q_min)
    empirical = 2.0 * inv * inputs.objective
    curvature = -(
        inputs.lam
        * inputs.rho**2
        * inputs.trace_hw
        / (2.0 * inputs.n_items * inputs.q_min * sd**2)
    )
    concentration = (
        inv
        * (40.0 * (inputs.loss_cap + inputs.lam * inputs.weighted_cap) / (3.0 * inputs.n))
        * math.log(2.0 / inputs.delta)
    )
    pieces = {
        "base": 2.0 + 2.0 * inputs.weighted_cap,
        "theta_norm": 2.0
        * inputs.d
        * math.log(1.0 + inputs.theta_norm**2 / (inputs.d * inputs.rho**2)),
        "dimension": 4.0 * inputs.d * math.log(sd),
        "confidence": 4.0
        * math.log(
            math.pi**2
            * math.sqrt(inputs.n)
            * (1.0 + inputs.n * inputs.weighted_cap) ** 2
            / (3.0 * inputs.delta)
        ),
    }
    complexity = inv * inputs.lam * sum(pieces.values()) / inputs.n
    if inputs.lam == 0:
        curvature = 0.0
        complexity = 0.0
    components = {
        "empirical": empirical,
        "curvature": curvature,
        "concentration": concentration,
        "complexity": complexity,
    }
    remainder_scale = inv * inputs.lam * inputs.d * inputs.rho**2 / sd**2
    total = sum(components.values())
    return BoundReport(total, components, pieces, 0.0, remainder_scale)


def collect_bound_inputs(
    model: BatchObjective,
    theta: np.ndarray,
    dataset: SequenceDataset,
    table: FrequencyTable,
    scheme: WeightingScheme,
    rho: float,
    lam: float,
    delta: float = 0.05,
    n_probes: int = 20,
    seed: int = 0,
) -> BoundInputs:
    """Measure everything the bound needs from a trained model.

    The sharpness part of the objective is evaluated at the closed-form
    perturbation (the same first-order point the optimizer uses), not at the
    exact inner maximum.
    """
    packed = PackedDataset(dataset)
    n_items = _item_space(model, table)
    iw = ItemWeights.from_table(table, scheme, n_items)
    row = weighted_loss_row(packed, iw)
    base_losses = dataset_losses(model, theta, packed)
    plain = float(base_losses.mean())
    g_w = dataset_weighted_grad(model, theta, packed, row)
    if float(np.linalg.norm(g_w)) < 1e-12 or rho == 0:
        sharpness = 0.0
    else:
        eps = epsilon_hat(g_w, rho)
        moved = dataset_losses(model, theta + eps, packed)
        sharpness = float(row @ moved - row @ base_losses)
    trace = hutchinson_trace(
        model, theta, dataset, table, scheme, n_probes=n_probes, seed=seed
    )
    cap = float(getattr(model, "loss_cap", np.inf))
    return BoundInputs(
        rho=rho,
        lam=lam,
        delta=delta,
        d=model.d,
        n=len(dataset),
        loss_cap=cap,
        weighted_cap=bw_constant(table, scheme, cap),
        theta_norm=float(np.linalg.norm(theta)),
        trace_hw=trace.estimate,
        q_min=table.q_min,
        n_items=table.n_items,
        objective=plain + lam * sharpness,
    )
