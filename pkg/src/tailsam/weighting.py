"""Frequency-dependent item weighting functions.

Three production forms map an item's empirical frequency q to a positive
weight that shrinks as q grows:

    normalized         1 / (q + eps)
    effective_number   (1 - beta) / (1 - beta**q)
    exponential        (1 - q)**gamma

plus two degenerate forms used by reduction tests: ``identity`` (constant 1)
and ``frequency`` (weight equals q, which cancels the per-item averaging and
recovers the plain empirical loss).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from .data import FrequencyTable
from .exceptions import DomainError, InvalidConfigError

KINDS = ("normalized", "effective_number", "exponential", "identity", "frequency")


@dataclass(frozen=True)
class WeightingScheme:
    """Immutable choice of weighting function plus its hyperparameters.

    ``normalize`` may be ``"mean-one"`` to rescale table weights to unit mean,
    which keeps penalty strengths comparable across schemes; the perturbation
    direction is invariant to that rescaling.
    """

    kind: str = "exponential"
    eps: float = 1e-8
    beta: float = 0.9
    gamma: float = 2.0
    normalize: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"unknown weighting kind {self.kind!r}")
        if self.kind == "normalized" and not self.eps > 0:
            raise InvalidConfigError("eps must be > 0")
        if self.kind == "effective_number" and not 0 <= self.beta < 1:
            raise InvalidConfigError("beta must be in [0, 1)")
        if self.kind == "exponential" and not self.gamma > 0:
            raise InvalidConfigError("gamma must be > 0")
        if self.normalize not in (None, "mean-one"):
            raise InvalidConfigError("normalize must be None or 'mean-one'")

    @classmethod
    def normalized(cls, eps: float = 1e-8, **kw) -> "WeightingScheme":
        return cls(kind="normalized", eps=eps, **kw)

    @classmethod
    def effective_number(cls, beta: float = 0.9, **kw) -> "WeightingScheme":
        return cls(kind="effective_number", beta=beta, **kw)

    @classmethod
    def exponential(cls, gamma: float = 2.0, **kw) -> "WeightingScheme":
        return cls(kind="exponential", gamma=gamma, **kw)

    @classmethod
    def identity(cls) -> "WeightingScheme":
        return cls(kind="identity")

    @classmethod
    def frequency(cls) -> "WeightingScheme":
        return cls(kind="frequency")

    def __call__(self, q: float) -> float:
        return weight(self, q)


def weight(scheme: WeightingScheme, q: float) -> float:
    """Evaluate the raw weighting function at frequency ``q`` in [0, 1]."""
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"frequency {q} outside [0, 1]")
    kind = scheme.kind
    if kind == "normalized":
        return 1.0 / (q + scheme.eps)
    if kind == "effective_number":
        if scheme.beta == 0.0:
            return 1.0
        # 1 - beta**q via expm1 so tiny q does not round the denominator to zero
        denom = -math.expm1(q * math.log(scheme.beta))
        if denom <= 0.0:
            return math.inf
        return (1.0 - scheme.beta) / denom
    if kind == "exponential":
        return (1.0 - q) ** scheme.gamma
    if kind == "identity":
        return 1.0
    return q  # frequency


def weights_for_table(scheme: WeightingScheme, table: FrequencyTable) -> dict[int, float]:
    """One weight per vocabulary item, optionally rescaled to unit mean."""
    raw = {item: weight(scheme, q) for item, q in table.freqs.items()}
    if scheme.normalize == "mean-one" and raw:
        mean = sum(raw.values()) / len(raw)
        if mean > 0 and math.isfinite(mean):
            raw = {item: w / mean for item, w in raw.items()}
    return raw


def emit_weight_profile(scheme: WeightingScheme, table: FrequencyTable, path) -> None:
    """Write ``rank,item_id,q,weight`` rows sorted by descending frequency."""
    weights = weights_for_table(scheme, table)
    order = sorted(table.freqs, key=lambda item: (-table.freqs[item], item))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "item_id", "q", "weight"])
        for rank, item in enumerate(order, start=1):
            writer.writerow([rank, item, repr(table.freqs[item]), repr(weights[item])])
