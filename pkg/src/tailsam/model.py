"""A small differentiable next-item model with closed-form gradients.

The scorer is deliberately simple so that every gradient used by the
training-step algebra is exact and cheap to verify against finite
differences: the hidden state is the mean of the prefix item embeddings,
logits are dot products against the same embedding table plus a per-item
bias, and the loss is softmax cross-entropy over the full item space,
clamped to [0, ln(n_items) + LOSS_CAP_MARGIN].

Parameters flatten to a single vector of dimension
``d = n_items * d_emb + n_items`` (embedding rows first, bias last), which is
the layout every optimizer and diagnostic in this package works in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    IdOutOfRangeError,
    InvalidConfigError,
    NonFiniteWeightError,
)

LOSS_CAP_MARGIN = 10.0


@dataclass(frozen=True)
class ModelParams:
    """Embedding matrix (n_items, d_emb) and bias vector (n_items,)."""

    embeddings: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.bias.ndim != 1:
            raise DimensionMismatchError("embeddings must be 2-D and bias 1-D")
        if self.embeddings.shape[0] != self.bias.shape[0]:
            raise DimensionMismatchError("embeddings and bias disagree on n_items")

    @property
    def n_items(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d_emb(self) -> int:
        return self.embeddings.shape[1]

    @property
    def d(self) -> int:
        return self.embeddings.size + self.bias.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.embeddings.ravel(), self.bias])

    @classmethod
    def unflatten(cls, theta: np.ndarray, n_items: int, d_emb: int) -> "ModelParams":
        theta = np.asarray(theta, dtype=np.float64)
        expected = n_items * d_emb + n_items
        if theta.shape != (expected,):
            raise DimensionMismatchError(
                f"expected a flat vector of length {expected}, got {theta.shape}"
            )
        embeddings = theta[: n_items * d_emb].reshape(n_items, d_emb).copy()
        bias = theta[n_items * d_emb :].copy()
        return cls(embeddings, bias)


@dataclass(frozen=True)
class Batch:
    """A minibatch of (prefix, target) examples with padded index arrays."""

    padded: np.ndarray  # (B, L) item ids, 0 where masked
    mask: np.ndarray  # (B, L) True on real prefix positions
    lengths: np.ndarray  # (B,) prefix lengths
    targets: np.ndarray  # (B,)

    @classmethod
    def from_examples(cls, examples) -> "Batch":
        examples = list(examples)
        if not examples:
            raise InvalidConfigError("a batch needs at least one example")
        lengths = np.array([len(p) for p, _ in examples], dtype=np.int64)
        if lengths.min() < 1:
            raise InvalidConfigError("prefixes must be non-empty")
        width = int(lengths.max())
        padded = np.zeros((len(examples), width), dtype=np.int64)
        mask = np.zeros((len(examples), width), dtype=bool)
        for k, (prefix, _) in enumerate(examples):
            padded[k, : len(prefix)] = prefix
            mask[k, : len(prefix)] = True
        targets = np.array([t for _, t in examples], dtype=np.int64)
        return cls(padded, mask, lengths, targets)

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    @property
    def prefixes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(
            tuple(int(i) for i in row[:length])
            for row, length in zip(self.padded, self.lengths)
        )


@dataclass(frozen=True)
class PerExampleLoss:
    losses: np.ndarray
    targets: np.ndarray
    clamped: bool


def _check_ids(batch: Batch, n_items: int) -> None:
    ids = batch.padded[batch.mask]
    if ids.size and (ids.min() < 0 or ids.max() >= n_items):
        raise IdOutOfRangeError(f"prefix item id outside 0..{n_items - 1}")
    if batch.targets.min() < 0 or batch.targets.max() >= n_items:
        raise IdOutOfRangeError(f"target item id outside 0..{n_items - 1}")


def loss_cap(n_items: int) -> float:
    return math.log(n_items) + LOSS_CAP_MARGIN


def _hidden_states(params: ModelParams, batch: Batch) -> np.ndarray:
    gathered = params.embeddings[batch.padded] * batch.mask[:, :, None]
    return gathered.sum(axis=1) / batch.lengths[:, None]


def _forward(params: ModelParams, batch: Batch):
    """Shared forward pass: hidden states, logits, softmax, raw losses."""
    _check_ids(batch, params.n_items)
    hidden = _hidden_states(params, batch)
    logits = hidden @ params.embeddings.T + params.bias
    z_max = logits.max(axis=1, keepdims=True)
    exp_z = np.exp(logits - z_max)
    sum_exp = exp_z.sum(axis=1, keepdims=True)
    log_norm = (z_max + np.log(sum_exp)).ravel()
    raw = log_norm - logits[np.arange(batch.size), batch.targets]
    probs = exp_z / sum_exp
    return hidden, probs, raw


def forward_losses(params: ModelParams, batch: Batch) -> PerExampleLoss:
    """Per-example softmax cross-entropy, clamped to [0, loss_cap]."""
    _, _, raw = _forward(params, batch)
    cap = loss_cap(params.n_items)
    clamped = bool((raw > cap).any())
    losses = np.clip(raw, 0.0, cap)
    return PerExampleLoss(losses, batch.targets.copy(), clamped)


def score_all(params: ModelParams, prefix) -> np.ndarray:
    """Logits for every item given one prefix; rank descending, ties to lower id."""
    prefix = list(prefix)
    if not prefix:
        raise InvalidConfigError("prefix must be non-empty")
    ids = np.asarray(prefix, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= params.n_items:
        raise IdOutOfRangeError(f"prefix item id outside 0..{params.n_items - 1}")
    hidden = params.embeddings[ids].mean(axis=0)
    return params.embeddings @ hidden + params.bias


def loss_and_grads(
    params: ModelParams, batch: Batch, weight_rows
) -> tuple[PerExampleLoss, np.ndarray]:
    """One forward pass, one exact gradient per row of sample weights.

    Row r of the result is the gradient of ``sum_k weight_rows[r][k] * loss_k``
    with respect to the flattened parameters. Examples whose raw loss exceeds
    the cap are clamped, so their gradient contribution is zero.
    """
    weight_rows = np.atleast_2d(np.asarray(weight_rows, dtype=np.float64))
    if weight_rows.shape[1] != batch.size:
        raise DimensionMismatchError("weight rows must have one entry per example")
    if not np.isfinite(weight_rows).all():
        raise NonFiniteWeightError("sample weights must be finite")
    hidden, probs, raw = _forward(params, batch)
    cap = loss_cap(params.n_items)
    over_cap = raw > cap
    losses = PerExampleLoss(np.clip(raw, 0.0, cap), batch.targets.copy(), bool(over_cap.any()))

    rows_idx, cols_idx = np.nonzero(batch.mask)
    flat_ids = batch.padded[rows_idx, cols_idx]
    arange_b = np.arange(batch.size)
    grads = np.empty((weight_rows.shape[0], params.d), dtype=np.float64)
    for r, w in enumerate(weight_rows):
        w_eff = np.where(over_cap, 0.0, w)
        delta = probs * w_eff[:, None]
        delta[arange_b, batch.targets] -= w_eff
        bias_grad = delta.sum(axis=0)
        emb_grad = delta.T @ hidden
        d_hidden = (delta @ params.embeddings) / batch.lengths[:, None]
        np.add.at(emb_grad, flat_ids, d_hidden[rows_idx])
        grads[r, : emb_grad.size] = emb_grad.ravel()
        grads[r, emb_grad.size :] = bias_grad
    return losses, grads


def grad(params: ModelParams, batch: Batch, sample_weights) -> np.ndarray:
    """Gradient of the weighted sum of per-example losses, flattened."""
    _, grads = loss_and_grads(params, batch, [sample_weights])
    return grads[0]


def finite_diff_grad(
    params: ModelParams, batch: Batch, sample_weights, step: float
) -> np.ndarray:
    """Central-difference gradient oracle; touches only the forward pass."""
    if step <= 0:
        raise InvalidConfigError("step must be > 0")
    sample_weights = np.asarray(sample_weights, dtype=np.float64)
    theta = params.flatten()
    out = np.empty_like(theta)

    def total_loss(vec):
        p = ModelParams.unflatten(vec, params.n_items, params.d_emb)
        return float(sample_weights @ forward_losses(p, batch).losses)

    for j in range(theta.size):
        bump = np.zeros_like(theta)
        bump[j] = step
        out[j] = (total_loss(theta + bump) - total_loss(theta - bump)) / (2 * step)
    return out


def perturb(params: ModelParams, delta: np.ndarray) -> ModelParams:
    """Return params whose flattened form is ``flatten(params) + delta``."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (params.d,):
        raise DimensionMismatchError(f"delta must have shape ({params.d},)")
    return ModelParams.unflatten(params.flatten() + delta, params.n_items, params.d_emb)


def gradient_check(
    n_instances: int = 20,
    n_items: int = 20,
    d_emb: int = 8,
    batch_size: int = 5,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative disagreement between analytic and finite-difference gradients.

    Each instance draws fresh parameters, a fresh batch, and fresh positive
    sample weights; the relative error is the max-norm gap over the max-norm
    of the finite-difference gradient.
    """
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        params = ModelParams(
            rng.uniform(-0.5, 0.5, size=(n_items, d_emb)),
            rng.uniform(-0.5, 0.5, size=n_items),
        )
        examples = []
        for _ in range(batch_size):
            length = int(rng.integers(1, 6))
            prefix = tuple(int(x) for x in rng.integers(0, n_items, size=length))
            examples.append((prefix, int(rng.integers(0, n_items))))
        batch = Batch.from_examples(examples)
        weights = rng.uniform(0.2, 2.0, size=batch_size)
        exact = grad(params, batch, weights)
        approx = finite_diff_grad(params, batch, weights, step)
        denom = max(float(np.abs(approx).max()), 1e-8)
        worst = max(worst, float(np.abs(exact - approx).max()) / denom)
    return worst


class EmbeddingModel:
    """Flat-vector view of the scorer, the interface the optimizers drive.

    Holds the item-space geometry (n_items, d_emb) so that a bare parameter
    vector is enough to evaluate losses and gradients.
    """

    def __init__(self, n_items: int, d_emb: int = 32):
        if n_items < 1 or d_emb < 1:
            raise InvalidConfigError("n_items and d_emb must be >= 1")
        self.n_items = n_items
        self.d_emb = d_emb

    @property
    def d(self) -> int:
        return self.n_items * self.d_emb + self.n_items

    @property
    def loss_cap(self) -> float:
        return loss_cap(self.n_items)

    def init_params(self, seed: int) -> np.ndarray:
        """Embeddings uniform in (-0.1, 0.1), bias zero, seeded."""
        rng = np.random.default_rng(seed)
        emb = rng.uniform(-0.1, 0.1, size=(self.n_items, self.d_emb))
        return np.concatenate([emb.ravel(), np.zeros(self.n_items)])

    def to_params(self, theta: np.ndarray) -> ModelParams:
        return ModelParams.unflatten(theta, self.n_items, self.d_emb)

    def losses(self, theta: np.ndarray, batch: Batch) -> np.ndarray:
        return forward_losses(self.to_params(theta), batch).losses

    def loss_and_grads(self, theta, batch, weight_rows) -> tuple[np.ndarray, np.ndarray]:
        per_example, grads = loss_and_grads(self.to_params(theta), batch, weight_rows)
        return per_example.losses, grads

    def grad(self, theta, batch, sample_weights) -> np.ndarray:
        return grad(self.to_params(theta), batch, sample_weights)

    def score_all(self, theta, prefix) -> np.ndarray:
        return score_all(self.to_params(theta), prefix)

    def parameter_blocks(self):
        """(start, stop) slices of the flat vector: one per embedding row, one for bias.

        Loss-surface slices rescale direction segments per block so each block
        perturbs proportionally to its own parameter norm.
        """
        blocks = [
            (i * self.d_emb, (i + 1) * self.d_emb) for i in range(self.n_items)
        ]
        blocks.append((self.n_items * self.d_emb, self.d))
        return blocks


def save_checkpoint(path, model: EmbeddingModel, theta: np.ndarray, init_seed: int) -> None:
    """JSON checkpoint; float lists round-trip exactly via repr."""
    obj = {
        "n_items": model.n_items,
        "d_emb": model.d_emb,
        "init_seed": int(init_seed),
        "theta": [float(x) for x in theta],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[EmbeddingModel, np.ndarray, int]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    model = EmbeddingModel(int(obj["n_items"]), int(obj["d_emb"]))
    theta = np.array(obj["theta"], dtype=np.float64)
    if theta.shape != (model.d,):
        raise DimensionMismatchError("checkpoint vector does not match its geometry")
    return model, theta, int(obj["init_seed"])
