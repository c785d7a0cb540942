"""Estimator-style wrapper so the trainer composes with the sklearn ecosystem.

``NextItemRecommender`` follows the usual conventions: hyperparameters are
stored verbatim in ``__init__`` (so ``get_params`` / ``set_params`` / ``clone``
and grid search work), ``fit`` learns from prefix->target examples and returns
``self``, fitted state lives in trailing-underscore attributes, and
``predict`` maps prefixes to item ids.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import SequenceDataset, frequency_table
from .evaluation import MetricReport, evaluate
from .exceptions import IdOutOfRangeError, InvalidConfigError
from .model import EmbeddingModel
from .optimizers import OptimizerConfig, train
from .weighting import WeightingScheme


def as_sequence_dataset(X, y=None, l_max: int | None = None) -> SequenceDataset:
    """Coerce estimator input into a SequenceDataset.

    Accepts a SequenceDataset directly, an iterable of (prefix, target) pairs,
    or ``X`` as prefixes with ``y`` as the aligned targets.
    """
    if isinstance(X, SequenceDataset):
        if y is not None:
            raise InvalidConfigError("y must be None when X is already a dataset")
        return X
    if y is None:
        pairs = [(tuple(int(i) for i in p), int(t)) for p, t in X]
    else:
        prefixes = list(X)
        targets = list(y)
        if len(prefixes) != len(targets):
            raise InvalidConfigError("X and y must have the same length")
        pairs = [
            (tuple(int(i) for i in p), int(t)) for p, t in zip(prefixes, targets)
        ]
    if not pairs:
        raise InvalidConfigError("need at least one example")
    for prefix, target in pairs:
        if not prefix:
            raise InvalidConfigError("prefixes must be non-empty")
        if min(prefix) < 0 or target < 0:
            raise InvalidConfigError("item ids must be non-negative")
    width = max(len(p) for p, _ in pairs)
    return SequenceDataset(tuple(pairs), l_max if l_max is not None else width)


def check_prefixes(X, n_items: int) -> list[tuple[int, ...]]:
    prefixes = [tuple(int(i) for i in p) for p in X]
    for prefix in prefixes:
        if not prefix:
            raise InvalidConfigError("prefixes must be non-empty")
        if min(prefix) < 0 or max(prefix) >= n_items:
            raise IdOutOfRangeError(f"prefix item id outside 0..{n_items - 1}")
    return prefixes


class NextItemRecommender(BaseEstimator):
    """Next-item scorer trained with a configurable sharpness-aware step.

    Parameters mirror the optimizer/weighting configuration: ``variant``
    selects the training step (plain, rw, sam, group_sam, eisam), ``rho`` the
    perturbation radius, ``lam`` the penalty strength, ``weighting`` the
    frequency-to-weight mapping. ``n_items`` pins the item-space size; when
    None it is inferred from the training data as ``max id + 1``.
    """

    def __init__(
        self,
        variant: str = "eisam",
        d_emb: int = 32,
        epochs: int = 3,
        batch_size: int = 64,
        lr: float = 5e-4,
        base: str = "adam",
        rho: float = 0.05,
        lam: float = 0.5,
        weighting: str = "exponential",
        gamma: float = 2.0,
        beta: float = 0.9,
        eps: float = 1e-8,
        normalize_weights: str | None = None,
        estimator_mode: str = "unbiased",
        n_items: int | None = None,
        k: int = 10,
        random_state: int = 0,
    ):
        self.variant = variant
        self.d_emb = d_emb
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.base = base
        self.rho = rho
        self.lam = lam
        self.weighting = weighting
        self.gamma = gamma
        self.beta = beta
        self.eps = eps
        self.normalize_weights = normalize_weights
        self.estimator_mode = estimator_mode
        self.n_items = n_items
        self.k = k
        self.random_state = random_state

    def _scheme(self) -> WeightingScheme:
        return WeightingScheme(
            kind=self.weighting,
            eps=self.eps,
            beta=self.beta,
            gamma=self.gamma,
            normalize=self.normalize_weights,
        )

    def _optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            variant=self.variant,
            rho=self.rho,
            lam=self.lam,
            lr=self.lr,
            base=self.base,
            batch_size=self.batch_size,
            scheme=self._scheme(),
            estimator=self.estimator_mode,
        )

    def fit(self, X, y=None):
        dataset = as_sequence_dataset(X, y)
        n_items = self.n_items
        if n_items is None:
            n_items = max(dataset.item_ids()) + 1
        table = frequency_table(dataset, n_items=n_items)
        model = EmbeddingModel(n_items, self.d_emb)
        theta0 = model.init_params(self.random_state)
        theta, history = train(
            model, theta0, dataset, table, self._optimizer_config(),
            self.epochs, self.random_state,
        )
        self.model_ = model
        self.theta_ = theta
        self.table_ = table
        self.history_ = history
        self.n_items_ = n_items
        return self

    def _require_fitted(self):
        if not hasattr(self, "theta_"):
            raise NotFittedError("fit must be called before prediction")

    def decision_function(self, X) -> np.ndarray:
        """Logits over the full item space, one row per prefix."""
        self._require_fitted()
        prefixes = check_prefixes(X, self.n_items_)
        return np.stack(
            [self.model_.score_all(self.theta_, p) for p in prefixes]
        )

    def predict(self, X) -> np.ndarray:
        """Top-1 item per prefix (argmax logit, ties to the lower id)."""
        return self.decision_function(X).argmax(axis=1)

    def recommend(self, X, k: int | None = None) -> np.ndarray:
        """Top-k item lists per prefix under the descending-logit ranking."""
        k = self.k if k is None else k
        scores = self.decision_function(X)
        n = scores.shape[1]
        out = np.empty((scores.shape[0], min(k, n)), dtype=np.int64)
        ids = np.arange(n)
        for row, z in enumerate(scores):
            order = np.lexsort((ids, -z))
            out[row] = order[: out.shape[1]]
        return out

    def evaluate(self, X, y=None) -> MetricReport:
        """Ranking metrics at k with head/tail breakdown on held-out examples."""
        self._require_fitted()
        dataset = as_sequence_dataset(X, y)
        return evaluate(
            self.model_, self.theta_, dataset, self.table_,
            k=self.k, seed=self.random_state,
        )

    def score(self, X, y=None) -> float:
        """Mean overall NDCG at k, so model selection maximizes ranking quality."""
        return self.evaluate(X, y).overall.ndcg_at_k
