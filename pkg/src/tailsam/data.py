"""Interaction logs, prefix->target sequence datasets, item frequency tables.

Pipeline: raw (user, item, timestamp) interactions are filtered by item
popularity, turned into next-item training examples, and summarized into a
frequency table whose top-20% most frequent items form the "head" group and
the rest the "tail" group. A seeded power-law generator provides synthetic
logs for experiments that do not start from a file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DatasetTooSmallError,
    EmptyDatasetError,
    InvalidConfigError,
    ParseError,
)

Example = tuple[tuple[int, ...], int]


@dataclass(frozen=True)
class InteractionLog:
    """Raw (user_id, item_id, timestamp) records, in file order."""

    records: tuple[tuple[int, int, int], ...]

    def __len__(self):
        return len(self.records)

    def item_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for _, item, _ in self.records:
            counts[item] = counts.get(item, 0) + 1
        return counts


@dataclass(frozen=True)
class SequenceDataset:
    """Next-item examples: a bounded-length prefix and the item that follows.

    Examples are ordered by user, then by time. ``users`` tracks which user
    produced each example; it is dropped when a dataset is reloaded from a
    sequence file that was written without user annotations.
    """

    examples: tuple[Example, ...]
    l_max: int
    users: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.users is not None and len(self.users) != len(self.examples):
            raise InvalidConfigError("users must align 1:1 with examples")
        for prefix, _ in self.examples:
            if not 1 <= len(prefix) <= self.l_max:
                raise InvalidConfigError(
                    f"prefix length {len(prefix)} outside 1..{self.l_max}"
                )

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def targets(self) -> tuple[int, ...]:
        return tuple(t for _, t in self.examples)

    def item_ids(self) -> frozenset[int]:
        """Every item id that occurs in a prefix or as a target."""
        ids = set()
        for prefix, target in self.examples:
            ids.update(prefix)
            ids.add(target)
        return frozenset(ids)

    def subset(self, indices) -> "SequenceDataset":
        examples = tuple(self.examples[i] for i in indices)
        users = None if self.users is None else tuple(self.users[i] for i in indices)
        return SequenceDataset(examples, self.l_max, users)


@dataclass(frozen=True)
class FrequencyTable:
    """Per-item target counts, frequencies, and the head/tail partition.

    ``counts`` covers the full vocabulary (zero for items never seen as a
    target), ``total`` is the number of examples counted, and ``freqs`` is
    exactly ``counts / total``. Head holds the ceil(0.2 * vocabulary) most
    frequent items; count ties go to the smaller item id.
    """

    counts: dict[int, int]
    total: int
    freqs: dict[int, float]
    head: frozenset[int]
    tail: frozenset[int]

    @property
    def vocabulary(self) -> tuple[int, ...]:
        return tuple(sorted(self.counts))

    @property
    def n_items(self) -> int:
        return len(self.counts)

    @property
    def q_min(self) -> float:
        """Smallest positive frequency. Items with zero count are ignored."""
        positive = [q for q in self.freqs.values() if q > 0]
        if not positive:
            raise EmptyDatasetError("frequency table has no positive counts")
        return min(positive)

    def freq_of(self, item: int) -> float:
        return self.freqs.get(item, 0.0)

    def freq_array(self, n_items: int) -> np.ndarray:
        """Frequencies as a dense array indexed by item id (0..n_items-1)."""
        q = np.zeros(n_items, dtype=np.float64)
        for item, value in self.freqs.items():
            if not 0 <= item < n_items:
                raise InvalidConfigError(
                    f"item id {item} does not fit a dense table of {n_items}"
                )
            q[item] = value
        return q

    def head_mask(self, n_items: int) -> np.ndarray:
        mask = np.zeros(n_items, dtype=bool)
        for item in self.head:
            mask[item] = True
        return mask


@dataclass(frozen=True)
class ZipfConfig:
    """Seeded power-law generator settings: p(rank r) proportional to r^-alpha."""

    n_items: int
    alpha: float
    n_sequences: int
    seq_len_range: tuple[int, int] = (2, 11)
    seed: int = 0
    l_max: int = 10

    def __post_init__(self):
        lo, hi = self.seq_len_range
        if self.n_items < 2:
            raise InvalidConfigError("n_items must be >= 2")
        if self.alpha < 0:
            raise InvalidConfigError("alpha must be >= 0")
        if self.n_sequences < 1:
            raise InvalidConfigError("n_sequences must be >= 1")
        if lo < 1 or hi < lo:
            raise InvalidConfigError("seq_len_range must satisfy 1 <= min <= max")
        if self.l_max < 1:
            raise InvalidConfigError("l_max must be >= 1")
        if self.seed < 0:
            raise InvalidConfigError("seed must be a non-negative integer")


def load_interactions(path) -> InteractionLog:
    """Parse a tab-separated ``user item timestamp`` file. ``#`` lines are comments."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split("\t")
            if len(fields) != 3:
                raise ParseError(line_no, f"expected 3 fields, got {len(fields)}")
            try:
                user, item, ts = (int(f) for f in fields)
            except ValueError:
                raise ParseError(line_no, f"non-integer field in {fields!r}") from None
            if user < 0 or item < 0:
                raise ParseError(line_no, "ids must be non-negative")
            records.append((user, item, ts))
    return InteractionLog(tuple(records))


def save_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, item, ts in log.records:
            fh.write(f"{user}\t{item}\t{ts}\n")


def filter_interactions(log: InteractionLog, min_count: int) -> InteractionLog:
    """Drop records of items with fewer than ``min_count`` interactions."""
    if min_count <= 0:
        return log
    counts = log.item_counts()
    kept = tuple(r for r in log.records if counts[r[1]] >= min_count)
    return InteractionLog(kept)


def frequency_table(
    dataset: SequenceDataset, vocabulary=None, n_items: int | None = None
) -> FrequencyTable:
    """Count how often each item occurs as a prediction target.

    The vocabulary defaults to every item id present in the dataset; pass
    ``n_items`` to pin it to the dense range 0..n_items-1 instead (synthetic
    data with a fixed item space). Head/tail is derived immediately.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot build a frequency table without examples")
    if n_items is not None:
        vocabulary = range(n_items)
    if vocabulary is None:
        vocabulary = dataset.item_ids()
    counts = {int(item): 0 for item in vocabulary}
    for target in dataset.targets:
        if target not in counts:
            raise InvalidConfigError(f"target {target} outside the vocabulary")
        counts[target] += 1
    total = len(dataset)
    freqs = {item: c / total for item, c in counts.items()}
    head, tail = _pareto_partition(counts)
    return FrequencyTable(counts, total, freqs, head, tail)


def _pareto_partition(counts: dict[int, int]) -> tuple[frozenset, frozenset]:
    order = sorted(counts, key=lambda item: (-counts[item], item))
    n_head = math.ceil(0.2 * len(order))
    return frozenset(order[:n_head]), frozenset(order[n_head:])


def pareto_split(table: FrequencyTable) -> FrequencyTable:
    """Recompute the head/tail partition of an existing table."""
    if not any(c > 0 for c in table.counts.values()):
        raise EmptyDatasetError("pareto split needs at least one positive count")
    head, tail = _pareto_partition(table.counts)
    return FrequencyTable(dict(table.counts), table.total, dict(table.freqs), head, tail)


def build_sequences(
    log: InteractionLog,
    l_max: int,
    min_count: int = 5,
    n_items: int | None = None,
) -> tuple[SequenceDataset, FrequencyTable]:
    """Turn an interaction log into next-item examples plus a frequency table.

    Items with fewer than ``min_count`` interactions are removed first. Each
    user's surviving history, sorted by timestamp (ties by item id), yields
    one example per position t >= 2 with the prefix truncated to the last
    ``l_max`` items. Frequencies are counted over the targets of the emitted
    examples.
    """
    if l_max < 1:
        raise InvalidConfigError("l_max must be >= 1")
    if min_count < 0:
        raise InvalidConfigError("min_count must be >= 0")
    log = filter_interactions(log, min_count)
    by_user: dict[int, list[tuple[int, int]]] = {}
    for user, item, ts in log.records:
        by_user.setdefault(user, []).append((ts, item))
    examples: list[Example] = []
    users: list[int] = []
    for user in sorted(by_user):
        history = [item for _, item in sorted(by_user[user])]
        for t in range(1, len(history)):
            start = max(0, t - l_max)
            examples.append((tuple(history[start:t]), history[t]))
            users.append(user)
    if not examples:
        raise EmptyDatasetError("no training example survives filtering")
    dataset = SequenceDataset(tuple(examples), l_max, tuple(users))
    table = frequency_table(dataset, n_items=n_items)
    return dataset, table


def generate_zipf_dataset(
    cfg: ZipfConfig,
) -> tuple[InteractionLog, SequenceDataset, FrequencyTable]:
    """Synthesize a log whose item marginal follows p(rank r) ~ r^-alpha.

    Item id r-1 carries rank r, so id 0 is the most popular. Sequence items
    are i.i.d. draws from the marginal, sequence lengths are uniform over
    ``seq_len_range``, and everything is determined by ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    ranks = np.arange(1, cfg.n_items + 1, dtype=np.float64)
    weights = ranks ** (-cfg.alpha)
    probs = weights / weights.sum()
    lo, hi = cfg.seq_len_range
    lengths = rng.integers(lo, hi + 1, size=cfg.n_sequences)
    items = rng.choice(cfg.n_items, size=int(lengths.sum()), p=probs)
    records = []
    pos = 0
    for user, length in enumerate(lengths):
        for ts in range(int(length)):
            records.append((user, int(items[pos]), ts))
            pos += 1
    log = InteractionLog(tuple(records))
    dataset, table = build_sequences(log, cfg.l_max, min_count=0, n_items=cfg.n_items)
    return log, dataset, table


def _split_sizes(n: int) -> tuple[int, int, int]:
    # Earliest examples go to train; val and test each take a tenth,
    # at least one each once a user has 3+ examples; remainder to train.
    if n < 3:
        return n, 0, 0
    n_val = max(1, n // 10)
    n_test = max(1, n // 10)
    return n - n_val - n_test, n_val, n_test


def split_8_1_1(
    dataset: SequenceDataset, seed: int = 0
) -> tuple[SequenceDataset, SequenceDataset, SequenceDataset]:
    """Chronological 8:1:1 split, applied per user.

    Each user's examples (already time-ordered) are cut into earliest-80%
    train, next-10% validation, last-10% test. Datasets without user
    annotations are treated as one stream. The split is order-based and
    fully deterministic; ``seed`` is accepted for interface stability only.
    """
    del seed
    if len(dataset) < 10:
        raise DatasetTooSmallError("need at least 10 examples to split 8:1:1")
    if dataset.users is None:
        groups = [list(range(len(dataset)))]
    else:
        groups = []
        current_user = object()
        for idx, user in enumerate(dataset.users):
            if user != current_user:
                groups.append([])
                current_user = user
            groups[-1].append(idx)
    train_idx: list[int] = []
    val_idx: list[int] = []
    test_idx: list[int] = []
    for group in groups:
        n_train, n_val, _ = _split_sizes(len(group))
        train_idx.extend(group[:n_train])
        val_idx.extend(group[n_train : n_train + n_val])
        test_idx.extend(group[n_train + n_val :])
    return (
        dataset.subset(train_idx),
        dataset.subset(val_idx),
        dataset.subset(test_idx),
    )


def reindex_contiguous(
    dataset: SequenceDataset,
) -> tuple[SequenceDataset, dict[int, int]]:
    """Remap item ids to the dense range 0..V-1 (sorted by original id).

    Returns the remapped dataset and the original->dense mapping. File-loaded
    logs may have sparse ids after filtering; the model and the ranking
    universe want a dense item space.
    """
    mapping = {item: i for i, item in enumerate(sorted(dataset.item_ids()))}
    examples = tuple(
        (tuple(mapping[i] for i in prefix), mapping[target])
        for prefix, target in dataset.examples
    )
    return SequenceDataset(examples, dataset.l_max, dataset.users), mapping


def save_sequences(dataset: SequenceDataset, path) -> None:
    """Write one JSON object per example; user ids are kept when known."""
    with open(path, "w", encoding="utf-8") as fh:
        for idx, (prefix, target) in enumerate(dataset.examples):
            obj = {"prefix": list(prefix), "target": target}
            if dataset.users is not None:
                obj["user"] = dataset.users[idx]
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_sequences(path, l_max: int | None = None) -> SequenceDataset:
    examples: list[Example] = []
    users: list[int] = []
    saw_user = True
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                examples.append((tuple(int(i) for i in obj["prefix"]), int(obj["target"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(line_no, str(exc)) from None
            if "user" in obj:
                users.append(int(obj["user"]))
            else:
                saw_user = False
    if not examples:
        raise EmptyDatasetError(f"no examples in {path}")
    if l_max is None:
        l_max = max(len(p) for p, _ in examples)
    kept_users = tuple(users) if saw_user and len(users) == len(examples) else None
    return SequenceDataset(tuple(examples), l_max, kept_users)


def save_frequency_table(table: FrequencyTable, path) -> None:
    obj = {
        "counts": {str(item): count for item, count in table.counts.items()},
        "head": sorted(table.head),
        "tail": sorted(table.tail),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_frequency_table(path) -> FrequencyTable:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    head = frozenset(int(i) for i in obj["head"])
    tail = frozenset(int(i) for i in obj["tail"])
    counts = {int(k): int(v) for k, v in obj["counts"].items()}
    for item in head | tail:
        counts.setdefault(item, 0)
    total = sum(counts.values())
    freqs = {item: (c / total if total else 0.0) for item, c in counts.items()}
    return FrequencyTable(counts, total, freqs, head, tail)
