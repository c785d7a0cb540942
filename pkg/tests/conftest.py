import numpy as np
import pytest

from tailsam.data import SequenceDataset, frequency_table
from tailsam.model import Batch, EmbeddingModel


def make_dataset(targets, prefix_pool=None, l_max=3):
    """Dataset with the given target sequence; prefixes cycle over the pool."""
    pool = prefix_pool or [(t,) for t in targets]
    examples = tuple(
        (tuple(pool[i % len(pool)]), int(t)) for i, t in enumerate(targets)
    )
    return SequenceDataset(examples, l_max)


def single_item_batch(n=1, item=0):
    return Batch.from_examples([((item,), item)] * n)


@pytest.fixture
def small_model_instance():
    """A 12-item model with random params, a dataset, and its frequency table."""
    rng = np.random.default_rng(42)
    n_items, d_emb = 12, 4
    model = EmbeddingModel(n_items, d_emb)
    theta = model.init_params(7) + 0.01 * rng.standard_normal(model.d)
    targets = rng.choice(n_items, size=80, p=_zipfish(n_items))
    examples = []
    for t in targets:
        length = int(rng.integers(1, 4))
        prefix = tuple(int(x) for x in rng.integers(0, n_items, size=length))
        examples.append((prefix, int(t)))
    dataset = SequenceDataset(tuple(examples), l_max=3)
    table = frequency_table(dataset, n_items=n_items)
    return model, theta, dataset, table


def _zipfish(n):
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()
