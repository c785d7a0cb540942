import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import GridSearchCV, KFold

from tailsam.data import SequenceDataset
from tailsam.exceptions import IdOutOfRangeError, InvalidConfigError
from tailsam.recommender import NextItemRecommender, as_sequence_dataset, check_prefixes


def toy_pairs(n=60, n_items=6, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        target = int(rng.integers(0, n_items))
        length = int(rng.integers(1, 4))
        pairs.append((tuple(int(x) for x in rng.integers(0, n_items, length)), target))
    return pairs


def fast_estimator(**overrides):
    params = dict(variant="eisam", d_emb=4, epochs=1, batch_size=16, lr=1e-3,
                  weighting="exponential", random_state=0)
    params.update(overrides)
    return NextItemRecommender(**params)


class TestInputHelpers:
    def test_accepts_pairs(self):
        ds = as_sequence_dataset([((1, 2), 3), ((2,), 1)])
        assert isinstance(ds, SequenceDataset)
        assert len(ds) == 2

    def test_accepts_x_y(self):
        ds = as_sequence_dataset([(1, 2), (2,)], y=[3, 1])
        assert ds.examples == (((1, 2), 3), ((2,), 1))

    def test_passthrough_dataset(self):
        ds = as_sequence_dataset([((0,), 1)])
        assert as_sequence_dataset(ds) is ds

    def test_rejects_empty_prefix(self):
        with pytest.raises(InvalidConfigError):
            as_sequence_dataset([((), 1)])

    def test_rejects_negative_ids(self):
        with pytest.raises(InvalidConfigError):
            as_sequence_dataset([((-1,), 1)])

    def test_mismatched_lengths(self):
        with pytest.raises(InvalidConfigError):
            as_sequence_dataset([(1,)], y=[1, 2])

    def test_check_prefixes_range(self):
        with pytest.raises(IdOutOfRangeError):
            check_prefixes([(0, 9)], n_items=5)


class TestEstimatorApi:
    def test_get_set_params_roundtrip(self):
        est = fast_estimator(lam=0.25)
        assert est.get_params()["lam"] == 0.25
        est.set_params(lam=0.5, rho=0.2)
        assert est.lam == 0.5 and est.rho == 0.2

    def test_clone_preserves_params(self):
        est = fast_estimator(gamma=3.0)
        assert clone(est).get_params() == est.get_params()

    def test_fit_returns_self_and_sets_state(self):
        est = fast_estimator()
        out = est.fit(toy_pairs())
        assert out is est
        assert est.theta_.shape == (est.model_.d,)
        assert est.n_items_ == 6
        assert len(est.history_) == 1

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            fast_estimator().predict([(0,)])

    def test_predict_shape_and_range(self):
        est = fast_estimator().fit(toy_pairs())
        preds = est.predict([(0,), (1, 2), (5, 5, 5)])
        assert preds.shape == (3,)
        assert ((0 <= preds) & (preds < 6)).all()

    def test_recommend_orders_by_score(self):
        est = fast_estimator().fit(toy_pairs())
        top = est.recommend([(2, 3)], k=6)[0]
        scores = est.decision_function([(2, 3)])[0]
        resorted = np.lexsort((np.arange(6), -scores))
        assert np.array_equal(top, resorted)

    def test_same_random_state_is_deterministic(self):
        pairs = toy_pairs()
        a = fast_estimator().fit(pairs)
        b = fast_estimator().fit(pairs)
        assert np.array_equal(a.theta_, b.theta_)

    def test_score_is_overall_ndcg(self):
        est = fast_estimator().fit(toy_pairs())
        pairs = toy_pairs(seed=1)
        assert est.score(pairs) == est.evaluate(pairs).overall.ndcg_at_k

    def test_explicit_n_items_pins_vocabulary(self):
        est = fast_estimator(n_items=10).fit(toy_pairs())
        assert est.n_items_ == 10
        assert est.decision_function([(0,)]).shape == (1, 10)

    def test_prediction_rejects_out_of_range_items(self):
        est = fast_estimator().fit(toy_pairs())
        with pytest.raises(IdOutOfRangeError):
            est.predict([(7,)])

    @pytest.mark.parametrize("variant", ["plain", "rw", "sam", "group_sam", "eisam"])
    def test_all_variants_fit(self, variant):
        est = fast_estimator(variant=variant).fit(toy_pairs())
        assert np.isfinite(est.theta_).all()

    def test_grid_search_compatibility(self):
        pairs = toy_pairs(n=40)
        grid = GridSearchCV(
            fast_estimator(),
            {"lam": [0.1, 0.5]},
            cv=KFold(n_splits=2),
        )
        grid.fit(pairs)
        assert grid.best_params_["lam"] in (0.1, 0.5)
