import itertools
import logging

import numpy as np
import pytest

from app.crowdsource_eval import (
    align_components,
    estimate_missing_rates,
    predict,
    prediction_error,
    prediction_set,
)
from app.errors import ShapeMismatchError
from app.stagewise.mdpd import MISSING, LabelMatrix, MixtureModel


def diagonal_model(order, p=0.8, n_workers=3):
    """Three components whose label preference is `order[k]`."""
    n = len(order)
    mu = np.full((n, n_workers, n), (1 - p) / (n - 1))
    for k, label in enumerate(order):
        mu[k, :, label] = p
    return MixtureModel(np.full(n, 1.0 / n), mu)


class TestMissingRates:
    def test_rates_and_frozen_category(self):
        entries = np.zeros((108, 2), dtype=int)
        entries[:50, 0] = MISSING
        policy = estimate_missing_rates(LabelMatrix(entries, n_labels=2))
        np.testing.assert_allclose(policy.rates, [50 / 108, 0.0])
        assert policy.frozen.n_categories == 3
        np.testing.assert_allclose(policy.frozen.values[:, 2], [50 / 108, 0.0])
        assert policy.dropped_workers == ()

    def test_no_missing_means_no_frozen(self):
        policy = estimate_missing_rates(LabelMatrix(np.zeros((4, 2), dtype=int), n_labels=2))
        assert policy.frozen is None
        assert policy.kept_workers == (0, 1)

    def test_silent_worker_dropped(self, caplog):
        entries = np.array([[0, MISSING, 1], [1, MISSING, MISSING]])
        data = LabelMatrix(entries, n_labels=2, worker_ids=("a", "b", "c"))
        with caplog.at_level(logging.WARNING, logger="stagewise_em"):
            policy = estimate_missing_rates(data)
        assert "Dropping 1 workers" in caplog.text
        assert policy.kept_workers == (0, 2)
        assert policy.dropped_workers == (1,)
        assert policy.data.worker_ids == ("a", "c")
        np.testing.assert_allclose(policy.rates, [0.0, 0.5])

    def test_no_labels_at_all(self):
        with pytest.raises(ShapeMismatchError):
            estimate_missing_rates(LabelMatrix(np.full((2, 2), MISSING), n_labels=2))


class TestAlignment:
    def test_identity(self):
        np.testing.assert_array_equal(align_components(diagonal_model([0, 1, 2])), [0, 1, 2])

    def test_permuted_components(self):
        np.testing.assert_array_equal(align_components(diagonal_model([2, 0, 1])), [2, 0, 1])

    def test_alignment_on_informative_workers(self):
        model = diagonal_model([1, 0], n_workers=2)
        mu = np.array(model.conditionals)
        # worker 1 points the other way; only worker 0 is informative
        mu[:, 1, :] = [[0.9, 0.1], [0.1, 0.9]]
        model = model.with_params(conditionals=mu)
        np.testing.assert_array_equal(align_components(model, [0]), [1, 0])

    def test_needs_square_model(self, rng, make_model):
        with pytest.raises(ShapeMismatchError):
            align_components(make_model(rng, 2, 3, 3))

    def test_matches_exhaustive_search(self, rng, make_model):
        for _ in range(20):
            model = make_model(rng, 4, 5, 4)
            scores = model.conditionals.mean(axis=1)
            best = max(
                itertools.permutations(range(4)),
                key=lambda perm: scores[np.arange(4), list(perm)].sum(),
            )
            perm = align_components(model)
            assert scores[np.arange(4), perm].sum() == pytest.approx(
                scores[np.arange(4), list(best)].sum()
            )


class TestPredict:
    def test_labels_follow_alignment(self):
        model = diagonal_model([2, 0, 1], p=0.9)
        data = LabelMatrix(np.array([[2, 2, 2], [0, 0, 1], [1, 1, 1]]), n_labels=3)
        np.testing.assert_array_equal(predict(model, data), [3, 1, 2])

    def test_rejects_non_square(self, rng, make_model):
        model = make_model(rng, 2, 2, 3)
        data = LabelMatrix(np.zeros((2, 2), dtype=int), n_labels=3)
        with pytest.raises(ShapeMismatchError, match="one component per label"):
            predict(model, data)

    def test_prediction_set_adds_informative_workers(self):
        model = diagonal_model([0, 1, 2], p=0.8, n_workers=4)
        mu = model.conditionals.copy()
        mu[:, 3] = [0.2, 0.5, 0.3]
        model = MixtureModel(model.weights, mu)
        assert prediction_set(model, (1,), n_items=300) == (0, 1, 2)
        assert prediction_set(model, (3,), n_items=300, level=0.0) == (3,)
        assert prediction_set(model, None, n_items=300) == (0, 1, 2, 3)


class TestPredictionError:
    def test_aligned(self):
        assert prediction_error([1, 2, 2], [1, 2, 1]) == pytest.approx(1 / 3)

    def test_best_permutation(self):
        pred, truth = [2, 2, 1, 1], [1, 1, 2, 2]
        assert prediction_error(pred, truth, "aligned") == 1.0
        assert prediction_error(pred, truth, "best_permutation") == 0.0

    def test_best_never_worse_than_aligned(self, rng):
        for _ in range(50):
            pred = rng.integers(1, 4, size=30)
            truth = rng.integers(1, 4, size=30)
            assert prediction_error(pred, truth, "best_permutation") <= prediction_error(pred, truth)

    def test_errors(self):
        with pytest.raises(ValueError):
            prediction_error([1, 2], [1])
        with pytest.raises(ValueError):
            prediction_error([1], [1], "hungarian")
        with pytest.raises(ValueError):
            prediction_error([7], [1], "best_permutation")
