import logging

import numpy as np
import pytest
from scipy.stats import chi2

from app.stagewise.info_criterion import (
    CMITensor,
    cmi_noise_floor,
    cmi_sum,
    cmi_tensor,
    informative_workers,
    max_cmi_norm,
    max_triplet,
    penalized_log_likelihood,
    select_triplet,
    sparsity_diagnostic,
    worker_information,
)
from app.stagewise.mdpd import LabelMatrix, MixtureModel, Posterior, log_likelihood, posterior, sample


def naive_cmi(entries, resp, n_categories, smoothing):
    """Loop-by-loop pairwise CMI per component."""
    n_items, n_workers = entries.shape
    out = np.zeros((resp.shape[1], n_workers, n_workers))
    for k in range(resp.shape[1]):
        mass = resp[:, k].sum()
        for i in range(n_workers):
            for j in range(i + 1, n_workers):
                joint = np.zeros((n_categories, n_categories))
                for n in range(n_items):
                    joint[entries[n, i], entries[n, j]] += resp[n, k]
                joint = (joint / mass + smoothing) / (1 + n_categories**2 * smoothing)
                p_i, p_j = joint.sum(axis=1), joint.sum(axis=0)
                total = 0.0
                for a in range(n_categories):
                    for b in range(n_categories):
                        if joint[a, b] > 0:
                            total += joint[a, b] * np.log(joint[a, b] / (p_i[a] * p_j[b]))
                out[k, i, j] = out[k, j, i] = total
    return out


def tensor_from(per_component, weights):
    per_component = np.asarray(per_component, dtype=float)
    weights = np.asarray(weights, dtype=float)
    return CMITensor(per_component, weights, np.tensordot(weights, per_component, axes=1))


class TestCMITensor:
    def test_matches_naive_loops(self, rng, make_model):
        for _ in range(50):
            K, M, R = (int(v) for v in rng.integers([1, 2, 2], [4, 6, 4]))
            data, _ = sample(make_model(rng, K, M, R), int(rng.integers(10, 101)), seed=rng)
            S = sorted(rng.choice(M, size=int(rng.integers(0, M + 1)), replace=False).tolist())
            post = posterior(make_model(rng, K, M, R), data, S)
            t = cmi_tensor(data, post, smoothing=1e-6)
            expected = naive_cmi(data.entries, post.responsibilities, R, 1e-6)
            np.testing.assert_allclose(t.per_component, expected, atol=1e-10)

    def test_independent_coins(self):
        rng = np.random.default_rng(0)
        data = LabelMatrix(rng.integers(0, 2, size=(20_000, 2)), n_labels=2)
        t = cmi_tensor(data, Posterior(np.ones((20_000, 1))))
        assert abs(t.per_component[0, 0, 1]) < 5e-3

    def test_identical_coins(self):
        rng = np.random.default_rng(0)
        column = rng.integers(0, 2, size=20_000)
        data = LabelMatrix(np.column_stack([column, column]), n_labels=2)
        t = cmi_tensor(data, Posterior(np.ones((20_000, 1))))
        assert t.per_component[0, 0, 1] == pytest.approx(np.log(2), abs=0.02)

    def test_symmetric_non_negative_zero_diagonal(self, rng, make_model):
        model = make_model(rng, 3, 5, 3)
        data, _ = sample(model, 200, seed=1)
        t = cmi_tensor(data, posterior(model, data, [1, 3]))
        np.testing.assert_allclose(t.per_component, t.per_component.transpose(0, 2, 1))
        assert np.all(t.per_component >= -1e-12)
        assert np.all(np.diagonal(t.per_component, axis1=1, axis2=2) == 0)
        assert t.component_weights.sum() == pytest.approx(1.0)

    def test_empty_component_warns(self, rng, make_model, caplog):
        data, _ = sample(make_model(rng, 1, 3, 2), 30, seed=0)
        post = Posterior(np.column_stack([np.ones(30), np.zeros(30)]))
        with caplog.at_level(logging.WARNING, logger="stagewise_em"):
            t = cmi_tensor(data, post)
        assert "no mass" in caplog.text
        assert np.all(t.per_component[1] == 0)

    def test_missing_category_counts_as_a_label(self):
        entries = np.array([[0, 1], [-1, -1], [1, 0], [-1, -1]])
        data = LabelMatrix(entries, n_labels=2)
        t = cmi_tensor(data, Posterior(np.ones((4, 1))), smoothing=0.0)
        # X_1 determines X_2; masses 1/4, 1/2 (both missing), 1/4
        expected = -(0.25 * np.log(0.25) * 2 + 0.5 * np.log(0.5))
        assert t.per_component[0, 0, 1] == pytest.approx(expected, abs=1e-12)


class TestTripletSelection:
    def test_single_maximum(self):
        per = np.zeros((2, 5, 5))
        per[1, 2, 4] = per[1, 4, 2] = 1.0
        per[0, 0, 1] = per[0, 1, 0] = 0.3
        triplet = select_triplet(tensor_from(per, [0.5, 0.5]))
        assert (triplet.i, triplet.j, triplet.k) == (2, 4, 1)
        assert triplet.value == 1.0

    def test_ties_go_to_smallest_component_then_pair(self):
        per = np.zeros((2, 4, 4))
        for k, i, j in [(1, 0, 1), (0, 2, 3), (0, 1, 3)]:
            per[k, i, j] = per[k, j, i] = 0.5
        triplet = select_triplet(tensor_from(per, [0.5, 0.5]))
        assert (triplet.i, triplet.j, triplet.k) == (1, 3, 0)

    def test_weighted_score(self):
        per = np.zeros((2, 4, 4))
        per[0, 0, 1] = per[0, 1, 0] = 0.5
        per[1, 2, 3] = per[1, 3, 2] = 1.0
        t = tensor_from(per, [0.9, 0.1])
        assert (select_triplet(t).i, select_triplet(t).k) == (2, 1)
        weighted = select_triplet(t, "weighted")
        assert (weighted.i, weighted.j, weighted.k) == (0, 1, 0)
        assert weighted.value == pytest.approx(0.45)

    def test_unknown_score(self):
        with pytest.raises(ValueError):
            select_triplet(tensor_from(np.zeros((1, 3, 3)), [1.0]), "largest")

    def test_max_triplet_threshold(self):
        per = np.zeros((1, 3, 3))
        per[0, 0, 2] = per[0, 2, 0] = 1e-4
        t = tensor_from(per, [1.0])
        assert max_triplet(t, tau=1e-3) is None
        assert max_triplet(t, tau=1e-5).j == 2

    def test_norms(self):
        per = np.zeros((2, 3, 3))
        per[0, 0, 1] = per[0, 1, 0] = 0.2
        per[1, 1, 2] = per[1, 2, 1] = 0.6
        t = tensor_from(per, [0.5, 0.5])
        assert max_cmi_norm(t) == pytest.approx(0.3)
        assert cmi_sum(t) == pytest.approx(2 * (0.1 + 0.3))
        assert cmi_sum(t, restrict=[1, 2]) == pytest.approx(0.6)

    def test_single_worker_norm(self):
        assert max_cmi_norm(tensor_from(np.zeros((1, 1, 1)), [1.0])) == 0.0


class TestSparsity:
    def test_two_opposite_components(self):
        model = MixtureModel(np.array([0.5, 0.5]), np.array([[[0.9, 0.1]], [[0.1, 0.9]]]))
        diag = sparsity_diagnostic(model, tau0=1e-6, lam=0.5)
        np.testing.assert_allclose(diag.per_feature_kl, [1.021651], atol=1e-6)
        assert diag.l0_count == 1
        assert diag.penalty == pytest.approx(0.5)

    def test_single_component_is_sparse(self, rng, make_model):
        diag = sparsity_diagnostic(make_model(rng, 1, 4, 3))
        np.testing.assert_allclose(diag.per_feature_kl, 0.0, atol=1e-15)
        assert diag.l0_count == 0

    def test_uninformative_workers_not_counted(self, rng, make_model):
        model = make_model(rng, 3, 5, 3, uninformative=(1, 4))
        diag = sparsity_diagnostic(model)
        assert diag.per_feature_kl[1] == pytest.approx(0.0, abs=1e-12)
        assert diag.per_feature_kl[4] == pytest.approx(0.0, abs=1e-12)
        assert diag.l0_count == 3

    def test_penalized_log_likelihood(self, rng, make_model):
        model = make_model(rng, 2, 3, 2)
        data, _ = sample(model, 50, seed=0)
        diag = sparsity_diagnostic(model, lam=0.25)
        assert penalized_log_likelihood(model, data, lam=0.25) == pytest.approx(
            log_likelihood(model, data) - 0.25 * diag.l0_count
        )


def three_class_model(p_first=0.8, p_last=0.6):
    """Worker 0 and 2 point at the class, worker 1 answers the same way for every class."""
    mu = np.empty((3, 3, 3))
    for k in range(3):
        mu[k, 0] = np.where(np.arange(3) == k, p_first, (1 - p_first) / 2)
        mu[k, 1] = [0.5, 0.3, 0.2]
        mu[k, 2] = np.where(np.arange(3) == k, p_last, (1 - p_last) / 2)
    return MixtureModel(np.full(3, 1 / 3), mu)


class TestChanceLevels:
    def test_floor_of_one_component(self, rng):
        data = LabelMatrix(rng.integers(0, 3, size=(1000, 10)), n_labels=3)
        post = Posterior(np.ones((1000, 1)))
        expected = chi2.isf(0.05 / 45, 4) / 2000
        assert cmi_noise_floor(data, post, 0.05) == pytest.approx(expected)

    def test_smaller_components_raise_the_floor(self, rng):
        data = LabelMatrix(rng.integers(0, 3, size=(400, 6)), n_labels=3)
        halves = Posterior.from_hard_labels(np.arange(400) % 2, 2)
        whole = Posterior(np.ones((400, 1)))
        assert cmi_noise_floor(data, halves) > cmi_noise_floor(data, whole)

    def test_floor_switched_off(self, rng):
        data = LabelMatrix(rng.integers(0, 3, size=(50, 4)), n_labels=3)
        post = Posterior(np.ones((50, 1)))
        assert cmi_noise_floor(data, post, 0.0) == 0.0
        single = LabelMatrix(rng.integers(0, 3, size=(50, 1)), n_labels=3)
        assert cmi_noise_floor(single, post, 0.05) == 0.0

    def test_independent_pairs_stay_below_floor(self, rng):
        data = LabelMatrix(rng.integers(0, 3, size=(2000, 12)), n_labels=3)
        post = Posterior(np.ones((2000, 1)))
        assert max_cmi_norm(cmi_tensor(data, post)) < cmi_noise_floor(data, post, 1e-3)

    def test_worker_information(self):
        info = worker_information(three_class_model())
        assert info[1] == pytest.approx(0.0, abs=1e-12)
        assert info[0] > info[2] > 0

    def test_informative_workers(self):
        model = three_class_model()
        assert informative_workers(model, 200) == (0, 2)
        assert informative_workers(model, 200, level=0.0) == ()
