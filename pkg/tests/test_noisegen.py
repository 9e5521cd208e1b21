import warnings

import numpy as np
import pytest
from scipy.stats import chisquare

from ogclab.noisegen import (
    CIFAR10_ASYM_MAP,
    Asymmetric,
    InstanceDependent,
    Symmetric,
    build_asymmetric,
    build_symmetric,
    circular_map,
    corrupt,
    read_label_csv,
    write_label_csv,
)


def labels(n, K, seed=0):
    return np.random.default_rng(seed).integers(0, K, n)


class TestSymmetric:
    def test_zero_is_identity(self):
        np.testing.assert_array_equal(build_symmetric(2, 0.0), np.eye(2))

    def test_ten_classes(self):
        T = build_symmetric(10, 0.5)
        np.testing.assert_allclose(np.diag(T), 0.5)
        assert T[0, 1] == pytest.approx(0.0556, abs=1e-4)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            K = int(rng.integers(2, 12))
            T = build_symmetric(K, float(rng.uniform(0, 1 - 1 / K)))
            np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-12)

    def test_rejects_eta_one(self):
        with pytest.raises(ValueError):
            build_symmetric(3, 1.0)

    def test_warns_past_theory_range(self):
        with pytest.warns(UserWarning):
            build_symmetric(2, 0.6)


class TestAsymmetric:
    def test_cifar_map(self):
        T = build_asymmetric(CIFAR10_ASYM_MAP, 0.4, 10)
        moved = [i for i in range(10) if T[i, i] < 1]
        assert sorted(moved) == [2, 3, 4, 5, 9]
        assert T[9, 1] == pytest.approx(0.4) and T[3, 5] == pytest.approx(0.4) and T[5, 3] == pytest.approx(0.4)
        np.testing.assert_allclose(T.sum(axis=1), 1.0)

    def test_zero_is_identity(self):
        np.testing.assert_array_equal(build_asymmetric(CIFAR10_ASYM_MAP, 0.0, 10), np.eye(10))

    def test_circular(self):
        T = build_asymmetric(circular_map(range(5)), 0.4, 5)
        for i in range(5):
            assert T[i, i] == pytest.approx(0.6)
            assert T[i, (i + 1) % 5] == pytest.approx(0.4)

    def test_rejects_self_map(self):
        with pytest.raises(ValueError):
            build_asymmetric([(1, 1)], 0.3, 3)

    def test_rejects_non_function(self):
        with pytest.raises(ValueError):
            build_asymmetric([(0, 1), (0, 2)], 0.3, 3)


class TestCorrupt:
    def test_zero_noise(self):
        y = labels(1000, 3)
        ds = corrupt(np.zeros((1000, 2)), y, Symmetric(0.0), K=3)
        assert not ds.flip_mask.any()

    def test_binomial_ci(self):
        n = 100_000
        ds = corrupt(np.zeros((n, 1)), labels(n, 4), Symmetric(0.5), seed=3, K=4)
        assert abs(ds.flip_rate - 0.5) <= 3 * np.sqrt(0.25 / n)

    def test_chi_square_per_class(self):
        n, K = 100_000, 4
        y = labels(n, K, 1)
        ds = corrupt(np.zeros((n, 1)), y, Asymmetric(circular_map(range(K)), 0.3), seed=7, K=K)
        T = build_asymmetric(circular_map(range(K)), 0.3, K)
        for c in range(K):
            rows = ds.given_labels[y == c]
            obs = np.bincount(rows, minlength=K)
            exp = T[c] * rows.size
            keep = exp > 0
            assert obs[~keep].sum() == 0
            assert chisquare(obs[keep], exp[keep]).pvalue > 1e-3

    def test_symmetric_chi_square(self):
        n, K = 100_000, 5
        y = labels(n, K, 2)
        ds = corrupt(np.zeros((n, 1)), y, Symmetric(0.4), seed=9, K=K)
        T = build_symmetric(K, 0.4)
        for c in range(K):
            obs = np.bincount(ds.given_labels[y == c], minlength=K)
            assert chisquare(obs, T[c] * obs.sum()).pvalue > 1e-3

    def test_flip_mask_consistent(self):
        for spec in (Symmetric(0.3), Asymmetric(((0, 1),), 0.4), InstanceDependent(0.3)):
            X = np.random.default_rng(0).normal(size=(500, 3))
            ds = corrupt(X, labels(500, 2), spec, seed=1, K=2)
            np.testing.assert_array_equal(ds.flip_mask, ds.given_labels != ds.true_labels)

    def test_deterministic(self):
        X = np.random.default_rng(0).normal(size=(300, 2))
        y = labels(300, 3)
        for spec in (Symmetric(0.4), InstanceDependent(0.3, 2, 5)):
            a, b = corrupt(X, y, spec, seed=4, K=3), corrupt(X, y, spec, seed=4, K=3)
            np.testing.assert_array_equal(a.given_labels, b.given_labels)
            np.testing.assert_array_equal(a.flip_mask, b.flip_mask)

    def test_empty(self):
        with pytest.raises(ValueError):
            corrupt(np.zeros((0, 2)), np.zeros(0, dtype=int), Symmetric(0.1))

    def test_labels_out_of_range(self):
        with pytest.raises(ValueError):
            corrupt(np.zeros((3, 1)), np.array([0, 1, 5]), Symmetric(0.1), K=3)


class TestInstanceDependent:
    def test_mean_rate(self):
        X = np.random.default_rng(0).normal(size=(20_000, 5))
        for rate in (0.1, 0.3, 0.45):
            ds = corrupt(X, labels(20_000, 3), InstanceDependent(rate, 3, 1), seed=2, K=3)
            assert ds.flip_prob.mean() == pytest.approx(rate, abs=0.01)
            assert abs(ds.flip_rate - rate) <= 0.01

    def test_depends_on_features(self):
        X = np.random.default_rng(1).normal(size=(2000, 4))
        ds = corrupt(X, labels(2000, 2), InstanceDependent(0.3), seed=0, K=2)
        assert ds.flip_prob.std() > 0.01

    def test_flipped_class_differs(self):
        X = np.random.default_rng(2).normal(size=(2000, 4))
        ds = corrupt(X, labels(2000, 4), InstanceDependent(0.4), seed=0, K=4)
        assert np.all(ds.given_labels[ds.flip_mask] != ds.true_labels[ds.flip_mask])

    def test_rejects_rate(self):
        with pytest.raises(ValueError):
            corrupt(np.zeros((10, 1)), labels(10, 2), InstanceDependent(1.0), K=2)


def test_label_csv_roundtrip(tmp_path):
    X = np.random.default_rng(0).normal(size=(100, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ds = corrupt(X, labels(100, 3), Symmetric(0.4), seed=0, K=3)
    path = tmp_path / "labels.csv"
    write_label_csv(ds, path)
    assert path.read_text().splitlines()[0] == "index,true_label,given_label,flipped"
    true, given, flipped = read_label_csv(path)
    np.testing.assert_array_equal(true, ds.true_labels)
    np.testing.assert_array_equal(given, ds.given_labels)
    np.testing.assert_array_equal(flipped, ds.flip_mask)
