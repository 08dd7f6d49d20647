import numpy as np
import pytest
from scipy import linalg as sla

from skeldiff.data import ToyGenConfig, gen_toy
from skeldiff.metrics import (
    FeatureSet,
    FeatureStats,
    extract_features,
    fid,
    fit_stats,
    overall_diversity,
    per_action_diversity,
    recognition_accuracy,
)
from skeldiff.models import STTransConfig, TrainConfig, train_classifier


def feature_set(features, labels=None):
    features = np.asarray(features, dtype=np.float64)
    if labels is None:
        labels = np.zeros(features.shape[0], dtype=np.int64)
    return FeatureSet(features, np.asarray(labels))


class TestFitStats:
    def test_two_points_hand_formula(self):
        a = np.array([1.0, 2.0, 3.0])
        b = np.array([2.0, 0.0, 4.0])
        stats = fit_stats(feature_set([a, b]))
        np.testing.assert_allclose(stats.mean, (a + b) / 2)
        np.testing.assert_allclose(stats.cov, np.outer(a - b, a - b) / 2, atol=1e-15)

    def test_constant_set_zero_cov(self):
        stats = fit_stats(feature_set([[3.0, -1.0]] * 5))
        np.testing.assert_allclose(stats.cov, 0.0, atol=1e-15)

    def test_matches_textbook_two_pass(self):
        # oracle: explicit per-entry two-pass formula
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 5))
        stats = fit_stats(feature_set(x))
        mu = x.mean(axis=0)
        ref = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                ref[i, j] = np.sum((x[:, i] - mu[i]) * (x[:, j] - mu[j])) / 39
        np.testing.assert_allclose(stats.cov, ref, atol=1e-10)
        np.testing.assert_allclose(stats.cov, np.cov(x, rowvar=False), atol=1e-10)

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError, match="n >= 2|at least 2"):
            fit_stats(feature_set([[1.0, 2.0]]))


def gaussian_stats(mean, var_diag, n=100):
    mean = np.asarray(mean, dtype=np.float64)
    return FeatureStats(mean, np.diag(np.asarray(var_diag, dtype=np.float64)), n)


def closed_form_diagonal_fid(mu1, var1, mu2, var2):
    # Frechet distance between diagonal Gaussians:
    # ||mu1-mu2||^2 + sum((sqrt(v1)-sqrt(v2))^2)
    mu1, mu2 = np.asarray(mu1, dtype=float), np.asarray(mu2, dtype=float)
    var1, var2 = np.asarray(var1, dtype=float), np.asarray(var2, dtype=float)
    return float(np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(var1) - np.sqrt(var2)) ** 2))


class TestFid:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(50, 6))
        stats = fit_stats(feature_set(x))
        assert fid(stats, stats) <= 1e-10

    def test_mean_shift_only(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(200, 4))
        a = fit_stats(feature_set(x))
        v = np.array([1.0, -2.0, 0.5, 3.0])
        b = FeatureStats(a.mean + v, a.cov.copy(), a.n)
        assert fid(a, b) == pytest.approx(float(v @ v), abs=1e-8)

    def test_one_dimensional_closed_forms(self):
        n01 = gaussian_stats([0.0], [1.0])
        n11 = gaussian_stats([1.0], [1.0])
        n04 = gaussian_stats([0.0], [4.0])
        assert fid(n01, n11) == pytest.approx(1.0, abs=1e-8)
        assert fid(n01, n04) == pytest.approx(1.0, abs=1e-8)  # 0 + 1 + 4 - 2*2

    @pytest.mark.parametrize("d", [1, 4, 16])
    def test_diagonal_closed_form(self, d):
        rng = np.random.default_rng(d)
        mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
        v1, v2 = rng.uniform(0.2, 3.0, d), rng.uniform(0.2, 3.0, d)
        got = fid(gaussian_stats(mu1, v1), gaussian_stats(mu2, v2))
        assert got == pytest.approx(closed_form_diagonal_fid(mu1, v1, mu2, v2), abs=1e-8)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = fit_stats(feature_set(rng.normal(size=(60, 5))))
        b = fit_stats(feature_set(rng.normal(size=(80, 5)) * 1.5 + 0.3))
        assert abs(fid(a, b) - fid(b, a)) <= 1e-8
        assert fid(a, b) >= 0.0

    def test_against_scipy_sqrtm_oracle(self):
        # independent route: trace of sqrtm(S_a S_b) via scipy
        rng = np.random.default_rng(4)
        xa = rng.normal(size=(100, 6))
        xb = rng.normal(size=(120, 6)) @ rng.normal(size=(6, 6)) * 0.5
        a, b = fit_stats(feature_set(xa)), fit_stats(feature_set(xb))
        covmean = sla.sqrtm(a.cov @ b.cov)
        ref = float(np.sum((a.mean - b.mean) ** 2)
                    + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(covmean.real))
        assert fid(a, b) == pytest.approx(ref, abs=1e-8)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dims differ"):
            fid(gaussian_stats([0.0], [1.0]), gaussian_stats([0.0, 0.0], [1.0, 1.0]))

    def test_invalid_covariance_rejected(self):
        bad = FeatureStats(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1e-3]]), 10)
        with pytest.raises(ValueError, match="eigenvalue"):
            fid(bad, gaussian_stats([0.0, 0.0], [1.0, 1.0]))


@pytest.fixture(scope="module")
def tiny_bundle():
    ds = gen_toy(ToyGenConfig(num_classes=3, samples_per_class=20, seed=4))
    cfg = STTransConfig(patch_size=8, embed_dim=16, depth=1, heads=2, num_classes=3)
    return ds, train_classifier(ds, TrainConfig(lr=3e-3, batch_size=16, iterations=400, seed=0), cfg)


class TestRecognitionAccuracy:
    def test_ties_break_to_lowest_class(self, tiny_bundle):
        ds, bundle = tiny_bundle
        from skeldiff.models import ActionTransformer

        zero_model = ActionTransformer(bundle.model.cfg, seed=1)  # zero head -> all-zero logits
        zero_bundle = type(bundle)(zero_model, bundle.norm, bundle.num_joints)
        acc = recognition_accuracy(zero_bundle, ds)
        # every argmax resolves to class 0, so accuracy = share of class-0 items
        assert acc == pytest.approx(np.mean([s.label == 0 for s in ds.items]))

    def test_chance_level_random_weights(self, tiny_bundle):
        ds, bundle = tiny_bundle
        from skeldiff.models import ActionTransformer

        model = ActionTransformer(bundle.model.cfg, seed=2)
        rng = np.random.default_rng(8)
        for p in model.params.values():
            p.data += rng.normal(0, 0.5, p.data.shape)
        rand_bundle = type(bundle)(model, bundle.norm, bundle.num_joints)
        acc = recognition_accuracy(rand_bundle, ds)
        se = np.sqrt((1 / 3) * (2 / 3) / len(ds))
        assert abs(acc - 1 / 3) < 3 * se + 1e-9

    def test_trained_model_fits_training_set(self, tiny_bundle):
        ds, bundle = tiny_bundle
        assert recognition_accuracy(bundle, ds) >= 0.95

    def test_empty_dataset_is_error(self, tiny_bundle):
        from skeldiff.data import Dataset

        _, bundle = tiny_bundle
        with pytest.raises(ValueError, match="empty"):
            recognition_accuracy(bundle, Dataset([], num_classes=3))


class TestDiversity:
    def test_identical_constant_sets(self):
        fs = feature_set([[1.0, 2.0]] * 4)
        assert overall_diversity(fs, fs, 50, seed=0) == 0.0

    def test_constant_offset(self):
        a = feature_set([[0.0, 0.0, 0.0]] * 4)
        b = feature_set([[3.0, 4.0, 0.0]] * 6)
        assert overall_diversity(a, b, 100, seed=1) == pytest.approx(5.0)

    def test_sampled_converges_to_exhaustive(self):
        # oracle: exhaustive all-pairs mean on small fixed sets
        rng = np.random.default_rng(5)
        a = feature_set(rng.normal(size=(12, 4)))
        b = feature_set(rng.normal(size=(9, 4)))
        exact = overall_diversity(a, b, n_pairs=None)
        sampled = overall_diversity(a, b, n_pairs=200_000, seed=2)
        assert abs(sampled - exact) / exact < 0.01

    def test_exhaustive_matches_loop(self):
        rng = np.random.default_rng(6)
        a = feature_set(rng.normal(size=(5, 3)))
        b = feature_set(rng.normal(size=(7, 3)))
        ref = np.mean([np.linalg.norm(x - y) for x in a.features for y in b.features])
        assert overall_diversity(a, b, n_pairs=None) == pytest.approx(ref, abs=1e-10)

    def test_per_action_identical_sets_zero(self):
        feats = [[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]
        labels = [0, 1, 2]
        fs = feature_set(feats, labels)
        per_class, mean = per_action_diversity(fs, fs, n_pairs_per_class=None)
        np.testing.assert_allclose(per_class, 0.0)
        assert mean == 0.0

    def test_single_class_equals_overall(self):
        rng = np.random.default_rng(7)
        a = feature_set(rng.normal(size=(6, 3)))
        b = feature_set(rng.normal(size=(8, 3)))
        per_class, mean = per_action_diversity(a, b, n_pairs_per_class=None)
        assert per_class.shape == (1,)
        assert mean == pytest.approx(overall_diversity(a, b, n_pairs=None))

    def test_per_action_matches_classwise_oracle(self):
        rng = np.random.default_rng(8)
        a = feature_set(rng.normal(size=(10, 3)), rng.integers(0, 2, 10))
        b = feature_set(rng.normal(size=(12, 3)), rng.integers(0, 2, 12))
        per_class, _ = per_action_diversity(a, b, n_pairs_per_class=None)
        for k in (0, 1):
            fa = a.features[a.labels == k]
            fb = b.features[b.labels == k]
            ref = np.mean([np.linalg.norm(x - y) for x in fa for y in fb])
            assert per_class[k] == pytest.approx(ref, abs=1e-10)

    def test_missing_class_error_names_class(self):
        a = feature_set([[0.0], [1.0]], [0, 0])
        b = feature_set([[0.0], [1.0]], [0, 1])
        with pytest.raises(ValueError, match="class 1 missing from the synthetic"):
            per_action_diversity(a, b, n_pairs_per_class=10)

    def test_empty_set_error(self):
        a = feature_set(np.zeros((0, 3)), np.zeros(0))
        b = feature_set([[1.0, 2.0, 3.0]])
        with pytest.raises(ValueError, match="non-empty"):
            overall_diversity(a, b, 10, seed=0)

    def test_order_invariance_with_fixed_seed(self):
        rng = np.random.default_rng(9)
        a = feature_set(rng.normal(size=(20, 4)))
        b = feature_set(rng.normal(size=(20, 4)))
        assert overall_diversity(a, b, 500, seed=3) == overall_diversity(a, b, 500, seed=3)


class TestExtractFeatures:
    def test_counts_dims_determinism(self, tiny_bundle):
        ds, bundle = tiny_bundle
        fs1 = extract_features(bundle, ds)
        fs2 = extract_features(bundle, ds)
        assert fs1.features.shape == (len(ds), bundle.model.cfg.embed_dim)
        np.testing.assert_array_equal(fs1.features, fs2.features)
        np.testing.assert_array_equal(fs1.labels, [s.label for s in ds.items])

    def test_class_count_mismatch_rejected(self, tiny_bundle):
        ds, bundle = tiny_bundle
        other = gen_toy(ToyGenConfig(num_classes=2, samples_per_class=3, seed=1))
        with pytest.raises(ValueError, match="classes"):
            extract_features(bundle, other)

    def test_features_linearly_separate_classes(self, tiny_bundle):
        # held-out least-squares linear probe on the embeddings
        ds, bundle = tiny_bundle
        fs = extract_features(bundle, ds)
        rng = np.random.default_rng(0)
        order = rng.permutation(len(fs))
        split = int(0.6 * len(fs))
        tr, te = order[:split], order[split:]
        xtr = np.hstack([fs.features[tr], np.ones((split, 1))])
        xte = np.hstack([fs.features[te], np.ones((len(te), 1))])
        onehot = np.eye(3)[fs.labels[tr]]
        w, *_ = np.linalg.lstsq(xtr, onehot, rcond=None)
        pred = np.argmax(xte @ w, axis=1)
        assert np.mean(pred == fs.labels[te]) >= 0.95
