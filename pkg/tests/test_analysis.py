import numpy as np
import pytest

from papsmix.analysis import (
    LdaModel,
    classification_report,
    extract_patch_features,
    feature_names,
    lda_predict,
    lda_train,
    load_patch_manifest,
    mann_whitney_u,
    patch_feature_vector,
    save_model,
    load_model,
)
from papsmix.imagery import SpectralCube
from papsmix.solver import AbundanceField

# Discriminant reported for the real data; used as a shape/convention
# fixture only, never as a reproduction target.
PAPER_MODEL = LdaModel(weights=(57.96, -65.84), bias=-6.99,
                       feature_names=("EY_rel", "OG_rel"))


def constant_field(values):
    return AbundanceField(np.asarray(values, dtype=float)[:, None, None] * np.ones((1, 9, 9)))


class TestPatchFeatures:
    def test_uniform_quarters(self):
        sample = extract_patch_features(constant_field([1, 1, 1, 1]), (4, 4))
        assert sample.relative_abundance == pytest.approx((0.25,) * 4)

    def test_two_dye_split(self):
        sample = extract_patch_features(constant_field([2, 0, 0, 2]), (4, 4))
        assert sample.relative_abundance == pytest.approx((0.5, 0.0, 0.0, 0.5))

    def test_scale_invariance(self, rng):
        planes = rng.uniform(0.1, 1.0, size=(4, 9, 9))
        a = extract_patch_features(AbundanceField(planes), (4, 4))
        b = extract_patch_features(AbundanceField(3.7 * planes), (4, 4))
        assert a.relative_abundance == pytest.approx(b.relative_abundance, rel=1e-12)

    def test_relative_sums_to_one(self, rng):
        planes = rng.uniform(0.0, 1.0, size=(4, 9, 9))
        sample = extract_patch_features(AbundanceField(planes), (5, 5))
        assert sum(sample.relative_abundance) == pytest.approx(1.0, abs=1e-9)

    def test_out_of_bounds(self):
        with pytest.raises(ValueError, match="bounds"):
            extract_patch_features(constant_field([1, 1, 1, 1]), (1, 4))

    def test_zero_patch(self):
        with pytest.raises(ValueError, match="zero total"):
            extract_patch_features(constant_field([0, 0, 0, 0]), (4, 4))

    def test_feature_sets(self, rng):
        rgb = SpectralCube(planes=rng.uniform(0.2, 1.0, size=(3, 9, 9)), role="intensity")
        od = SpectralCube(planes=rng.uniform(0.0, 1.0, size=(3, 9, 9)), role="optical_density")
        ab = AbundanceField(rng.uniform(0.1, 1.0, size=(4, 9, 9))).to_cube()
        assert len(patch_feature_vector(rgb, (4, 4), "rgb")) == 3
        assert len(patch_feature_vector(od, (4, 4), "od")) == 3
        assert len(patch_feature_vector(rgb, (4, 4), "lab")) == 3
        rel = patch_feature_vector(ab, (4, 4), "relative", dyes=("EY", "OG"))
        assert len(rel) == 2
        assert feature_names("relative", ("EY", "OG")) == ("EY_rel", "OG_rel")
        with pytest.raises(ValueError, match="intensity"):
            patch_feature_vector(od, (4, 4), "rgb")


class TestLda:
    def make_clouds(self, rng, n=40, distance=1.0, sigma=0.01):
        ec = rng.normal(0.0, sigma, size=(n, 2))
        legh = rng.normal(0.0, sigma, size=(n, 2)) + np.array([distance, 0.0])
        feats = np.vstack([ec, legh])
        labels = ["EC"] * n + ["LEGH"] * n
        return feats, labels

    def test_separable_training_accuracy(self, rng):
        feats, labels = self.make_clouds(rng)
        model = lda_train(feats, labels)
        preds = [lda_predict(model, f)[0] for f in feats]
        assert preds == labels

    def test_duplicated_samples_keep_boundary(self, rng):
        feats, labels = self.make_clouds(rng, n=20, distance=0.5, sigma=0.1)
        m1 = lda_train(feats, labels)
        m2 = lda_train(np.vstack([feats, feats]), labels + labels)
        w1, w2 = np.asarray(m1.weights), np.asarray(m2.weights)
        n1 = np.linalg.norm(w1)
        n2 = np.linalg.norm(w2)
        assert np.allclose(w1 / n1, w2 / n2, atol=1e-9)
        assert m1.bias / n1 == pytest.approx(m2.bias / n2, abs=1e-9)

    def test_requires_two_per_class(self):
        with pytest.raises(ValueError, match="at least two"):
            lda_train([[0.0, 0.0], [1.0, 1.0]], ["EC", "LEGH"])

    def test_ridge_rescues_singular_covariance(self):
        # variance only along (1, 1): pooled covariance is rank one
        feats = np.array([[0.0, 0.0], [0.1, 0.1], [1.0, 1.0], [1.1, 1.1]])
        labels = ["EC", "EC", "LEGH", "LEGH"]
        model = lda_train(feats, labels, ridge=True)
        assert lda_predict(model, np.array([1.05, 1.05]))[0] == "LEGH"
        assert lda_predict(model, np.array([0.05, 0.05]))[0] == "EC"

    def test_zero_scatter_is_unrecoverable(self):
        feats = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
        labels = ["EC", "EC", "LEGH", "LEGH"]
        with pytest.raises(ValueError, match="singular|zero trace"):
            lda_train(feats, labels)

    def test_paper_model_form(self):
        assert len(PAPER_MODEL.weights) == 2
        label, score = lda_predict(PAPER_MODEL, np.array([0.5, 0.2]))
        assert score == pytest.approx(8.822, abs=1e-9)
        assert label == "LEGH"
        label, score = lda_predict(PAPER_MODEL, np.array([0.0, 0.5]))
        assert score == pytest.approx(-39.91, abs=1e-9)
        assert label == "EC"

    def test_tie_goes_to_legh(self):
        model = LdaModel(weights=(1.0,), bias=0.0, feature_names=("f0",))
        assert lda_predict(model, np.array([0.0]))[0] == "LEGH"

    def test_label_invariant_to_positive_rescale(self, rng):
        feats, labels = self.make_clouds(rng, n=10, distance=0.6, sigma=0.2)
        model = lda_train(feats, labels)
        scaled = LdaModel(
            weights=tuple(17.0 * w for w in model.weights),
            bias=17.0 * model.bias,
            feature_names=model.feature_names,
        )
        for f in feats:
            assert lda_predict(model, f)[0] == lda_predict(scaled, f)[0]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="feature length"):
            lda_predict(PAPER_MODEL, np.array([1.0, 2.0, 3.0]))

    def test_model_json_roundtrip(self, tmp_path):
        path = tmp_path / "model.json"
        save_model(PAPER_MODEL, path)
        assert load_model(path) == PAPER_MODEL


class TestMannWhitney:
    def test_exact_disjoint_samples(self):
        u, p = mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert u == 0.0
        assert p == pytest.approx(0.1, abs=1e-12)

    def test_identical_multisets(self):
        a = [1.0, 2.0, 3.0, 4.0]
        u, p = mann_whitney_u(a, list(a))
        assert u == len(a) ** 2 / 2.0
        assert p >= 0.99

    def test_swap_symmetry(self, rng):
        a = rng.normal(size=9)
        b = rng.normal(size=7) + 0.3
        ua, pa = mann_whitney_u(a, b)
        ub, pb = mann_whitney_u(b, a)
        assert ua + ub == pytest.approx(len(a) * len(b))
        assert pa == pytest.approx(pb, abs=1e-9)

    def test_exact_vs_normal_agreement(self, rng):
        for _ in range(10):
            a = rng.normal(size=8)
            b = rng.normal(size=8) + rng.uniform(-0.5, 0.5)
            _, p_exact = mann_whitney_u(a, b, method="exact")
            _, p_normal = mann_whitney_u(a, b, method="normal")
            assert abs(p_exact - p_normal) < 0.02

    def test_exact_rejects_ties(self):
        with pytest.raises(ValueError, match="tie-free"):
            mann_whitney_u([1, 1, 2], [3, 4, 5], method="exact")

    def test_empty_sample(self):
        with pytest.raises(ValueError, match="nonempty"):
            mann_whitney_u([], [1.0])

    def test_auto_switches_to_normal_for_large(self, rng):
        a = rng.normal(size=30)
        b = rng.normal(size=30)
        _, p = mann_whitney_u(a, b)  # 900 > 400 pairs: normal path
        assert 0.0 <= p <= 1.0


class TestClassificationReport:
    def test_all_correct(self):
        labels = ["EC", "LEGH", "LEGH", "EC"]
        report = classification_report(labels, labels)
        assert report["accuracy"] == report["precision"] == report["recall"] == report["f1"] == 1.0
        assert not report["degenerate"]

    def test_table_schema(self):
        report = classification_report(["EC"], ["LEGH"])
        assert set(report) == {"accuracy", "precision", "recall", "f1", "degenerate"}

    def test_reported_metrics_fixture(self):
        # 100 patches per class, four LEGH misses, no false positives:
        # accuracy 0.980, precision 1.000, recall 0.960, f1 0.980
        truths = ["LEGH"] * 100 + ["EC"] * 100
        predictions = ["LEGH"] * 96 + ["EC"] * 4 + ["EC"] * 100
        report = classification_report(predictions, truths)
        assert report["accuracy"] == pytest.approx(0.980, abs=1e-9)
        assert report["precision"] == pytest.approx(1.000, abs=1e-9)
        assert report["recall"] == pytest.approx(0.960, abs=1e-9)
        assert report["f1"] == pytest.approx(0.980, abs=5e-4)

    def test_no_positive_predictions_flagged(self):
        report = classification_report(["EC", "EC"], ["LEGH", "EC"])
        assert report["precision"] == 0.0
        assert report["degenerate"]

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="equal length"):
            classification_report(["EC"], ["EC", "LEGH"])


def test_patch_manifest_roundtrip(tmp_path):
    path = tmp_path / "patches.csv"
    path.write_text("image,label,cx,cy\nimg.msc,EC,4,5\nimg.msc,,6,7\n")
    rows = load_patch_manifest(path)
    assert rows == [("img.msc", "EC", 4, 5), ("img.msc", None, 6, 7)]
    bad = tmp_path / "bad.csv"
    bad.write_text("imagen,label\n")
    with pytest.raises(ValueError, match="header"):
        load_patch_manifest(bad)
