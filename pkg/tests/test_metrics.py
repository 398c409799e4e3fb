import numpy as np
import pytest

from conceptprobe import metrics
from conceptprobe.errors import DataError, UsageError
from conceptprobe.metrics import (
    SuiteConfig,
    average_concept_matrix,
    cgim1,
    cgim2,
    cgim3,
    evaluate_suite,
    existence_score,
    histogram_counts,
    mean_defined,
    point_in_threshold_region,
    point_in_top_alpha,
    region_rank_positions,
    threshold_region,
    top_alpha_region,
    top_region_size,
)
from conceptprobe.tensor import rank_desc

from reference_impl import (
    ref_cgim_axis,
    ref_cgim_masked,
    ref_existence,
    ref_point_in_threshold,
    ref_point_in_top_alpha,
    ref_region_budget,
    ref_top_region,
)


class TestCgim:
    def test_identical_matrices_score_one(self):
        truth = np.abs(np.random.default_rng(0).normal(size=(4, 3))) + 0.01
        truth = truth / truth.max()
        for axis in ("concept", "class"):
            for score in cgim1(truth, truth, axis):
                assert score == pytest.approx(1.0)

    def test_negated_row_scores_minus_one(self):
        truth = np.array([[0.2, 0.8], [0.5, 0.1]])
        weights = truth.copy()
        weights[1] = -truth[1]
        scores = cgim1(weights, truth, "concept")
        assert scores[0] == pytest.approx(1.0)
        assert scores[1] == pytest.approx(-1.0)

    def test_zero_row_undefined(self):
        truth = np.array([[1.0, 0.5], [0.3, 0.4]])
        weights = np.array([[0.0, 0.0], [1.0, 1.0]])
        scores = cgim1(weights, truth, "concept")
        assert scores[0] is None
        assert scores[1] is not None

    def test_cgim2_identity_and_masking(self):
        truth = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]])
        scores = cgim2(truth, truth, "class")
        assert all(s == pytest.approx(1.0) for s in scores)
        defined = np.array([True, False, True])
        masked = cgim2(truth, truth, "class", defined)
        assert masked[1] is None
        assert masked[0] == pytest.approx(1.0)
        assert masked[2] == pytest.approx(1.0)

    def test_cgim2_pairwise_complete_rows(self):
        truth = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
        avg = np.array([[1.0, 99.0, 0.0], [0.0, 99.0, 1.0]])
        defined = np.array([True, False, True])  # middle class dropped pairwise
        scores = cgim2(avg, truth, "concept", defined)
        assert scores[0] == pytest.approx(1.0)
        assert scores[1] == pytest.approx(1.0)

    def test_cgim3_reductions(self):
        rng = np.random.default_rng(1)
        truth = rng.uniform(0.1, 1.0, size=(5, 4))
        weights = rng.normal(size=(5, 4))
        avg = rng.normal(size=(5, 4))
        ones = np.ones((5, 4))
        assert cgim3(ones, avg, truth, "concept") == cgim2(avg, truth, "concept")
        assert cgim3(weights, ones, truth, "class") == cgim1(weights, truth, "class")

    def test_cgim3_exact_product_match(self):
        truth = np.array([[0.5, 0.25], [0.125, 1.0]])
        weights = np.array([[2.0, 1.0], [0.5, 2.0]])
        avg = np.array([[0.25, 0.25], [0.25, 0.5]])
        # weights * avg == truth entrywise
        for score in cgim3(weights, avg, truth, "concept"):
            assert score == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            cgim1(np.zeros((2, 3)), np.zeros((3, 2)), "concept")

    def test_bad_axis(self):
        with pytest.raises(UsageError):
            cgim1(np.zeros((2, 2)), np.zeros((2, 2)), "diagonal")


class TestAverageConceptMatrix:
    def test_columns_average_correct_predictions_only(self):
        values = np.array(
            [[1.0, 0.0], [3.0, 0.0], [0.0, 5.0], [0.0, 7.0], [9.0, 9.0]]
        )
        labels = np.array([0, 0, 1, 1, 1])
        predictions = np.array([0, 0, 1, 1, 0])  # last image misclassified
        matrix, counts, defined = average_concept_matrix(values, labels, predictions, 3)
        np.testing.assert_allclose(matrix[:, 0], [2.0, 0.0])
        np.testing.assert_allclose(matrix[:, 1], [0.0, 6.0])
        assert counts.tolist() == [2, 2, 0]
        assert defined.tolist() == [True, True, False]
        assert np.all(matrix[:, 2] == 0.0)  # zero-filled but masked


class TestExistence:
    def test_all_concepts_annotated(self):
        ranking = rank_desc([3.0, 2.0, 1.0], "signed")
        for l in (1, 2, 3):
            assert existence_score(ranking, {0, 1, 2}, l) == 1.0

    def test_empty_annotation(self):
        ranking = rank_desc([3.0, 2.0, 1.0], "signed")
        assert existence_score(ranking, set(), 2) == 0.0

    def test_two_of_five(self):
        scores = [10.0, 9.0, 8.0, 7.0, 6.0, 0.0]
        ranking = rank_desc(scores, "signed")
        assert existence_score(ranking, {2, 4}, 5) == pytest.approx(0.4)

    def test_l_out_of_range(self):
        ranking = rank_desc([1.0, 2.0], "signed")
        with pytest.raises(UsageError):
            existence_score(ranking, {0}, 0)
        with pytest.raises(UsageError):
            existence_score(ranking, {0}, 3)

    def test_values_are_multiples_of_one_over_l(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            ranking = rank_desc(rng.normal(size=n), "absolute")
            annotated = {int(j) for j in rng.choice(n, size=rng.integers(0, n), replace=False)}
            l = int(rng.integers(1, n + 1))
            score = existence_score(ranking, annotated, l)
            assert score == pytest.approx(round(score * l) / l)
            assert 0.0 <= score <= 1.0


class TestRegions:
    def test_budget_rounds_half_up(self):
        assert top_region_size(1.0, 84, 84) == 588
        assert top_region_size(1.0, 5, 5) == 2   # 25/12 = 2.083 -> 2
        assert top_region_size(3.0, 5, 5) == 6   # 75/12 = 6.25 -> 6
        assert top_region_size(1.2, 5, 5) == 3   # 30/12 = 2.5 rounds half up -> 3
        assert top_region_size(12.0, 7, 9) == 63

    def test_alpha_range(self):
        for alpha in (0.0, -1.0, 12.5):
            with pytest.raises(UsageError):
                top_region_size(alpha, 10, 10)

    def test_full_alpha_covers_everything(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=(9, 8))
        assert np.all(top_alpha_region(values, 12.0))

    def test_constant_map_row_major_tiebreak(self):
        values = np.zeros((6, 4))  # 24 pixels, alpha=1 -> budget 2
        region = top_alpha_region(values, 1.0)
        flat = region.ravel()
        assert flat[:2].all() and not flat[2:].any()
        assert point_in_top_alpha(values, (0, 1), 1.0)
        assert not point_in_top_alpha(values, (5, 3), 1.0)

    def test_nesting_over_alpha(self):
        rng = np.random.default_rng(2)
        values = rng.normal(size=(12, 12))
        smaller = top_alpha_region(values, 1.0)
        mid = top_alpha_region(values, 3.0)
        larger = top_alpha_region(values, 6.0)
        assert np.all(mid[smaller])
        assert np.all(larger[mid])

    def test_threshold_region_and_degenerate(self):
        values = np.array([[0.0, 5.0], [10.0, 2.5]])
        mask = threshold_region(values, 0.5)
        np.testing.assert_array_equal(mask, [[False, True], [True, False]])
        assert not threshold_region(np.full((3, 3), 4.2), 0.0).any()
        assert not point_in_threshold_region(np.full((3, 3), 4.2), (1, 1), 0.0)

    def test_point_outside_map(self):
        with pytest.raises(DataError):
            point_in_top_alpha(np.zeros((4, 4)), (4, 0), 1.0)

    def test_rank_positions_are_nested_membership(self):
        rng = np.random.default_rng(3)
        values = rng.normal(size=(10, 10))
        positions = region_rank_positions(values)
        for alpha in (0.5, 1.0, 3.0, 6.0, 12.0):
            budget = top_region_size(alpha, 10, 10)
            member = (positions < budget).reshape(10, 10)
            np.testing.assert_array_equal(member, top_alpha_region(values, alpha))


class TestAgainstReference:
    def test_existence_matches_reference_exactly(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            n = int(rng.integers(2, 16))
            scores = rng.normal(size=n)
            if rng.random() < 0.3:  # exercise ties
                scores = np.round(scores)
            annotated = {int(j) for j in rng.choice(n, size=rng.integers(0, n), replace=False)}
            l = int(rng.integers(1, n + 1))
            key = "absolute" if rng.random() < 0.5 else "signed"
            ranking = rank_desc(scores, key)
            assert existence_score(ranking, annotated, l) == ref_existence(
                scores, annotated, l, key
            )

    def test_regions_match_reference_exactly(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            h = int(rng.integers(2, 24))
            w = int(rng.integers(2, 24))
            values = rng.normal(size=(h, w))
            if rng.random() < 0.3:
                values = np.round(values * 2)  # plateaus -> tie-break paths
            alpha = float(rng.uniform(0.2, 12.0))
            budget = top_region_size(alpha, h, w)
            assert budget == ref_region_budget(alpha, h, w)
            mine = {int(i) for i in np.nonzero(top_alpha_region(values, alpha).ravel())[0]}
            assert mine == ref_top_region(values, budget)
            point = (int(rng.integers(0, h)), int(rng.integers(0, w)))
            assert point_in_top_alpha(values, point, alpha) == ref_point_in_top_alpha(
                values, point, alpha
            )
            tau = float(rng.uniform(0, 1))
            assert point_in_threshold_region(values, point, tau) == ref_point_in_threshold(
                values, point, tau
            )

    def test_cgim_matches_reference_closely(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            num_concepts = int(rng.integers(1, 16))
            num_classes = int(rng.integers(1, 10))
            weights = rng.normal(size=(num_concepts, num_classes))
            avg = rng.normal(size=(num_concepts, num_classes))
            truth = rng.uniform(size=(num_concepts, num_classes))
            if rng.random() < 0.3:
                weights[rng.integers(0, num_concepts)] = 0.0
            defined = rng.random(num_classes) > 0.2
            for axis in ("concept", "class"):
                for mine, ref in zip(
                    cgim1(weights, truth, axis), ref_cgim_axis(weights, truth, axis)
                ):
                    if mine is None or ref is None:
                        assert mine is None and ref is None
                    else:
                        assert mine == pytest.approx(ref, abs=1e-9)
                for mine, ref in zip(
                    cgim2(avg, truth, axis, defined),
                    ref_cgim_masked(avg, truth, defined, axis),
                ):
                    if mine is None or ref is None:
                        assert mine is None and ref is None
                    else:
                        assert mine == pytest.approx(ref, abs=1e-9)


class TestAggregation:
    def test_histogram_right_closed_bins(self):
        counts = histogram_counts([-1.0, -0.95, 0.0, 0.05, 1.0, None])
        assert sum(counts) == 5
        assert counts[0] == 2  # -1 and -0.95 both in the first bin
        assert counts[9] == 1  # 0 in (-0.1, 0]
        assert counts[10] == 1  # 0.05 in (0, 0.1]
        assert counts[19] == 1  # 1 in (0.9, 1]

    def test_mean_defined(self):
        mean, undefined = mean_defined([0.5, None, 1.0, None])
        assert mean == pytest.approx(0.75)
        assert undefined == 2
        assert mean_defined([None]) == (None, 1)


class TestSuite:
    def test_bundle_populated(self, small_dataset, small_bank, small_model):
        bundle = evaluate_suite(small_dataset, small_bank, small_model, SuiteConfig(jobs=1))
        assert bundle["num_test_images"] > 0
        assert len(bundle["cem"]) == 2 * 3 * 3 * 2  # rank keys x bases x l x subsets
        assert len(bundle["clm"]) == 2 * 3 * 3 * 3  # rank keys x bases x alphas x l
        assert len(bundle["cgim"]) == 3 * 2
        for cell in bundle["cem"]:
            assert cell["mean"] is None or 0.0 <= cell["mean"] <= 1.0
        for cell in bundle["clm"]:
            assert cell["mean"] is None or 0.0 <= cell["mean"] <= 1.0

    def test_jobs_do_not_change_results(self, small_dataset, small_bank, small_model):
        one = evaluate_suite(small_dataset, small_bank, small_model, SuiteConfig(jobs=1))
        four = evaluate_suite(small_dataset, small_bank, small_model, SuiteConfig(jobs=4))
        assert one == four

    def test_clm_monotone_in_alpha(self, small_dataset, small_bank, small_model):
        bundle = evaluate_suite(
            small_dataset,
            small_bank,
            small_model,
            SuiteConfig(alphas=(1.0, 3.0, 6.0), jobs=2),
        )
        for key in ("absolute", "signed"):
            for basis in ("theta", "uhat", "theta_uhat"):
                for l in (1, 3, 5):
                    means = [
                        cell["mean"]
                        for cell in bundle["clm"]
                        if cell["basis"] == basis
                        and cell["l"] == l
                        and cell["rank_key"] == key
                    ]
                    assert len(means) == 3  # cells emitted in ascending-alpha order
                    defined = [m for m in means if m is not None]
                    assert defined == sorted(defined)

    def test_threshold_mode(self, small_dataset, small_bank, small_model):
        bundle = evaluate_suite(
            small_dataset,
            small_bank,
            small_model,
            SuiteConfig(region_mode="threshold", tau=0.6, jobs=1),
        )
        for cell in bundle["clm"]:
            assert cell["tau"] == 0.6
            assert "alpha" not in cell

    def test_unmapped_concepts_skipped(self, tmp_path, small_bank, small_model):
        import json

        from conceptprobe import store
        from conceptprobe.synth import SynthSpec, generate

        spec = SynthSpec(
            num_classes=4,
            num_concepts=6,
            depth=8,
            feature_height=5,
            feature_width=5,
            image_height=40,
            image_width=40,
            samples_per_class=12,
            seed=3,
        )
        generate(spec, tmp_path / "d")
        manifest_path = tmp_path / "d" / "manifest.json"
        doc = json.loads(manifest_path.read_text())
        for j in ("0", "1", "2", "3", "4", "5"):
            doc["part_map"][j] = None  # no concept maps to a part any more
        store.dump_json(manifest_path, doc)
        ds = store.Dataset.open(tmp_path / "d")
        bundle = evaluate_suite(
            ds, small_bank, small_model, SuiteConfig(l_values=(1,), alphas=(1.0,), jobs=1)
        )
        for cell in bundle["clm"]:
            assert cell["mean"] is None  # every concept skipped
            assert cell["skipped_concepts"] > 0
        # existence scoring is unaffected by part mapping
        for cell in bundle["cem"]:
            assert cell["mean"] is not None

    def test_invalid_configs(self, small_dataset, small_bank, small_model):
        with pytest.raises(UsageError):
            evaluate_suite(
                small_dataset, small_bank, small_model, SuiteConfig(l_values=(0,))
            )
        with pytest.raises(UsageError):
            evaluate_suite(
                small_dataset, small_bank, small_model, SuiteConfig(alphas=(13.0,))
            )
        with pytest.raises(UsageError):
            evaluate_suite(
                small_dataset, small_bank, small_model, SuiteConfig(rank_keys=("upward",))
            )
