import numpy as np
import pytest

from abnn.evaluation import (
    aupr,
    auroc,
    cluster3,
    detection_accuracy,
    kmeans1d,
    tnr_at_tpr95,
    validate_report,
)
from abnn.numerics import Rng


# ---- independent brute-force oracles -------------------------------------------


def auroc_pairwise(neg, pos):
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def tnr_threshold_sweep(neg, pos, tpr=0.95):
    best = None
    for t in sorted(set(list(neg) + list(pos))):
        got_tpr = sum(1 for p in pos if p >= t) / len(pos)
        if got_tpr >= tpr:
            tnr = sum(1 for n in neg if n < t) / len(neg)
            best = tnr if best is None else max(best, tnr)
    return best


def detection_accuracy_sweep(neg, pos):
    uniq = sorted(set(list(neg) + list(pos)))
    cands = [uniq[0] - 1.0, uniq[-1] + 1.0]
    cands += [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])]
    best = 0.0
    for t in cands:
        tpr = sum(1 for p in pos if p >= t) / len(pos)
        tnr = sum(1 for n in neg if n < t) / len(neg)
        best = max(best, 0.5 * (tpr + tnr))
    return best


def average_precision_stepwise(neg, pos, positive_is):
    if positive_is == "out":
        items = [(s, 0) for s in neg] + [(s, 1) for s in pos]
        items.sort(key=lambda it: (-it[0], it[1]))
    else:
        items = [(-s, 1) for s in neg] + [(-s, 0) for s in pos]
        items.sort(key=lambda it: (-it[0], it[1]))
    n_pos = sum(lab for _, lab in items)
    tp = 0
    ap = 0.0
    for k, (_, lab) in enumerate(items, start=1):
        if lab == 1:
            tp += 1
            ap += tp / k
    return ap / n_pos


# ---- fixed-value cases -----------------------------------------------------------


class TestAuroc:
    def test_fully_separated(self):
        assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0

    def test_three_of_four_pairs(self):
        assert auroc([0.3, 0.7], [0.5, 0.9]) == 0.75

    def test_identical_multisets_give_half(self):
        s = [0.2, 0.5, 0.5, 0.9]
        assert auroc(s, s) == 0.5

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            auroc([], [0.5])


class TestTnrAtTpr95:
    def test_fully_separated(self):
        assert tnr_at_tpr95([0.1, 0.2, 0.3], [0.7, 0.8, 0.9]) == 1.0

    def test_hand_enumerated_case(self):
        pos = [0.9] * 19 + [0.1]
        neg = [0.5] * 10
        assert tnr_at_tpr95(neg, pos) == 1.0

    def test_matched_distributions_sit_near_five_percent(self):
        rng = Rng(3)
        scores = rng.uniform(4000)
        neg, pos = scores[:2000], scores[2000:]
        assert tnr_at_tpr95(neg, pos) == pytest.approx(0.05, abs=0.02)


class TestDetectionAccuracy:
    def test_separable(self):
        assert detection_accuracy([0.1, 0.2], [0.6, 0.9]) == 1.0

    def test_identical_sets(self):
        assert detection_accuracy([0.4, 0.4], [0.4, 0.4]) == 0.5

    def test_hand_case(self):
        assert detection_accuracy([0.1, 0.6], [0.4, 0.9]) == 0.75


class TestAupr:
    def test_separable_out(self):
        assert aupr([0.1, 0.2], [0.8, 0.9], "out") == 1.0

    def test_single_positive_ranked_last(self):
        neg = [0.5, 0.6, 0.7, 0.8]
        pos = [0.1]
        assert aupr(neg, pos, "out") == pytest.approx(1.0 / 5.0)

    def test_random_case_matches_stepwise_oracle(self):
        rng = Rng(17)
        neg = rng.uniform(20)
        pos = rng.substream(1).uniform(15)
        for direction in ("in", "out"):
            assert aupr(neg, pos, direction) == pytest.approx(
                average_precision_stepwise(neg, pos, direction), abs=1e-12
            )

    def test_rejects_unknown_direction(self):
        with pytest.raises(ValueError):
            aupr([0.1], [0.9], "sideways")


class TestOracleAgreement:
    """Vectorized metrics equal the O(n*m) oracles on random score sets."""

    def test_hundred_random_sets(self):
        rng = Rng(23)
        for trial in range(100):
            sub = rng.substream(trial)
            u = sub.uniform(2)
            n = 1 + int(u[0] * 199)
            m = 1 + int(u[1] * 199)
            neg = np.round(sub.uniform(n), 2)  # rounding forces ties
            pos = np.round(sub.uniform(m), 2)
            assert auroc(neg, pos) == pytest.approx(auroc_pairwise(neg, pos), abs=1e-12)
            assert detection_accuracy(neg, pos) == pytest.approx(
                detection_accuracy_sweep(neg, pos), abs=1e-12
            )
            assert tnr_at_tpr95(neg, pos) == pytest.approx(tnr_threshold_sweep(neg, pos), abs=1e-12)
            for direction in ("in", "out"):
                assert aupr(neg, pos, direction) == pytest.approx(
                    average_precision_stepwise(neg, pos, direction), abs=1e-12
                )

    def test_rank_metrics_invariant_under_monotone_transform(self):
        rng = Rng(29)
        neg = rng.uniform(80)
        pos = rng.substream(1).uniform(60) * 0.9 + 0.1

        def transform(s):
            return np.exp(3.0 * np.asarray(s)) + 5.0

        assert auroc(neg, pos) == pytest.approx(auroc(transform(neg), transform(pos)), abs=1e-12)
        assert tnr_at_tpr95(neg, pos) == pytest.approx(
            tnr_at_tpr95(transform(neg), transform(pos)), abs=1e-12
        )
        assert detection_accuracy(neg, pos) == pytest.approx(
            detection_accuracy(transform(neg), transform(pos)), abs=1e-12
        )
        for direction in ("in", "out"):
            assert aupr(neg, pos, direction) == pytest.approx(
                aupr(transform(neg), transform(pos), direction), abs=1e-12
            )


class TestKmeans1d:
    def test_separated_triples(self):
        values = np.array([0.0, 0.01, 0.5, 0.51, 0.99, 1.0])
        centroids, assign = kmeans1d(values, 3)
        assert np.array_equal(assign, [0, 0, 1, 1, 2, 2])

    def test_degenerate_all_equal(self):
        values = np.full(12, 0.3)
        _, assign = kmeans1d(values, 3)
        assert np.array_equal(assign, np.zeros(12, dtype=assign.dtype))


class TestCluster3:
    def test_separated_bands_are_diagonal(self):
        conf, acc = cluster3([0.00, 0.01], [0.50, 0.51], [0.99, 1.00], trim=0.0)
        assert acc == 1.0
        assert np.array_equal(conf, np.diag([2, 2, 2]))

    def test_indistinguishable_sets(self):
        s = list(Rng(31).uniform(60))
        conf, acc = cluster3(s, s, s, trim=0.0)
        assert acc == pytest.approx(1.0 / 3.0, abs=0.15)

    def test_all_scores_equal_defined_result(self):
        s = [0.2] * 30
        conf, acc = cluster3(s, s, s, trim=0.0)
        assert conf[:, 0].sum() == 90
        assert acc == pytest.approx(1.0 / 3.0)

    def test_permutation_invariance(self):
        rng = Rng(37)
        a = rng.uniform(50)
        b = rng.uniform(50) + 0.3
        c = rng.uniform(50) + 0.7
        conf1, acc1 = cluster3(a, b, c)
        perm = rng.permutation(50)
        conf2, acc2 = cluster3(a[perm], b[perm], c[perm])
        assert np.array_equal(conf1, conf2)
        assert acc1 == acc2

    def test_trim_drops_tail_fraction(self):
        scores_id = np.concatenate([np.full(98, 0.1), [0.0, 1.0]])
        conf, acc = cluster3(scores_id, np.full(100, 0.5), np.full(100, 0.9), trim=0.01)
        assert conf.sum() == 294  # one sample trimmed per tail per set
        assert acc == 1.0

    def test_trim_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            cluster3([0.5], [0.5], [0.5], trim=0.6)


class TestReportSchema:
    def test_valid_report_passes(self):
        doc = {
            "schema_version": 1,
            "mode": "abnn",
            "seed": 0,
            "n_samples_eval": 5,
            "trim": 0.01,
            "id_accuracy": 0.99,
            "detection": {
                "full_ood": {
                    "tnr_at_tpr95": 0.9,
                    "auroc": 0.95,
                    "detection_accuracy": 0.9,
                    "aupr_in": 0.9,
                    "aupr_out": 0.9,
                },
                "semi_ood": {
                    "tnr_at_tpr95": 0.5,
                    "auroc": 0.7,
                    "detection_accuracy": 0.7,
                    "aupr_in": 0.7,
                    "aupr_out": 0.7,
                },
            },
            "misclassification": {"accuracy": 0.99, "n_errors": 2, "auroc": None},
            "cluster3": {"confusion": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "accuracy": 1.0},
            "uncertainty_medians": {"id": 0.01, "semi": 0.2, "full": 0.4},
            "config": {},
        }
        validate_report(doc)

    def test_out_of_range_rate_fails(self):
        import jsonschema

        doc = {
            "schema_version": 1,
            "mode": "abnn",
            "seed": 0,
            "n_samples_eval": 5,
            "trim": 0.01,
            "id_accuracy": 1.7,
            "detection": {"full_ood": {}, "semi_ood": {}},
            "misclassification": {"accuracy": 1.0, "n_errors": 0},
            "cluster3": {"confusion": [[0] * 3] * 3, "accuracy": 0.5},
            "uncertainty_medians": {},
            "config": {},
        }
        with pytest.raises(jsonschema.ValidationError):
            validate_report(doc)
