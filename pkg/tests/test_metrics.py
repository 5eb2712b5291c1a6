import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msrn.metrics import average_precision, binarize, evaluate, map_score, prf_suite
from oracles import oracle_ap, oracle_prf


def random_batch(rng, N=30, n=6):
    truth = (rng.random((N, n)) < 0.35).astype(int)
    truth[rng.integers(N), :] = 1
    scores = np.round(rng.random((N, n)), 1)  # coarse grid forces ties
    return scores, truth


def test_hand_ranked_ap():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)


def test_perfect_and_degenerate_ap():
    assert average_precision([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0]) == 1.0
    assert average_precision([0.3], [1]) == 1.0


def test_ap_ties_follow_index_order():
    # positive at index 1 ties with a negative at index 0 -> ranked second
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_map_arithmetic_and_perfect():
    truth = np.array([[1, 0], [0, 1], [0, 1]])
    assert map_score(truth.astype(float), truth) == 1.0
    scores = np.array([[0.9, 0.9], [0.1, 0.1], [0.0, 0.8]])
    # class 0 perfect; class 1 positives at ranks 2 and 3 -> (1/2 + 2/3) / 2
    assert map_score(scores, truth) == pytest.approx((1 + (0.5 + 2 / 3) / 2) / 2, abs=1e-15)


def test_map_skips_empty_class_with_warning():
    truth = np.array([[1, 0], [0, 0]])
    with pytest.warns(UserWarning, match=r"\[1\]"):
        assert map_score([[0.9, 0.1], [0.2, 0.3]], truth) == 1.0
    with pytest.raises(ValueError, match="no class"):
        map_score([[0.1]], [[0]])


def test_map_matches_oracle_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(50):
        scores, truth = random_batch(rng)
        expect = [oracle_ap(list(scores[:, c]), list(truth[:, c])) for c in range(6) if truth[:, c].any()]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert abs(map_score(scores, truth) - np.mean(expect)) <= 1e-12


def test_binarize_modes():
    np.testing.assert_array_equal(binarize([[0.4, 0.6]]), [[0, 1]])
    rng = np.random.default_rng(1)
    assert (binarize(rng.random((10, 5)), top_k=3).sum(axis=1) == 3).all()
    np.testing.assert_array_equal(binarize([[0.2, 0.5, 0.5, 0.5]], top_k=2), [[0, 1, 1, 0]])
    with pytest.raises(ValueError):
        binarize([[0.1, 0.2]], top_k=3)


def test_prf_hand_case():
    truth = np.array([[1, 1], [0, 1]])
    pred = np.array([[1, 1], [1, 0]])
    r = prf_suite(pred, truth)
    assert r["CP"] == 0.75 and r["CR"] == 0.75
    assert r["OP"] == pytest.approx(2 / 3, abs=1e-15)
    assert r["OR"] == pytest.approx(2 / 3, abs=1e-15)


def test_prf_perfect_and_empty():
    truth = np.array([[1, 0], [0, 1]])
    assert all(v == 1 for v in prf_suite(truth, truth).values())
    assert all(v == 0 for v in prf_suite(np.zeros_like(truth), truth).values())


def test_prf_matches_counting_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        truth = (rng.random((30, 6)) < 0.4).astype(int)
        pred = (rng.random((30, 6)) < 0.4).astype(int)
        got, want = prf_suite(pred, truth), oracle_prf(pred.tolist(), truth.tolist())
        for k in want:
            assert abs(got[k] - want[k]) <= 1e-12


def test_evaluate_report_keys():
    rng = np.random.default_rng(3)
    scores, truth = random_batch(rng)
    report = evaluate(scores, truth)
    assert set(report) == {"mAP", "CP", "CR", "CF1", "OP", "OR", "OF1",
                           "CP-3", "CR-3", "CF1-3", "OP-3", "OR-3", "OF1-3"}
    assert all(0 <= v <= 1 for v in report.values())


def test_shape_and_binary_validation():
    with pytest.raises(ValueError):
        prf_suite([[1, 0]], [[1]])
    with pytest.raises(ValueError, match="0/1"):
        map_score([[0.1]], [[2]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, 12)
    truth[0] = 1
    scores = rng.normal(size=12)
    assert average_precision(np.exp(3 * scores) + 1, truth) == average_precision(scores, truth)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_macro_and_micro_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, (15, 5))
    pred = rng.integers(0, 2, (15, 5))
    base = prf_suite(pred, truth)
    cols, rows = rng.permutation(5), rng.permutation(15)
    by_class = prf_suite(pred[:, cols], truth[:, cols])
    by_image = prf_suite(pred[rows], truth[rows])
    for k in ("CP", "CR"):
        assert by_class[k] == pytest.approx(base[k], abs=1e-15)
    for k in ("OP", "OR", "OF1"):
        assert by_image[k] == base[k]
