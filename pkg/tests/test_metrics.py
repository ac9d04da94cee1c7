import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolcodebook.dataset import ToolCall
from toolcodebook.metrics import (
    STRICT,
    AccuracyMatrix,
    IncompleteMatrixError,
    MetricDomainError,
    UndefinedMetricError,
    average_accuracy,
    average_forgetting,
    call_correct,
    forgetting,
    metrics_report,
    parse_report_csv,
    partial_credit,
    tool_call_accuracy,
)


def naive_metrics(rows):
    """Plain-loop AA, f and AF over a list-of-lists lower triangle (1-based maths)."""
    T = len(rows)
    aa, af = [], []
    for k in range(1, T + 1):
        aa.append(sum(rows[k - 1][j - 1] for j in range(1, k + 1)) / k)
        if k == 1:
            af.append(None)
            continue
        total = 0.0
        for j in range(1, k):
            best = max(rows[l - 1][j - 1] for l in range(j, k))
            total += best - rows[k - 1][j - 1]
        af.append(total / (k - 1))
    return aa, af


def random_rows(rng, T):
    return [list(rng.uniform(0, 1, size=k)) for k in range(1, T + 1)]


def test_matches_naive_oracle_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        rows = random_rows(rng, int(rng.integers(1, 8)))
        rep = metrics_report(AccuracyMatrix.from_rows(rows))
        aa, af = naive_metrics(rows)
        assert np.allclose(rep.aa, aa, rtol=0, atol=1e-12)
        for got, want in zip(rep.af, af):
            assert (got is None) == (want is None)
            if want is not None:
                assert abs(got - want) <= 1e-12


def test_hand_case():
    A = AccuracyMatrix.from_rows([[0.8], [0.6, 0.9]])
    assert average_accuracy(A, 2) == 0.75
    assert average_forgetting(A, 2) == pytest.approx(0.2, abs=1e-15)
    assert forgetting(A, 2, 1) == pytest.approx(0.2, abs=1e-15)
    assert average_accuracy(A, 1) == 0.8


def test_forgetting_uses_past_maximum():
    A = AccuracyMatrix.from_rows([[0.5], [0.9, 0.4], [0.7, 0.4, 1.0]])
    assert forgetting(A, 3, 1) == pytest.approx(0.2)
    assert forgetting(A, 3, 2) == 0.0
    # improvement counts as negative forgetting
    B = AccuracyMatrix.from_rows([[0.2], [0.6, 1.0]])
    assert forgetting(B, 2, 1) == pytest.approx(-0.4)


def test_metric_errors():
    A = AccuracyMatrix(3)
    A[1, 1] = 0.5
    with pytest.raises(IncompleteMatrixError):
        average_accuracy(A, 2)
    with pytest.raises(IncompleteMatrixError):
        A[2, 1]
    with pytest.raises(UndefinedMetricError):
        average_forgetting(A, 1)
    with pytest.raises(MetricDomainError):
        forgetting(A, 2, 2)
    with pytest.raises(IndexError):
        A[1, 2] = 0.1
    with pytest.raises(ValueError):
        A[2, 2] = 1.5
    with pytest.raises(IncompleteMatrixError):
        metrics_report(A)


@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_csv_round_trip(T, seed):
    A = AccuracyMatrix.from_rows(random_rows(np.random.default_rng(seed), T))
    rep = metrics_report(A)
    B, aa, af = parse_report_csv(rep.to_csv())
    assert B == A
    assert aa == rep.aa_final and af == rep.af_final


def test_single_step_report_has_undefined_forgetting():
    rep = metrics_report(AccuracyMatrix.from_rows([[0.3]]))
    assert rep.af == [None]
    assert rep.to_csv().endswith("0.3,undefined\n")
    assert parse_report_csv(rep.to_csv())[2] is None


def test_call_correct_is_a_multiset_comparison():
    a, b = ToolCall("asr", {}), ToolCall("ocr", {"lang": "en"})
    assert call_correct([a, b], [b, a]) == 1
    assert call_correct([a, a], [a]) == 0
    assert call_correct([], []) == 1
    assert call_correct([ToolCall("ocr", {})], [b]) == 1
    assert call_correct([ToolCall("ocr", {})], [b], STRICT) == 0
    with pytest.raises(ValueError):
        call_correct([], [], "fuzzy")


def test_split_accuracy_and_partial_credit():
    a, b = ToolCall("asr", {}), ToolCall("ocr", {})
    preds, refs = [[a], [a], [b, a]], [[a], [b], [a]]
    assert tool_call_accuracy(preds, refs) == pytest.approx(1 / 3)
    assert partial_credit(preds, refs) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        tool_call_accuracy(preds, refs[:2])
