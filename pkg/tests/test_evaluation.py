import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qcpd.core import DataError
from qcpd.evaluation import (
    FN,
    FP,
    TN,
    TP,
    RunRecord,
    auroc,
    best_f1,
    classify,
    delay_cdf,
    delay_quantile,
    emit_cdf_csv,
    labeled_scores,
    metrics,
    roc_curve,
    window_sweep,
)


def run(i, tc, hat, dt=1.0):
    return RunRecord(f"r{i:03d}", tc is not None, tc, hat, dt)


def test_classify_cases():
    assert classify(run(0, 150, 151)) == TP
    assert classify(run(0, 150, 150)) == TP
    assert classify(run(0, 150, 149)) == FP
    assert classify(run(0, 150, None)) == FN
    assert classify(run(0, None, None)) == TN
    assert classify(run(0, None, 10)) == FP


def test_run_record_validation():
    with pytest.raises(DataError):
        RunRecord("x", True, None, None, 1.0)
    with pytest.raises(DataError):
        RunRecord("x", False, 5, None, 1.0)
    with pytest.raises(DataError):
        RunRecord("x", True, 5, 11, 1.0, T=10)


def test_all_detected_on_time():
    rep = metrics([run(i, 150, 150) for i in range(10)])
    assert (rep.CD, rep.MD, rep.FA) == (1.0, 0.0, 0.0)
    assert rep.delays_seconds == [0.0] * 10
    assert all(v == 0.0 for v in rep.d_alpha.values())
    assert rep.delay_cdf == [[0.0, 1.0]]


def test_delay_cdf_hand_construction():
    grid, F = delay_cdf([1.0, 1.0, 2.0, 4.0], 1.0)
    assert grid.tolist() == [1.0, 2.0, 3.0, 4.0]
    assert F.tolist() == [0.5, 0.75, 0.75, 1.0]
    assert delay_quantile(grid, F, 0.9) == 4.0
    assert delay_quantile(grid, F, 0.5) == 1.0


def test_mixed_counts():
    runs = [run(i, 150, 150 + i) for i in range(4)] + [run(4, 150, None)]
    runs += [run(5 + i, None, 20 if i == 0 else None) for i in range(5)]
    rep = metrics(runs)
    assert rep.CD == 0.8 and rep.MD == 0.2 and rep.FA == 0.1
    assert rep.counts == {TP: 4, FN: 1, FP: 1, TN: 4}


@given(st.lists(st.tuples(st.booleans(), st.one_of(st.none(), st.integers(1, 300))), min_size=1, max_size=60))
def test_rates_match_count_formulas(cases):
    runs = [run(i, 150 if change else None, hat) for i, (change, hat) in enumerate(cases)]
    n_a = sum(r.has_true_change for r in runs)
    if n_a == 0:
        with pytest.raises(DataError):
            metrics(runs)
        return
    n_n = len(runs) - n_a
    tp = sum(r.has_true_change and r.stop_index is not None and r.stop_index >= 150 for r in runs)
    fn = sum(r.has_true_change and r.stop_index is None for r in runs)
    fp = sum((r.stop_index is not None) and (not r.has_true_change or r.stop_index < 150) for r in runs)
    rep = metrics(runs)
    assert rep.CD == tp / n_a and rep.MD == fn / n_a and rep.FA == fp / (n_a + n_n)
    assert rep.CD + rep.MD + sum(r.has_true_change and r.stop_index is not None and r.stop_index < 150
                                 for r in runs) / n_a == pytest.approx(1.0)


@given(st.lists(st.integers(0, 40), min_size=1, max_size=50), st.sampled_from([1.0, 0.1, 0.01]))
def test_delay_cdf_properties(ticks, dt):
    delays = [k * dt for k in ticks]
    grid, F = delay_cdf(delays, dt)
    assert np.all(np.diff(F) >= 0)
    assert F[-1] == 1.0
    assert grid.size == max(ticks) - min(ticks) + 1
    for r, f in zip(grid, F):
        assert f == sum(k <= round(r / dt) for k in ticks) / len(ticks)


def test_metrics_rejects_mixed_dt():
    with pytest.raises(DataError):
        metrics([run(0, 5, 6, 1.0), run(1, 5, 6, 0.1)])


def pair_count_auroc(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def exhaustive_f1(s, y):
    best = 0.0
    for thr in set(s):
        pred = [a >= thr for a in s]
        tp = sum(p and l == 1 for p, l in zip(pred, y))
        fp = sum(p and l == 0 for p, l in zip(pred, y))
        fn = sum((not p) and l == 1 for p, l in zip(pred, y))
        best = max(best, 2 * tp / (2 * tp + fp + fn))
    return best


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([1.0] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


labeled = st.integers(2, 200).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 20).map(float), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)))


@given(labeled)
def test_auroc_equals_pair_counting(data):
    s, y = data
    if len(set(y)) < 2:
        with pytest.raises(DataError):
            auroc(s, y)
        return
    assert auroc(s, y) == pair_count_auroc(s, y)


@given(labeled)
def test_best_f1_equals_exhaustive(data):
    s, y = data
    if len(set(y)) < 2:
        return
    f1, thr = best_f1(s, y)
    assert f1 == exhaustive_f1(s, y)
    assert thr in s


def test_best_f1_examples():
    f1, thr = best_f1([1, 2, 3, 4], [0, 1, 0, 1])
    assert f1 == pytest.approx(0.8) and thr <= 2
    assert best_f1([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[0] == 1.0


def test_all_positive_labels_f1():
    with pytest.raises(DataError):
        best_f1([1.0, 2.0], [1, 1])


def test_roc_curve_endpoints():
    fpr, tpr, thr = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert fpr[0] == 0 and tpr[0] == 0 and fpr[-1] == 1 and tpr[-1] == 1
    assert np.trapezoid(tpr, fpr) == pytest.approx(0.75)


def test_labeled_scores():
    s, y = labeled_scores(np.arange(5.0), 3)
    assert y.tolist() == [0, 0, 1, 1, 1]


def test_window_sweep_table():
    def evaluate(w, seed):
        return {"mean": [w / 10 + seed], "wasserstein": []}
    rows = window_sweep(evaluate, (5, 50), repeats=3)
    by = {(r.w, r.statistic): r for r in rows}
    assert by[(5, "mean")].mean_delay == pytest.approx(1.5)
    assert by[(50, "mean")].std_delay == pytest.approx(np.std([5, 6, 7]))
    assert by[(5, "wasserstein")].mean_delay is None


def test_emit_cdf(tmp_path):
    rep = metrics([run(i, 10, 10 + k) for i, k in enumerate([1, 1, 2, 4])])
    text = emit_cdf_csv(tmp_path / "c.csv", rep).read_text().splitlines()
    assert text == ["r_j,F_D", "1.0,0.5", "2.0,0.75", "3.0,0.75", "4.0,1.0"]
