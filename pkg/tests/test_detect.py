import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qcpd.aggregate import Kde1d
from qcpd.core import DataError, EntityTensor, IdfnSeries
from qcpd.detect import (
    DetectorInvariantError,
    DetectorProfile,
    DetectorState,
    OnlineDetector,
    build_profile,
    calibration_densities,
    cusum_step,
    detect_batch,
    detect_series,
    deviation,
    history_density,
    load_profile,
    run_online,
    save_profile,
    threshold_from_densities,
    threshold_step,
)


def profile(stat="mean", mu=1.5, sigma2=0.0, delta=1e-3, dt=1.0, warmup=2.0, centers=(0.0, 1.0, 2.0, 3.0),
            h=0.5):
    return DetectorProfile(stat, mu, sigma2, Kde1d(np.array(centers), h), delta, dt, warmup)


def test_deviation_mean_hand_value():
    assert deviation("mean", [2.0, 2.0], profile()) == 0.5


def test_deviation_mean_at_reference_is_zero():
    assert deviation("mean", [1.0, 2.0], profile()) == 0.0


def test_deviation_variance():
    assert deviation("var", [1.0, 3.0], profile(sigma2=0.25)) == 0.75


def test_deviation_wasserstein_of_training_set_is_zero():
    prof = profile("wass")
    assert deviation("wasserstein", [0.0, 1.0, 2.0, 3.0], prof) <= 1e-6


def test_deviation_needs_entities():
    with pytest.raises(DataError):
        deviation("mean", [], profile())
    with pytest.raises(DataError):
        deviation("median", [1.0], profile())


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 100)), st.randoms(),
       st.sampled_from(["mean", "variance", "wasserstein"]))
def test_deviation_permutation_invariant(row, r, stat):
    perm = row.copy()
    r.shuffle(perm)
    prof = profile(stat, sigma2=1.0)
    assert deviation(stat, perm, prof) == pytest.approx(deviation(stat, row, prof), rel=1e-9, abs=1e-9)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 100)), st.floats(0, 50),
       st.floats(0.01, 100))
def test_deviation_mean_homogeneous(row, mu, c):
    a = deviation("mean", row * c, profile(mu=mu * c))
    b = c * deviation("mean", row, profile(mu=mu))
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_cusum_hand_accumulation():
    s = DetectorState()
    out = []
    for f in (0.5, 1.5, 2.0):
        out.append(cusum_step(s, f).cusum)
    assert out == [0.5, 2.0, 4.0]


def test_cusum_constant_inputs():
    s = DetectorState()
    for t in range(1, 20):
        assert cusum_step(s, 1.0).cusum == t
    z = DetectorState()
    for _ in range(5):
        assert cusum_step(z, 0.0).cusum == 0.0


@given(st.lists(st.floats(0, 1e6), max_size=200))
def test_cusum_exact_and_monotone(fs):
    s = DetectorState()
    expected = 0.0
    prev = 0.0
    for f in fs:
        expected = expected + f
        cusum_step(s, f)
        assert s.cusum == expected
        assert s.cusum >= prev
        prev = s.cusum


@pytest.mark.parametrize("bad", [-1e-9, math.inf, math.nan])
def test_cusum_rejects_bad_input(bad):
    with pytest.raises(DataError):
        cusum_step(DetectorState(), bad)


def test_warmup_first_possible_fire():
    prof = profile(dt=0.1, delta=1e300)  # fires as soon as it is allowed to
    det = OnlineDetector(prof)
    fired_at = None
    for t in range(1, 40):
        if det.update([t]) and fired_at is None:
            fired_at = t
    assert prof.warmup_samples == 20
    assert fired_at == 21


def test_stationary_zero_deviation_never_fires():
    prof = profile(mu=1.0, delta=1.0)
    det = OnlineDetector(prof)
    for _ in range(100):
        assert not det.update([1.0, 1.0])
    d = np.array(det.densities)
    assert np.all(np.isnan(d[:2]))
    # history collapses to 0 with the floor bandwidth; density is the kernel peak
    peak = 1 / (1e-6 * math.sqrt(2 * math.pi))
    assert np.allclose(d[2:], peak, rtol=1e-12)


def test_outlier_fires():
    prof = profile(delta=1e-6)
    s = DetectorState()
    for _ in range(30):
        s.cusum = 1.0
        s.t += 1
        threshold_step(s, prof)
    assert s.fired is None
    s.cusum = 1e6
    s.t += 1
    _, fired = threshold_step(s, prof)
    assert fired and s.fired == 31
    assert s.last_density < 1e-6


def test_latching():
    prof = profile(dt=1.0, delta=1e300)
    det = OnlineDetector(prof)
    for t in range(1, 10):
        det.update([float(t)])
    assert det.state.fired == 3
    hist = len(det.state.history)
    for t in range(10, 20):
        assert not det.update([float(t)])
    assert det.state.fired == 3
    assert len(det.state.history) == hist
    assert np.isnan(det.densities[-1])
    # the CUSUM keeps accumulating after the stop
    assert det.cusums[-1] > det.cusums[8]


def test_threshold_step_invariant_violation():
    prof = profile()
    s = DetectorState(t=5, cusum=1.0)
    with pytest.raises(DetectorInvariantError):
        threshold_step(s, prof)


def test_history_density_matches_kde():
    hist = np.array([0.1, 0.5, 0.7, 1.2])
    h = 1.06 * np.std(hist, ddof=1) * 4 ** -0.2
    assert history_density(hist, 0.6) == pytest.approx(float(Kde1d(hist, h).pdf(0.6)), rel=1e-12)


def test_empty_stream():
    prof = profile()
    out = detect_series(IdfnSeries(np.zeros((0, 3)), 1.0), prof)
    assert out.stop_index is None and len(out.cusum) == 0
    from qcpd.autoencoder import DenseAutoencoder
    model = DenseAutoencoder.create(4, (3, 2), 0.0, 0)
    out = run_online(model, None, prof, iter([]), 4)
    assert out.stop_index is None and len(out.cusum) == 0


@given(st.integers(0, 10_000), st.sampled_from(["mean", "variance", "wasserstein"]))
def test_series_and_batch_agree(seed, stat):
    rng = np.random.default_rng(seed)
    scores = rng.gamma(2.0, 0.5, (60, 6))
    scores[30:] *= rng.uniform(1, 4)
    s = IdfnSeries(scores, 0.5)
    prof = profile(stat, mu=1.0, sigma2=0.5, delta=float(rng.uniform(1e-3, 0.5)))
    a, b = detect_series(s, prof), detect_batch(s, prof)
    assert a.stop_index == b.stop_index
    assert np.array_equal(a.cusum.values, b.cusum.values)
    assert np.array_equal(a.deviation.values, b.deviation.values)
    n = len(b.density_at_current)
    assert np.array_equal(a.density_at_current.values[:n], b.density_at_current.values, equal_nan=True)


def test_masked_series_and_batch_agree(rng):
    mask = rng.random((40, 5)) < 0.8
    mask[:, 0] = True
    s = IdfnSeries(rng.gamma(2.0, 0.5, (40, 5)), 1.0, mask=mask)
    prof = profile(mu=1.0, delta=0.05)
    a, b = detect_series(s, prof), detect_batch(s, prof)
    assert a.stop_index == b.stop_index
    assert np.array_equal(a.cusum.values[:len(b.cusum)], b.cusum.values)


def test_run_online_over_tensor_equals_batch(rng):
    from qcpd.autoencoder import DenseAutoencoder
    from qcpd.preprocess import fit_norm
    from qcpd.score import idfn_series
    x = EntityTensor(rng.normal(size=(2, 50, 4)), 1.0, 25)
    model = DenseAutoencoder.create(10, (8, 3), 0.1, 2)
    stats = fit_norm(x)
    prof = profile(mu=1.0, delta=0.05)
    online = run_online(model, stats, prof, x, 5)
    batch = detect_batch(idfn_series(model, x, stats, 5), prof)
    assert online.stop_index == batch.stop_index
    assert np.array_equal(online.deviation.values[:len(batch.deviation)], batch.deviation.values)


def _train_series(seed, n=6, T=80):
    rng = np.random.default_rng(seed)
    return [IdfnSeries(rng.gamma(2.0, 0.5, (T, 5)), 1.0) for _ in range(n)]


def test_build_profile_references():
    s = IdfnSeries(np.array([[0.0, 1.0], [2.0, 3.0]] * 10), 1.0)
    prof = build_profile([s], "mean", calibration=_train_series(1, 2, 20))
    assert prof.mu_train == 1.5
    assert prof.sigma2_train == pytest.approx(1.25)
    assert prof.delta_thr > 0


def test_build_profile_degenerate():
    with pytest.raises(DataError):
        build_profile([IdfnSeries(np.full((10, 3), 2.0), 1.0)], "mean")
    with pytest.raises(DataError):
        build_profile([], "mean")


def test_alpha_zero_gives_minimum_density():
    train = _train_series(2)
    cal = _train_series(3, 4)
    prof = build_profile(train, "mean", alpha=0.0, calibration=cal)
    per_run = calibration_densities(cal, prof)
    assert prof.delta_thr == max(min(d.min() for d in per_run), np.finfo(float).tiny)


def test_calibration_rules():
    per_run = [np.array([0.5, 0.2]), np.array([0.1, 0.9]), np.array([0.3])]
    assert threshold_from_densities(per_run, 0.0) == 0.1
    assert threshold_from_densities(per_run, 1.0) == 0.3
    assert threshold_from_densities(per_run, 0.0, "tick") == 0.1
    assert threshold_from_densities([np.zeros(3)], 0.5) == np.finfo(float).tiny
    with pytest.raises(DataError):
        threshold_from_densities([np.array([])], 0.5)


def test_calibrated_normal_runs_mostly_silent():
    train = _train_series(10, n=4, T=100)
    cal = _train_series(11, n=100, T=100)
    prof = build_profile(train, "mean", alpha=0.1, calibration=cal)
    fires = sum(detect_batch(s, prof).stop_index is not None for s in _train_series(12, n=200, T=100))
    assert fires / 200 <= 0.2


def test_profile_roundtrip(tmp_path):
    prof = build_profile(_train_series(4), "wass", calibration=_train_series(5, 2))
    back = load_profile(save_profile(tmp_path / "p.json", prof))
    assert back.statistic == "wasserstein"
    assert back.delta_thr == prof.delta_thr and back.bandwidth == prof.bandwidth
    assert np.array_equal(back.train_kde.centers, prof.train_kde.centers)


def test_profile_validation():
    with pytest.raises(DataError):
        profile(delta=0.0)
    with pytest.raises(DataError):
        profile(sigma2=-1.0)
    with pytest.raises(DataError):
        profile(warmup=1.0, dt=1.0)  # one warmup tick cannot seed the KDE
