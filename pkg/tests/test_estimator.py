import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcbadc.estimator import (
    CalibrationConfig,
    CalibrationError,
    FirEstimator,
    calibrate,
    design_matrix,
    estimate,
    filter_to_csv,
    read_filter,
    write_filter,
)
from qcbadc.sim import ControlTrace


def random_trace(rng, L, K):
    return ControlTrace(rng.choice(np.array([-1, 1], dtype=np.int8), size=(L, K)), 1.0)


@pytest.mark.parametrize("d", [0, 3, -5, 7])
def test_learns_pure_delay(rng, d):
    K_h, K = 16, 2048
    s = rng.choice(np.array([-1, 1], dtype=np.int8), size=K + 32)
    # decisions are the reference delayed by d
    ref = s[16 + d : 16 + d + K].astype(float)
    trace = ControlTrace(s[16 : 16 + K][np.newaxis], 1.0)
    fir = calibrate(trace, ref, CalibrationConfig(K_h=K_h, K_train=K, ridge=0.0, tol=1e-12))
    want = np.zeros(K_h)
    want[K_h // 2 + d] = 1.0
    np.testing.assert_allclose(fir.taps[0], want, atol=1e-8)


def test_matches_pseudoinverse(rng):
    L, K_h, K = 2, 8, 256
    trace = random_trace(rng, L, K)
    ref = rng.standard_normal(K) + 1j * rng.standard_normal(K)
    fir = calibrate(trace, ref, CalibrationConfig(K_h=K_h, K_train=K, ridge=0.0, tol=1e-14))
    X = design_matrix(trace.decisions, K_h)
    h = np.linalg.pinv(X) @ ref[K_h // 2 : K - K_h // 2]
    np.testing.assert_allclose(fir.taps.reshape(-1), h, atol=1e-8)


def test_ridge_matches_dense_solve(rng):
    L, K_h, K = 3, 6, 300
    trace = random_trace(rng, L, K)
    ref = rng.standard_normal(K)
    lam = 7.5
    fir = calibrate(trace, ref, CalibrationConfig(K_h=K_h, K_train=K, ridge=lam, tol=1e-13))
    X = design_matrix(trace.decisions, K_h)
    y = ref[K_h // 2 : K - K_h // 2]
    h = np.linalg.solve(X.T @ X + lam * np.eye(L * K_h), X.T @ y)
    np.testing.assert_allclose(fir.taps.reshape(-1), h, atol=1e-9)
    assert np.isrealobj(fir.taps)


def test_ridge_shrinks_taps_monotonically(rng):
    trace = random_trace(rng, 2, 400)
    ref = rng.standard_normal(400)
    norms = [
        np.linalg.norm(calibrate(trace, ref, CalibrationConfig(K_h=8, K_train=400, ridge=lam, tol=1e-12)).taps)
        for lam in (0.0, 1.0, 1e2, 1e4, 1e6, 1e9)
    ]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-6


def test_complex_taps_equal_two_real_solves(rng):
    trace = random_trace(rng, 4, 1024)
    ref = rng.standard_normal(1024) + 1j * rng.standard_normal(1024)
    cfg = CalibrationConfig(K_h=16, K_train=1024, ridge=1.0, tol=1e-12)
    h = calibrate(trace, ref, cfg).taps
    np.testing.assert_allclose(h.real, calibrate(trace, ref.real, cfg).taps, atol=1e-9)
    np.testing.assert_allclose(h.imag, calibrate(trace, ref.imag, cfg).taps, atol=1e-9)


def test_calibration_reproducible(rng):
    trace = random_trace(rng, 4, 2048)
    ref = rng.standard_normal(2048) + 1j * rng.standard_normal(2048)
    cfg = CalibrationConfig(K_h=32, K_train=2048)
    assert calibrate(trace, ref, cfg) == calibrate(trace, ref, cfg)


def test_rejects_underdetermined(rng):
    trace = random_trace(rng, 4, 100)
    with pytest.raises(ValueError):
        calibrate(trace, np.zeros(100), CalibrationConfig(K_h=8, K_train=100))


def test_nonconvergence_reports_residual(rng):
    trace = random_trace(rng, 4, 4096)
    ref = rng.standard_normal(4096)
    with pytest.raises(CalibrationError) as info:
        calibrate(trace, ref, CalibrationConfig(K_h=64, K_train=4096, ridge=0.0, tol=1e-14, max_iter=1))
    assert info.value.residual > 0


def test_zero_reference_gives_zero_taps(rng):
    fir = calibrate(random_trace(rng, 2, 200), np.zeros(200), CalibrationConfig(K_h=8, K_train=200))
    assert not np.any(fir.taps)


@pytest.mark.parametrize("kwargs", [dict(K_h=7), dict(K_h=0), dict(ridge=-1.0), dict(ridge_rel=-1e-3)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        CalibrationConfig(**kwargs)


def test_zero_taps_give_zero_output(rng):
    trace = random_trace(rng, 3, 100)
    out = estimate(trace, FirEstimator(np.zeros((3, 10))))
    assert out.shape == (90,) and not np.any(out)


def test_impulse_tap_reproduces_channel(rng):
    trace = random_trace(rng, 3, 100)
    taps = np.zeros((3, 10))
    taps[1, 5] = 1.0
    out = estimate(trace, FirEstimator(taps))
    np.testing.assert_allclose(out, trace.decisions[1, 5:95], atol=1e-12)


def test_estimate_uses_centered_window(rng):
    trace = random_trace(rng, 2, 300)
    taps = rng.standard_normal((2, 12))
    out = estimate(trace, FirEstimator(taps))
    X = design_matrix(trace.decisions, 12)
    np.testing.assert_allclose(out, X @ taps.reshape(-1), atol=1e-11)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K_h=st.sampled_from([2, 4, 16]))
def test_estimate_is_linear_in_taps(seed, K_h):
    rng = np.random.default_rng(seed)
    trace = random_trace(rng, 4, 128)
    h1 = FirEstimator(rng.standard_normal((4, K_h)) + 1j * rng.standard_normal((4, K_h)))
    h2 = FirEstimator(rng.standard_normal((4, K_h)))
    np.testing.assert_allclose(estimate(trace, h1 + h2), estimate(trace, h1) + estimate(trace, h2), atol=1e-12)


def test_channel_mismatch(rng):
    with pytest.raises(ValueError):
        estimate(random_trace(rng, 3, 100), FirEstimator(np.zeros((2, 10))))


def test_trace_too_short(rng):
    with pytest.raises(ValueError):
        estimate(random_trace(rng, 1, 10), FirEstimator(np.zeros((1, 10))))


@pytest.mark.parametrize("bad", [np.zeros(4), np.zeros((2, 3)), np.array([[np.nan, 0.0]])])
def test_fir_validation(bad):
    with pytest.raises(ValueError):
        FirEstimator(bad)


@pytest.mark.parametrize("dtype", [float, complex])
def test_filter_round_trip(tmp_path, rng, dtype):
    taps = rng.standard_normal((4, 16)).astype(dtype)
    if dtype is complex:
        taps += 1j * rng.standard_normal((4, 16))
    fir = FirEstimator(taps, delay=8)
    write_filter(fir, tmp_path / "f.qcbf")
    assert read_filter(tmp_path / "f.qcbf") == fir
    filter_to_csv(fir, tmp_path / "f.csv")
    assert len((tmp_path / "f.csv").read_text().splitlines()) >= 17


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), L=st.integers(1, 4), half=st.integers(1, 12), extra=st.integers(0, 200))
def test_fast_gram_equals_dense(seed, L, half, extra):
    from qcbadc.estimator import _Regression

    rng = np.random.default_rng(seed)
    K_h = 2 * half
    K = 4 * K_h * L + extra
    s = rng.choice([-1.0, 1.0], size=(L, K))
    v = rng.standard_normal((L, K_h)) + 1j * rng.standard_normal((L, K_h))
    X = design_matrix(s, K_h)
    want = (X.T @ (X @ v.reshape(-1))).reshape(L, K_h)
    np.testing.assert_allclose(_Regression(s, K_h).gram(v), want, atol=1e-10 * np.abs(want).max())
