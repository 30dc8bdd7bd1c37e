import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcbadc.analysis import (
    SNR_CEILING_DB,
    NoNotchFound,
    Spectrum,
    estimate_notch,
    psd,
    snr_in_band,
    spectrum_to_csv,
)


def synthetic_spectrum(db, f_s=1.0):
    n = db.size
    freqs = np.fft.fftshift(np.fft.fftfreq(n, 1 / f_s))
    return Spectrum(freqs, 10 ** (np.minimum(db, 200.0) / 10), n, "hann", f_s)


def test_exact_bin_tone_rect_window():
    n = 1024
    k = np.arange(n)
    spec = psd(np.exp(2j * np.pi * 37 * k / n), nfft=n, window="rect")
    i = spec.bin_of(37 / n)
    assert spec.psd[i] * spec.df == pytest.approx(1.0, rel=1e-9)
    rest = np.delete(spec.psd, i)
    assert np.max(rest) * spec.df < 1e-20
    assert np.sum(spec.psd) * spec.df == pytest.approx(1.0, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), f_s=st.floats(0.1, 1e6), segs=st.integers(1, 3))
def test_parseval(seed, f_s, segs):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(512 * segs) + 1j * rng.standard_normal(512 * segs)
    spec = psd(x, nfft=512, window="rect", f_s=f_s)
    assert np.sum(spec.psd) * spec.df == pytest.approx(np.mean(np.abs(x) ** 2), rel=1e-9)


def test_white_noise_level():
    rng = np.random.default_rng(2)
    sigma2 = 3.0
    x = math.sqrt(sigma2) * rng.standard_normal(256 * 128)
    spec = psd(x, nfft=256, window="hann", f_s=2.0)
    assert spec.segments == 128
    assert np.mean(spec.psd) == pytest.approx(sigma2 / 2.0, rel=0.05)


def test_frequency_grid():
    spec = psd(np.ones(64), nfft=64, f_s=8.0)
    assert spec.frequencies[0] == -4.0 and np.all(np.diff(spec.frequencies) > 0)
    assert spec.frequencies[-1] < 4.0


def test_rejects_short_signal():
    with pytest.raises(ValueError):
        psd(np.ones(100), nfft=128)


@settings(max_examples=15, deadline=None)
@given(shift=st.integers(-100, 100), seed=st.integers(0, 1000))
def test_shift_covariance(shift, seed):
    rng = np.random.default_rng(seed)
    n = 256
    x = rng.standard_normal(2 * n) + 1j * rng.standard_normal(2 * n)
    k = np.arange(2 * n)
    a = psd(x, nfft=n)
    b = psd(x * np.exp(2j * np.pi * shift * k / n), nfft=n)
    np.testing.assert_allclose(np.roll(a.psd, shift), b.psd, rtol=1e-9, atol=1e-12 * a.psd.max())


def test_snr_of_tone_in_white_noise():
    rng = np.random.default_rng(9)
    n, segs = 4096, 16
    k = np.arange(n * segs)
    f_t = 500 / n  # bin centred: Hann leakage beyond +-3 bins would cap the SNR near 45 dB
    P_s = 1.0
    x = np.exp(2j * np.pi * f_t * k)
    noise = 1e-3 * (rng.standard_normal(k.size) + 1j * rng.standard_normal(k.size)) / math.sqrt(2)
    spec = psd(x + noise, nfft=n)
    f_n, bw = 0.125, 0.0625
    rep = snr_in_band(spec, f_n, bw, f_t)
    # in-band noise power: variance times band fraction, less the signal bins
    in_band = np.sum((spec.frequencies >= f_n - bw / 2) & (spec.frequencies <= f_n + bw / 2))
    P_n = 1e-6 * (in_band - len(rep.signal_bins)) / n
    assert rep.snr_db == pytest.approx(10 * math.log10(P_s / P_n), abs=0.5)
    assert rep.snr_db == pytest.approx(10 * math.log10(rep.signal_power / rep.noise_power), rel=1e-12)
    assert rep.band == pytest.approx((f_n - bw / 2, f_n + bw / 2))
    assert len(rep.signal_bins) == 7


def test_snr_scale_invariant():
    rng = np.random.default_rng(1)
    x = np.exp(2j * np.pi * 0.11 * np.arange(8192)) + 1e-2 * rng.standard_normal(8192)
    a = snr_in_band(psd(x, 2048), 0.125, 0.0625, 0.11)
    b = snr_in_band(psd(37.5 * x, 2048), 0.125, 0.0625, 0.11)
    assert a.snr_db == pytest.approx(b.snr_db, abs=1e-9)


def test_snr_ceiling_for_clean_tone():
    n = 1024
    spec = psd(np.exp(2j * np.pi * 100 * np.arange(n) / n), nfft=n, window="rect")
    assert snr_in_band(spec, 100 / n, 0.05, 100 / n).snr_db == SNR_CEILING_DB


def test_snr_band_validation():
    spec = psd(np.ones(1024), 1024)
    with pytest.raises(ValueError):
        snr_in_band(spec, 0.45, 0.2, 0.45)
    with pytest.raises(ValueError):
        snr_in_band(spec, 0.1, 0.02, 0.3)


@pytest.mark.parametrize("method", ["symmetry", "parabola"])
@pytest.mark.parametrize("vertex", [1000.0, 1000.37, 991.8])
def test_notch_recovers_parabola_vertex(vertex, method):
    n = 2048
    i = np.arange(n)
    db = -150 + 3e-3 * (i - vertex) ** 2
    spec = synthetic_spectrum(db)
    f = estimate_notch(spec, search=(spec.frequencies[900], spec.frequencies[1100]), method=method)
    tol = 0.1 if vertex == 1000.0 else 0.2
    assert abs((f - spec.frequencies[0]) / spec.df - vertex) <= tol


def test_symmetry_candidates_stay_near_window_center():
    # a lone dip far from the middle must not pull the estimate onto itself
    n = 2048
    i = np.arange(n)
    db = -150 + 3e-3 * (i - 1000.0) ** 2 - 40 * np.exp(-0.5 * ((i - 1060) / 3.0) ** 2)
    spec = synthetic_spectrum(db)
    f = estimate_notch(spec, search=(spec.frequencies[900], spec.frequencies[1100]))
    assert abs((f - spec.frequencies[0]) / spec.df - 1000.0) <= 100 // 8


def test_notch_local_fit_mode():
    i = np.arange(2048)
    spec = synthetic_spectrum(-150 + 3e-3 * (i - 1000.37) ** 2)
    f = estimate_notch(spec, search=(spec.frequencies[600], spec.frequencies[1400]), method="parabola", fit_halfwidth=8)
    assert abs((f - spec.frequencies[0]) / spec.df - 1000.37) <= 0.2


@settings(max_examples=20, deadline=None)
@given(offset=st.floats(-100, 100), seed=st.integers(0, 100))
def test_notch_invariant_to_db_offset(offset, seed):
    rng = np.random.default_rng(seed)
    i = np.arange(2048)
    db = -200 + 3e-3 * np.minimum((i - 700.3) ** 2, 400.0**2) + rng.normal(0, 1, i.size)
    a = synthetic_spectrum(db)
    b = synthetic_spectrum(db + offset)
    search = (a.frequencies[500], a.frequencies[900])
    assert estimate_notch(a, search=search) == pytest.approx(estimate_notch(b, search=search), abs=1e-9 * a.df)


def test_notch_ignores_excluded_tone():
    i = np.arange(2048)
    db = -150 + 3e-3 * (i - 1000.0) ** 2
    db[995:1006] = 0.0
    spec = synthetic_spectrum(db)
    f = estimate_notch(spec, exclude=range(995, 1006), search=(spec.frequencies[900], spec.frequencies[1100]))
    assert abs((f - spec.frequencies[0]) / spec.df - 1000.0) <= 0.1


def test_flat_spectrum_has_no_notch():
    rng = np.random.default_rng(0)
    spec = synthetic_spectrum(-100 + rng.normal(0, 1, 2048))
    with pytest.raises(NoNotchFound):
        estimate_notch(spec)


def test_symmetric_center_between_resonance_dips():
    # two equal dips either side of the center and rising edges
    i = np.arange(2048).astype(float)
    c = 1000.3
    db = -60 + 2e-3 * (i - c) ** 2 - 12 * np.exp(-(((np.abs(i - c) - 60) / 8) ** 2))
    spec = synthetic_spectrum(db)
    f = estimate_notch(spec, search=(spec.frequencies[850], spec.frequencies[1150]))
    assert abs((f - spec.frequencies[0]) / spec.df - c) <= 0.2
    # the deepest point is a dip, so the minimum-based fit lands off center
    g = estimate_notch(spec, search=(spec.frequencies[850], spec.frequencies[1150]), method="parabola", fit_halfwidth=8)
    assert abs((g - spec.frequencies[0]) / spec.df - c) > 30


def test_unknown_method():
    spec = synthetic_spectrum(np.zeros(64))
    with pytest.raises(ValueError):
        estimate_notch(spec, method="fancy")


@pytest.mark.parametrize("method", ["symmetry", "parabola"])
def test_peak_is_not_a_notch(method):
    i = np.arange(2048)
    spec = synthetic_spectrum(-100 - 3e-3 * (i - 1024.0) ** 2)
    with pytest.raises(NoNotchFound):
        estimate_notch(spec, search=(spec.frequencies[900], spec.frequencies[1150]), method=method)


def test_spectrum_csv(tmp_path):
    spec = psd(np.ones(64), 64, window="rect")
    spectrum_to_csv(spec, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "f_fp,fp"
    assert len(lines) == 1 + 32
    spectrum_to_csv(spec, tmp_path / "all.csv", positive_only=False)
    assert len((tmp_path / "all.csv").read_text().splitlines()) == 65
