"""Spectral analysis of the complex input estimate: PSD, in-band SNR and
notch-frequency estimation."""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.ndimage
import scipy.signal

SNR_CEILING_DB = 200.0


class NoNotchFound(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Two-sided power spectral density.

    Attributes
    ----------
    frequencies : `array_like`, shape=(nfft,)
        ascending over ``[-f_s/2, f_s/2)`` [Hz].
    psd : `array_like`, shape=(nfft,)
        [V^2/Hz]; ``sum(psd) * df`` is the mean signal power.
    """

    frequencies: np.ndarray
    psd: np.ndarray
    nfft: int
    window: str
    f_s: float
    segments: int = 1

    @property
    def df(self) -> float:
        return self.f_s / self.nfft

    def bin_of(self, f: float) -> int:
        """Index of the bin closest to ``f`` (aliased into the span)."""
        f = (f + self.f_s / 2) % self.f_s - self.f_s / 2
        return int(np.argmin(np.abs(self.frequencies - f)))

    def db(self) -> np.ndarray:
        return 10 * np.log10(np.maximum(self.psd, np.finfo(float).tiny))


@dataclass(frozen=True)
class SnrReport:
    snr_db: float
    signal_power: float
    noise_power: float
    band: tuple[float, float]
    signal_bins: tuple[int, ...]
    excluded_bins: tuple[int, ...] = ()


def _window(kind: str, n: int) -> np.ndarray:
    if kind in ("rect", "rectangular", "boxcar"):
        return np.ones(n)
    return scipy.signal.get_window(kind, n, fftbins=True)


def psd(signal, nfft: int = 1 << 14, window: str = "hann", f_s: float = 1.0) -> Spectrum:
    """Welch PSD over non-overlapping segments of length ``nfft``.

    The window is power compensated so that ``sum(psd) * df`` equals the mean
    square of the (windowed-segment) signal.
    """
    x = np.asarray(signal)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if x.size < nfft:
        raise ValueError(f"signal length {x.size} shorter than nfft={nfft}")
    segments = x.size // nfft
    w = _window(window, nfft)
    frames = x[: segments * nfft].reshape(segments, nfft) * w
    P = np.mean(np.abs(np.fft.fft(frames, axis=1)) ** 2, axis=0)
    P = P / (f_s * np.sum(w**2))
    P = np.fft.fftshift(P)
    freqs = np.fft.fftshift(np.fft.fftfreq(nfft, d=1.0 / f_s))
    return Spectrum(frequencies=freqs, psd=P, nfft=nfft, window=window, f_s=f_s, segments=segments)


def snr_in_band(
    spec: Spectrum,
    f_n: float,
    bandwidth: float,
    f_test,
    guard: int = 3,
    ceiling_db: float = SNR_CEILING_DB,
) -> SnrReport:
    """In-band SNR of a tone.

    Signal power is the sum over ``+-guard`` bins around ``f_test`` (one or
    several tone frequencies), noise power the sum over every other bin within
    ``[f_n - bandwidth/2, f_n + bandwidth/2]``.
    """
    lo, hi = f_n - bandwidth / 2, f_n + bandwidth / 2
    if lo < -spec.f_s / 2 or hi > spec.f_s / 2:
        raise ValueError(f"band [{lo}, {hi}] exceeds the Nyquist span")
    tones = np.atleast_1d(f_test)
    for f in tones:
        if not lo <= f <= hi:
            raise ValueError(f"tone at {f} outside the band [{lo}, {hi}]")
    n = spec.nfft
    signal = set()
    for f in tones:
        b = spec.bin_of(float(f))
        signal.update(int(i) % n for i in range(b - guard, b + guard + 1))
    in_band = np.nonzero((spec.frequencies >= lo) & (spec.frequencies <= hi))[0]
    sig_idx = np.array(sorted(signal))
    noise_idx = np.array([i for i in in_band if i not in signal], dtype=int)
    p_sig = float(np.sum(spec.psd[sig_idx]) * spec.df)
    p_noise = float(np.sum(spec.psd[noise_idx]) * spec.df) if noise_idx.size else 0.0
    if p_noise <= 0 or p_sig / p_noise > 10 ** (ceiling_db / 10):
        snr = ceiling_db
    else:
        snr = 10 * math.log10(p_sig / p_noise)
    return SnrReport(
        snr_db=snr,
        signal_power=p_sig,
        noise_power=p_noise,
        band=(lo, hi),
        signal_bins=tuple(int(i) for i in sig_idx),
    )


def _parabola_vertex(y: np.ndarray) -> float | None:
    """Vertex offset of the least-squares parabola through ``y`` (centered x)."""
    x = np.arange(y.size) - (y.size - 1) / 2
    a, b, _ = np.polyfit(x, y, 2)
    if a <= 0:
        return None
    return float(-b / (2 * a) + (y.size - 1) / 2)


def _mirror_center(y: np.ndarray, max_shift: int, reach: int) -> float | None:
    """Sub-sample index about which ``y`` is most nearly mirror symmetric.

    Candidates lie within ``max_shift`` of the middle of ``y``; each is scored
    by the mean squared difference of ``y`` at ``+-d``, ``d = 1..reach``.
    """
    c0 = (y.size - 1) // 2
    d = np.arange(1, reach + 1)
    shifts = np.arange(-max_shift, max_shift + 1)
    cost = np.array([np.mean((y[c0 + k + d] - y[c0 + k - d]) ** 2) for k in shifts])
    j = int(np.argmin(cost))
    offset = 0.0
    if 0 < j < cost.size - 1:
        curv = cost[j - 1] - 2 * cost[j] + cost[j + 1]
        if curv > 0:
            offset = 0.5 * (cost[j - 1] - cost[j + 1]) / curv
    return float(c0 + shifts[j] + offset)


def estimate_notch(
    spec: Spectrum,
    exclude=(),
    search: tuple[float, float] | None = None,
    smooth: int = 16,
    method: str = "symmetry",
    fit_halfwidth: int | None = None,
    min_depth_db: float = 10.0,
) -> float:
    """Center frequency of the noise-floor valley.

    The log-PSD is median smoothed over ``smooth`` bins with the signal bins
    ``exclude`` bridged by interpolation. The valley center is then located
    within the ``search`` window by one of two methods:

    ``"symmetry"``
        the frequency about which the smoothed curve is most nearly mirror
        symmetric (candidates within an eighth of the half-window around its
        middle, compared over half the window). A wider candidate range lets
        the fit lock onto a single resonance dip of a perturbed loop. The shaped noise floor of a
        quadrature converter is the low-pass floor shifted to the notch, so it
        is symmetric about the notch even when its deepest points are
        resonance dips on either side.
    ``"parabola"``
        the vertex of a parabola fitted to the smoothed curve, over the whole
        window or over ``+-fit_halfwidth`` bins around its minimum.

    Parameters
    ----------
    spec : :py:class:`Spectrum`
    exclude : `iterable` of `int`
        bins to ignore (signal tones).
    search : (`float`, `float`), `optional`
        frequency window [Hz]; defaults to the full span.
    smooth : `int`
        median-filter length in bins.
    method : `str`
        ``"symmetry"`` or ``"parabola"``.
    fit_halfwidth : `int`, `optional`
        local fit half-width of the parabola method.
    min_depth_db : `float`
        required valley depth.

    Raises
    ------
    :py:class:`NoNotchFound`
        when the smoothed curve varies by less than ``min_depth_db`` over the
        window or no minimum can be located.
    """
    if method not in ("symmetry", "parabola"):
        raise ValueError(f"unknown notch method {method!r}")
    db = spec.db().copy()
    mask = np.zeros(spec.nfft, dtype=bool)
    mask[list(exclude)] = True
    if mask.all():
        raise NoNotchFound("every bin excluded")
    if mask.any():
        idx = np.arange(spec.nfft)
        db[mask] = np.interp(idx[mask], idx[~mask], db[~mask])
    smoothed = scipy.ndimage.median_filter(db, size=smooth, mode="nearest") if smooth > 1 else db
    valid = np.ones(spec.nfft, dtype=bool)
    if search is not None:
        valid &= (spec.frequencies >= search[0]) & (spec.frequencies <= search[1])
    candidates = np.nonzero(valid)[0]
    if candidates.size < 9:
        raise NoNotchFound("search window narrower than nine bins")
    window = smoothed[candidates]
    if np.max(window) - np.min(window) < min_depth_db:
        raise NoNotchFound("no notch at least %.0f dB deep" % min_depth_db)
    lo = int(candidates[0])
    if method == "symmetry":
        half = (candidates.size - 1) // 2
        q = candidates.size // 4
        if np.mean(window[q : candidates.size - q]) >= np.mean(np.r_[window[:q], window[candidates.size - q :]]):
            raise NoNotchFound("window center is not a valley")
        vertex = _mirror_center(window, max(1, half // 8), max(1, half // 2))
    else:
        hi = int(candidates[-1]) + 1
        if fit_halfwidth is not None:
            i0 = int(candidates[np.argmin(window)])
            lo, hi = max(lo, i0 - fit_halfwidth), min(hi, i0 + fit_halfwidth + 1)
        vertex = _parabola_vertex(smoothed[lo:hi])
        if vertex is None:
            raise NoNotchFound("fitted parabola has no minimum")
        vertex = min(max(vertex, 0.0), hi - lo - 1)
    vertex += lo
    if smooth > 1 and smooth % 2 == 0:
        # an even-length median window is centred half a bin to the left
        vertex -= 0.5
    return float(spec.frequencies[0] + vertex * spec.df)


def spectrum_to_csv(spec: Spectrum, path, positive_only: bool = True, column: str = "fp") -> None:
    """Two-column CSV ``(fT, dB)``; positive-frequency half by default."""
    fT = spec.frequencies / spec.f_s
    db = spec.db()
    keep = fT >= 0 if positive_only else np.ones_like(fT, dtype=bool)
    with open(path, "w") as fh:
        fh.write(f"f_{column},{column}\n")
        for a, b in zip(fT[keep], db[keep]):
            fh.write(f"{a!r},{b!r}\n")
