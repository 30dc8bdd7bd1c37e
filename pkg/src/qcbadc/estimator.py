"""FIR digital estimator.

The input estimate is a bank of noncausal FIR filters applied to the control
decisions,

    u_hat[k] = sum_l sum_{j=0}^{K_h-1} h[l, j] s_l[k - K_h/2 + j].

Taps are complex: the real part produces the in-phase output, the imaginary
part the quadrature output. For real-valued references the taps are real.

The filter bank is calibrated by ridge-regularized least squares against a
known reference, solved with preconditioned conjugate gradients on the normal
equations. The operator is applied by FFT convolution and the preconditioner
is the block-circulant approximation of the Gram matrix, inverted per
frequency bin.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import struct

import numpy as np
import scipy.fft
import scipy.signal

from .sim import ControlTrace

logger = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    """Calibration could not produce a filter meeting its tolerance."""

    def __init__(self, message: str, residual: float | None = None, taps=None):
        super().__init__(message)
        self.residual = residual
        self.taps = taps


@dataclass(frozen=True, eq=False)
class FirEstimator:
    """Filter bank ``taps[l, j]``, ``l`` the control channel, ``j`` the tap.

    Tap ``j`` multiplies decision ``k - K_h/2 + j`` for the estimate at ``k``.
    """

    taps: np.ndarray
    delay: int = 0

    def __post_init__(self):
        if self.taps.ndim != 2:
            raise ValueError("taps must have shape (channels, K_h)")
        if self.taps.shape[1] % 2:
            raise ValueError("K_h must be even")
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("taps must be finite")

    @property
    def channels(self) -> int:
        return self.taps.shape[0]

    @property
    def K_h(self) -> int:
        return self.taps.shape[1]

    def __add__(self, other: "FirEstimator") -> "FirEstimator":
        return FirEstimator(self.taps + other.taps, self.delay)

    def __eq__(self, other):
        if not isinstance(other, FirEstimator):
            return NotImplemented
        return self.delay == other.delay and np.array_equal(self.taps, other.taps)


@dataclass(frozen=True)
class CalibrationConfig:
    """Calibration knobs.

    Parameters
    ----------
    K_h : `int`
        taps per channel (even).
    K_train : `int`
        training length in samples.
    ridge : `float`, optional
        absolute ridge weight; ``None`` means ``ridge_rel * trace energy``.
    ridge_rel : `float`
        ridge weight relative to the trace energy ``sum s^2``.
    tol : `float`
        relative gradient-norm tolerance of the solver.
    max_iter : `int`
        conjugate-gradient iteration cap.
    """

    K_h: int = 512
    K_train: int = 1 << 16
    ridge: float | None = None
    ridge_rel: float = 1e-6
    tol: float = 1e-8
    max_iter: int = 2000

    def __post_init__(self):
        if self.K_h < 2 or self.K_h % 2:
            raise ValueError("K_h must be a positive even number")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.ridge_rel < 0:
            raise ValueError("ridge_rel must be non-negative")


class _Regression:
    """Design operator of the FIR regression over the interior window."""

    def __init__(self, s: np.ndarray, K_h: int):
        self.s = np.asarray(s, dtype=float)
        self.L, self.K = self.s.shape
        self.K_h = K_h
        self.rows = self.K - K_h
        n_fft = scipy.fft.next_fast_len(self.K + K_h)
        self.n_fft = n_fft
        self._S_fc = scipy.fft.fft(self.s, n_fft, axis=1)

    def forward(self, h: np.ndarray) -> np.ndarray:
        """``S h``: estimate at rows ``k = K_h/2 .. K - K_h/2 - 1``."""
        return _apply(self.s, h, self._S_fc, self.n_fft)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        """``S^T r``; ``S`` is real so no conjugation is involved."""
        n = self.n_fft
        R = scipy.fft.fft(r[::-1], n)
        full = scipy.fft.ifft(self._S_fc * R[np.newaxis], n, axis=1)
        out = full[:, self.rows - 1 : self.rows - 1 + self.K_h]
        return out

    def _prepare_gram(self) -> None:
        """Spectra for :py:meth:`gram`.

        ``G_ab[i, j] = sum_{k=0}^{R-1} s_a[k+i] s_b[k+j]`` splits into a block
        Toeplitz part ``c_ab[j - i]`` (lag correlations over the first ``R``
        samples) and two corrections that only involve the first and the last
        ``K_h`` samples, so each product costs a few FFTs of length ``~2 K_h``.
        """
        K_h, L, R = self.K_h, self.L, self.rows
        n2 = scipy.fft.next_fast_len(3 * K_h)
        self._n2 = n2
        # c_ab[d] = sum_{k<R} s_a[k] s_b[k+d], s zero for negative index
        n = scipy.fft.next_fast_len(R + 2 * K_h)
        A = scipy.fft.rfft(self.s[:, :R], n, axis=1)
        B = scipy.fft.rfft(self.s[:, : R + K_h], n, axis=1)
        lags = np.r_[np.arange(K_h), np.arange(-K_h + 1, 0)]
        c = np.empty((L, L, lags.size))
        for a in range(L):
            c[a] = scipy.fft.irfft(np.conj(A[a]) * B, n, axis=1)[:, lags % n]
        # (T v)_a[i] = sum_j c_ab[j - i] v_b[j] = (e_ab * v_b)[i] with e[m] = c[-m]
        e = np.zeros((L, L, n2))
        e[:, :, (-lags) % n2] = c
        self._T = scipy.fft.fft(e, axis=2)
        self._head = self.s[:, :K_h]
        self._tail = self.s[:, R : R + K_h]
        self._tail_seg = self.s[:, R - K_h + 1 : R + K_h - 1]
        self._head_f = scipy.fft.fft(self._head, n2, axis=1)
        self._tail_f = scipy.fft.fft(self._tail, n2, axis=1)
        self._tail_seg_f = scipy.fft.fft(self._tail_seg, n2, axis=1)

    def gram(self, v: np.ndarray) -> np.ndarray:
        """``S^T S v`` without touching the full trace."""
        if not hasattr(self, "_T"):
            self._prepare_gram()
        K_h, n2 = self.K_h, self._n2
        V = scipy.fft.fft(v, n2, axis=1)
        out = scipy.fft.ifft(np.einsum("abf,bf->af", self._T, V), axis=1)[:, :K_h]
        # Z[n] = sum_b sum_j s_b[n + j] v_b[j]
        Vr = scipy.fft.fft(v[:, ::-1], n2, axis=1)
        z_head = scipy.fft.ifft(np.sum(self._head_f * Vr, axis=0))  # Z[q - K_h + 1]
        z_tail = scipy.fft.ifft(np.sum(self._tail_seg_f * Vr, axis=0))  # Z[R - 2K_h + 2 + q]
        m = np.arange(1, K_h)
        zh = np.zeros(n2, dtype=complex)
        zh[m] = z_head[K_h - 1 - m]  # Z[-m]
        zt = np.zeros(n2, dtype=complex)
        zt[m] = z_tail[2 * K_h - 2 - m]  # Z[R - m]
        out -= scipy.fft.ifft(self._head_f * scipy.fft.fft(zh), axis=1)[:, :K_h]
        out += scipy.fft.ifft(self._tail_f * scipy.fft.fft(zt), axis=1)[:, :K_h]
        return out

    def gram_blocks(self) -> np.ndarray:
        """Block-circulant (T. Chan) approximation of ``S^T S`` per frequency bin.

        Returns an array of shape ``(K_h, L, L)`` of Hermitian matrices ``C(f)``
        such that ``FFT(S^T S v)(f) ~= C(f) FFT(v)(f)``.
        """
        K_h, L = self.K_h, self.L
        n = self.n_fft
        # R[a, b, m] = sum_k s_a[k] s_b[k + m], only the lags in (-K_h, K_h) are kept
        lags = np.concatenate([np.arange(K_h), np.arange(n - K_h + 1, n)])
        cross = np.empty((L, L, lags.size))
        for a in range(L):
            cross[a] = scipy.fft.ifft(np.conj(self._S_fc[a]) * self._S_fc, n, axis=1)[:, lags].real
        m = np.arange(K_h)
        pos = cross[:, :, m]  # lag +m
        neg = cross[:, :, np.concatenate([[0], K_h + m[1:] - 1])]  # lag m - K_h
        scale = self.rows / self.K
        c = ((K_h - m) * pos + m * neg) / K_h * scale
        # (C v)[j] = sum_m c(m) v[j + m]  =>  FFT -> (sum_m c(m) e^{+i 2pi f m / K_h}) V(f)
        C = np.fft.ifft(c, axis=2) * K_h
        C = np.moveaxis(C, 2, 0)
        # G[(a, j), (b, j')] = R_ab(j' - j)
        return 0.5 * (C + np.conj(np.swapaxes(C, 1, 2)))


def _apply(s, h, S_fc, n_fft):
    K, K_h = s.shape[1], h.shape[1]
    H = scipy.fft.fft(h[:, ::-1], n_fft, axis=1)
    full = scipy.fft.ifft(np.sum(S_fc * H, axis=0), n_fft)
    return full[K_h - 1 : K - 1]


def _trim(ref: np.ndarray, K: int, K_h: int) -> np.ndarray:
    return ref[K_h // 2 : K - K_h // 2]


def calibrate(trace: ControlTrace, reference, cfg: CalibrationConfig) -> FirEstimator:
    """Least-squares calibration of the filter bank against a known reference.

    Parameters
    ----------
    trace : :py:class:`ControlTrace`
        decisions of a stable run, ``K >= cfg.K_train`` columns (only the
        first ``K_train`` are used).
    reference : `array_like`, shape=(K,)
        input samples aligned with the trace columns; complex for quadrature
        inputs.
    cfg : :py:class:`CalibrationConfig`

    Returns
    -------
    :py:class:`FirEstimator`
        minimizer of ``sum_k |(h*s)[k] - ref[k]|^2 + ridge ||h||^2`` over the
        interior window.

    Raises
    ------
    ValueError
        when the regression is under-determined or shapes disagree.
    :py:class:`CalibrationError`
        when the solver does not reach ``cfg.tol``.
    """
    K = min(trace.K, cfg.K_train)
    s = trace.decisions[:, :K].astype(float)
    ref = np.asarray(reference)[:K]
    if ref.shape[0] < K:
        raise ValueError("reference shorter than the training window")
    L, K_h = s.shape[0], cfg.K_h
    if K < 4 * K_h * L:
        raise ValueError(
            f"under-determined calibration: K_train={K} < 4*K_h*channels={4 * K_h * L}"
        )
    is_complex = np.iscomplexobj(ref)
    y = _trim(ref, K, K_h)
    op = _Regression(s, K_h)
    ridge = cfg.ridge if cfg.ridge is not None else cfg.ridge_rel * float(np.sum(s * s))

    blocks = op.gram_blocks()
    w, V = np.linalg.eigh(blocks)
    floor = max(ridge, 1e-12 * float(w.max()))
    inv_blocks = (V / np.maximum(w + ridge, floor)[:, np.newaxis, :]) @ np.conj(
        np.swapaxes(V, 1, 2)
    )

    def precondition(r):
        R = np.fft.fft(r, axis=1)  # (L, K_h)
        Z = np.einsum("fab,bf->af", inv_blocks, R)
        return np.fft.ifft(Z, axis=1)

    def normal(h):
        return op.gram(h) + ridge * h

    b = op.adjoint(y)
    h = np.zeros((L, K_h), dtype=complex)
    r = b.copy()
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return FirEstimator(np.zeros((L, K_h), dtype=complex if is_complex else float))
    z = precondition(r)
    p = z.copy()
    rz = np.vdot(r, z).real
    res = 1.0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        Ap = normal(p)
        a = rz / np.vdot(p, Ap).real
        h = h + a * p
        r = r - a * Ap
        res = np.linalg.norm(r) / b_norm
        if res <= cfg.tol:
            break
        z = precondition(r)
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    # recompute the true gradient to guard against drift in the recursion
    res = np.linalg.norm(b - op.adjoint(op.forward(h)) - ridge * h) / b_norm
    logger.debug("calibration: %d iterations, relative gradient %.3g", it, res)
    taps = h if is_complex else h.real
    if res > cfg.tol * 10:
        raise CalibrationError(
            f"CG did not converge: relative gradient {res:.3g} after {it} iterations",
            residual=res,
            taps=taps,
        )
    return FirEstimator(taps=np.array(taps))


def estimate(trace: ControlTrace, f: FirEstimator) -> np.ndarray:
    """Apply the filter bank; returns ``K - K_h`` samples for ``k = K_h/2 ..``."""
    if trace.channels != f.channels:
        raise ValueError(
            f"trace has {trace.channels} channels, filter bank expects {f.channels}"
        )
    if trace.K <= f.K_h:
        raise ValueError("trace must be longer than the filter")
    s = trace.decisions.astype(float)
    out = scipy.signal.fftconvolve(s, f.taps[:, ::-1], mode="valid", axes=1).sum(axis=0)
    return out[: trace.K - f.K_h]


def design_matrix(s: np.ndarray, K_h: int) -> np.ndarray:
    """Dense regression matrix (rows: interior samples, cols: ``(l, j)``)."""
    s = np.asarray(s, dtype=float)
    L, K = s.shape
    rows = K - K_h
    idx = np.arange(rows)[:, None] + np.arange(K_h)[None, :]
    return np.concatenate([s[l][idx] for l in range(L)], axis=1)


# -- serialization ------------------------------------------------------------

_FIR_MAGIC = b"QCBF"
_FIR_HEADER = struct.Struct("<4sHHIIi")  # magic, version, outputs, channels, K_h, delay


def write_filter(f: FirEstimator, path) -> None:
    """Binary filter bank.

    Header (little endian): ``b"QCBF"``, uint16 version (1), uint16 outputs
    (1 real, 2 in-phase/quadrature), uint32 channels, uint32 K_h, int32 delay.
    Payload: float64 taps ordered ``[output][channel][tap]``.
    """
    outputs = 2 if np.iscomplexobj(f.taps) else 1
    payload = np.stack([f.taps.real, f.taps.imag]) if outputs == 2 else f.taps[np.newaxis]
    with open(path, "wb") as fh:
        fh.write(_FIR_HEADER.pack(_FIR_MAGIC, 1, outputs, f.channels, f.K_h, f.delay))
        fh.write(payload.astype("<f8").tobytes())


def read_filter(path) -> FirEstimator:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, outputs, channels, K_h, delay = _FIR_HEADER.unpack_from(raw)
    if magic != _FIR_MAGIC or version != 1:
        raise ValueError(f"{path} is not a version 1 filter file")
    data = np.frombuffer(raw, dtype="<f8", offset=_FIR_HEADER.size).reshape(outputs, channels, K_h)
    taps = data[0] + 1j * data[1] if outputs == 2 else data[0].copy()
    return FirEstimator(taps=taps, delay=delay)


def filter_to_csv(f: FirEstimator, path) -> None:
    """Columns: output, channel, tap, value."""
    rows = []
    parts = [("I", f.taps.real), ("Q", f.taps.imag)] if np.iscomplexobj(f.taps) else [("I", f.taps)]
    with open(path, "w") as fh:
        fh.write("output,channel,tap,value\n")
        for name, arr in parts:
            for l in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    fh.write(f"{name},{l},{j - f.K_h // 2},{arr[l, j]!r}\n")
