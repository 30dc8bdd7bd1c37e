"""Behavioral simulation of a digitally controlled analog system.

The analog system is linear and, between clock edges, driven by a
piecewise-constant control contribution plus a sum of sinusoidal inputs.
Integrating one control period with a fixed-step scheme therefore reduces to
an affine map

    x[k+1] = Phi x[k] + G_old s[k-1] + G_new s[k] + w[k]

whose matrices are obtained by running the integrator itself on matrix-valued
states (linearity). The per-period recursion is then iterated with the
quantizer in the loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import io
import logging
import struct
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg

from .control import (
    ControlCoefficients,
    DivergedError,
    check_superposition,
    contribution_matrix,
    observation_matrix,
)
from .system import QuadratureSystem, LowpassLeapfrog, lowpass_matrices

logger = logging.getLogger(__name__)

Drive = Union[np.ndarray, Callable[[float], np.ndarray]]


@dataclass(frozen=True)
class InputSignal:
    """A single sinusoidal test tone.

    ``kind="quadrature"`` gives the pair ``u = a cos(2 pi f t + phase)``,
    ``ubar = a sin(2 pi f t + phase)``; ``kind="real"`` a single ``u``.
    """

    amplitude: float
    frequency: float
    phase: float = 0.0
    kind: str = "quadrature"

    def __post_init__(self):
        if self.kind not in ("quadrature", "real"):
            raise ValueError(f"unknown input kind {self.kind!r}")

    @property
    def channels(self) -> int:
        return 2 if self.kind == "quadrature" else 1

    @property
    def tones(self) -> tuple["InputSignal", ...]:
        return (self,)

    def phasor(self) -> np.ndarray:
        """Complex vector ``c`` with ``u(t) = Re(c exp(i 2 pi f t))`` per channel."""
        p = self.amplitude * np.exp(1j * self.phase)
        if self.kind == "quadrature":
            return np.array([p, -1j * p])
        return np.array([p])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        arg = 2 * np.pi * self.frequency * t + self.phase
        if self.kind == "quadrature":
            return self.amplitude * np.stack([np.cos(arg), np.sin(arg)])
        return self.amplitude * np.cos(arg)[np.newaxis]

    def reference(self, K: int, T: float) -> np.ndarray:
        """Samples at ``kT``; complex ``u + i ubar`` for quadrature, real otherwise."""
        samples = self(np.arange(K) * T)
        if self.kind == "quadrature":
            return samples[0] + 1j * samples[1]
        return samples[0]


@dataclass(frozen=True)
class MultiTone:
    """A sum of tones of the same kind."""

    components: tuple[InputSignal, ...]

    def __post_init__(self):
        kinds = {c.kind for c in self.components}
        if len(kinds) != 1:
            raise ValueError("all tones must share one kind")

    @property
    def kind(self) -> str:
        return self.components[0].kind

    @property
    def channels(self) -> int:
        return self.components[0].channels

    @property
    def tones(self) -> tuple[InputSignal, ...]:
        return self.components

    @property
    def peak(self) -> float:
        return float(sum(abs(c.amplitude) for c in self.components))

    def __call__(self, t) -> np.ndarray:
        return sum(c(t) for c in self.components)

    def reference(self, K: int, T: float) -> np.ndarray:
        return sum(c.reference(K, T) for c in self.components)


@dataclass(frozen=True)
class SimConfig:
    """Simulation knobs.

    Parameters
    ----------
    num_periods : `int`
        number of control cycles ``K``.
    substeps : `int`
        integrator substeps per control period.
    method : `str`
        ``"rk4"`` or ``"expm"`` (exact exponential, input frozen per substep).
    initial_state : `array_like`, optional
        defaults to zero.
    threshold : `float`
        instability threshold as a multiple of ``v_fs``.
    v_fs : `float`
        full-scale amplitude the threshold refers to.
    record_states : `bool`
        keep the state at every clock edge.
    """

    num_periods: int
    substeps: int = 32
    method: str = "rk4"
    initial_state: tuple | None = None
    threshold: float = 10.0
    v_fs: float = 1.0
    record_states: bool = False

    def __post_init__(self):
        if self.num_periods < 1:
            raise ValueError("num_periods must be >= 1")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if not self.threshold > 1:
            raise ValueError("threshold must exceed 1")
        if self.method not in ("rk4", "expm"):
            raise ValueError(f"unknown integration method {self.method!r}")


@dataclass(frozen=True)
class Frontend:
    """Analog system plus digital control in generic matrix form.

    ``dx/dt = A x + B u(t) + Gamma s(t)`` with decisions
    ``s[k] = sign(Gamma_tilde x(kT))`` held NRZ over
    ``(kT + tau_dc, (k+1)T + tau_dc]``.
    """

    A: np.ndarray
    B: np.ndarray
    Gamma: np.ndarray
    Gamma_tilde: np.ndarray
    T: float
    tau_dc: float = 0.0

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.shape[0] != n or self.Gamma.shape[0] != n:
            raise ValueError("B and Gamma must have as many rows as A")
        if self.Gamma_tilde.shape != (self.Gamma.shape[1], n):
            raise ValueError("Gamma_tilde must be M x n")
        if not 0 <= self.tau_dc < self.T:
            raise ValueError("tau_dc must lie in [0, T)")

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def controls(self) -> int:
        return self.Gamma.shape[1]

    @classmethod
    def quadrature(cls, sys: QuadratureSystem, ctrl: ControlCoefficients) -> "Frontend":
        return cls(
            A=np.array(sys.A),
            B=np.array(sys.B),
            Gamma=contribution_matrix(sys.N, ctrl),
            Gamma_tilde=observation_matrix(sys.N, ctrl),
            T=ctrl.T,
            tau_dc=ctrl.tau_dc,
        )

    @classmethod
    def lowpass(cls, sys: LowpassLeapfrog, tau_dc: float = 0.0) -> "Frontend":
        """Low-pass building block with the local control ``kappa = beta``,
        ``kappa_tilde = -1/(beta T)`` (the quadrature control at ``omega_n = 0``)."""
        A, B = lowpass_matrices(sys)
        eye = np.eye(sys.N)
        return cls(
            A=A,
            B=B,
            Gamma=sys.beta * eye,
            Gamma_tilde=-eye / (sys.beta * sys.T),
            T=sys.T,
            tau_dc=tau_dc,
        )


@dataclass(frozen=True)
class ControlTrace:
    """Control decisions, shape ``(channels, K)`` with entries ``+-1``."""

    decisions: np.ndarray
    T: float

    @property
    def channels(self) -> int:
        return self.decisions.shape[0]

    @property
    def K(self) -> int:
        return self.decisions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ControlTrace):
            return NotImplemented
        return self.T == other.T and np.array_equal(self.decisions, other.decisions)


@dataclass(frozen=True, eq=False)
class SimOutput:
    trace: ControlTrace
    max_state_inf_norm: float
    stable: bool
    states: np.ndarray | None = field(default=None, repr=False)
    diverged_at: int | None = None


def _const(d):
    return lambda t: d


def step_reference(
    A: np.ndarray, x: np.ndarray, drive: Drive, h: float, t: float = 0.0, method: str = "rk4"
) -> np.ndarray:
    """Advance ``dx/dt = A x + d(t)`` by one substep of length ``h``.

    ``x`` may be a vector or a matrix of stacked states. ``drive`` is either a
    constant array or a callable of time. With ``method="expm"`` the drive is
    frozen at the substep midpoint and the step is
    ``e^{Ah} x + (int_0^h e^{A s} ds) d``.
    """
    f = drive if callable(drive) else _const(drive)
    if method == "rk4":
        d0, dm, d1 = f(t), f(t + h / 2), f(t + h)
        k1 = A @ x + d0
        k2 = A @ (x + (h / 2) * k1) + dm
        k3 = A @ (x + (h / 2) * k2) + dm
        k4 = A @ (x + h * k3) + d1
        return x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    if method == "expm":
        Phi, Psi = _exp_pair(A, h)
        return Phi @ x + Psi @ f(t + h / 2)
    raise ValueError(f"unknown integration method {method!r}")


def _exp_pair(A: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """``(e^{Ah}, int_0^h e^{As} ds)``; the augmented exponential handles singular A."""
    n = A.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = A
    aug[:n, n:] = np.eye(n)
    E = scipy.linalg.expm(aug * h)
    return E[:n, :n], E[:n, n:]


def _propagate(A, X, drive: Drive, t0: float, duration: float, substeps: int, method: str):
    if duration == 0:
        return X
    h = duration / substeps
    if method == "expm":
        # constant A and h: factor once
        Phi, Psi = _exp_pair(A, h)
        f = drive if callable(drive) else _const(drive)
        for j in range(substeps):
            X = Phi @ X + Psi @ f(t0 + j * h + h / 2)
        return X
    for j in range(substeps):
        X = step_reference(A, X, drive, h, t0 + j * h, method)
    return X


@dataclass(frozen=True, eq=False)
class PeriodMaps:
    """Affine one-period maps of a frontend under a given integration scheme."""

    Phi: np.ndarray
    G_old: np.ndarray
    G_new: np.ndarray
    tone_response: np.ndarray  # (n, J) complex, response to drive v_j exp(i w_j t)
    tone_freqs: np.ndarray


def period_maps(fe: Frontend, u, substeps: int = 32, method: str = "rk4") -> PeriodMaps:
    """Integrate one control period on basis states/drives to get the affine maps."""
    n = fe.order
    T, tau = fe.T, fe.tau_dc
    if tau > 0:
        m1 = min(max(1, round(substeps * tau / T)), max(substeps - 1, 1))
        m2 = max(substeps - m1, 1)
    else:
        m1, m2 = 0, substeps

    def whole(X, drive_first, drive_second):
        X = _propagate(fe.A, X, drive_first, 0.0, tau, m1, method) if tau > 0 else X
        return _propagate(fe.A, X, drive_second, tau, T - tau, m2, method)

    I = np.eye(n)
    Z = np.zeros((n, n))
    Phi = whole(I, Z, Z)
    Zc = np.zeros((n, fe.controls))
    G_new = whole(Zc, Zc, fe.Gamma)
    G_old = whole(Zc, fe.Gamma, Zc) if tau > 0 else Zc

    tones = u.tones if u is not None else ()
    J = len(tones)
    resp = np.zeros((n, J), dtype=complex)
    freqs = np.zeros(J)
    for j, tone in enumerate(tones):
        w = 2 * np.pi * tone.frequency
        v = fe.B @ tone.phasor()
        drive = lambda t, v=v, w=w: v * np.exp(1j * w * t)
        x0 = np.zeros(n, dtype=complex)
        if tau > 0:
            x0 = _propagate(fe.A, x0, drive, 0.0, tau, m1, method)
        resp[:, j] = _propagate(fe.A, x0, drive, tau, T - tau, m2, method)
        freqs[j] = tone.frequency
    return PeriodMaps(Phi=Phi, G_old=G_old, G_new=G_new, tone_response=resp, tone_freqs=freqs)


def _input_drive(maps: PeriodMaps, k0: int, k1: int, T: float) -> np.ndarray:
    """Real input contribution of periods ``k0..k1-1``, shape ``(n, k1-k0)``."""
    if maps.tone_response.shape[1] == 0:
        return np.zeros((maps.Phi.shape[0], k1 - k0))
    k = np.arange(k0, k1)
    rot = np.exp(1j * 2 * np.pi * np.outer(maps.tone_freqs, k * T))
    return np.real(maps.tone_response @ rot)


_CHUNK = 8192


def simulate(
    fe: Frontend,
    u,
    cfg: SimConfig,
    maps: PeriodMaps | None = None,
) -> SimOutput:
    """Run the controlled system for ``cfg.num_periods`` clock cycles.

    Parameters
    ----------
    fe : :py:class:`Frontend`
        analog system and digital control.
    u : :py:class:`InputSignal` or :py:class:`MultiTone` or None
        input; ``None`` means zero input.
    cfg : :py:class:`SimConfig`
    maps : :py:class:`PeriodMaps`, optional
        precomputed period maps (must match ``fe``, ``u`` and ``cfg``).

    Returns
    -------
    :py:class:`SimOutput`
        decisions for every simulated period; ``stable`` is False once the
        state infinity norm exceeds ``threshold * v_fs``, at which point the
        run stops early.

    Raises
    ------
    :py:class:`DivergedError`
        if the state becomes non-finite.
    """
    if u is not None and u.channels != fe.B.shape[1]:
        raise ValueError(f"input has {u.channels} channels, system expects {fe.B.shape[1]}")
    if maps is None:
        maps = period_maps(fe, u, cfg.substeps, cfg.method)
    n, M, K = fe.order, fe.controls, cfg.num_periods
    x = np.zeros(n) if cfg.initial_state is None else np.array(cfg.initial_state, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"initial state must have shape ({n},)")

    Phi = maps.Phi
    G_new, G_old = maps.G_new, maps.G_old
    delayed = fe.tau_dc > 0
    Gt = fe.Gamma_tilde
    limit = cfg.threshold * cfg.v_fs

    decisions = np.empty((M, K), dtype=np.int8)
    states = np.empty((n, K)) if cfg.record_states else None
    d_prev = np.zeros(M)
    peak = 0.0
    stable = True
    stop = K
    for k0 in range(0, K, _CHUNK):
        k1 = min(K, k0 + _CHUNK)
        w = _input_drive(maps, k0, k1, fe.T)
        chunk_states = np.empty((n, k1 - k0))
        for j in range(k1 - k0):
            chunk_states[:, j] = x
            d = np.where(Gt @ x >= 0, 1.0, -1.0)
            decisions[:, k0 + j] = d
            x = Phi @ x + G_new @ d + w[:, j]
            if delayed:
                x += G_old @ d_prev
                d_prev = d
        if not np.all(np.isfinite(chunk_states)) or not np.all(np.isfinite(x)):
            bad = int(np.argmax(~np.all(np.isfinite(chunk_states), axis=0))) + k0
            raise DivergedError(f"non-finite state at period {bad}", period=bad)
        norms = np.max(np.abs(chunk_states), axis=0)
        if states is not None:
            states[:, k0:k1] = chunk_states
        over = np.nonzero(norms > limit)[0]
        if over.size:
            stop = k0 + int(over[0]) + 1
            peak = max(peak, float(norms[: over[0] + 1].max()))
            stable = False
            logger.info("state bound %.3g exceeded at period %d", limit, stop - 1)
            break
        peak = max(peak, float(norms.max()))
    trace = ControlTrace(decisions=decisions[:, :stop].copy(), T=fe.T)
    return SimOutput(
        trace=trace,
        max_state_inf_norm=peak,
        stable=stable,
        states=None if states is None else states[:, :stop],
    )


# -- trace export -------------------------------------------------------------

_TRACE_MAGIC = b"QCBT"
_TRACE_HEADER = struct.Struct("<4sHIQd")  # magic, version, channels, K, T


def write_trace(trace: ControlTrace, path) -> None:
    """Packed-bit trace file.

    Header (little endian): ``b"QCBT"``, uint16 version (1), uint32 channels,
    uint64 K, float64 T. Payload: channel-major bits, ``1`` for ``+1``, each
    channel padded to a whole byte (``numpy.packbits`` big-endian bit order).
    """
    bits = np.packbits(trace.decisions > 0, axis=1)
    with open(path, "wb") as f:
        f.write(_TRACE_HEADER.pack(_TRACE_MAGIC, 1, trace.channels, trace.K, trace.T))
        f.write(bits.tobytes())


def read_trace(path) -> ControlTrace:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, channels, K, T = _TRACE_HEADER.unpack_from(raw)
    if magic != _TRACE_MAGIC or version != 1:
        raise ValueError(f"{path} is not a version 1 trace file")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=_TRACE_HEADER.size)
    bits = np.unpackbits(payload.reshape(channels, -1), axis=1, count=K)
    return ControlTrace(decisions=(2 * bits.astype(np.int8) - 1), T=T)


def trace_to_csv(trace: ControlTrace, path) -> None:
    """One row per period, one column per channel."""
    header = ",".join(f"s{i}" for i in range(trace.channels))
    np.savetxt(path, trace.decisions.T, fmt="%d", delimiter=",", header=header, comments="")
