"""Analog systems

Low-pass leapfrog analog systems and their quadrature (band-pass) lift.

A leapfrog system of order ``N`` is parametrized by a forward gain ``beta`` and
a feedback gain ``alpha``,

    dx/dt = A_LP x + B_LP u + s

with ``A_LP`` bidiagonal (``alpha`` above, ``beta`` below the diagonal) and
``B_LP = (beta, 0, ..., 0)^T``. Two identical copies cross-coupled through
``+-omega_n`` form the quadrature system whose joint complex state rotates at
the notch frequency.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np


class InvalidDesignError(ValueError):
    """Raised for design targets outside the valid parameter range."""


@dataclass(frozen=True)
class DesignSpec:
    """Design targets of a (quadrature) leapfrog converter.

    Parameters
    ----------
    N : `int`
        order of each low-pass branch.
    OSR : `float`
        oversampling ratio, ``pi f_s / omega_B``.
    f_s : `float`
        control clock frequency [Hz].
    f_n : `float`
        notch frequency [Hz], ``0 <= f_n < f_s / 2``.
    phi_kappa : `float`
        free phase parameter of the digital control [rad].
    tau_dc : `float`
        quantizer delay [s].
    v_fs : `float`
        full-scale input amplitude [V].
    """

    N: int
    OSR: float
    f_s: float = 1.0
    f_n: float = 0.0
    phi_kappa: float = math.pi / 3
    tau_dc: float = 0.0
    v_fs: float = 1.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise InvalidDesignError(f"N must be a positive integer, got {self.N}")
        if not self.OSR >= 1:
            raise InvalidDesignError(
                f"OSR={self.OSR} < 1 puts the bandwidth above Nyquist"
            )
        if not self.f_s > 0:
            raise InvalidDesignError(f"f_s must be positive, got {self.f_s}")
        if not 0 <= self.f_n < self.f_s / 2:
            raise InvalidDesignError(f"f_n={self.f_n} outside [0, f_s/2)")
        if not 0 <= self.phi_kappa < 2 * math.pi:
            raise InvalidDesignError(f"phi_kappa={self.phi_kappa} outside [0, 2pi)")
        if not self.tau_dc >= 0:
            raise InvalidDesignError(f"tau_dc must be non-negative, got {self.tau_dc}")
        if not self.v_fs > 0:
            raise InvalidDesignError(f"v_fs must be positive, got {self.v_fs}")

    @property
    def T(self) -> float:
        return 1.0 / self.f_s

    @property
    def omega_B(self) -> float:
        return math.pi * self.f_s / self.OSR

    @property
    def omega_n(self) -> float:
        return 2 * math.pi * self.f_n

    @property
    def f_test(self) -> float:
        """Test tone frequency: a quarter of the Hz-bandwidth below the notch."""
        return self.f_n - self.omega_B / (8 * math.pi)


@dataclass(frozen=True)
class LowpassLeapfrog:
    """An ``N``-th order low-pass leapfrog analog system.

    Parameters
    ----------
    N : `int`
        system order.
    beta : `float`
        forward gain [1/s].
    alpha : `float`
        feedback gain [1/s].
    omega_B : `float`
        angular signal bandwidth [rad/s].
    T : `float`
        control period [s].
    """

    N: int
    beta: float
    alpha: float
    omega_B: float
    T: float

    @property
    def kappa(self) -> float:
        """Low-pass control gain, ``kappa = -beta``."""
        return -self.beta


@dataclass(frozen=True, eq=False)
class QuadratureSystem:
    """Two leapfrog branches cross-coupled at the notch frequency.

    State ordering is ``(x_1, ..., x_N, xbar_1, ..., xbar_N)``.

    Attributes
    ----------
    A : `array_like`, shape=(2N, 2N)
        ``[[A_LP, -omega_n I], [omega_n I, A_LP]]``.
    B : `array_like`, shape=(2N, 2)
        ``[[B_LP, 0], [0, B_LP]]``.
    """

    lowpass: LowpassLeapfrog
    omega_n: float
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.lowpass.N

    def __eq__(self, other):
        if not isinstance(other, QuadratureSystem):
            return NotImplemented
        return (
            self.lowpass == other.lowpass
            and self.omega_n == other.omega_n
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.B, other.B)
        )


def design_lowpass(spec: DesignSpec) -> LowpassLeapfrog:
    """Design a low-pass leapfrog system from bandwidth and OSR targets.

    ``omega_B = pi f_s / OSR``, ``|beta| = omega_B OSR / (2 pi)`` and
    ``alpha beta = -omega_B^2 / 4``. ``beta`` is taken positive, so
    ``2 beta T = 1``.
    """
    if spec.OSR < 1:
        raise InvalidDesignError(f"OSR={spec.OSR} < 1 puts the bandwidth above Nyquist")
    omega_B = spec.omega_B
    beta = omega_B * spec.OSR / (2 * math.pi)
    alpha = -(omega_B**2) / (4 * beta)
    return LowpassLeapfrog(N=int(spec.N), beta=beta, alpha=alpha, omega_B=omega_B, T=spec.T)


def lowpass_matrices(sys: LowpassLeapfrog) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A_LP, B_LP)`` with shapes ``(N, N)`` and ``(N, 1)``."""
    N = sys.N
    A = np.zeros((N, N))
    idx = np.arange(N - 1)
    A[idx, idx + 1] = sys.alpha
    A[idx + 1, idx] = sys.beta
    B = np.zeros((N, 1))
    B[0, 0] = sys.beta
    return A, B


def quadrature_transform(sys: LowpassLeapfrog, omega_n: float) -> QuadratureSystem:
    """Lift a low-pass system to its quadrature version at ``omega_n`` [rad/s]."""
    if omega_n < 0:
        raise InvalidDesignError(f"omega_n must be non-negative, got {omega_n}")
    A_lp, B_lp = lowpass_matrices(sys)
    N = sys.N
    eye = np.eye(N)
    A = np.block([[A_lp, -omega_n * eye], [omega_n * eye, A_lp]])
    B = np.zeros((2 * N, 2))
    B[:N, 0:1] = B_lp
    B[N:, 1:2] = B_lp
    A.setflags(write=False)
    B.setflags(write=False)
    return QuadratureSystem(lowpass=sys, omega_n=float(omega_n), A=A, B=B)


def predicted_snr_delta(N: int, osr_ratio: float) -> float:
    """SNR change [dB] when the OSR is scaled by ``osr_ratio`` (SNR ~ OSR^2N)."""
    if osr_ratio <= 0:
        raise ValueError("osr_ratio must be positive")
    return 20.0 * N * math.log10(osr_ratio)


def system_to_dict(spec: DesignSpec, qsys: QuadratureSystem) -> dict:
    lp = qsys.lowpass
    return {
        "n": lp.N,
        "osr": spec.OSR,
        "fs": spec.f_s,
        "fn": spec.f_n,
        "beta": lp.beta,
        "alpha": lp.alpha,
        "omega_b": lp.omega_B,
        "omega_n": qsys.omega_n,
        "T": lp.T,
        "A": (qsys.A + 0.0).tolist(),
        "B": qsys.B.tolist(),
    }


def system_from_dict(doc: dict) -> QuadratureSystem:
    """Rebuild a quadrature system; the stored matrices win over the scalars.

    This lets perturbed instances (whose matrix entries no longer follow the
    nominal block structure) round-trip.
    """
    lp = LowpassLeapfrog(
        N=int(doc["n"]),
        beta=float(doc["beta"]),
        alpha=float(doc["alpha"]),
        omega_B=float(doc["omega_b"]),
        T=float(doc.get("T", 1.0 / float(doc["fs"]))),
    )
    if "A" in doc:
        A = np.array(doc["A"], dtype=float)
        B = np.array(doc["B"], dtype=float)
        A.setflags(write=False)
        B.setflags(write=False)
        return QuadratureSystem(lowpass=lp, omega_n=float(doc["omega_n"]), A=A, B=B)
    return quadrature_transform(lp, float(doc["omega_n"]))
