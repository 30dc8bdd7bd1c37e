"""Local quadrature digital control.

Each state pair ``(x_l, xbar_l)`` is rotated and scaled into a control
observation, quantized to ``(+-1, +-1)`` at the clock edges and fed back as a
rotated, scaled, non-return-to-zero contribution.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

# below this |omega_n T| the factor omega_n T / (2 sin(omega_n T / 2)) is taken as 1
_SMALL_ANGLE = 1e-8


class InvalidControlError(ValueError):
    pass


class DivergedError(FloatingPointError):
    """Non-finite state or observation: the simulation diverged."""

    def __init__(self, message: str, period: int | None = None):
        super().__init__(message)
        self.period = period


@dataclass(frozen=True)
class ControlCoefficients:
    """Coefficients of the local quadrature digital control.

    ``kappa_phi``/``kbar_phi`` scale the fed-back contribution [1/s],
    ``ktilde_phi``/``kbar_tilde_phi`` form the observation [unitless].
    """

    kappa_phi: float
    kbar_phi: float
    ktilde_phi: float
    kbar_tilde_phi: float
    phi_kappa: float
    T: float
    tau_dc: float = 0.0

    def to_dict(self) -> dict:
        return {
            "kappa_phi": self.kappa_phi,
            "kbar_phi": self.kbar_phi,
            "ktilde_phi": self.ktilde_phi,
            "kbar_tilde_phi": self.kbar_tilde_phi,
            "phi_kappa": self.phi_kappa,
            "tau_dc": self.tau_dc,
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ControlCoefficients":
        return cls(
            kappa_phi=float(doc["kappa_phi"]),
            kbar_phi=float(doc["kbar_phi"]),
            ktilde_phi=float(doc["ktilde_phi"]),
            kbar_tilde_phi=float(doc["kbar_tilde_phi"]),
            phi_kappa=float(doc["phi_kappa"]),
            T=float(doc["T"]),
            tau_dc=float(doc.get("tau_dc", 0.0)),
        )


def check_superposition(beta: float, T: float) -> bool:
    """Worst-case input/control superposition condition ``2 beta T <= 1``."""
    return 2.0 * beta * T <= 1.0


def _gain_factor(omega_n: float, T: float) -> float:
    """``omega_n T / (2 sin(omega_n T / 2))`` with its limit 1 at zero."""
    wT = omega_n * T
    if abs(wT) < _SMALL_ANGLE:
        return 1.0
    return wT / (2.0 * math.sin(wT / 2.0))


def synthesize_control(
    beta: float, omega_n: float, T: float, phi_kappa: float, tau_dc: float = 0.0
) -> ControlCoefficients:
    """Compute the control coefficients for a quadrature leapfrog system.

    Parameters
    ----------
    beta : `float`
        leapfrog forward gain [1/s].
    omega_n : `float`
        notch angular frequency [rad/s].
    T : `float`
        control period [s].
    phi_kappa : `float`
        free phase of the contribution gains [rad].
    tau_dc : `float`
        quantizer delay [s].

    Returns
    -------
    :py:class:`ControlCoefficients`
    """
    bT = beta * T
    if not bT > 0:
        raise InvalidControlError(f"beta*T must be positive, got {bT}")
    if not check_superposition(beta, T):
        raise InvalidControlError(f"2 beta T = {2 * bT} > 1 violates superposition bound")
    wT = omega_n * T
    if not 0 <= wT < 2 * math.pi:
        raise InvalidControlError(f"omega_n T = {wT} outside [0, 2pi)")
    if not 0 <= tau_dc < T:
        raise InvalidControlError(f"tau_dc = {tau_dc} outside [0, T)")
    magnitude = beta * _gain_factor(omega_n, T)
    angle = omega_n * (T / 2.0 + tau_dc) - phi_kappa
    return ControlCoefficients(
        kappa_phi=magnitude * math.cos(phi_kappa),
        kbar_phi=magnitude * math.sin(phi_kappa),
        ktilde_phi=-math.cos(angle) / bT,
        kbar_tilde_phi=-math.sin(angle) / bT,
        phi_kappa=phi_kappa,
        T=T,
        tau_dc=tau_dc,
    )


def _rotation(a: float, b: float) -> np.ndarray:
    return np.array([[a, -b], [b, a]])


def control_observation(x_pair, c: ControlCoefficients) -> np.ndarray:
    """Rotate a state pair into its control observation."""
    return _rotation(c.ktilde_phi, c.kbar_tilde_phi) @ np.asarray(x_pair, dtype=float)


def quantize(observation) -> np.ndarray:
    """Elementwise 1-bit quantizer, ``sign(0) = +1``."""
    obs = np.asarray(observation, dtype=float)
    if not np.all(np.isfinite(obs)):
        raise DivergedError("non-finite control observation")
    return np.where(obs >= 0, 1, -1).astype(np.int8)


def control_contribution(decisions, c: ControlCoefficients) -> np.ndarray:
    """NRZ control contribution of a decision pair, constant over one period."""
    return _rotation(c.kappa_phi, c.kbar_phi) @ np.asarray(decisions, dtype=float)


def contribution_matrix(N: int, c: ControlCoefficients) -> np.ndarray:
    """2N x 2N matrix mapping decisions ``(s_1..s_N, sbar_1..sbar_N)`` to contributions."""
    return _stage_blocks(N, c.kappa_phi, c.kbar_phi)


def observation_matrix(N: int, c: ControlCoefficients) -> np.ndarray:
    """2N x 2N matrix mapping states to control observations."""
    return _stage_blocks(N, c.ktilde_phi, c.kbar_tilde_phi)


def _stage_blocks(N: int, a: float, b: float) -> np.ndarray:
    eye = np.eye(N)
    return np.block([[a * eye, -b * eye], [b * eye, a * eye]])
