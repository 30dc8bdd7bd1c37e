"""Fast structural self-checks, shared by ``qcbadc selftest``.

Each check returns ``(name, passed, detail)``. The whole set runs in a few
seconds and exercises the closed-form coefficients, the quadrature lift, the
simulator, the calibration solver and the spectral estimator.
"""
from __future__ import annotations

import math

import numpy as np

from . import analysis
from .control import synthesize_control
from .estimator import CalibrationConfig, calibrate, design_matrix
from .sim import ControlTrace, Frontend, InputSignal, SimConfig, simulate
from .system import DesignSpec, design_lowpass, lowpass_matrices, quadrature_transform


def coefficient_identities(n: int = 10) -> tuple[float, float]:
    """Worst relative error of the magnitude/phase identities and of the
    zero-frequency limits over a ``n x n x 8 x 4`` grid (unit period)."""
    worst = 0.0
    for bT in np.linspace(0.5 / n, 0.5, n):
        for wT in np.linspace(0, 2 * math.pi, n, endpoint=False):
            for phi in np.linspace(0, 2 * math.pi, 8, endpoint=False):
                for tau in np.linspace(0, 1, 4, endpoint=False):
                    c = synthesize_control(bT, wT, 1.0, phi, tau)
                    mag = math.hypot(c.kappa_phi, c.kbar_phi)
                    want = bT if wT == 0 else bT * wT / (2 * math.sin(wT / 2))
                    worst = max(worst, abs(mag - want) / want)
                    tmag = math.hypot(c.ktilde_phi, c.kbar_tilde_phi)
                    twant = 1 / bT if wT == 0 else wT / (2 * mag * math.sin(wT / 2))
                    worst = max(worst, abs(tmag - twant) / twant)
                    ang = math.atan2(c.kbar_tilde_phi, c.ktilde_phi)
                    d = (ang - (wT * (0.5 + tau) - phi + math.pi)) % (2 * math.pi)
                    worst = max(worst, min(d, 2 * math.pi - d))
    c0 = synthesize_control(0.5, 0.0, 1.0, 0.0, 0.0)
    limit = max(abs(c0.kappa_phi - 0.5), abs(c0.kbar_phi), abs(c0.ktilde_phi + 2.0), abs(c0.kbar_tilde_phi))
    return worst, limit


def eigen_shift_error() -> float:
    worst = 0.0
    for N in range(1, 9):
        for osr in (4, 8):
            lp = design_lowpass(DesignSpec(N=N, OSR=osr))
            A_lp, _ = lowpass_matrices(lp)
            lam = np.linalg.eigvals(A_lp)
            for wn in (0.0, math.pi / 8, math.pi / 4):
                got = np.sort_complex(np.linalg.eigvals(quadrature_transform(lp, wn).A))
                want = np.sort_complex(np.concatenate([lam + 1j * wn, lam - 1j * wn]))
                scale = max(1.0, np.max(np.abs(want)))
                # match as multisets: greedy nearest pairing
                remaining = list(want)
                for g in got:
                    j = int(np.argmin(np.abs(np.array(remaining) - g)))
                    worst = max(worst, abs(remaining.pop(j) - g) / scale)
    return worst


def decoupling_bit_exact(K: int = 4096) -> bool:
    """At ``omega_n = 0``, ``phi_kappa = 0`` the quadrature simulation equals
    two independent low-pass simulations channel for channel."""
    design = DesignSpec(N=6, OSR=8, f_n=0.0, phi_kappa=0.0)
    lp = design_lowpass(design)
    qs = quadrature_transform(lp, 0.0)
    ctrl = synthesize_control(lp.beta, 0.0, lp.T, 0.0, 0.0)
    f = 0.01
    quad = simulate(Frontend.quadrature(qs, ctrl), InputSignal(0.8, f), SimConfig(num_periods=K))
    fe_lp = Frontend.lowpass(lp)
    i_branch = simulate(fe_lp, InputSignal(0.8, f, 0.0, "real"), SimConfig(num_periods=K))
    q_branch = simulate(fe_lp, InputSignal(0.8, f, -math.pi / 2, "real"), SimConfig(num_periods=K))
    both = np.concatenate([i_branch.trace.decisions, q_branch.trace.decisions])
    return bool(np.array_equal(quad.trace.decisions, both))


def dense_oracle_error(seed: int = 7) -> float:
    """Max tap difference between the CG calibration and a pseudoinverse solve."""
    rng = np.random.default_rng(seed)
    L, K_h, K = 2, 8, 256
    s = rng.choice(np.array([-1, 1], dtype=np.int8), size=(L, K))
    ref = rng.standard_normal(K) + 1j * rng.standard_normal(K)
    fir = calibrate(ControlTrace(s, 1.0), ref, CalibrationConfig(K_h=K_h, K_train=K, ridge=0.0, tol=1e-14))
    X = design_matrix(s, K_h)
    y = ref[K_h // 2 : K - K_h // 2]
    h = np.linalg.pinv(X) @ y
    return float(np.max(np.abs(fir.taps.reshape(-1) - h)))


def parseval_error(seed: int = 3) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(4096) + 1j * rng.standard_normal(4096)
    spec = analysis.psd(x, nfft=4096, window="rect")
    return abs(np.sum(spec.psd) * spec.df - np.mean(np.abs(x) ** 2)) / np.mean(np.abs(x) ** 2)


def deterministic(K: int = 2048) -> bool:
    design = DesignSpec(N=4, OSR=8, f_n=0.125)
    lp = design_lowpass(design)
    qs = quadrature_transform(lp, design.omega_n)
    ctrl = synthesize_control(lp.beta, design.omega_n, lp.T, design.phi_kappa, 0.0)
    fe = Frontend.quadrature(qs, ctrl)
    u = InputSignal(0.9, design.f_test)
    a = simulate(fe, u, SimConfig(num_periods=K))
    b = simulate(fe, u, SimConfig(num_periods=K))
    ref = u.reference(K, lp.T)
    cfg = CalibrationConfig(K_h=16, K_train=K)
    return bool(np.array_equal(a.trace.decisions, b.trace.decisions)) and bool(
        np.array_equal(calibrate(a.trace, ref, cfg).taps, calibrate(b.trace, ref, cfg).taps)
    )


def run_checks() -> list[tuple[str, bool, str]]:
    out = []
    worst, limit = coefficient_identities()
    out.append(("coefficient identities", bool(worst <= 1e-12), f"worst relative error {worst:.2e}"))
    out.append(("zero-frequency limits", limit == 0.0, f"max deviation {limit:.1e}"))
    e = eigen_shift_error()
    out.append(("eigenvalue shift", bool(e <= 1e-9), f"max error {e:.2e}"))
    out.append(("omega_n = 0 decoupling", decoupling_bit_exact(), "bit-exact comparison"))
    e = dense_oracle_error()
    out.append(("calibration vs pseudoinverse", bool(e <= 1e-8), f"max tap difference {e:.2e}"))
    e = parseval_error()
    out.append(("Parseval", bool(e <= 1e-9), f"relative error {e:.2e}"))
    out.append(("determinism", deterministic(), "bit-identical reruns"))
    return out
