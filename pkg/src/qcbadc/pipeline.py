"""End-to-end conversion pipeline: design, simulate, calibrate, estimate, analyze."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np

from . import analysis
from .control import ControlCoefficients, synthesize_control
from .estimator import CalibrationConfig, FirEstimator, calibrate, estimate
from .sim import ControlTrace, Frontend, InputSignal, MultiTone, SimConfig, simulate
from .system import DesignSpec, QuadratureSystem, design_lowpass, quadrature_transform

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class TrainingConfig:
    """Calibration input: ``tones`` equally spaced quadrature tones with
    random phases spanning ``span`` times the converter band, scaled so the
    sampled peak magnitude equals ``peak * v_fs``.

    ``tones=None`` picks the count so that the tone spacing matches the
    filter's frequency resolution ``f_s / K_h``.
    """

    tones: int | None = None
    span: float = 1.0
    peak: float = 0.9
    seed: int = 1


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=lambda: SimConfig(num_periods=1))
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    nfft: int = 1 << 14
    segments: int = 4
    window: str = "hann"
    guard: int = 3
    # SNR band width in units of omega_B / (2 pi)
    band: float = 1.0
    notch_search: tuple[float, float] | None = None
    notch_method: str = "symmetry"
    # test tone; None keeps the design's f_test [Hz], amplitude in units of v_fs
    test_frequency: float | None = None
    test_amplitude: float = 1.0
    # double K_h while doing so gains at least kh_tolerance_db of SNR
    auto_kh: bool = True
    kh_tolerance_db: float = 0.5
    kh_cap: int = 4096


@dataclass(frozen=True, eq=False)
class RunResult:
    design: DesignSpec
    frontend: Frontend
    estimator: FirEstimator
    test_trace: ControlTrace
    estimate: np.ndarray
    spectrum: analysis.Spectrum
    snr: analysis.SnrReport
    f_test: float
    f_hat_n: float | None
    stable: bool
    max_state: float
    kh_delta_db: float | None = None


def nominal(design: DesignSpec) -> tuple[QuadratureSystem, ControlCoefficients]:
    lp = design_lowpass(design)
    qs = quadrature_transform(lp, design.omega_n)
    ctrl = synthesize_control(lp.beta, design.omega_n, lp.T, design.phi_kappa, design.tau_dc)
    return qs, ctrl


def quadrature_frontend(design: DesignSpec) -> Frontend:
    return Frontend.quadrature(*nominal(design))


def lowpass_frontend(design: DesignSpec) -> Frontend:
    return Frontend.lowpass(design_lowpass(design), design.tau_dc)


def band_edges(design: DesignSpec) -> tuple[float, float]:
    """Converter band ``f_n +- omega_B / (2 pi)`` [Hz]."""
    fB = design.omega_B / (2 * math.pi)
    return design.f_n - fB, design.f_n + fB


def training_tones(cfg: TrainingConfig, K_h: int, design: DesignSpec, kind: str = "quadrature") -> int:
    if cfg.tones is not None:
        return cfg.tones
    # covered span over f_s is span / OSR (two-sided) or span / (2 OSR) (real)
    width = cfg.span / design.OSR if kind == "quadrature" else cfg.span / (2 * design.OSR)
    return max(1, math.ceil(width * K_h))


def training_signal(design: DesignSpec, cfg: TrainingConfig, K: int, kind: str, K_h: int = 512) -> MultiTone:
    fB = design.omega_B / (2 * math.pi)
    rng = np.random.default_rng(cfg.seed)
    J = training_tones(cfg, K_h, design, kind)
    if kind == "quadrature":
        # a quarter-spacing shift keeps the grid from being mirror symmetric,
        # otherwise at f_n = 0 tone pairs +-f make the image response unidentifiable
        grid = np.linspace(-1, 1, J + 2)[1:-1] + 0.5 / (J + 1)
        freqs = design.f_n + grid * cfg.span * fB
    else:
        freqs = np.linspace(0, 1, J + 2)[1:-1] * cfg.span * fB
    phases = rng.uniform(0, 2 * np.pi, J)
    unit = MultiTone(tuple(InputSignal(1.0, f, p, kind) for f, p in zip(freqs, phases)))
    peak = np.max(np.abs(unit.reference(K, design.T)))
    a = cfg.peak * design.v_fs / peak
    return MultiTone(tuple(InputSignal(a, f, p, kind) for f, p in zip(freqs, phases)))


def test_signal(design: DesignSpec, kind: str, frequency: float | None = None, amplitude: float = 1.0) -> InputSignal:
    """Full-scale test tone at ``design.f_test`` unless overridden; the
    low-pass path uses ``|f_test|``."""
    f = design.f_test if frequency is None else frequency
    if kind == "real":
        f = abs(f)
    return InputSignal(amplitude * design.v_fs, f, 0.0, kind)


def run(design: DesignSpec, cfg: RunConfig, frontend: Frontend | None = None, kind: str = "quadrature") -> RunResult:
    """Simulate a training run, calibrate, simulate the test tone and measure.

    ``kind="real"`` runs a low-pass building block (real input, real
    estimate) and ``frontend`` then defaults to :py:func:`lowpass_frontend`.
    With ``cfg.auto_kh`` the filter length is doubled while doing so still
    moves the SNR by ``kh_tolerance_db`` or more.
    """
    if frontend is None:
        frontend = quadrature_frontend(design) if kind == "quadrature" else lowpass_frontend(design)
    T = design.T
    K_train = cfg.calibration.K_train
    simcfg = replace(cfg.sim, v_fs=design.v_fs)
    n_analyzed = cfg.nfft * cfg.segments
    u_test = test_signal(design, kind, cfg.test_frequency, cfg.test_amplitude)
    trainings: dict = {}
    peak = 0.0

    def training(K_h):
        nonlocal peak
        J = training_tones(cfg.training, K_h, design, kind)
        if J not in trainings:
            try:
                u = training_signal(design, cfg.training, K_train, kind, K_h)
                out = simulate(frontend, u, replace(simcfg, num_periods=K_train))
            except Exception as exc:
                raise StageError("simulate-training", exc) from exc
            peak = max(peak, out.max_state_inf_norm)
            trainings[J] = (u, out)
        return trainings[J]

    def test_run(K_h):
        nonlocal peak
        try:
            out = simulate(frontend, u_test, replace(simcfg, num_periods=n_analyzed + K_h))
        except Exception as exc:
            raise StageError("simulate-test", exc) from exc
        peak = max(peak, out.max_state_inf_norm)
        return out

    K_h = cfg.calibration.K_h
    u_train, train = training(K_h)
    test = test_run(2 * K_h if cfg.auto_kh else K_h)
    if not (train.stable and test.stable):
        return RunResult(design, frontend, None, test.trace, None, None, None, u_test.frequency, None, False, peak)
    bandwidth = cfg.band * design.omega_B / (2 * math.pi)
    tones = [u_test.frequency] if kind == "quadrature" else [u_test.frequency, -u_test.frequency]

    def measure(K_h, test):
        u_train, train = training(K_h)
        if not train.stable:
            return None
        try:
            fir = calibrate(train.trace, u_train.reference(K_train, T), replace(cfg.calibration, K_h=K_h))
        except Exception as exc:
            raise StageError("calibrate", exc) from exc
        try:
            u_hat = estimate(test.trace, fir)[:n_analyzed]
            spectrum = analysis.psd(u_hat, cfg.nfft, cfg.window, design.f_s)
            snr = analysis.snr_in_band(spectrum, design.f_n, bandwidth, tones, cfg.guard)
        except Exception as exc:
            raise StageError("analyze", exc) from exc
        return fir, u_hat, spectrum, snr

    fir, u_hat, spectrum, snr = measure(K_h, test)
    delta = None
    while cfg.auto_kh and 2 * K_h <= cfg.kh_cap:
        if K_train < 4 * 2 * K_h * train.trace.channels:
            logger.warning("K_h=%d not checked against %d: training too short", K_h, 2 * K_h)
            break
        if test.trace.K < n_analyzed + 2 * K_h:
            test = test_run(2 * K_h)
        doubled = measure(2 * K_h, test)
        if doubled is None:
            logger.warning("training run for K_h=%d unstable", 2 * K_h)
            break
        delta = doubled[3].snr_db - snr.snr_db
        logger.info("K_h %d -> %d changes SNR by %+.2f dB", K_h, 2 * K_h, delta)
        if delta < cfg.kh_tolerance_db:
            break
        K_h *= 2
        fir, u_hat, spectrum, snr = doubled
    f_hat = None
    if kind == "quadrature":
        try:
            f_hat = analysis.estimate_notch(
                spectrum, snr.signal_bins, cfg.notch_search or band_edges(design), method=cfg.notch_method
            )
        except analysis.NoNotchFound as exc:
            logger.warning("notch estimation failed: %s", exc)
    return RunResult(
        design=design,
        frontend=frontend,
        estimator=fir,
        test_trace=test.trace,
        estimate=u_hat,
        spectrum=spectrum,
        snr=snr,
        f_test=u_test.frequency,
        f_hat_n=f_hat,
        stable=True,
        max_state=peak,
        kh_delta_db=delta,
    )
