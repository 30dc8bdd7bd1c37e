"""Monte-Carlo robustness against component mismatch.

Every nonzero coefficient of the analog system and the digital control is
multiplied by its own uniform draw in ``[1 - p, 1 + p]``, the estimator is
recalibrated on the perturbed instance and SNR, notch estimate and stability
are aggregated over the trials.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import json
import logging
import os
from typing import Callable, Iterable

import numpy as np

from . import pipeline
from .control import DivergedError
from .sim import Frontend
from .system import DesignSpec

logger = logging.getLogger(__name__)

_MATRICES = ("A", "B", "Gamma", "Gamma_tilde")


@dataclass(frozen=True)
class PerturbationSpec:
    """Uniform multiplicative mismatch.

    Parameters
    ----------
    p : `float`
        relative half-width, ``0 <= p < 1``.
    seed : `int`
        master seed; trial ``i`` draws from :py:func:`trial_seed`.
    """

    p: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise ValueError(f"p must lie in [0, 1), got {self.p}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def trial_seed(master: int, trial: int) -> int:
    """Deterministic 64-bit seed of trial ``trial`` under ``master``."""
    state = np.random.SeedSequence([master, trial]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def perturbation_factors(fe: Frontend, spec: PerturbationSpec, trial: int) -> dict[str, np.ndarray]:
    """Per-entry factors for each matrix of ``fe`` (1 on structural zeros)."""
    rng = np.random.default_rng(trial_seed(spec.seed, trial))
    factors = {}
    for name in _MATRICES:
        M = getattr(fe, name)
        f = np.ones(M.shape)
        nz = M != 0
        # draws are consumed in row-major order of the nonzero entries
        f[nz] = rng.uniform(1 - spec.p, 1 + spec.p, int(nz.sum()))
        factors[name] = f
    return factors


def perturb(fe: Frontend, spec: PerturbationSpec, trial: int) -> Frontend:
    """Perturbed copy of a frontend; ``p = 0`` returns bit-identical matrices."""
    if spec.p == 0:
        return replace(fe, **{name: np.array(getattr(fe, name)) for name in _MATRICES})
    factors = perturbation_factors(fe, spec, trial)
    return replace(fe, **{name: getattr(fe, name) * factors[name] for name in _MATRICES})


def parameter_vector(fe: Frontend) -> np.ndarray:
    """Nonzero coefficients of ``fe`` in a fixed order (A, B, Gamma, Gamma_tilde)."""
    return np.concatenate([getattr(fe, name)[getattr(fe, name) != 0] for name in _MATRICES])


@dataclass(frozen=True)
class TrialResult:
    """Outcome of one trial.

    ``snr_db`` is present iff the trial is stable and completed; ``f_hat_n``
    may additionally be missing when no notch was found. ``error`` holds the
    failure message of a trial that raised (such trials count as unstable
    only when the failure was a divergence).
    """

    index: int
    seed: int
    stable: bool
    snr_db: float | None = None
    f_hat_n: float | None = None
    parameters: tuple[float, ...] = ()
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "stable": self.stable,
            "snr_db": self.snr_db,
            "f_hat_n": self.f_hat_n,
            "parameters": list(self.parameters),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrialResult":
        return cls(
            index=int(doc["index"]),
            seed=int(doc["seed"]),
            stable=bool(doc["stable"]),
            snr_db=doc.get("snr_db"),
            f_hat_n=doc.get("f_hat_n"),
            parameters=tuple(doc.get("parameters", ())),
            error=doc.get("error"),
        )


@dataclass(frozen=True)
class McReport:
    """Aggregate over trials; ranges cover stable trials only."""

    trials: tuple[TrialResult, ...]
    nominal_snr_db: float
    f_n: float
    nominal_f_hat_n: float | None = None
    spec: PerturbationSpec = field(default_factory=PerturbationSpec)

    @property
    def unstable(self) -> int:
        return sum(1 for t in self.trials if not t.stable)

    @property
    def failed(self) -> int:
        return sum(1 for t in self.trials if t.error is not None)

    def delta_snr(self) -> np.ndarray:
        """SNR relative to nominal [dB] of the completed stable trials."""
        return np.array([t.snr_db - self.nominal_snr_db for t in self.trials if t.snr_db is not None])

    def f_hat_ratio(self) -> np.ndarray:
        """``f_hat_n / f_n`` of the trials with a notch estimate."""
        return np.array([t.f_hat_n / self.f_n for t in self.trials if t.f_hat_n is not None])

    @property
    def snr_range(self) -> tuple[float, float] | None:
        d = self.delta_snr()
        return (float(d.min()), float(d.max())) if d.size else None

    @property
    def f_hat_range(self) -> tuple[float, float] | None:
        r = self.f_hat_ratio() - 1
        return (float(r.min()), float(r.max())) if r.size else None

    def fraction_snr_within(self, lo: float, hi: float) -> float:
        """Share of all trials whose SNR lies within ``(lo, hi)`` dB of nominal."""
        d = self.delta_snr()
        return float(np.sum((d > lo) & (d < hi))) / len(self.trials) if self.trials else 0.0

    def fraction_f_hat_within(self, rel: float) -> float:
        """Share of all trials with ``|f_hat_n / f_n - 1| <= rel``."""
        r = self.f_hat_ratio()
        return float(np.sum(np.abs(r - 1) <= rel)) / len(self.trials) if self.trials else 0.0

    def summary(self) -> dict:
        return {
            "trials": len(self.trials),
            "unstable": self.unstable,
            "failed": self.failed,
            "nominal_snr_db": self.nominal_snr_db,
            "nominal_f_hat_n": self.nominal_f_hat_n,
            "snr_range_db": self.snr_range,
            "f_hat_range_rel": self.f_hat_range,
        }


def _trial(
    design: DesignSpec, cfg: pipeline.RunConfig, nominal_fe: Frontend, spec: PerturbationSpec, index: int, kind: str
) -> TrialResult:
    seed = trial_seed(spec.seed, index)
    fe = perturb(nominal_fe, spec, index)
    params = tuple(float(v) for v in parameter_vector(fe))
    try:
        res = pipeline.run(design, cfg, frontend=fe, kind=kind)
    except (DivergedError, pipeline.StageError) as exc:
        diverged = isinstance(exc, DivergedError) or isinstance(getattr(exc, "cause", None), DivergedError)
        logger.warning("trial %d failed: %s", index, exc)
        return TrialResult(index, seed, stable=not diverged, parameters=params, error=str(exc))
    if not res.stable:
        return TrialResult(index, seed, stable=False, parameters=params)
    return TrialResult(index, seed, True, res.snr.snr_db, res.f_hat_n, params)


def _trial_star(args):
    return _trial(*args)


def _read_checkpoint(path, header: dict) -> dict[int, TrialResult]:
    done: dict[int, TrialResult] = {}
    if path is None or not os.path.exists(path):
        return done
    with open(path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        return done
    if json.loads(lines[0]) != header:
        raise ValueError(f"checkpoint {path} was written for a different experiment")
    for line in lines[1:]:
        try:
            t = TrialResult.from_dict(json.loads(line))
        except (ValueError, KeyError):
            # a torn last line from an interrupted write
            continue
        done[t.index] = t
    return done


def run_mc(
    design: DesignSpec,
    trials: int = 256,
    spec: PerturbationSpec = PerturbationSpec(),
    cfg: pipeline.RunConfig | None = None,
    kind: str = "quadrature",
    workers: int = 1,
    checkpoint=None,
    progress: Callable[[TrialResult], None] | None = None,
    nominal: pipeline.RunResult | None = None,
) -> McReport:
    """Run the Monte-Carlo batch.

    Parameters
    ----------
    design : :py:class:`DesignSpec`
    trials : `int`
        number of trials.
    spec : :py:class:`PerturbationSpec`
    cfg : :py:class:`qcbadc.pipeline.RunConfig`, `optional`
        pipeline configuration; the filter length resolved on the nominal
        run is reused for every trial.
    kind : `str`
        ``"quadrature"`` or ``"real"`` (low-pass building block).
    workers : `int`
        worker processes; results do not depend on it.
    checkpoint : `path`, `optional`
        JSON-lines file of completed trials; existing entries are reused.
    progress : `callable`, `optional`
        called with each newly completed :py:class:`TrialResult`.
    nominal : :py:class:`qcbadc.pipeline.RunResult`, `optional`
        precomputed nominal run.

    Returns
    -------
    :py:class:`McReport`
    """
    if trials < 0:
        raise ValueError("trials must be non-negative")
    cfg = cfg or pipeline.RunConfig()
    nominal_fe = pipeline.quadrature_frontend(design) if kind == "quadrature" else pipeline.lowpass_frontend(design)
    if nominal is None:
        nominal = pipeline.run(design, cfg, frontend=nominal_fe, kind=kind)
    if not nominal.stable:
        raise ValueError("nominal design is unstable")
    trial_cfg = replace(cfg, auto_kh=False, calibration=replace(cfg.calibration, K_h=nominal.estimator.K_h))

    header = {"design": repr(design), "p": spec.p, "seed": spec.seed, "kind": kind, "config": repr(trial_cfg)}
    done = _read_checkpoint(checkpoint, header)
    todo = [i for i in range(trials) if i not in done]
    fh = None
    if checkpoint is not None:
        fresh = not os.path.exists(checkpoint) or os.path.getsize(checkpoint) == 0
        fh = open(checkpoint, "a")
        if fresh:
            fh.write(json.dumps(header) + "\n")
            fh.flush()

    def record(t: TrialResult):
        done[t.index] = t
        if fh is not None:
            fh.write(json.dumps(t.to_dict()) + "\n")
            fh.flush()
        if progress is not None:
            progress(t)

    try:
        jobs = [(design, trial_cfg, nominal_fe, spec, i, kind) for i in todo]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for t in pool.map(_trial_star, jobs):
                    record(t)
        else:
            for job in jobs:
                record(_trial_star(job))
    finally:
        if fh is not None:
            fh.close()

    ordered = tuple(done[i] for i in range(trials))
    return McReport(
        trials=ordered,
        nominal_snr_db=nominal.snr.snr_db,
        f_n=design.f_n,
        nominal_f_hat_n=nominal.f_hat_n,
        spec=spec,
    )


# -- export -------------------------------------------------------------------


def report_to_csv(report: McReport, path) -> None:
    """One row per trial: ``index,stable,snr_db,f_hat_n,seed``."""
    with open(path, "w") as fh:
        fh.write("index,stable,snr_db,f_hat_n,seed\n")
        for t in report.trials:
            snr = "" if t.snr_db is None else repr(t.snr_db)
            fh.write(f"{t.index},{int(t.stable)},{snr},{'' if t.f_hat_n is None else repr(t.f_hat_n)},{t.seed}\n")


def snr_edges(lo: float = -8.0, hi: float = 4.0, width: float = 0.5) -> np.ndarray:
    """Bin edges for the SNR-deviation histogram [dB]."""
    return np.linspace(lo, hi, int(round((hi - lo) / width)) + 1)


def f_hat_edges(lo: float = 0.90, hi: float = 1.10, width: float = 0.01) -> np.ndarray:
    """Bin edges for the ``f_hat_n / f_n`` histogram."""
    return np.linspace(lo, hi, int(round((hi - lo) / width)) + 1)


def histogram_to_csv(values: Iterable[float], edges, path, column: str) -> None:
    """Histogram CSV with columns ``<column>_lo,<column>_hi,count``.

    Values outside the edges are clipped into the outermost bins so that
    counts always sum to the number of values.
    """
    edges = np.asarray(edges, dtype=float)
    v = np.clip(np.asarray(list(values), dtype=float), edges[0], edges[-1])
    counts, _ = np.histogram(v, bins=edges)
    with open(path, "w") as fh:
        fh.write(f"{column}_lo,{column}_hi,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{lo:.6g},{hi:.6g},{int(c)}\n")


def write_report(report: McReport, directory, snr_bins=None, f_hat_bins=None) -> None:
    """Trial CSV, both histograms and a JSON summary into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    report_to_csv(report, os.path.join(directory, "trials.csv"))
    histogram_to_csv(report.delta_snr(), snr_edges() if snr_bins is None else snr_bins,
                     os.path.join(directory, "hist_snr.csv"), "delta_snr_db")
    histogram_to_csv(report.f_hat_ratio(), f_hat_edges() if f_hat_bins is None else f_hat_bins,
                     os.path.join(directory, "hist_f_hat.csv"), "f_hat_ratio")
    with open(os.path.join(directory, "summary.json"), "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")

