"""Command line front end.

Subcommands: ``design``, ``run``, ``sweep-notch``, ``coeff-sweep``,
``montecarlo`` and ``selftest``. Experiments are described by one YAML file;
``--set section.key=value`` and the dedicated flags override file keys, which
override the built-in defaults. Frequencies are in units of ``f_s`` unless
written with a ``Hz`` suffix (``"2.5e6 Hz"``); fractions such as ``1/8`` are
accepted.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 self-test
failure.
"""
from __future__ import annotations

import argparse
import copy
from dataclasses import asdict, dataclass
from fractions import Fraction
import json
import logging
import math
import os
import platform
import re
import sys

import numpy as np
import yaml

from . import __version__, analysis, estimator, montecarlo, pipeline, selftest, sim
from .control import DivergedError, InvalidControlError, synthesize_control
from .estimator import CalibrationConfig, CalibrationError
from .system import DesignSpec, InvalidDesignError, design_lowpass, quadrature_transform, system_to_dict

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_SELFTEST = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "design": {"N": 6, "OSR": 8, "f_s": 1.0, "f_n": 0.125, "phi_kappa": math.pi / 3, "tau_dc": 0.0, "v_fs": 1.0},
    "input": {"kind": "quadrature", "f_test": None, "amplitude": 1.0},
    "sim": {"substeps": 32, "method": "rk4", "threshold": 10.0},
    "calibration": {
        "K_h": 512,
        "K_train": 65536,
        "ridge": None,
        "ridge_rel": 1e-6,
        "tol": 1e-8,
        "max_iter": 2000,
        "auto_kh": True,
        "tones": None,
        "span": 1.0,
        "peak": 0.9,
        "seed": 1,
    },
    "analysis": {"nfft": 16384, "segments": 4, "window": "hann", "guard": 3, "band": 1.0, "notch_method": "symmetry"},
    "montecarlo": {
        "trials": 256,
        "p": 0.10,
        "seed": 0,
        "workers": 1,
        "snr_bins": [-8.0, 4.0, 0.5],
        "f_hat_bins": [0.90, 1.10, 0.01],
    },
    "sweep": {"notches": ["1/8", "2/8", "3/8"], "lowpass": False},
    "coeff_sweep": {"beta_T": 0.5, "phi_kappa": 0.0, "tau_dc": 0.0, "points": 256},
    "output": "out",
}

_FREQUENCY_KEYS = {("design", "f_n"), ("input", "f_test")}
_TIME_KEYS = {("design", "tau_dc"), ("coeff_sweep", "tau_dc")}
_HZ = re.compile(r"^\s*([-+0-9.eE/]+)\s*Hz\s*$")


def _number(text) -> float:
    if isinstance(text, bool):
        raise ConfigError(f"expected a number, got {text!r}")
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def parse_frequency(value, f_s: float) -> float | None:
    """Frequency in Hz from a config value (``f_s`` units unless ``Hz`` suffix)."""
    if value is None:
        return None
    if isinstance(value, str):
        m = _HZ.match(value)
        if m:
            return _number(m.group(1))
    return _number(value) * f_s


def parse_time(value, f_s: float) -> float:
    """Time in seconds (``T`` units unless an ``s`` suffix is given)."""
    if isinstance(value, str) and value.strip().endswith("s"):
        return _number(value.strip()[:-1])
    return _number(value) / f_s


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _set_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = yaml.safe_load(text)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment: the raw (merged) document plus typed sub-configs."""

    raw: dict
    design: DesignSpec
    run: pipeline.RunConfig
    kind: str
    mc: montecarlo.PerturbationSpec
    output: str

    def snapshot(self) -> dict:
        return copy.deepcopy(self.raw)


def load_config(path: str | None = None, overrides: dict | None = None, sets=()) -> ExperimentConfig:
    """Merge defaults, the YAML file and overrides; validate everything.

    Raises
    ------
    :py:class:`ConfigError`, :py:class:`qcbadc.system.InvalidDesignError`
        for unknown keys or invalid values.
    """
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
    merged = _merge(DEFAULTS, doc)
    extra: dict = {}
    for key, val in (overrides or {}).items():
        section, name = key.split(".") if "." in key else (key, None)
        if name is None:
            extra[section] = val
        else:
            extra.setdefault(section, {})[name] = val
    for assignment in sets:
        _set_override(extra, assignment)
    merged = _merge(merged, extra)
    return _validate(merged)


def _validate(raw: dict) -> ExperimentConfig:
    d = raw["design"]
    try:
        f_s = _number(d["f_s"])
        design = DesignSpec(
            N=int(_number(d["N"])),
            OSR=_number(d["OSR"]),
            f_s=f_s,
            f_n=parse_frequency(d["f_n"], f_s),
            phi_kappa=_number(d["phi_kappa"]),
            tau_dc=parse_time(d["tau_dc"], f_s),
            v_fs=_number(d["v_fs"]),
        )
        # surfaces control-range errors (e.g. tau_dc >= T) before any compute
        lp = design_lowpass(design)
        synthesize_control(lp.beta, design.omega_n, lp.T, design.phi_kappa, design.tau_dc)
        inp = raw["input"]
        kind = inp["kind"]
        if kind not in ("quadrature", "real"):
            raise ConfigError(f"input.kind must be 'quadrature' or 'real', got {kind!r}")
        c, a, s = raw["calibration"], raw["analysis"], raw["sim"]
        cal = CalibrationConfig(
            K_h=int(c["K_h"]),
            K_train=int(c["K_train"]),
            ridge=None if c["ridge"] is None else _number(c["ridge"]),
            ridge_rel=_number(c["ridge_rel"]),
            tol=_number(c["tol"]),
            max_iter=int(c["max_iter"]),
        )
        training = pipeline.TrainingConfig(
            tones=None if c["tones"] is None else int(c["tones"]),
            span=_number(c["span"]),
            peak=_number(c["peak"]),
            seed=int(c["seed"]),
        )
        run = pipeline.RunConfig(
            sim=sim.SimConfig(num_periods=1, substeps=int(s["substeps"]), method=s["method"],
                              threshold=_number(s["threshold"])),
            calibration=cal,
            training=training,
            nfft=int(a["nfft"]),
            segments=int(a["segments"]),
            window=str(a["window"]),
            guard=int(a["guard"]),
            band=_number(a["band"]),
            notch_method=str(a["notch_method"]),
            auto_kh=bool(c["auto_kh"]),
            test_frequency=parse_frequency(inp["f_test"], f_s),
            test_amplitude=_number(inp["amplitude"]),
        )
        if run.nfft < 16 or run.nfft & (run.nfft - 1):
            raise ConfigError("analysis.nfft must be a power of two >= 16")
        if run.notch_method not in ("symmetry", "parabola"):
            raise ConfigError("analysis.notch_method must be 'symmetry' or 'parabola'")
        if run.segments < 1:
            raise ConfigError("analysis.segments must be >= 1")
        m = raw["montecarlo"]
        mc = montecarlo.PerturbationSpec(p=_number(m["p"]), seed=int(m["seed"]))
        if int(m["trials"]) < 0 or int(m["workers"]) < 1:
            raise ConfigError("montecarlo.trials must be >= 0 and workers >= 1")
        for key in ("snr_bins", "f_hat_bins"):
            lo, hi, w = (_number(v) for v in m[key])
            if not (hi > lo and w > 0):
                raise ConfigError(f"montecarlo.{key} must be [lo, hi, width] with hi > lo, width > 0")
        [parse_frequency(f, f_s) for f in raw["sweep"]["notches"]]
        cs = raw["coeff_sweep"]
        if not 0 < _number(cs["beta_T"]) <= 0.5 or int(cs["points"]) < 1:
            raise ConfigError("coeff_sweep.beta_T must lie in (0, 0.5] and points >= 1")
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return ExperimentConfig(raw=raw, design=design, run=run, kind=kind, mc=mc, output=str(raw["output"]))


# -- output helpers -----------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _write_json(path: str, doc) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_provenance(directory: str, cfg: ExperimentConfig, command: str) -> None:
    """Config snapshot, seeds and versions; no timestamps so reruns are byte-stable."""
    os.makedirs(directory, exist_ok=True)
    _write_json(
        os.path.join(directory, "provenance.json"),
        {
            "command": command,
            "config": cfg.snapshot(),
            "seeds": {"training": cfg.run.training.seed, "montecarlo": cfg.mc.seed},
            "toolkit": {"name": "qcbadc", "version": __version__},
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    )


def design_document(design: DesignSpec) -> dict:
    lp = design_lowpass(design)
    qs = quadrature_transform(lp, design.omega_n)
    ctrl = synthesize_control(lp.beta, design.omega_n, lp.T, design.phi_kappa, design.tau_dc)
    return {
        "system": system_to_dict(design, qs),
        "control": ctrl.to_dict(),
        "f_test": design.f_test,
        "phi_kappa": design.phi_kappa,
        "v_fs": design.v_fs,
    }


def coefficient_table(beta_T: float, points: int, phi_kappa: float = 0.0, tau_dc: float = 0.0) -> np.ndarray:
    """Rows ``(f_n T, kappa T, bar_kappa T, tilde_kappa, bar_tilde_kappa)`` on
    ``f_n T = i / (2 points)``, ``i = 0 .. points - 1`` (unit period)."""
    rows = []
    for i in range(points):
        fT = i / (2 * points)
        c = synthesize_control(beta_T, 2 * math.pi * fT, 1.0, phi_kappa, tau_dc)
        rows.append((fT, c.kappa_phi, c.kbar_phi, c.ktilde_phi, c.kbar_tilde_phi))
    return np.array(rows)


def _report_doc(res: pipeline.RunResult) -> dict:
    return {
        "stable": res.stable,
        "snr_db": res.snr.snr_db,
        "signal_power": res.snr.signal_power,
        "noise_power": res.snr.noise_power,
        "band": list(res.snr.band),
        "f_test": res.f_test,
        "f_hat_n": res.f_hat_n,
        "K_h": res.estimator.K_h,
        "K_h_doubling_delta_db": res.kh_delta_db,
        "max_state": res.max_state,
    }


def _write_run(res: pipeline.RunResult, directory: str, stem: str = "") -> None:
    os.makedirs(directory, exist_ok=True)
    p = lambda name: os.path.join(directory, stem + name)  # noqa: E731
    sim.write_trace(res.test_trace, p("trace.qcbt"))
    if not res.stable:
        return
    estimator.write_filter(res.estimator, p("filter.qcbf"))
    estimator.filter_to_csv(res.estimator, p("filter.csv"))
    with open(p("estimate.csv"), "w") as fh:
        fh.write("k,re,im\n")
        u = np.asarray(res.estimate, dtype=complex)
        for k, v in enumerate(u):
            fh.write(f"{k},{v.real!r},{v.imag!r}\n")
    analysis.spectrum_to_csv(res.spectrum, p("spectrum.csv"), positive_only=False)
    _write_json(p("snr.json"), _report_doc(res))


# -- commands -----------------------------------------------------------------


def cmd_design(cfg: ExperimentConfig, out=None) -> dict:
    out = out or sys.stdout
    doc = design_document(cfg.design)
    write_provenance(cfg.output, cfg, "design")
    _write_json(os.path.join(cfg.output, "design.json"), doc)
    print(yaml.safe_dump(_jsonable(doc), sort_keys=False, default_flow_style=None, width=100), file=out, end="")
    print(f"f_test: {cfg.design.f_test!r} Hz", file=out)
    return doc


def cmd_run(cfg: ExperimentConfig, out=None) -> pipeline.RunResult:
    out = out or sys.stdout
    write_provenance(cfg.output, cfg, "run")
    f_test = cfg.run.test_frequency if cfg.run.test_frequency is not None else cfg.design.f_test
    print(f"f_test: {f_test!r} Hz", file=out)
    res = pipeline.run(cfg.design, cfg.run, kind=cfg.kind)
    _write_run(res, cfg.output)
    if not res.stable:
        raise DivergedError(f"state bound exceeded (max |x| = {res.max_state:.3g})")
    print(f"SNR: {res.snr.snr_db:.2f} dB", file=out)
    print(f"f_hat_n: {res.f_hat_n!r}", file=out)
    print(f"K_h: {res.estimator.K_h}", file=out)
    return res


def cmd_sweep_notch(cfg: ExperimentConfig, out=None) -> list[dict]:
    out = out or sys.stdout
    write_provenance(cfg.output, cfg, "sweep-notch")
    f_s = cfg.design.f_s
    rows = []
    entries = [(parse_frequency(f, f_s), "quadrature") for f in cfg.raw["sweep"]["notches"]]
    if cfg.raw["sweep"]["lowpass"]:
        entries.append((0.0, "real"))
    for i, (f_n, kind) in enumerate(entries):
        design = DesignSpec(**{**asdict(cfg.design), "f_n": f_n})
        res = pipeline.run(design, cfg.run, kind=kind)
        _write_run(res, cfg.output, stem=f"notch{i}_")
        row = {
            "f_n": f_n,
            "kind": kind,
            "stable": res.stable,
            "snr_db": res.snr.snr_db if res.stable else None,
            "f_hat_n": res.f_hat_n,
        }
        rows.append(row)
        print(f"f_n={f_n!r} {kind}: SNR {row['snr_db']}", file=out)
    with open(os.path.join(cfg.output, "sweep.csv"), "w") as fh:
        fh.write("f_n,kind,stable,snr_db,f_hat_n\n")
        for r in rows:
            fh.write(",".join("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else str(r[k])
                              for k in ("f_n", "kind", "stable", "snr_db", "f_hat_n")) + "\n")
    snrs = [r["snr_db"] for r in rows if r["kind"] == "quadrature" and r["snr_db"] is not None]
    if snrs:
        print(f"SNR spread: {max(snrs) - min(snrs):.2f} dB", file=out)
    return rows


def cmd_coeff_sweep(cfg: ExperimentConfig, out=None) -> np.ndarray:
    out = out or sys.stdout
    cs = cfg.raw["coeff_sweep"]
    table = coefficient_table(
        _number(cs["beta_T"]), int(cs["points"]), _number(cs["phi_kappa"]), parse_time(cs["tau_dc"], 1.0)
    )
    write_provenance(cfg.output, cfg, "coeff-sweep")
    path = os.path.join(cfg.output, "coefficients.csv")
    with open(path, "w") as fh:
        fh.write("fpT,kappa,bar_kappa,tilde_kappa,bar_tilde_kappa\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {len(table)} rows to {path}", file=out)
    return table


def cmd_montecarlo(cfg: ExperimentConfig, out=None) -> montecarlo.McReport:
    out = out or sys.stdout
    m = cfg.raw["montecarlo"]
    write_provenance(cfg.output, cfg, "montecarlo")
    print(f"f_test: {cfg.design.f_test!r} Hz", file=out)

    def progress(t):
        logger.info("trial %d: stable=%s snr=%s f_hat=%s", t.index, t.stable, t.snr_db, t.f_hat_n)

    report = montecarlo.run_mc(
        cfg.design,
        trials=int(m["trials"]),
        spec=cfg.mc,
        cfg=cfg.run,
        kind=cfg.kind,
        workers=int(m["workers"]),
        checkpoint=os.path.join(cfg.output, "checkpoint.jsonl"),
        progress=progress,
    )
    montecarlo.write_report(
        report,
        cfg.output,
        snr_bins=montecarlo.snr_edges(*(_number(v) for v in m["snr_bins"])),
        f_hat_bins=montecarlo.f_hat_edges(*(_number(v) for v in m["f_hat_bins"])),
    )
    print(f"unstable: {report.unstable}", file=out)
    print(f"nominal SNR: {report.nominal_snr_db:.2f} dB", file=out)
    print(f"SNR range: {report.snr_range}", file=out)
    print(f"f_hat range: {report.f_hat_range}", file=out)
    return report


def cmd_selftest(cfg: ExperimentConfig | None = None, out=None) -> bool:
    out = out or sys.stdout
    ok = True
    for name, passed, detail in selftest.run_checks():
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}", file=out)
    return ok


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qcbadc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"qcbadc {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", nargs="?", help="YAML experiment file")
        p.add_argument("-o", "--output", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--N", type=int, help="branch order")
        p.add_argument("--OSR", type=float, help="oversampling ratio")
        p.add_argument("--fn", help="notch frequency (f_s units or 'x Hz')")
        p.add_argument("--phi", type=float, help="phi_kappa [rad]")
        return p

    common(sub.add_parser("design", help="print and save the system and control parametrization"))
    p = common(sub.add_parser("run", help="simulate, calibrate, estimate and measure SNR"))
    p.add_argument("--kind", choices=("quadrature", "real"))
    p = common(sub.add_parser("sweep-notch", help="SNR versus notch frequency"))
    p.add_argument("--notches", help="comma separated notch frequencies")
    p.add_argument("--lowpass", action="store_true", help="add the low-pass building block")
    p = common(sub.add_parser("coeff-sweep", help="control coefficients versus f_n T"))
    p.add_argument("--beta-T", type=float)
    p.add_argument("--points", type=int)
    p = common(sub.add_parser("montecarlo", help="component-mismatch robustness batch"))
    p.add_argument("--trials", type=int)
    p.add_argument("--p", type=float, help="relative perturbation half-width")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int)
    p.add_argument("--kind", choices=("quadrature", "real"))
    sub.add_parser("selftest", help="fast structural acceptance checks")
    return parser


def _overrides(args) -> dict:
    o = {}
    pairs = {
        "output": "output", "N": "design.N", "OSR": "design.OSR", "fn": "design.f_n",
        "phi": "design.phi_kappa", "kind": "input.kind", "beta_T": "coeff_sweep.beta_T",
        "points": "coeff_sweep.points", "trials": "montecarlo.trials", "p": "montecarlo.p",
        "seed": "montecarlo.seed", "workers": "montecarlo.workers",
    }
    for attr, key in pairs.items():
        val = getattr(args, attr, None)
        if val is not None:
            o[key] = val
    if getattr(args, "notches", None):
        o["sweep.notches"] = [s.strip() for s in args.notches.split(",") if s.strip()]
    if getattr(args, "lowpass", False):
        o["sweep.lowpass"] = True
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "selftest":
        return EXIT_OK if cmd_selftest() else EXIT_SELFTEST
    try:
        cfg = load_config(args.config, _overrides(args), args.set)
    except (ConfigError, InvalidDesignError, InvalidControlError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    commands = {
        "design": cmd_design,
        "run": cmd_run,
        "sweep-notch": cmd_sweep_notch,
        "coeff-sweep": cmd_coeff_sweep,
        "montecarlo": cmd_montecarlo,
    }
    try:
        commands[args.command](cfg)
    except pipeline.StageError as exc:
        print(f"numerical failure in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DivergedError, CalibrationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, InvalidDesignError, InvalidControlError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
