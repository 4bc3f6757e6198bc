"""Command-line driver: design -> synthesize -> identify, plus the bundled 2x2 reproduction.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

import os

# cap BLAS threads before numpy loads
_THREADS = os.environ.get("SPECFIM_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import copy  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys as _sys  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass  # noqa: E402
from importlib import resources  # noqa: E402
from pathlib import Path  # noqa: E402

import jsonschema  # noqa: E402
import numpy as np  # noqa: E402

from .basis import BasisSpec  # noqa: E402
from .bounds import DesignResult, design_forms, load_design, save_design  # noqa: E402
from .convex_kernel import CRITERIA  # noqa: E402
from .exceptions import ConfigError, NumericFailure  # noqa: E402
from .fim import build_forms, spectrum_at  # noqa: E402
from .ident import ExperimentRecord, auto_noise_std, compare, estimate, format_report, simulate  # noqa: E402
from .model import ParameterIndex, load_system  # noqa: E402
from .synth import read_signals_csv, synthesize, write_signals_csv, write_spectrum_csv  # noqa: E402

log = logging.getLogger("specfim")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SPECTRUM_GRID = 512

_POS = {"type": "number", "exclusiveMinimum": 0}
_CAPS = {"type": "array", "items": {"anyOf": [_POS, {"type": "null"}]}}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["system", "basis", "budgets"],
    "additionalProperties": False,
    "properties": {
        "system": {"type": "string"},
        "nominal": {"type": "string"},
        "criterion": {"enum": list(CRITERIA)},
        "basis": {
            "type": "object",
            "additionalProperties": False,
            "required": ["m"],
            "properties": {
                "kind": {"enum": ["chebyshev", "legendre", "monomial"]},
                "m": {"type": "integer", "minimum": 0},
                "wc": _POS,
                "n_q": {"type": "integer", "minimum": 4},
            },
        },
        "budgets": {
            "type": "object",
            "additionalProperties": False,
            "required": ["K_u", "K_y"],
            "properties": {
                "K_u": _POS,
                "K_y": _POS,
                "noise_offset": {"type": "boolean"},
                "port_caps": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"input": _CAPS, "output": _CAPS},
                },
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iter": {"type": "integer", "minimum": 1},
                "tol": _POS,
                "seeds": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "averaging": {"type": ["boolean", "null"]},
                "face_reduction": {"type": "boolean"},
            },
        },
        "synthesis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "N_f": {"type": "integer", "minimum": 64},
                "dt": _POS,
                "n_samples": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "phases": {"enum": ["uniform", "gaussian"]},
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["auto", "fixed", "none"]},
                "std": {"type": "number", "minimum": 0},
                "fraction": _POS,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "identify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "init": {"enum": ["nominal", "none"]},
                "n_iter": {"type": "integer", "minimum": 1},
                "discard_periods": {"type": "integer", "minimum": 0},
            },
        },
        "output": {"type": "string"},
    },
}

DEFAULTS = {
    "criterion": "D",
    "basis": {"kind": "chebyshev", "wc": 1.0, "n_q": 256},
    "budgets": {"noise_offset": True, "port_caps": None},
    "bounds": {"max_iter": 100, "tol": 1e-6, "seeds": 10, "seed": 0, "averaging": None, "face_reduction": True},
    "synthesis": {"N_f": 2048, "dt": None, "n_samples": None, "seed": 0, "phases": "uniform"},
    "noise": {"mode": "auto", "std": 0.0, "fraction": 0.1, "seed": 0},
    "identify": {"init": "nominal", "n_iter": 20, "discard_periods": 1},
    "output": "specfim_out",
}


@dataclass
class RunConfig:
    raw: dict
    base: Path
    system_path: Path
    nominal_path: Path

    @property
    def criterion(self):
        return self.raw["criterion"]

    @property
    def basis(self):
        b = self.raw["basis"]
        return BasisSpec(b["kind"], b["m"], b["wc"], b["n_q"])

    @property
    def out(self):
        return Path(self.raw["output"])

    def section(self, name):
        return self.raw[name]

    def actual(self):
        return load_system(self.system_path)

    def nominal(self):
        return load_system(self.nominal_path)


def _merge(defaults, cfg):
    out = copy.deepcopy(defaults)
    for key, val in cfg.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key].update(val)
        else:
            out[key] = val
    return out


def load_config(path=None, data=None, base=None):
    """Validate a JSON run configuration and resolve its file references."""
    if data is None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base = path.parent
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    problems = sorted(validator.iter_errors(data), key=lambda e: list(e.path))
    if problems:
        msgs = [f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in problems]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(msgs))
    raw = _merge(DEFAULTS, data)
    base = Path(base or ".")
    paths = []
    for key in ("system", "nominal"):
        name = raw.get(key, raw["system"])
        p = Path(name)
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise ConfigError(f"{key}: file {p} not found")
        paths.append(p)
    cfg = RunConfig(raw, base, *paths)
    BasisSpec(**{"kind": raw["basis"]["kind"], "order": raw["basis"]["m"], "wc": raw["basis"]["wc"],
                 "n_q": raw["basis"]["n_q"]})
    return cfg


def bundled_config():
    ref = resources.files("specfim") / "data" / "paper_config.json"
    with resources.as_file(ref) as p:
        return load_config(p)


def _apply_overrides(cfg, args):
    raw = cfg.raw
    if getattr(args, "criterion", None):
        raw["criterion"] = args.criterion
    if getattr(args, "seed", None) is not None:
        raw["bounds"]["seed"] = args.seed
        raw["synthesis"]["seed"] = args.seed
        raw["noise"]["seed"] = args.seed
    if getattr(args, "out", None):
        raw["output"] = args.out
    return cfg


def _forms(cfg, sys_nom):
    b = cfg.section("budgets")
    return build_forms(sys_nom, ParameterIndex.from_system(sys_nom), cfg.basis, b["K_u"], b["K_y"],
                       noise_offset=b["noise_offset"], port_caps=b.get("port_caps"))


def _design_opts(cfg):
    b = cfg.section("bounds")
    workers = int(os.environ.get("SPECFIM_THREADS", "1") or 1)
    return dict(n_seeds=b["seeds"], seed=b["seed"], max_iter=b["max_iter"], tol=b["tol"],
                averaging=b["averaging"], face_reduction=b["face_reduction"], workers=max(1, workers))


def run_design(cfg):
    """Compute the design for the nominal system; returns ``(DesignResult, forms)``."""
    sys_nom = cfg.nominal()
    forms = _forms(cfg, sys_nom)
    return design_forms(forms, cfg.criterion, **_design_opts(cfg)), forms


def spectrum_grid(result, spec, n=SPECTRUM_GRID):
    omega = np.linspace(0.0, spec.wc, n)
    return omega, spectrum_at(result.Hc, spec, omega / spec.wc)


def cmd_design(cfg, quiet=False):
    result, _ = run_design(cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    save_design(result, out / "design.json")
    d = json.loads((out / "design.json").read_text())
    d["basis"] = {"kind": cfg.basis.kind, "m": cfg.basis.order, "wc": cfg.basis.wc, "n_q": cfg.basis.n_q}
    (out / "design.json").write_text(json.dumps(d, indent=2))
    omega, phi = spectrum_grid(result, cfg.basis)
    write_spectrum_csv(omega, phi.astype(complex), out / "spectrum.csv")
    if not quiet:
        print(f"criterion {result.criterion}: lower {result.lower:.10g}  upper {result.upper:.10g}  "
              f"rel_gap {result.rel_gap:.3e}")
    return result


def _design_basis(d, cfg):
    b = d.get("basis")
    if b is None:
        return cfg.basis
    return BasisSpec(b["kind"], b["m"], b["wc"], b["n_q"])


def cmd_synthesize(cfg, design_path=None, quiet=False):
    out = cfg.out
    design_path = Path(design_path) if design_path else out / "design.json"
    if not design_path.is_file():
        raise ConfigError(f"design file {design_path} not found; run 'design' first")
    d = json.loads(design_path.read_text())
    result = DesignResult.from_dict(d)
    spec = _design_basis(d, cfg)
    s = cfg.section("synthesis")
    sig = synthesize(result.Hc, spec, N_f=s["N_f"], dt=s["dt"], n_samples=s["n_samples"], seed=s["seed"],
                     phases=s["phases"])
    out.mkdir(parents=True, exist_ok=True)
    write_signals_csv(sig, out / "signals_u.csv")
    if not quiet:
        print(f"wrote {sig.n_samples} samples x {sig.n_channels} channels (dt={sig.dt:.6g}, "
              f"imaginary residue {sig.imag_residue:.2e})")
    return sig


def _period_samples(cfg, dt):
    s = cfg.section("synthesis")
    period = 2 * np.pi * s["N_f"] / (cfg.basis.wc * dt)
    k = int(round(period))
    if abs(period - k) > 1e-6 * period:
        raise ConfigError(f"excitation period {period:.6f} samples is not an integer; choose dt so that "
                          f"2*pi*N_f/(wc*dt) is whole")
    return k


def cmd_identify(cfg, signals_path=None, quiet=False):
    out = cfg.out
    signals_path = Path(signals_path) if signals_path else out / "signals_u.csv"
    if not signals_path.is_file():
        raise ConfigError(f"signal file {signals_path} not found; run 'synthesize' first")
    u = read_signals_csv(signals_path)
    actual, nominal = cfg.actual(), cfg.nominal()
    if u.n_channels != actual.r:
        raise ConfigError(f"signal file has {u.n_channels} channels but the system has {actual.r} inputs")
    period = _period_samples(cfg, u.dt)
    nz = cfg.section("noise")
    if nz["mode"] == "none":
        std = 0.0
    elif nz["mode"] == "fixed":
        std = nz["std"]
    else:
        std = auto_noise_std(simulate(actual, u), nz["fraction"])
    y = simulate(actual, u, std, seed=nz["seed"])
    idc = cfg.section("identify")
    init = nominal if idc["init"] == "nominal" else None
    orders = [[(len(actual[i, j].num) - 1, len(actual[i, j].den) - 1) for j in range(actual.r)]
              for i in range(actual.p)]
    est = estimate(u, y, orders=orders, period=period, init=init, n_iter=idc["n_iter"],
                   discard=idc["discard_periods"])
    report = compare(est.system, actual)
    out.mkdir(parents=True, exist_ok=True)
    payload = est.to_dict()
    payload["noise_std"] = std
    payload["noise_seed"] = nz["seed"]
    payload["report"] = report
    (out / "estimate.json").write_text(json.dumps(payload, indent=2))
    (out / "report.txt").write_text(format_report(report))
    ExperimentRecord(u, y, [std] * actual.p, {"synthesis": cfg.section("synthesis")["seed"], "noise": nz["seed"]},
                     actual, nominal, period).save(out / "experiment")
    if not quiet:
        print(format_report(report), end="")
    return est, report


def cmd_repro_paper(cfg=None, quiet=False):
    """Bounds for all four criteria on the bundled (or given) configuration."""
    cfg = cfg or bundled_config()
    sys_nom = cfg.nominal()
    forms = _forms(cfg, sys_nom)
    rows = []
    for crit in CRITERIA:
        t0 = time.perf_counter()
        res = design_forms(forms, crit, **_design_opts(cfg))
        rows.append({"criterion": crit, "lower": res.lower, "upper": res.upper, "rel_gap": res.rel_gap,
                     "rank1_extracted": res.rank1_extracted, "seconds": time.perf_counter() - t0})
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "repro.json").write_text(json.dumps(rows, indent=2))
    if not quiet:
        print(f"{'crit':>4} {'lower':>16} {'upper':>16} {'rel_gap':>10}")
        for r in rows:
            print(f"{r['criterion']:>4} {r['lower']:16.10g} {r['upper']:16.10g} {r['rel_gap']:10.2e}")
    return rows


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--criterion", choices=CRITERIA, type=str.upper, help="override the configured criterion")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress the summary printout")

    parser = argparse.ArgumentParser(prog="specfim", description="Spectral-factor optimal input design.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("design", parents=[common], help="compute bounds and the design; writes design.json, spectrum.csv")
    p = sub.add_parser("synthesize", parents=[common], help="realize the design as signals_u.csv")
    p.add_argument("--design", help="design.json (default: <out>/design.json)")
    p = sub.add_parser("identify", parents=[common], help="simulate, estimate and compare")
    p.add_argument("--signals", help="input CSV (default: <out>/signals_u.csv)")
    sub.add_parser("repro-paper", parents=[common], help="bounds for D, A, E, T on the bundled 2x2 system")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.command == "repro-paper":
            cfg = bundled_config()
        else:
            raise ConfigError("--config is required for this command")
        cfg = _apply_overrides(cfg, args)
        if args.command == "design":
            cmd_design(cfg, args.quiet)
        elif args.command == "synthesize":
            cmd_synthesize(cfg, args.design, args.quiet)
        elif args.command == "identify":
            cmd_identify(cfg, args.signals, args.quiet)
        else:
            cmd_repro_paper(cfg, args.quiet)
    except ConfigError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numerical failure: {exc}", file=_sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    _sys.exit(main())
