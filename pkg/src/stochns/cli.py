"""Command line front end: ``stochns <subcommand> [options]``.

Configuration is a TOML file with ``[scheme]``, ``[noise]`` and ``[study]``
tables; command line flags override file values.  The fully resolved
configuration is written as ``config.toml`` into every output directory, and
re-running with ``--config <out>/config.toml`` reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 verification outside its acceptance bands.  Failures print a one-line JSON
record to stderr and, when possible, write ``error.json`` to the output
directory.
"""
import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

from . import __version__

ENV_OUTPUT_ROOT = "STOCHNS_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "stochns-output"

SCHEME_DEFAULTS = {
    "nu": 1.0,
    "T": 1.0,
    "n_steps": 16,
    "n_side": 8,
    "period_L": 1.0,
    "body_force": [0.0, 0.0],
    "diffusion": "sqrt",
    "picard_tol": 1e-10,
    "picard_max": 50,
    "linear_tol": 1e-10,
    "nonlinear_solver": "fixed_point",
    "quad_degree": 6,
    "check_invariants": False,
}
NOISE_DEFAULTS = {"M": 10, "amplitude": 5.0, "vector_valued": False}
STUDY_DEFAULTS = {
    "seed": 0,
    "n_paths": 100,
    "parallel": 1,
    "k_levels": [2.0**-3, 2.0**-4, 2.0**-5, 2.0**-6, 2.0**-7],
    "time_h": 2.0**-5,
    "h_levels": [2.0**-2, 2.0**-3, 2.0**-4, 2.0**-5],
    "space_k": 2.0**-8,
    "n_sides": [8, 16, 32],
    "epsilon": [0.05, 0.1, 0.5, 1.0],
    "kappa0": 1.0,
    "kappa": 1.0,
    "reference": True,
    "plots": True,
}
# the headline configuration; far beyond desk scale
FULL_SCALE = {"n_paths": 1200, "time_h": 2.0**-7, "space_k": 2.0**-9,
              "k_levels": [2.0**-k for k in range(3, 9)], "h_levels": [2.0**-k for k in range(2, 7)]}

SECTIONS = {"scheme": SCHEME_DEFAULTS, "noise": NOISE_DEFAULTS, "study": STUDY_DEFAULTS}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class VerificationFailed(RuntimeError):
    pass


def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


@dataclass
class RunConfig:
    """Resolved configuration: scheme, noise and study tables."""

    scheme: dict = field(default_factory=lambda: copy.deepcopy(SCHEME_DEFAULTS))
    noise: dict = field(default_factory=lambda: copy.deepcopy(NOISE_DEFAULTS))
    study: dict = field(default_factory=lambda: copy.deepcopy(STUDY_DEFAULTS))

    def to_toml(self):
        lines = [f"# resolved stochns {__version__} configuration"]
        for name in SECTIONS:
            lines.append(f"\n[{name}]")
            for key, val in getattr(self, name).items():
                lines.append(f"{key} = {_toml_value(val)}")
        return "\n".join(lines) + "\n"

    def scheme_config(self, **overrides):
        from .noise import DIFFUSIONS, NoiseSpec
        from .stepper import SchemeConfig
        s = dict(self.scheme)
        s.update(overrides)
        noise = NoiseSpec(M=int(self.noise["M"]), basis_amplitude=float(self.noise["amplitude"]),
                          period_L=float(s["period_L"]), vector_valued=bool(self.noise["vector_valued"]))
        return SchemeConfig(
            nu=float(s["nu"]), T=float(s["T"]), n_steps=int(s["n_steps"]), n_side=int(s["n_side"]),
            period_L=float(s["period_L"]), noise=noise, diffusion=DIFFUSIONS[s["diffusion"]](),
            body_force=tuple(float(v) for v in s["body_force"]), picard_tol=float(s["picard_tol"]),
            picard_max=int(s["picard_max"]), linear_tol=float(s["linear_tol"]),
            nonlinear_solver=s["nonlinear_solver"], quad_degree=int(s["quad_degree"]),
            check_invariants=bool(s["check_invariants"]))


def _coerce(section, key, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or int(value) != value:
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} must be a number, got {value!r}") from None
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{where} must be a non-empty list, got {value!r}")
        kind = type(default[0])
        try:
            return [kind(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(f"{where} must be a list of {kind.__name__}, got {value!r}") from None
    return str(value)


def parse_level(text):
    """A level given as a float, a fraction ``1/6`` or as ``2^-k`` / ``2**-k``."""
    t = str(text).strip().replace("**", "^")
    try:
        if "/" in t:
            num, den = t.split("/", 1)
            return float(num) / float(den)
        if "^" in t:
            base, exp = t.split("^", 1)
            return float(base) ** float(exp)
        return float(t)
    except ValueError:
        raise ConfigError(f"cannot read level {text!r}; use a number or 2^-k") from None


def parse_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` ({section: {key: value}})."""
    cfg = RunConfig()
    layers = []
    if path is not None:
        layers.append(_load_toml(path))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for section, table in layer.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}")
            if not isinstance(table, dict):
                raise ConfigError(f"[{section}] must be a table")
            defaults = SECTIONS[section]
            target = getattr(cfg, section)
            for key, value in table.items():
                if key not in defaults:
                    raise ConfigError(f"unknown key {key!r} in [{section}]; known keys: {sorted(defaults)}")
                target[key] = _coerce(section, key, value, defaults[key])
    validate(cfg)
    return cfg


def validate(cfg):
    from .experiments import check_space_levels, check_time_levels, sides_for, steps_for
    from .noise import DIFFUSIONS
    from .stepper import NONLINEAR_SOLVERS
    s, st = cfg.scheme, cfg.study
    if s["diffusion"] not in DIFFUSIONS:
        raise ConfigError(f"[scheme] diffusion must be one of {sorted(DIFFUSIONS)}")
    if s["nonlinear_solver"] not in NONLINEAR_SOLVERS:
        raise ConfigError(f"[scheme] nonlinear_solver must be one of {list(NONLINEAR_SOLVERS)}")
    if len(s["body_force"]) != 2:
        raise ConfigError("[scheme] body_force needs two components")
    if st["n_paths"] < 1:
        raise ConfigError("[study] n_paths must be at least 1")
    if st["parallel"] < 1:
        raise ConfigError("[study] parallel must be at least 1")
    try:
        cfg.scheme_config()
        check_time_levels(s["T"], st["k_levels"])
        check_space_levels(s["period_L"], st["h_levels"])
        sides_for(s["period_L"], st["time_h"])
        steps_for(s["T"], st["space_k"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if any(n < 2 for n in st["n_sides"]):
        raise ConfigError("[study] n_sides entries must be >= 2")


# ---------------------------------------------------------------- subcommands

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v))


def cmd_run_path(cfg, out, args):
    from .noise import WienerPath
    from .stepper import run_path
    sc = cfg.scheme_config()
    path = WienerPath.for_spec(sc.noise, cfg.study["seed"], sc.n_steps, sc.T, args.path_index)
    summary = run_path(sc, path)
    rows = []
    for n in range(sc.n_steps):
        rows.append([n + 1, _fmt((n + 1) * sc.k), _fmt(summary.l2_history[n]), _fmt(summary.h1_history[n]),
                     _fmt(summary.lap_history[n]), int(summary.picard_iterations[n])])
    _write_csv(os.path.join(out, "summary.csv"),
               ["step", "time", "l2", "h1", "laplacian_l2", "nonlinear_iterations"], rows)
    _write_csv(os.path.join(out, "maxima.csv"), ["quantity", "value"], [
        ["max_l2_sq", _fmt(summary.max_l2_sq)], ["max_h1_sq", _fmt(summary.max_h1_sq)],
        ["max_laplacian_sq", _fmt(summary.max_lap_sq)]])
    if args.dump_mesh:
        from .mesh import build_periodic_uniform_mesh
        build_periodic_uniform_mesh(sc.n_side, sc.period_L).dump(os.path.join(out, "mesh.txt"))
    return 0


def _write_study(table, out, plots):
    from .experiments import (bootstrap_slopes, fit_rate, write_loglog_svg, write_rates_csv, write_samples_csv,
                              write_table_csv)
    write_table_csv(table, os.path.join(out, "errors.csv"))
    write_samples_csv(table, os.path.join(out, "path_errors.csv"))
    fits = fit_rate(table) if len(table.levels) >= 3 else {}
    intervals = bootstrap_slopes(table, seed=table.master_seed) if fits and table.n_paths > 1 else {}
    write_rates_csv(table.axis, fits, os.path.join(out, "rates.csv"), intervals)
    if plots:
        try:
            write_loglog_svg(table, os.path.join(out, f"{table.axis}_convergence.svg"))
        except ValueError as exc:
            logging.getLogger(__name__).warning("plot skipped: %s", exc)
    if table.failures:
        _write_csv(os.path.join(out, "failures.csv"), ["path_index", "message"], table.failures)
    for f in fits.values():
        ci = intervals.get(f.estimator)
        extra = f" (95% path-bootstrap interval {ci[0]:.3f} to {ci[1]:.3f})" if ci else ""
        print(f"{table.axis} {f.estimator}: slope {f.slope:.3f}{extra}")
    return 0


def cmd_convergence_time(cfg, out, args):
    from .experiments import sides_for, time_convergence_study
    st = cfg.study
    sc = cfg.scheme_config(n_side=sides_for(cfg.scheme["period_L"], st["time_h"]))
    table = time_convergence_study(sc, st["k_levels"], st["n_paths"], st["seed"], st["parallel"])
    return _write_study(table, out, st["plots"])


def cmd_convergence_space(cfg, out, args):
    from .experiments import space_convergence_study, steps_for
    st = cfg.study
    sc = cfg.scheme_config(n_steps=steps_for(cfg.scheme["T"], st["space_k"]))
    table = space_convergence_study(sc, st["h_levels"], st["n_paths"], st["seed"], st["parallel"])
    return _write_study(table, out, st["plots"])


def cmd_deterministic_verify(cfg, out, args):
    from .experiments import deterministic_verify
    report = deterministic_verify(cfg.scheme_config(), cfg.study["n_sides"])
    rows = []
    for i, n in enumerate(report.n_sides):
        for name, errs in report.errors.items():
            rows.append(["space", _fmt(cfg.scheme["period_L"] / n), name, _fmt(errs[i])])
    _write_csv(os.path.join(out, "errors.csv"), ["axis", "level", "quantity", "error"], rows)
    _write_csv(os.path.join(out, "rates.csv"), ["quantity", "slope", "target", "tolerance", "in_band"],
               [[name, _fmt(report.rates[name].slope), report.bands[name][0], report.bands[name][1],
                 report.in_band(name)] for name in report.bands])
    for name in report.bands:
        print(f"{name}: order {report.rates[name].slope:.3f} "
              f"({'ok' if report.in_band(name) else 'OUT OF BAND'})")
    if not report.passed:
        raise VerificationFailed("deterministic orders outside the acceptance bands")
    return 0


def cmd_diagnostics(cfg, out, args):
    from .experiments import indicator_study
    st = cfg.study
    res = indicator_study(cfg.scheme_config(), st["n_paths"], st["seed"], st["epsilon"], st["kappa0"],
                          st["kappa"], reference=st["reference"], parallel=st["parallel"])
    rows = [[_fmt(eps), name, _fmt(frac), st["n_paths"], st["seed"]]
            for eps, fr in res.items() for name, frac in fr.items()]
    _write_csv(os.path.join(out, "indicators.csv"), ["epsilon", "sample_set", "fraction", "n_paths", "seed"], rows)
    return 0


COMMANDS = {
    "run-path": cmd_run_path,
    "convergence-time": cmd_convergence_time,
    "convergence-space": cmd_convergence_space,
    "deterministic-verify": cmd_deterministic_verify,
    "diagnostics": cmd_diagnostics,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [scheme], [noise], [study] tables")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    common.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT_ROOT}/<subcommand>)")
    common.add_argument("--parallel", type=int, help="worker processes for path parallelism")
    common.add_argument("--epsilon", nargs="+", type=float, help="epsilon values for the sample sets")
    common.add_argument("--no-plots", action="store_true", help="skip SVG output")
    common.add_argument("--full-scale", action="store_true",
                        help="use the headline (non desk-scale) study sizes")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="stochns", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    rp = sub.add_parser("run-path", parents=[common], help="simulate one path and write its norm history")
    rp.add_argument("--steps", type=int, help="number of time steps")
    rp.add_argument("--n-side", type=int, help="cells per side")
    rp.add_argument("--path-index", type=int, default=0)
    rp.add_argument("--dump-mesh", action="store_true", help="also write mesh.txt")

    ct = sub.add_parser("convergence-time", parents=[common], help="time-step convergence study")
    ct.add_argument("--k-levels", nargs="+", help="time steps, e.g. 2^-3 2^-4 ...")
    ct.add_argument("--h", dest="time_h", help="fixed mesh level")

    cs = sub.add_parser("convergence-space", parents=[common], help="mesh convergence study")
    cs.add_argument("--h-levels", nargs="+", help="mesh levels (cell sizes), e.g. 2^-2 2^-3 ...")
    cs.add_argument("--k", dest="space_k", help="fixed time step")

    dv = sub.add_parser("deterministic-verify", parents=[common], help="manufactured-solution check")
    dv.add_argument("--n-sides", nargs="+", type=int)

    dg = sub.add_parser("diagnostics", parents=[common], help="sample-set indicator fractions")
    dg.add_argument("--steps", type=int)
    dg.add_argument("--n-side", type=int)
    dg.add_argument("--kappa0", type=float)
    dg.add_argument("--kappa", type=float)
    dg.add_argument("--no-reference", action="store_true", help="skip the (h/2, k/2) reference runs")
    return p


def _overrides(args):
    scheme, study = {}, {}
    if args.full_scale:
        study.update(FULL_SCALE)
    for flag, key in (("seed", "seed"), ("paths", "n_paths"), ("parallel", "parallel"), ("epsilon", "epsilon"),
                      ("n_sides", "n_sides"), ("kappa0", "kappa0"), ("kappa", "kappa")):
        v = getattr(args, flag, None)
        if v is not None:
            study[key] = v
    for flag in ("k_levels", "h_levels"):
        v = getattr(args, flag, None)
        if v is not None:
            study[flag] = [parse_level(t) for t in v]
    for flag in ("time_h", "space_k"):
        v = getattr(args, flag, None)
        if v is not None:
            study[flag] = parse_level(v)
    if getattr(args, "steps", None) is not None:
        scheme["n_steps"] = args.steps
    if getattr(args, "n_side", None) is not None:
        scheme["n_side"] = args.n_side
    if getattr(args, "no_reference", False):
        study["reference"] = False
    if args.no_plots:
        study["plots"] = False
    return {k: v for k, v in (("scheme", scheme), ("study", study)) if v}


def _error_record(exc, command, code):
    rec = {"status": "error", "command": command, "exit_code": code,
           "error": type(exc).__name__, "message": str(exc)}
    for attr in ("step", "residual", "block"):
        v = getattr(exc, attr, None)
        if v is not None:
            rec[attr] = v
    failures = getattr(exc, "failures", None)
    if failures:
        rec["failures"] = [list(f) if isinstance(f, tuple) else f for f in failures][:20]
    return rec


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or os.path.join(os.environ.get(ENV_OUTPUT_ROOT, DEFAULT_OUTPUT_ROOT), args.command)
    code = 0
    try:
        cfg = parse_config(args.config, _overrides(args))
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.toml"), "w") as fh:
            fh.write(cfg.to_toml())
        code = COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        code = 2
        rec = _error_record(exc, args.command, code)
    except VerificationFailed as exc:
        code = 3
        rec = _error_record(exc, args.command, code)
    except Exception as exc:  # reported as a machine-readable record
        code = 1
        rec = _error_record(exc, args.command, code)
    if code:
        line = json.dumps(rec, default=str)
        print(line, file=sys.stderr)
        if os.path.isdir(out):
            with open(os.path.join(out, "error.json"), "w") as fh:
                fh.write(line + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
