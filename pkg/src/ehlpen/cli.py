"""Command-line entry point: ``ehlpen run | convergence | kernel-check``.

Runs are driven by a YAML config (JSON is accepted too).  Every key has a
default in :data:`DEFAULTS`; the parsed config is echoed in canonical form
next to the artifacts so a run can be reproduced from its output directory.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .assembly import CONVECTION_SCHEMES, PenaltyConfig
from .deformation import SingularRule, build_kernel, singular_panel_integral
from .lubricant import DEFAULT_DOMAIN, case_from_moes
from .mesh import InvalidConfiguration, build_mesh
from .solver import SolverConfig, solve_multilevel
from .verify import ERROR_TRANSFERS, EHLStudy, StudyFailed, convergence_study, poisson_manufactured

log = logging.getLogger("ehlpen")

SINGULAR_EXACT = 2.0 * math.log(1.0 + math.sqrt(2.0))

# single source of every default used by the command line
DEFAULTS = {
    "case": {"M": 7.0, "L": 10.0, "h00_init": None, "domain_bounds": list(DEFAULT_DOMAIN)},
    "mesh": {"nx": 64, "ny": 64, "coarsest": 16},
    "kernel": {"theta": 0.5, "n_levels": 12, "m": 4, "cache_dir": None},
    "penalty": {"eps_pen": 1.0e-6, "alpha1": None, "convection": "upwind2"},
    "solver": {
        "max_iters": 80,
        "tol_res": 1.0e-8,
        "tol_force": 1.0e-9,
        "tol_neg": 1.0e-4,
        "damping": 0.5,
        "omega_min": 1.0 / 256.0,
        "growth_limit": 10.0,
        "h00_update": "coupled",
        "h00_gain": 0.05,
        "truncation": "adjacent-only",
        "linear": "auto",
        "dense_limit": 1500,
        "krylov_tol": 1.0e-10,
        "continuation": [],
        "l_ramp": 2.5,
    },
    "convergence": {"problem": "manufactured", "meshes": [16, 32, 64, 128], "reference_n": 256,
                    "transfer": "restrict"},
    "kernel_check": {"thetas": [0.25, 0.5, 0.75], "levels": [1, 2, 4, 8, 12, 16, 20], "ms": [2, 4, 6]},
    "output": {"directory": "out", "formats": ["csv", "json"]},
}

_NULLABLE = {("case", "h00_init"), ("penalty", "alpha1"), ("kernel", "cache_dir")}
_CHOICES = {
    ("penalty", "convection"): CONVECTION_SCHEMES,
    ("solver", "h00_update"): ("coupled", "staggered"),
    ("solver", "truncation"): ("none", "adjacent-only"),
    ("solver", "linear"): ("auto", "dense", "sparse", "krylov"),
    ("convergence", "problem"): ("manufactured", "ehl"),
    ("convergence", "transfer"): ERROR_TRANSFERS,
}


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""


def _check_value(section, key, value, default):
    name = "%s.%s" % (section, key)
    if value is None:
        if (section, key) in _NULLABLE:
            return None
        raise ConfigError("config key '%s' must not be null" % name)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("config key '%s' must be a boolean" % name)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("config key '%s' must be an integer, got %r" % (name, value))
        return value
    if isinstance(default, float) or (section, key) in _NULLABLE and key != "cache_dir":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("config key '%s' must be a number, got %r" % (name, value))
        return float(value)
    if isinstance(default, str) or key == "cache_dir":
        if not isinstance(value, str):
            raise ConfigError("config key '%s' must be a string, got %r" % (name, value))
        choices = _CHOICES.get((section, key))
        if choices and value not in choices:
            raise ConfigError("config key '%s' must be one of %s, got %r" % (name, list(choices), value))
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError("config key '%s' must be a list, got %r" % (name, value))
        return _check_list(section, key, value)
    raise ConfigError("config key '%s' has unsupported value %r" % (name, value))


def _check_list(section, key, value):
    name = "%s.%s" % (section, key)
    if key == "continuation":
        out = []
        for item in value:
            if isinstance(item, dict) and len(item) == 1:
                (k, v), = item.items()
                if k not in ("eps", "M", "L") or isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError("config key '%s' has a malformed step %r" % (name, item))
                out.append({k: float(v)})
            else:
                raise ConfigError("config key '%s' steps must look like {eps: 1e-2}, got %r" % (name, item))
        return out
    if key == "formats":
        if not all(isinstance(v, str) for v in value):
            raise ConfigError("config key '%s' must be a list of strings" % name)
        return list(value)
    if key == "meshes":
        out = []
        for v in value:
            if isinstance(v, int) and not isinstance(v, bool):
                out.append(v)
            elif isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) for x in v):
                out.append(list(v))
            else:
                raise ConfigError("config key '%s' entries must be N or [NX, NY], got %r" % (name, v))
        return out
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError("config key '%s' must be a list of numbers" % name)
    if key in ("levels", "ms"):
        if not all(isinstance(v, int) for v in value):
            raise ConfigError("config key '%s' must be a list of integers" % name)
        return list(value)
    return [float(v) for v in value]


def parse_config(text: str) -> dict:
    """Parse config text into a complete, validated dictionary."""
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError("config is not valid YAML: %s" % exc) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError("unknown config section '%s'" % section)
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError("config section '%s' must be a mapping" % section)
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError("unknown config key '%s.%s'" % (section, key))
            cfg[section][key] = _check_value(section, key, value, DEFAULTS[section][key])
    bounds = cfg["case"]["domain_bounds"]
    if len(bounds) != 4:
        raise ConfigError("config key 'case.domain_bounds' needs 4 numbers [x0, x1, y0, y1]")
    return cfg


def canonical(cfg: dict) -> str:
    """Canonical YAML text (sorted keys, block style)."""
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False, allow_unicode=True)


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc)) from exc
    return parse_config(text)


# -- object construction ---------------------------------------------------------
def build_case(cfg):
    c = cfg["case"]
    try:
        return case_from_moes(c["M"], c["L"], tuple(c["domain_bounds"]), c["h00_init"])
    except InvalidConfiguration as exc:
        raise ConfigError("config section 'case': %s" % exc) from exc


def build_penalty(cfg):
    p = cfg["penalty"]
    try:
        return PenaltyConfig(eps_pen=p["eps_pen"], alpha1=p["alpha1"], convection=p["convection"])
    except ValueError as exc:
        raise ConfigError("config section 'penalty': %s" % exc) from exc


def build_solver_config(cfg):
    s = dict(cfg["solver"])
    s["continuation"] = tuple(next(iter(d.items())) for d in s["continuation"])
    try:
        return SolverConfig(**s)
    except InvalidConfiguration as exc:
        raise ConfigError("config section 'solver': %s" % exc) from exc


def build_rule(cfg):
    k = cfg["kernel"]
    try:
        return SingularRule(theta=k["theta"], n_levels=k["n_levels"], m=k["m"])
    except InvalidConfiguration as exc:
        raise ConfigError("config section 'kernel': %s" % exc) from exc


# -- artifacts ---------------------------------------------------------------------
def _fmt(v) -> str:
    return repr(float(v))


def write_field_csv(path, mesh, values, name):
    with open(path, "w") as fh:
        fh.write("x,y,%s\n" % name)
        for (x, y), v in zip(mesh.vertices, values):
            fh.write("%s,%s,%s\n" % (_fmt(x), _fmt(y), _fmt(v)))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _thread_limit():
    value = os.environ.get("EHL_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError("EHL_THREADS must be a positive integer, got %r" % value)
    if n < 1:
        raise ConfigError("EHL_THREADS must be a positive integer, got %r" % value)
    return n


# -- commands ----------------------------------------------------------------------
def cmd_run(cfg, out_dir) -> int:
    case = build_case(cfg)
    pen = build_penalty(cfg)
    scfg = build_solver_config(cfg)
    rule = build_rule(cfg)
    nx, ny = cfg["mesh"]["nx"], cfg["mesh"]["ny"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(canonical(cfg))
    kernels = {}

    results = solve_multilevel(
        case, nx, ny, scfg, pen, coarsest=cfg["mesh"]["coarsest"], return_levels=True,
        kernels=_KernelFactory(case.domain_bounds, rule, cfg["kernel"]["m"], cfg["kernel"]["cache_dir"], kernels),
    )
    final = results[-1]
    lines = []
    for res in results:
        lines.extend("mesh=%dx%d %s" % (res.mesh.nx, res.mesh.ny, line) for line in res.state.log_lines)
    (out / "iterations.log").write_text("\n".join(lines) + "\n")
    summary = final.summary()
    summary.update({"nx": final.mesh.nx, "ny": final.mesh.ny, "message": final.message})
    if not final.converged:
        _write_json(out / "failure.json", {
            "message": final.message,
            "mesh": [final.mesh.nx, final.mesh.ny],
            "res_history": [list(r) for r in final.state.res_history],
            "flags": final.state.flags,
        })
        _write_json(out / "summary.json", summary)
        print("run failed: %s" % final.message, file=sys.stderr)
        return 1
    write_field_csv(out / "pressure.csv", final.mesh, final.u, "u")
    write_field_csv(out / "film.csv", final.mesh, final.film, "h_d")
    _write_json(out / "summary.json", summary)
    print("converged on %dx%d: max_u=%.6f h00=%.8f force_gap=%.3e iters=%d"
          % (final.mesh.nx, final.mesh.ny, summary["max_u"], summary["h00"], summary["force_gap"],
             summary["iters"]))
    return 0


class _KernelFactory(dict):
    """Lazy ``{(nx, ny): KernelMatrix}`` used by the grid continuation."""

    def __init__(self, bounds, rule, m, cache_dir, store):
        super().__init__()
        self.bounds, self.rule, self.m, self.cache_dir, self.store = bounds, rule, m, cache_dir, store

    def get(self, key, default=None):
        if key not in self.store:
            mesh = build_mesh(self.bounds, *key)
            self.store[key] = build_kernel(mesh, self.m, self.rule, cache_dir=self.cache_dir)
        return self.store[key]


def cmd_convergence(cfg, out_dir) -> int:
    conv = cfg["convergence"]
    meshes = conv["meshes"]
    if len(meshes) < 3:
        print("need ≥ 3 meshes (got %d)" % len(meshes), file=sys.stderr)
        return 2
    shapes = [tuple(m) if isinstance(m, list) else (m, m) for m in meshes]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(canonical(cfg))
    try:
        if conv["problem"] == "manufactured":
            fit, _ = convergence_study(poisson_manufactured(), shapes, reference="exact")
        else:
            study = EHLStudy(build_case(cfg), conv["reference_n"], build_solver_config(cfg), build_penalty(cfg),
                             transfer=conv["transfer"])
            fit, _ = convergence_study(study, shapes, reference="fine-grid",
                                       kernel_cache_dir=cfg["kernel"]["cache_dir"])
    except StudyFailed as exc:
        print("convergence study failed: %s" % exc, file=sys.stderr)
        return 1
    except ValueError as exc:
        print("convergence study rejected: %s" % exc, file=sys.stderr)
        return 2
    table = fit.to_csv()
    (out / "rates.csv").write_text(table)
    _write_json(out / "rates.json", {k: float(v) for k, v in fit.slope.items()})
    sys.stdout.write(table)
    return 0


def kernel_check_table(thetas, levels, ms):
    rows = []
    for theta in thetas:
        for m in ms:
            for n in levels:
                val = singular_panel_integral(lambda x, y: 1.0, theta, n, m)
                rows.append((theta, m, n, val, abs(val - SINGULAR_EXACT)))
    return rows


def cmd_kernel_check(cfg, out_dir=None) -> int:
    kc = cfg["kernel_check"]
    try:
        rows = kernel_check_table(kc["thetas"], kc["levels"], kc["ms"])
    except InvalidConfiguration as exc:
        raise ConfigError("config section 'kernel_check': %s" % exc) from exc
    lines = ["theta,m,n,value,abs_error"]
    lines += ["%s,%d,%d,%s,%s" % (repr(t), m, n, repr(v), repr(e)) for t, m, n, v, e in rows]
    text = "\n".join(lines) + "\n" + "# exact=%s\n" % repr(SINGULAR_EXACT)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "kernel_check.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ehlpen", description="Penalized DG-FVM solver for EHL point contacts")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every Newton iteration")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "solve one operating case"),
                            ("convergence", "mesh-refinement rate study"),
                            ("kernel-check", "singular quadrature accuracy table")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML/JSON config file (defaults used if omitted)")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--mesh", nargs=2, type=int, metavar=("NX", "NY"), help="override mesh.nx and mesh.ny")
        p.add_argument("--eps", type=float, help="override penalty.eps_pen")
        p.add_argument("--print-config", action="store_true", help="print the canonical config and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.mesh is not None:
            nx, ny = args.mesh
            if nx < 1 or ny < 1:
                raise ConfigError("--mesh needs positive NX NY")
            cfg["mesh"]["nx"], cfg["mesh"]["ny"] = nx, ny
        if args.eps is not None:
            cfg["penalty"]["eps_pen"] = _check_value("penalty", "eps_pen", args.eps, 1.0)
        if args.print_config:
            sys.stdout.write(canonical(cfg))
            return 0
        out_dir = args.out if args.out is not None else cfg["output"]["directory"]
        threads = _thread_limit()
        with _limit_threads(threads):
            if args.command == "run":
                return cmd_run(cfg, out_dir)
            if args.command == "convergence":
                return cmd_convergence(cfg, out_dir)
            return cmd_kernel_check(cfg, args.out)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2


class _limit_threads:
    """Cap BLAS/OpenMP pools when ``EHL_THREADS`` is set."""

    def __init__(self, n):
        self.n = n
        self._ctl = None

    def __enter__(self):
        if self.n is not None:
            from threadpoolctl import threadpool_limits

            self._ctl = threadpool_limits(limits=self.n)
        return self

    def __exit__(self, *exc):
        if self._ctl is not None:
            self._ctl.restore_original_limits()
        return False


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
