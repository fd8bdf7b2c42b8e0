"""Command-line front end.

Every command reads one problem (an INI file or ``catalog:NAME``), runs one
module operation and writes CSV or JSON. Output carries a header with the
schema version, tool version, config hash, seed and the C(p) formula, and
never contains timestamps or host details, so equal inputs give equal bytes.

Exit codes: 0 pass, 1 usage or parse error, 2 verdict FAIL, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .constants import NOT_CERTIFIED, certify, make_cp
from .expr import Expression, ExpressionError
from .gprocess import (ControlFamily, gexp_grid, gexpect_lattice, gexpect_mc, parallel_map, sample_paths)
from .model import (DiscretizationGrid, GSetting, InvalidProblem, catalog, catalog_entry, load_problem,
                    validate_problem)
from .sde import NumericalAbort

log = logging.getLogger("gfbsde")

SCHEMA_VERSION = 1
DEFAULT_SEED = 20240601
DEFAULT_CP = "(10*p)^(p/2)"
COMMANDS = ("certify", "gexp", "solve-sde", "solve-bsde", "solve-fbsde", "compare", "duality", "catalog")

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    problem: Optional[str] = None
    seed: int = DEFAULT_SEED
    output: Optional[str] = None
    format: str = "json"
    threads: int = 1
    n_steps: Optional[int] = None
    n_paths: Optional[int] = None
    quadrature: Optional[str] = None
    cp: Optional[str] = None
    options: dict = field(default_factory=dict)

    def public(self) -> dict:
        """Options that shape the result (thread count and output path excluded)."""
        d = {"command": self.command, "problem": self.problem, "seed": self.seed, "format": self.format,
             "n_steps": self.n_steps, "n_paths": self.n_paths, "quadrature": self.quadrature, "cp": self.cp}
        d.update(self.options)
        return d


# ---------------------------------------------------------------- problem loading

@dataclass
class Loaded:
    setting: GSetting
    coeffs: object
    grid_opts: dict
    config_hash: str
    name: str
    partner: Optional[tuple] = None  # (setting, coeffs)
    reference: Optional[dict] = None


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def load(spec: str) -> Loaded:
    if spec is None:
        raise UsageError("this command needs a problem (a file path or catalog:NAME)")
    if spec.startswith("catalog:"):
        name = spec.split(":", 1)[1]
        try:
            e = catalog_entry(name)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
        partner = None
        if e.partner:
            p = catalog_entry(e.partner)
            partner = (p.setting, p.coefficients)
        h = _hash_obj({"catalog": name, "setting": e.setting.to_dict(), "coefficients": e.coefficients.to_dict()})
        return Loaded(e.setting, e.coefficients, {}, h, name, partner, e.analytic_reference)
    if not os.path.exists(spec):
        raise UsageError(f"problem file not found: {spec}")
    d = load_problem(spec)
    partner = None
    if "comparison" in d:
        cmp_ = d["comparison"]
        s = d["setting"]
        s2 = GSetting(s.sigma_low, s.sigma_high, s.p, s.beta, s.n, s.T, tuple(cmp_["x0"]), s.classical)
        partner = (s2, cmp_["coefficients"])
    return Loaded(d["setting"], d["coefficients"], d["grid"], d["config_hash"], os.path.basename(spec), partner)


def _grid_value(cfg: RunConfig, prob: Optional[Loaded], key: str, default):
    v = getattr(cfg, key, None)
    if v is not None:
        return v
    if prob is not None and key in prob.grid_opts:
        return prob.grid_opts[key]
    return default


def _grid(cfg, prob, default_steps=50):
    n_steps = _grid_value(cfg, prob, "n_steps", default_steps)
    kw = {"quadrature": _grid_value(cfg, prob, "quadrature", "two-point")}
    if "space_step" in prob.grid_opts:
        kw["space_step"] = prob.grid_opts["space_step"]
    if "width" in prob.grid_opts:
        kw["width"] = prob.grid_opts["width"]
    return DiscretizationGrid.build(prob.setting, n_steps, **kw)


# ---------------------------------------------------------------- output

def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if v is None or isinstance(v, (bool, int, str)):
        return v
    if hasattr(v, "to_dict"):
        return _clean(v.to_dict())
    return str(v)


def _fmt(v) -> str:
    v = _clean(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return "" if v is None else str(v)


def header(cfg: RunConfig, config_hash: str) -> dict:
    return {"schema": f"gfbsde-{cfg.command}/{SCHEMA_VERSION}", "tool_version": __version__,
            "config_hash": config_hash, "seed": cfg.seed, "cp_formula": cfg.cp or DEFAULT_CP,
            "options_hash": _hash_obj(cfg.public())}


@dataclass
class Table:
    name: str
    columns: list
    rows: list


def render(cfg: RunConfig, head: dict, summary: dict, tables: list) -> dict:
    """Map of file suffix -> text. The first table (or the summary) is the main file."""
    out = {}
    if cfg.format == "json":
        doc = {"header": head, "summary": summary}
        for t in tables:
            doc[t.name] = [dict(zip(t.columns, r)) for r in t.rows]
        out[""] = json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n"
        return out
    head_lines = [f"# {k}={_fmt(v)}" for k, v in head.items()]
    if not tables:
        tables = [Table("summary", ["key", "value"], [[k, v] for k, v in sorted(_flatten(summary).items())])]
    else:
        head_lines += [f"# {k}={_fmt(v)}" for k, v in sorted(_flatten(summary).items())]
    for k, t in enumerate(tables):
        buf = io.StringIO()
        for line in head_lines:
            buf.write(line + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(t.columns)
        for r in t.rows:
            w.writerow([_fmt(v) for v in r])
        out["" if k == 0 else f".{t.name}"] = buf.getvalue()
    return out


def _flatten(d, prefix=""):
    out = {}
    for k, v in (d or {}).items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".gfbsde-", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(cfg: RunConfig, files: dict) -> list:
    written = []
    if cfg.output is None:
        for suffix, text in files.items():
            if suffix:
                sys.stdout.write(f"# ---- {suffix[1:]}\n")
            sys.stdout.write(text)
        return written
    root, ext = os.path.splitext(cfg.output)
    for suffix, text in files.items():
        path = cfg.output if not suffix else f"{root}{suffix}{ext or '.' + cfg.format}"
        write_atomic(path, text)
        written.append(path)
    return written


# ---------------------------------------------------------------- commands

def _cp(cfg):
    return make_cp(cfg.cp) if cfg.cp else None


def cmd_certify(cfg: RunConfig):
    prob = load(cfg.problem)
    rep = certify(prob.setting, prob.coeffs, _cp(cfg), cfg.cp)
    audit = validate_problem(prob.setting, prob.coeffs, seed=cfg.seed)
    passed = rep.verdict != NOT_CERTIFIED and audit.passed
    summary = {"problem": prob.name, "verdict": rep.verdict, "reasons": rep.reasons,
               "constants": rep.constants.to_dict(), "audit": audit.to_dict(), "passed": passed}
    return prob.config_hash, summary, [], passed


def cmd_gexp(cfg: RunConfig):
    o = cfg.options
    if cfg.problem:
        prob = load(cfg.problem)
        setting = prob.setting
        chash = prob.config_hash
    else:
        setting = GSetting(sigma_low=o["sigma_low"], sigma_high=o["sigma_high"], p=2.0, beta=3.0, n=1,
                           T=o["T"], x0=(0.0,), classical=o["sigma_low"] == o["sigma_high"])
        chash = _hash_obj({"sigma_low": o["sigma_low"], "sigma_high": o["sigma_high"], "T": o["T"]})
    try:
        payoff = Expression(o["payoff"], ["x"])
    except ExpressionError as exc:
        raise UsageError(f"--payoff: {exc}") from None

    def fn(x):
        return payoff.evaluate({"x": np.asarray(x, float)}) * np.ones_like(np.asarray(x, float))

    n_steps = cfg.n_steps or 200
    grid = gexp_grid(setting, n_steps, cfg.quadrature or "two-point")
    lat = gexpect_lattice(fn, setting, grid)
    fam = ControlFamily.bang_bang(setting, n_steps, n_switch=o.get("n_switch", 2), include_mid=True)
    mc = gexpect_mc(fn, setting, grid, fam, cfg.n_paths or 20000, cfg.seed, threads=cfg.threads)
    passed = mc.value <= lat + 5 * mc.stderr + 1e-12 * max(1.0, abs(lat))
    summary = {"payoff": o["payoff"], "lattice": lat, "mc_lower_bound": mc.value, "mc_stderr": mc.stderr,
               "mc_argmax": mc.labels[mc.argmax], "n_steps": n_steps, "lattice_nodes": grid.n_space[0],
               "passed": bool(passed)}
    rows = [[lab, m, s] for lab, m, s in zip(mc.labels, mc.means, mc.stderrs)]
    return chash, summary, [Table("controls", ["control", "mean", "stderr"], rows)], passed


def _family(prob, n_steps):
    return ControlFamily.bang_bang(prob.setting, n_steps)


def _y_input(text):
    if text is None:
        return None
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--y expects a number, got '{text}'") from None


def cmd_solve_sde(cfg: RunConfig):
    from .sde import euler_forward, sde_stability_check

    prob = load(cfg.problem)
    grid = _grid(cfg, prob)
    fam = _family(prob, grid.n_steps)
    n_paths = _grid_value(cfg, prob, "n_paths", 2000)
    y1 = _y_input(cfg.options.get("y"))
    model = cfg.options.get("model", "normal")

    def one(ctl):
        ens = sample_paths(grid, ctl, n_paths, cfg.seed, prob.setting, model)
        return euler_forward(prob.coeffs, grid, ens, prob.setting.x0, y1)

    sols = parallel_map(one, fam.controls, cfg.threads)
    rows = []
    for ctl, s in zip(fam, sols):
        for i, t in enumerate(grid.times):
            x = s.states[:, i, :]
            rows.append([ctl.label, t, *x.mean(axis=0), *x.std(axis=0)])
    n = prob.setting.n
    cols = ["control", "t"] + [f"mean_x{j + 1}" for j in range(n)] + [f"std_x{j + 1}" for j in range(n)]
    summary = {"problem": prob.name, "n_steps": grid.n_steps, "n_paths": n_paths, "y": y1 if y1 is not None else 0.0}
    passed = True
    if cfg.options.get("y2") is not None:
        y2 = _y_input(cfg.options["y2"])
        v = sde_stability_check(prob.coeffs, prob.setting, grid, fam, y1 if y1 is not None else 0.0, y2,
                                n_paths=n_paths, seed=cfg.seed, cp=_cp(cfg), model=model)
        summary["stability"] = v.to_dict()
        passed = v.passed
    summary["passed"] = passed
    return prob.config_hash, summary, [Table("slices", cols, rows)], passed


def _lattice_slices(sol, grid, n_times=11, max_nodes=101):
    idx_t = sorted(set(np.linspace(0, grid.n_steps, min(n_times, grid.n_steps + 1)).round().astype(int).tolist()))
    nodes = grid.nodes()
    stride = max(1, len(nodes) // max_nodes)
    pick = nodes[::stride]
    rows = []
    for i in idx_t:
        ys = sol.y_fn(i, pick)
        zs = sol.z_fn(i, pick)
        for x, y, z in zip(pick, ys, zs):
            rows.append([i * grid.dt, *x, y, z])
    cols = ["t"] + [f"x{j + 1}" for j in range(grid.nodes().shape[1])] + ["y", "z"]
    return Table("slices", cols, rows)


def cmd_solve_bsde(cfg: RunConfig):
    from .bsde import forward_states, k_extract, solve_bsde

    prob = load(cfg.problem)
    grid = _grid(cfg, prob)
    fam = _family(prob, grid.n_steps)
    n_paths = _grid_value(cfg, prob, "n_paths", 2000)
    sol = solve_bsde(prob.coeffs, prob.setting, grid)
    ens = parallel_map(lambda c: sample_paths(grid, c, n_paths, cfg.seed, prob.setting, "two-point"),
                       fam.controls, cfg.threads)
    fwd = forward_states(prob.coeffs, prob.setting, grid, ens, None)
    rep = k_extract(sol, ens, [f.states for f in fwd], fam)
    passed = rep.monotone_ok and rep.martingale_ok
    summary = {"problem": prob.name, "y0": sol.y0(prob.setting.x0_array), "z0": sol.z0(prob.setting.x0_array),
               "forward_y": "zero", "k_diagnostics": rep.to_dict(), "passed": passed}
    if prob.reference and "y0" in prob.reference and prob.coeffs.L2 == 0:
        summary["reference_y0"] = prob.reference["y0"]
    return prob.config_hash, summary, [_lattice_slices(sol, grid)], passed


def cmd_solve_fbsde(cfg: RunConfig):
    from .picard import contraction_report, picard_solve, picard_solve_p_lt2

    prob = load(cfg.problem)
    o = cfg.options
    grid = _grid(cfg, prob)
    fam = _family(prob, grid.n_steps)
    n_paths = _grid_value(cfg, prob, "n_paths", 2000)
    solver = picard_solve_p_lt2 if prob.setting.p < 2 else picard_solve
    sol = solver(prob.setting, prob.coeffs, grid, fam, tol=o.get("tol", 1e-4), max_iter=o.get("max_iter", 50),
                 seed=cfg.seed, n_paths=n_paths, p_prime=o.get("p_prime"), backend=o.get("backend", "lattice"),
                 force=o.get("force", False), cp=_cp(cfg), threads=cfg.threads)
    table = contraction_report(sol.trace)
    summary = sol.summary()
    summary["problem"] = prob.name
    summary["contraction_flags"] = table.flags
    if prob.reference and "y0" in prob.reference:
        summary["reference_y0"] = prob.reference["y0"]
    passed = sol.converged and table.passed
    if sol.k_report is not None:
        passed = passed and sol.k_report.monotone_ok
    summary["passed"] = passed
    rows = []
    for ctl, f in zip(fam, sol.forward):
        for i, t in enumerate(grid.times):
            rows.append([ctl.label, t, *f.states[:, i, :].mean(axis=0), f.y[:, i].mean(), f.y[:, i].std()])
    n = prob.setting.n
    cols = ["control", "t"] + [f"mean_x{j + 1}" for j in range(n)] + ["mean_y", "std_y"]
    trace_rows = [[r["m"], r["d_m"], sol.trace.rows[k].d_y, r["ratio"], r["envelope"], r["budget"], r["flag"]]
                  for k, r in enumerate(table.rows)]
    tables = [Table("slices", cols, rows),
              Table("trace", ["m", "d_m", "d_y", "ratio", "envelope", "budget", "flag"], trace_rows)]
    return prob.config_hash, summary, tables, passed


def _pair(prob: Loaded):
    if prob.partner is None:
        raise UsageError(f"problem '{prob.name}' has no comparison partner "
                         "(add a [comparison] section or use a catalog pair)")
    return (prob.setting, prob.coeffs), prob.partner


def _theorem_for(p1, p2, given):
    if given:
        return str(given)
    return "42" if p1[0].x0 != p2[0].x0 else "41"


def cmd_compare(cfg: RunConfig):
    from .duality import BATTERY_FIELDS, run_battery

    o = cfg.options
    theorem = str(o.get("theorem", "41"))
    seeds = list(range(cfg.seed, cfg.seed + o.get("seeds", 20)))
    grids = o.get("grids", [20, 40, 80])
    n_paths = cfg.n_paths or 2000
    if cfg.problem:
        prob = load(cfg.problem)
        p1, p2 = _pair(prob)
        chash = prob.config_hash

        def pair_fn(th, s):
            return p1, p2
    else:
        chash = _hash_obj({"battery": theorem})
        pair_fn = None
    results = run_battery(theorem, seeds=seeds, grids=grids, n_paths=n_paths, threads=cfg.threads, pair_fn=pair_fn)
    rows = [[r.row()[k] for k in BATTERY_FIELDS] for r in results]
    fails = [r for r in results if r.verdict == "FAIL"]
    summary = {"theorem": theorem, "runs": len(results), "pass": sum(r.verdict == "PASS" for r in results),
               "fail": len(fails), "skipped": sum(r.verdict == "SKIPPED" for r in results),
               "fail_reasons": [f"seed {r.seed} N={r.n_steps}: {'; '.join(r.reasons)}" for r in fails],
               "passed": not fails}
    return chash, summary, [Table("battery", list(BATTERY_FIELDS), rows)], not fails


def cmd_duality(cfg: RunConfig):
    from .duality import compare_thm41, compare_thm42

    prob = load(cfg.problem)
    p1, p2 = _pair(prob)
    theorem = _theorem_for(p1, p2, cfg.options.get("theorem"))
    fn = compare_thm41 if theorem == "41" else compare_thm42
    res = fn(p1, p2, n_steps=cfg.n_steps or 40, seed=cfg.seed, n_paths=cfg.n_paths or 2000, threads=cfg.threads)
    summary = _clean(res.to_dict())
    summary["passed"] = res.verdict != "FAIL"
    bounds = [[k, v["max"], v["bound"], v["ok"]] for k, v in sorted((res.bounds or {}).items())]
    return prob.config_hash, summary, [Table("bounds", ["coefficient", "max", "bound", "ok"], bounds)], \
        res.verdict != "FAIL"


def cmd_catalog(cfg: RunConfig):
    rows = []
    for e in catalog():
        rep = certify(e.setting, e.coefficients)
        rows.append([e.name, rep.verdict, rep.constants.lambda_p, rep.constants.lambda_tilde_p, e.partner or "",
                     e.description])
    chash = _hash_obj([r[0] for r in rows])
    return chash, {"entries": len(rows), "passed": True}, \
        [Table("catalog", ["name", "verdict", "lambda_p", "lambda_tilde_p", "partner", "description"], rows)], True


HANDLERS = {"certify": cmd_certify, "gexp": cmd_gexp, "solve-sde": cmd_solve_sde, "solve-bsde": cmd_solve_bsde,
            "solve-fbsde": cmd_solve_fbsde, "compare": cmd_compare, "duality": cmd_duality,
            "catalog": cmd_catalog}


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the exit status."""
    try:
        chash, summary, tables, passed = HANDLERS[cfg.command](cfg)
        files = render(cfg, header(cfg, chash), summary, tables)
        for path in emit(cfg, files):
            log.info("wrote %s", path)
    except (UsageError, InvalidProblem, ExpressionError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except NumericalAbort as exc:
        sys.stderr.write(f"numerical abort: {exc}\n")
        return EXIT_ABORT
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _grids(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None
    if not vals or min(vals) < 2:
        raise argparse.ArgumentTypeError("grid sizes must be >= 2")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"random seed (default: $GFBSDE_SEED or {DEFAULT_SEED})")
    common.add_argument("--out", "-o", default=None, help="output path (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="json")
    common.add_argument("--threads", type=_positive_int, default=1)
    common.add_argument("--n-steps", type=_positive_int, default=None)
    common.add_argument("--n-paths", type=_positive_int, default=None)
    common.add_argument("--quadrature", choices=("two-point", "gh3", "gh5"), default=None)
    common.add_argument("--cp-formula", "--cp", dest="cp", default=None,
                        help="BDG constant C(p) as an expression in p (default (10*p)^(p/2))")
    common.add_argument("--verbose", "-v", action="store_true")

    ap = _Parser(prog="gfbsde", description="Coupled forward-backward SDEs under volatility uncertainty.")
    ap.add_argument("--version", action="version", version=f"gfbsde {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("certify", parents=[common], help="weak-coupling certificate and constants")
    p.add_argument("problem")

    p = sub.add_parser("gexp", parents=[common], help="sublinear expectation of a payoff of B_T")
    p.add_argument("problem", nargs="?")
    p.add_argument("--payoff", required=True, help="expression in x, e.g. 'x^2'")
    p.add_argument("--sigma-low", type=float, default=None)
    p.add_argument("--sigma-high", type=float, default=None)
    p.add_argument("--T", type=float, default=1.0)

    p = sub.add_parser("solve-sde", parents=[common], help="forward equation with a fixed Y")
    p.add_argument("problem")
    p.add_argument("--y", default=None, help="constant Y fed to the coefficients (default 0)")
    p.add_argument("--y2", default=None, help="second constant Y: run the stability check against --y")
    p.add_argument("--model", choices=("normal", "two-point"), default="normal")

    p = sub.add_parser("solve-bsde", parents=[common], help="backward equation with the forward Y frozen at 0")
    p.add_argument("problem")

    p = sub.add_parser("solve-fbsde", parents=[common], help="coupled system by Picard iteration")
    p.add_argument("problem")
    p.add_argument("--backend", choices=("lattice", "paths"), default="lattice")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=_positive_int, default=50)
    p.add_argument("--p-prime", type=float, default=None)
    p.add_argument("--force", action="store_true", help="solve even if the certificate fails")

    p = sub.add_parser("compare", parents=[common], help="comparison battery (CSV report)")
    p.add_argument("problem", nargs="?", help="pair to use for every seed (default: randomised pairs)")
    p.add_argument("--theorem", choices=("41", "42"), default="41",
                   help="41: terminal ordering, 42: initial-state ordering")
    p.add_argument("--seeds", type=_positive_int, default=20)
    p.add_argument("--grids", type=_grids, default=[20, 40, 80])

    p = sub.add_parser("duality", parents=[common], help="one comparison experiment with the dual system")
    p.add_argument("problem")
    p.add_argument("--theorem", choices=("41", "42"), default=None,
                   help="41: terminal ordering, 42: initial-state ordering (default: inferred)")

    sub.add_parser("catalog", parents=[common], help="list the built-in problems")
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    seed = ns.seed
    if seed is None:
        env = os.environ.get("GFBSDE_SEED")
        if env is not None:
            try:
                seed = int(env)
            except ValueError:
                raise UsageError(f"GFBSDE_SEED must be an integer, got '{env}'") from None
            log.info("seed %d taken from GFBSDE_SEED", seed)
        else:
            seed = DEFAULT_SEED
    cfg = RunConfig(ns.command, getattr(ns, "problem", None), seed, ns.out, ns.format, ns.threads, ns.n_steps,
                    ns.n_paths, ns.quadrature, ns.cp)
    o = cfg.options
    if ns.command == "gexp":
        o["payoff"] = ns.payoff
        if ns.problem is None:
            if ns.sigma_low is None or ns.sigma_high is None:
                raise UsageError("gexp needs a problem or both --sigma-low and --sigma-high")
            o.update(sigma_low=ns.sigma_low, sigma_high=ns.sigma_high, T=ns.T)
    elif ns.command == "solve-sde":
        o.update(y=ns.y, y2=ns.y2, model=ns.model)
    elif ns.command == "solve-fbsde":
        o.update(backend=ns.backend, tol=ns.tol, max_iter=ns.max_iter, p_prime=ns.p_prime, force=ns.force)
    elif ns.command == "compare":
        o.update(theorem=ns.theorem, seeds=ns.seeds, grids=ns.grids)
    elif ns.command == "duality":
        o.update(theorem=ns.theorem)
    if cfg.cp:
        try:
            make_cp(cfg.cp)
        except ExpressionError as exc:
            raise UsageError(f"--cp-formula: {exc}") from None
    return cfg


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(ns)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
