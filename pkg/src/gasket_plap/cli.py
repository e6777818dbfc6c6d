"""Command line driver: solve, sweep, fibering, thresholds, validate.

Settings come from ``key=value`` config lines (``--config``) overridden by
flags.  Exit codes: 0 success, 1 failed acceptance checks, 2 configuration
error, 3 solver infeasibility or failed certificates, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .energy import EnergyModel, default_rp_tolerance
from .errors import ConvergenceError, InfeasibleError, PreconditionError, SpecError
from .fibering import (FiberingProfile, find_roots, fibering_table, natural_scale,
                       write_fibering_csv)
from .functional import ProblemSpec, terms_values, validate_constants
from .gasket import MAX_LEVEL, GasketLevel, build_level
from .solver import SolutionReport, SolveOptions, problem_thresholds, solve_pair

log = logging.getLogger(__name__)

MODES = ("solve", "sweep", "fibering", "thresholds", "validate")
EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3, 4


class ConfigError(SpecError):
    pass


@dataclass(frozen=True)
class RunConfig:
    a: float = 1.0
    b: float = 1.0
    k: float = 1.0
    p: float = 2.0
    q: float = 1.5
    l: float = 5.0
    lam: float | None = None
    lam_frac: float | None = None
    level: int = 5
    f: str = "const:1"
    g: str = "const:1"
    options: SolveOptions = field(default_factory=SolveOptions)
    out: str = "out"
    mode: str = "solve"
    rp_tol: float | None = None
    lambda_grid: tuple = ()
    lambda_frac_grid: tuple = ()
    direction: str = "extremal"
    t_points: int = 200
    dump_fibering: bool = False


# ---------------------------------------------------------------------------
# parsing

_FLOAT_KEYS = {"a", "b", "k", "p", "q", "l", "lambda", "lambda_frac", "step0", "grad_tol", "rp_tol"}
_INT_KEYS = {"level", "restarts", "max_iters", "seed", "t_points"}
_BOOL_KEYS = {"warm_start_levels", "dump_fibering"}
_STR_KEYS = {"f", "g", "out", "mode", "direction", "lambda_grid", "lambda_frac_grid"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gasket-plap",
        description="Two-solution solver for a Kirchhoff-type p-Laplacian on the Sierpinski gasket.",
    )
    ap.add_argument("--config", help="key=value file; flags override it")
    ap.add_argument("--mode", choices=MODES)
    for name in ("a", "b", "k", "p", "q", "l"):
        ap.add_argument(f"--{name}", type=float)
    lam = ap.add_mutually_exclusive_group()
    lam.add_argument("--lambda", dest="lambda_", type=float, help="absolute lambda")
    lam.add_argument("--lambda-frac", type=float, help="lambda as a fraction of lambda_hat1")
    ap.add_argument("--level", type=int)
    ap.add_argument("--f", help="const:c | affine:ax,ay,c | csv:<path>")
    ap.add_argument("--g", help="const:c | affine:ax,ay,c | csv:<path>")
    ap.add_argument("--restarts", type=int)
    ap.add_argument("--max-iters", type=int)
    ap.add_argument("--step0", type=float)
    ap.add_argument("--grad-tol", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--warm-start-levels", action="store_const", const=True)
    ap.add_argument("--rp-tol", type=float, help="r_p tolerance (default 1e-9 at p=2, else 1e-6)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--lambda-grid", help="comma-separated absolute lambdas (sweep)")
    ap.add_argument("--lambda-frac-grid", help="comma-separated fractions of lambda_hat1 (sweep)")
    ap.add_argument("--direction", help="fibering direction: 'extremal' or a coefficient family")
    ap.add_argument("--t-points", type=int, help="rows of the fibering table")
    ap.add_argument("--dump-fibering", action="store_const", const=True,
                    help="solve mode: also write fibering.csv along the M+ solution ray")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment; dashes and underscores are equivalent."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FLOAT_KEYS | _INT_KEYS | _BOOL_KEYS | _STR_KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        try:
            if key in _FLOAT_KEYS:
                out[key] = float(val)
            elif key in _INT_KEYS:
                out[key] = int(val)
            elif key in _BOOL_KEYS:
                out[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                out[key] = val
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: bad value for {key}: {val!r}") from exc
    return out


def _grid(text) -> tuple:
    if text is None or str(text).strip() == "":
        return ()
    try:
        return tuple(float(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad lambda grid {text!r}") from exc


def parse_config(argv=None) -> RunConfig:
    """Merge defaults, the config file and flags into a validated RunConfig."""
    ns = build_parser().parse_args(argv)
    vals = read_config_file(ns.config) if ns.config else {}
    flags = {k: v for k, v in vars(ns).items() if v is not None and k not in ("config", "verbose")}
    if "lambda_" in flags:
        flags["lambda"] = flags.pop("lambda_")
    if "lambda" in flags:
        vals.pop("lambda_frac", None)
    if "lambda_frac" in flags:
        vals.pop("lambda", None)
    vals.update(flags)
    if "lambda" in vals and "lambda_frac" in vals:
        raise ConfigError("give either lambda or lambda_frac, not both")

    d = RunConfig()
    opts = SolveOptions(
        restarts=vals.get("restarts", d.options.restarts),
        max_iters=vals.get("max_iters", d.options.max_iters),
        step0=vals.get("step0", d.options.step0),
        grad_tol=vals.get("grad_tol", d.options.grad_tol),
        seed=vals.get("seed", d.options.seed),
        warm_start_levels=vals.get("warm_start_levels", d.options.warm_start_levels),
    )
    lam = vals.get("lambda")
    lam_frac = vals.get("lambda_frac")
    if lam is None and lam_frac is None:
        lam_frac = 0.5
    cfg = RunConfig(
        a=vals.get("a", d.a), b=vals.get("b", d.b), k=vals.get("k", d.k), p=vals.get("p", d.p),
        q=vals.get("q", d.q), l=vals.get("l", d.l), lam=lam, lam_frac=lam_frac,
        level=vals.get("level", d.level), f=vals.get("f", d.f), g=vals.get("g", d.g),
        options=opts, out=vals.get("out", d.out), mode=vals.get("mode", d.mode),
        rp_tol=vals.get("rp_tol"), lambda_grid=_grid(vals.get("lambda_grid")),
        lambda_frac_grid=_grid(vals.get("lambda_frac_grid")),
        direction=vals.get("direction", d.direction), t_points=vals.get("t_points", d.t_points),
        dump_fibering=vals.get("dump_fibering", d.dump_fibering),
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    validate_constants(cfg.a, cfg.b, cfg.k, cfg.p, cfg.q, cfg.l, cfg.lam)
    if cfg.lam_frac is not None and not cfg.lam_frac > 0:
        raise ConfigError(f"lambda_frac must be positive, got {cfg.lam_frac}")
    if not 1 <= cfg.level <= MAX_LEVEL:
        raise ConfigError(f"level must lie in 1..{MAX_LEVEL}, got {cfg.level}")
    if cfg.t_points < 2:
        raise ConfigError("t_points must be at least 2")
    for text in (cfg.f, cfg.g):
        _family(text)


# ---------------------------------------------------------------------------
# coefficient families


def _family(text: str):
    kind, _, arg = text.partition(":")
    if kind == "const":
        try:
            return kind, (float(arg),)
        except ValueError:
            raise ConfigError(f"const family needs a number, got {text!r}") from None
    if kind == "affine":
        try:
            parts = tuple(float(x) for x in arg.split(","))
        except ValueError:
            raise ConfigError(f"affine family needs ax,ay,c, got {text!r}") from None
        if len(parts) != 3:
            raise ConfigError(f"affine family needs exactly ax,ay,c, got {text!r}")
        return kind, parts
    if kind == "csv":
        if not arg:
            raise ConfigError("csv family needs a path")
        return kind, (arg,)
    raise ConfigError(f"unknown coefficient family {text!r} (const:, affine:, csv:)")


def read_vertex_csv(path, n: int) -> np.ndarray:
    """Per-vertex values from an ``id,value`` CSV; every id 0..n-1 exactly once."""
    vals = np.full(n, np.nan)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise OSError(f"cannot read coefficient file {path}: {exc}") from exc
    with fh:
        rows = list(csv.reader(fh))
    start = 1 if rows and rows[0] and not _is_number(rows[0][0]) else 0
    for r, row in enumerate(rows[start:], start=start + 1):
        if not row:
            continue
        if len(row) < 2:
            raise ConfigError(f"{path} row {r}: expected id,value")
        try:
            i, v = int(row[0]), float(row[1])
        except ValueError:
            raise ConfigError(f"{path} row {r}: cannot parse {row!r}") from None
        if not 0 <= i < n:
            raise ConfigError(f"{path} row {r}: id {i} outside 0..{n - 1}")
        if not np.isnan(vals[i]):
            raise ConfigError(f"{path} row {r}: duplicate id {i}")
        vals[i] = v
    missing = np.flatnonzero(np.isnan(vals))
    if missing.size:
        raise ConfigError(f"{path}: {missing.size} vertex ids missing (first {missing[0]})")
    return vals


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def coefficient_values(text: str, g: GasketLevel) -> np.ndarray:
    kind, args = _family(text)
    if kind == "const":
        return np.full(g.n_vertices, args[0])
    if kind == "affine":
        ax, ay, c = args
        return ax * g.vertices[:, 0] + ay * g.vertices[:, 1] + c
    return read_vertex_csv(args[0], g.n_vertices)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class Problem:
    spec: ProblemSpec
    g: GasketLevel
    em: EnergyModel
    th: object
    emb: object


def setup(cfg: RunConfig, lam: float | None = None, lam_frac: float | None = None) -> Problem:
    """Graph, energy model, coefficients, thresholds and the resolved lambda."""
    g = build_level(cfg.level)
    tol = cfg.rp_tol if cfg.rp_tol is not None else default_rp_tolerance(cfg.p)
    em = EnergyModel.estimate(cfg.p, cfg.level, tol)
    fv, gv = coefficient_values(cfg.f, g), coefficient_values(cfg.g, g)
    if lam is None and lam_frac is None:
        lam, lam_frac = cfg.lam, cfg.lam_frac
    # lambda only enters delta1, so a relative lambda is resolved in a second pass
    spec = ProblemSpec(cfg.a, cfg.b, cfg.k, cfg.p, cfg.q, cfg.l, 1.0 if lam is None else lam,
                       fv, gv, cfg.level)
    th, emb = problem_thresholds(spec, g, em)
    if lam is None:
        spec = spec.with_lambda(lam_frac * th.lambda_hat1)
        th, emb = problem_thresholds(spec, g, em, emb)
    return Problem(spec, g, em, th, emb)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "null"
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if math.isinf(x):
            return "null"
        return format(float(x), ".17g")
    return json.dumps(x)


def dumps17(obj, indent: int = 0) -> str:
    """JSON with every double at 17 significant digits; NaN and inf become null."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps17(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(dumps17(v, indent + 1) for v in obj) + "]"
    return _fmt(obj)


def report_dict(rep: SolutionReport, pb: Problem, cfg: RunConfig) -> dict:
    s = pb.spec
    return {
        "spec": {"a": s.a, "b": s.b, "k": s.k, "p": s.p, "q": s.q, "l": s.l, "lambda": s.lam,
                 "level": s.level, "f": cfg.f, "g": cfg.g},
        "thresholds": rep.thresholds.as_dict(),
        "solutions": {"I_plus": rep.I_plus, "I_minus": rep.I_minus,
                      "residual_inf_plus": rep.residual_inf_plus,
                      "residual_inf_minus": rep.residual_inf_minus,
                      "iterations": rep.iterations},
        "energy_model": {"p": pb.em.p, "r_p": pb.em.r_p, "level": pb.em.level},
        "provenance": {"seed": cfg.options.seed, "version": __version__},
    }


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_solution_csv(rep: SolutionReport, g: GasketLevel, path: Path) -> None:
    n = g.n_vertices
    up = rep.u_plus.values if rep.u_plus is not None else np.full(n, np.nan)
    um = rep.u_minus.values if rep.u_minus is not None else np.full(n, np.nan)
    rows = ["id,x,y,u_plus,u_minus"]
    for i in range(n):
        x, y = g.vertices[i]
        rows.append(",".join([str(i)] + [format(v, ".17g") for v in (x, y, up[i], um[i])]))
    _write(path, "\n".join(rows) + "\n")


def emit_report(rep: SolutionReport, pb: Problem, cfg: RunConfig, out_dir) -> Path:
    """Write report.json and solution.csv (plus fibering.csv if requested)."""
    out = Path(out_dir)
    _write(out / "report.json", dumps17(report_dict(rep, pb, cfg)) + "\n")
    write_solution_csv(rep, pb.g, out / "solution.csv")
    if cfg.dump_fibering and rep.u_plus is not None:
        prof = FiberingProfile.from_terms(terms_values(rep.u_plus.values, pb.spec, pb.g, pb.em),
                                          pb.spec)
        ts = [t for t, _ in find_roots(prof).roots] or [1.0]
        t = np.geomspace(min(ts) / 10, max(ts) * 2, cfg.t_points)
        write_fibering_csv(fibering_table(prof, t), out / "fibering.csv")
    return out / "report.json"


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def run_solve(cfg: RunConfig) -> int:
    pb = setup(cfg)
    if not pb.spec.lam < pb.th.lambda_hat1:
        raise PreconditionError(
            f"lambda={pb.spec.lam:.17g} must be below lambda_hat1={pb.th.lambda_hat1:.17g} "
            f"(lambda1={pb.th.lambda1:.17g})")
    rep = solve_pair(pb.spec, pb.g, pb.em, cfg.options, pb.th, pb.emb)
    emit_report(rep, pb, cfg, cfg.out)
    print(f"lambda={pb.spec.lam:.6g} lambda1={pb.th.lambda1:.6g} "
          f"lambda_hat1={pb.th.lambda_hat1:.6g} delta1={pb.th.delta1:.6g}")
    print(f"I_plus={rep.I_plus:.10g} I_minus={rep.I_minus:.10g} "
          f"residuals {rep.residual_inf_plus:.3e} / {rep.residual_inf_minus:.3e}")
    for key, msg in rep.failures.items():
        print(f"failure [{key}]: {msg}", file=sys.stderr)
    return EXIT_OK if not rep.failures else EXIT_INFEASIBLE


SWEEP_COLUMNS = ["lambda", "lambda_frac", "lambda1", "lambda_hat1", "delta1", "plus_ok",
                 "minus_ok", "I_plus", "I_minus", "residual_inf_plus", "residual_inf_minus",
                 "notes"]


def run_sweep(cfg: RunConfig, lambda_grid=None, frac_grid=None) -> list[dict]:
    """One row per lambda: thresholds, both branch outcomes and any failure causes."""
    lambda_grid = cfg.lambda_grid if lambda_grid is None else lambda_grid
    frac_grid = cfg.lambda_frac_grid if frac_grid is None else frac_grid
    if not lambda_grid and not frac_grid:
        return []
    base = setup(cfg, lam=1.0)
    lam_hat = base.th.lambda_hat1
    lams = [(x, x / lam_hat) for x in lambda_grid] + [(fr * lam_hat, fr) for fr in frac_grid]
    rows = []
    for lam, frac in lams:
        spec = base.spec.with_lambda(lam)
        th, _ = problem_thresholds(spec, base.g, base.em, base.emb)
        rep = solve_pair(spec, base.g, base.em, cfg.options, th, base.emb)
        notes = dict(rep.failures)
        if not lam < th.lambda_hat1:
            notes["regime"] = "lambda >= lambda_hat1: two-solution theory does not apply"
        rows.append({
            "lambda": lam, "lambda_frac": frac, "lambda1": th.lambda1,
            "lambda_hat1": th.lambda_hat1, "delta1": th.delta1,
            "plus_ok": rep.u_plus is not None and not any(k.startswith("plus") for k in notes),
            "minus_ok": rep.u_minus is not None and not any(k.startswith("minus") for k in notes),
            "I_plus": rep.I_plus, "I_minus": rep.I_minus,
            "residual_inf_plus": rep.residual_inf_plus,
            "residual_inf_minus": rep.residual_inf_minus,
            "notes": "; ".join(f"{k}: {v}" for k, v in notes.items()),
        })
    return rows


def write_sweep_csv(rows, path: Path) -> None:
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        cells = []
        for c in SWEEP_COLUMNS:
            v = r[c]
            if isinstance(v, bool):
                cells.append(str(v).lower())
            elif isinstance(v, float):
                cells.append(format(v, ".17g"))
            else:
                cells.append('"' + str(v).replace('"', "'") + '"')
        lines.append(",".join(cells))
    _write(path, "\n".join(lines) + "\n")


def run_fibering(cfg: RunConfig) -> int:
    pb = setup(cfg)
    if cfg.direction == "extremal":
        w = np.array(pb.emb.extremal.values)
    else:
        w = coefficient_values(cfg.direction, pb.g)
        w[pb.g.boundary] = 0.0
    prof = FiberingProfile.from_terms(terms_values(w, pb.spec, pb.g, pb.em), pb.spec)
    roots = find_roots(prof)
    ts = roots.ts or [natural_scale(prof)]
    t = np.geomspace(min(ts) / 10, max(ts) * 10, cfg.t_points)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fibering_csv(fibering_table(prof, t), out / "fibering.csv")
    summary = {
        "spec": {"lambda": pb.spec.lam, "level": cfg.level},
        "profile": {"A": prof.A, "B": prof.B, "F": prof.F, "G": prof.G},
        "case": roots.case_tag, "regime": roots.regime,
        "roots": [{"t": t_, "kind": k} for t_, k in roots.roots],
    }
    _write(out / "fibering.json", dumps17(summary) + "\n")
    print(f"case {roots.case_tag}, regime {roots.regime}: "
          + ", ".join(f"{k} at t={t_:.10g}" for t_, k in roots.roots))
    return EXIT_OK


def run_thresholds(cfg: RunConfig) -> int:
    pb = setup(cfg)
    th = pb.th.as_dict()
    _write(Path(cfg.out) / "thresholds.json",
           dumps17({"spec": {"lambda": pb.spec.lam, "level": cfg.level}, "thresholds": th,
                    "energy_model": {"p": pb.em.p, "r_p": pb.em.r_p, "level": pb.em.level}})
           + "\n")
    for key, val in th.items():
        print(f"{key:12s} {val:.17g}")
    return EXIT_OK


def run_validate(cfg: RunConfig) -> int:
    from .validation import run_all

    with tempfile.TemporaryDirectory() as tmp:
        results = run_all(tmp)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    _write(Path(cfg.out) / "acceptance.txt", "\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECKS


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    except (SpecError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = sys.argv[1:] if argv is None else list(argv)
    verbose = "-v" in args or "--verbose" in args
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING)
    runner = {"solve": run_solve, "fibering": run_fibering, "thresholds": run_thresholds,
              "validate": run_validate}.get(cfg.mode)
    try:
        if cfg.mode == "sweep":
            rows = run_sweep(cfg)
            write_sweep_csv(rows, Path(cfg.out) / "sweep.csv")
            for r in rows:
                print(f"lambda={r['lambda']:.6g} ({r['lambda_frac']:.3g} lambda_hat1): "
                      f"plus {'ok' if r['plus_ok'] else 'FAIL'}, "
                      f"minus {'ok' if r['minus_ok'] else 'FAIL'} {r['notes']}")
            return EXIT_OK
        return runner(cfg)
    except (SpecError, PreconditionError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleError, ConvergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
