"""Command-line front end.

Parses INI-style run configs with [problem]/[solver]/[preference]/[output]
sections, builds benchmark problems, executes runs and preference sweeps,
and emits machine-readable traces (CSV) plus a JSON run record.  A verify
command runs the library's cross-check suites.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    Preference,
    RunFailure,
    RunTrace,
    SolverConfig,
    validate_problem,
    wrap_deterministic,
)
from .benchmarks import (
    HypercleaningToySpec,
    DEFAULT_CORRUPTION_RATES,
    QuadraticBilevelSpec,
    brute_force_min_norm,
    brute_force_simplex_min,
    finite_diff_hypergrad,
    make_hypercleaning_toy,
    make_quadratic,
)
from .hypergrad import hypergrad_cg, hypergrad_ns, lower_level_solve
from .optimizer import (
    expected_counters,
    pareto_sweep,
    run_deterministic,
    run_nonpreference,
    run_stochastic,
)
from .subsolvers import WcSubproblem, project_simplex, solve_wc_subproblem

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

SEED_ENV_VAR = "MOBL_SEED"


class ConfigFileError(Exception):
    """Raised for malformed or semantically invalid config files."""


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _find_line(path: str, section: str, key: Optional[str] = None) -> Optional[int]:
    """Best-effort line number of a section or key for error messages."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError:
        return None
    in_section = False
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            if in_section and key is not None:
                return None
            in_section = stripped[1:-1].strip() == section
            if in_section and key is None:
                return lineno
            continue
        if in_section and key is not None:
            name = stripped.split("=", 1)[0].strip()
            if name == key:
                return lineno
    return None


def _config_error(path: str, section: str, key: Optional[str], message: str) -> ConfigFileError:
    lineno = _find_line(path, section, key)
    where = f"{path}:{lineno}" if lineno else path
    field = f"[{section}] {key}" if key else f"[{section}]"
    return ConfigFileError(f"{where}: {field}: {message}")


def load_config(path: str, overrides: Sequence[str] = ()) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigFileError(f"cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigFileError(f"override '{item}' is not of the form section.key=value")
        target, value = item.split("=", 1)
        if "." not in target:
            raise ConfigFileError(f"override '{item}' is not of the form section.key=value")
        section, key = (part.strip() for part in target.split(".", 1))
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())
    return parser


def _get(parser, path, section, key, cast, default=None, required=False):
    if not parser.has_option(section, key):
        if required:
            raise _config_error(path, section, key, "missing required field")
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except (ValueError, ConfigFileError) as exc:
        raise _config_error(path, section, key, f"invalid value '{raw}': {exc}")


def _parse_vector(raw: str) -> np.ndarray:
    return np.array([float(tok) for tok in raw.replace(";", ",").split(",") if tok.strip()])


def _parse_matrix(raw: str) -> np.ndarray:
    rows = [r for r in raw.split(";") if r.strip()]
    return np.array([[float(tok) for tok in row.split(",")] for row in rows])


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def build_problem(parser: configparser.ConfigParser, path: str):
    """Construct the benchmark problem named by the [problem] section.

    Returns ``(problem, kind, x0, y0, problem_summary)`` where ``kind`` is
    ``deterministic`` or ``stochastic``.
    """
    section = "problem"
    if not parser.has_section(section):
        raise _config_error(path, section, None, "missing section")
    family = _get(parser, path, section, "family", str, required=True)
    seed = _get(parser, path, section, "seed", int, default=0)

    if family == "quadratic":
        p = _get(parser, path, section, "p", int, default=2)
        q = _get(parser, path, section, "q", int, default=2)
        s = _get(parser, path, section, "s", int, default=2)
        hessian_scale = _get(parser, path, section, "hessian_scale", float, default=0.3)
        coupling_scale = _get(parser, path, section, "coupling_scale", float, default=0.5)
        target_scale = _get(parser, path, section, "target_scale", float, default=1.0)
        spec = QuadraticBilevelSpec.random(
            p, q, s, seed,
            hessian_scale=hessian_scale,
            coupling_scale=coupling_scale,
            target_scale=target_scale,
        )
        hessian = _get(parser, path, section, "hessian", _parse_matrix)
        coupling = _get(parser, path, section, "coupling", _parse_matrix)
        if hessian is not None or coupling is not None:
            try:
                spec = QuadraticBilevelSpec(
                    dim_x=p,
                    dim_y=q,
                    num_objectives=s,
                    hessian=spec.hessian if hessian is None else hessian,
                    coupling=spec.coupling if coupling is None else coupling,
                    x_targets=spec.x_targets,
                    y_targets=spec.y_targets,
                    seed=seed,
                )
            except Exception as exc:
                key = "hessian" if hessian is not None else "coupling"
                raise _config_error(path, section, key, str(exc))
        problem, _ = make_quadratic(spec)
        kind = "deterministic"
        summary = {
            "family": family, "p": p, "q": q, "s": s, "seed": seed,
            "hessian_scale": hessian_scale, "coupling_scale": coupling_scale,
            "target_scale": target_scale,
            "condition_number": spec.condition_number,
        }
    elif family == "hypercleaning":
        feature_dim = _get(parser, path, section, "feature_dim", int, default=5)
        n_train = _get(parser, path, section, "n_train", int, default=40)
        n_val = _get(parser, path, section, "n_val", int, default=40)
        rates_raw = _get(parser, path, section, "corruption_rates", str, default="default")
        if rates_raw.strip() == "default":
            rates = DEFAULT_CORRUPTION_RATES
        else:
            rates = tuple(_parse_vector(rates_raw))
        reg_weight = _get(parser, path, section, "reg_weight", float, default=0.1)
        try:
            spec = HypercleaningToySpec(
                feature_dim=feature_dim,
                n_train=n_train,
                n_val=n_val,
                corruption_rates=rates,
                reg_weight=reg_weight,
                seed=seed,
            )
        except Exception as exc:
            raise _config_error(path, section, "corruption_rates", str(exc))
        problem, _ = make_hypercleaning_toy(spec)
        kind = "stochastic"
        summary = {
            "family": family, "feature_dim": feature_dim, "n_train": n_train,
            "n_val": n_val, "corruption_rates": list(rates),
            "reg_weight": reg_weight, "seed": seed,
        }
    else:
        raise _config_error(path, section, "family", f"unknown family '{family}'")

    x0 = _get(parser, path, section, "x0", _parse_vector)
    y0 = _get(parser, path, section, "y0", _parse_vector)
    x0 = np.zeros(problem.dim_x) if x0 is None else x0
    y0 = np.zeros(problem.dim_y) if y0 is None else y0
    if x0.shape != (problem.dim_x,):
        raise _config_error(path, section, "x0", f"expected {problem.dim_x} entries")
    if y0.shape != (problem.dim_y,):
        raise _config_error(path, section, "y0", f"expected {problem.dim_y} entries")
    return problem, kind, x0, y0, summary


def build_solver_config(parser: configparser.ConfigParser, path: str) -> SolverConfig:
    section = "solver"
    kwargs = {}
    int_fields = ("K", "D", "N", "Q", "T", "D_f", "D_g", "B", "seed")
    float_fields = ("alpha", "beta", "eta", "u", "stop_tol")
    bool_fields = ("warm_start_y", "warm_start_v", "exact_counters", "record_hypergrads")
    if parser.has_section(section):
        for key in int_fields:
            value = _get(parser, path, section, key.lower(), int)
            if value is not None:
                kwargs[key] = value
        for key in float_fields:
            value = _get(parser, path, section, key.lower(), float)
            if value is not None:
                kwargs[key] = value
        for key in bool_fields:
            value = _get(parser, path, section, key.lower(), _parse_bool)
            if value is not None:
                kwargs[key] = value
        option = _get(parser, path, section, "option", str)
        if option is not None:
            kwargs["option"] = option.lower()
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            kwargs["seed"] = int(env_seed)
        except ValueError:
            raise ConfigFileError(f"{SEED_ENV_VAR}={env_seed!r} is not an integer")
    try:
        return SolverConfig(**kwargs)
    except ConfigurationError as exc:
        raise _config_error(path, section, None, str(exc))


def build_preference(
    parser: configparser.ConfigParser, path: str, s_count: int
) -> Optional[Preference]:
    """Preference from the [preference] section; ``None`` selects the
    non-preference variant."""
    section = "preference"
    if not parser.has_section(section):
        raise _config_error(path, section, None, "missing section")
    vector = _get(parser, path, section, "vector", _parse_vector)
    pattern = _get(parser, path, section, "pattern", str)
    if (vector is None) == (pattern is None):
        raise _config_error(
            path, section, None, "give exactly one of 'vector' or 'pattern'"
        )
    if vector is not None:
        if vector.size != s_count:
            raise _config_error(
                path, section, "vector",
                f"expected {s_count} components, got {vector.size}",
            )
        try:
            return Preference(vector)
        except ValueError as exc:
            raise _config_error(path, section, "vector", str(exc))
    pattern = pattern.strip().lower()
    if pattern == "none":
        return None
    if pattern == "uniform":
        return Preference.uniform(s_count)
    index = _get(parser, path, section, "index", int, default=0)
    if not (0 <= index < s_count):
        raise _config_error(path, section, "index", f"index must be in [0, {s_count})")
    if pattern == "preferred":
        return Preference.preferred(s_count, index)
    if pattern == "extreme":
        return Preference.extreme(s_count, index)
    raise _config_error(
        path, section, "pattern",
        "pattern must be 'preferred', 'extreme', 'uniform', or 'none'",
    )


def trace_csv_text(trace: RunTrace, s_count: int) -> str:
    """Render a trace as CSV with 17-significant-digit floats."""
    header = (
        ["k"]
        + [f"phi_{i + 1}" for i in range(s_count)]
        + [f"lambda_{i + 1}" for i in range(s_count)]
        + ["d_norm_sq", "true_d_norm_sq", "gc_f", "gc_g", "jv_g", "hv_g"]
    )
    lines = [",".join(header)]
    for rec in trace.records:
        row = [str(rec.k)]
        row += [_fmt(v) for v in rec.phi]
        row += [_fmt(v) for v in rec.weights.lam]
        row.append(_fmt(rec.d_norm_sq))
        row.append("" if rec.true_d_norm_sq is None else _fmt(rec.true_d_norm_sq))
        counters = rec.counters
        row += [str(counters.gc_f), str(counters.gc_g), str(counters.jv_g), str(counters.hv_g)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def parse_trace_csv(text: str):
    """Inverse of :func:`trace_csv_text`; returns a list of row dicts."""
    lines = text.strip("\n").split("\n")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        values = line.split(",")
        row = {}
        for name, value in zip(header, values):
            if name == "k" or name.startswith(("gc_", "jv_", "hv_")):
                row[name] = int(value)
            elif name == "true_d_norm_sq" and value == "":
                row[name] = None
            else:
                row[name] = float(value)
        rows.append(row)
    return rows


def _write_text(path: str, text: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def run_record(
    trace: RunTrace,
    config: SolverConfig,
    problem_summary: dict,
    preference: Optional[Preference],
) -> dict:
    counters = trace.counters
    return {
        "problem": problem_summary,
        "solver": {
            "K": config.K, "D": config.D, "N": config.N, "Q": config.Q,
            "alpha": config.alpha, "beta": config.beta, "eta": config.eta,
            "u": config.u, "option": config.option,
            "T": config.T, "D_f": config.D_f, "D_g": config.D_g, "B": config.B,
            "seed": config.seed,
            "warm_start_y": config.warm_start_y, "warm_start_v": config.warm_start_v,
            "stop_tol": config.stop_tol, "exact_counters": config.exact_counters,
        },
        "preference": None if preference is None else [float(v) for v in preference.r],
        "termination": trace.termination,
        "iterations": trace.iterations,
        "final_x": [float(v) for v in trace.final_x],
        "final_y": [float(v) for v in trace.final_y],
        "final_phi": None if trace.final_phi is None else [float(v) for v in trace.final_phi],
        "final_d_norm_sq": trace.final_d_norm_sq,
        "counters": {
            "gc_f": counters.gc_f, "gc_g": counters.gc_g,
            "jv_g": counters.jv_g, "hv_g": counters.hv_g,
        },
    }


def _execute(problem, kind, config, preference, x0, y0) -> RunTrace:
    if preference is None:
        if kind != "deterministic":
            raise ConfigFileError("the non-preference variant needs a deterministic problem")
        return run_nonpreference(problem, config, x0, y0)
    if kind == "stochastic":
        return run_stochastic(problem, config, preference, x0, y0)
    return run_deterministic(problem, config, preference, x0, y0)


def cmd_run(args) -> int:
    try:
        parser = load_config(args.config, args.set or [])
        problem, kind, x0, y0, summary = build_problem(parser, args.config)
        config = build_solver_config(parser, args.config)
        preference = build_preference(parser, args.config, problem.num_objectives)
        trace_path = _get(parser, args.config, "output", "trace_csv", str, default="trace.csv")
        json_path = _get(parser, args.config, "output", "run_json", str, default="run.json")
    except (ConfigFileError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    # Resolve up front so the run record shows exactly what executed (the
    # non-preference variant ignores the alignment coefficient).
    try:
        resolved = config.resolved(problem.constants, preference.r_max if preference else 1.0)
        if preference is None:
            resolved = replace(resolved, u=0.0)
        if kind == "stochastic":
            resolved.validate_stochastic(problem.constants.mu_g)
    except (ConfigurationError, ConfigFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    started = time.perf_counter()
    try:
        trace = _execute(problem, kind, resolved, preference, x0, y0)
    except RunFailure as failure:
        if failure.trace is not None:
            _write_text(trace_path, trace_csv_text(failure.trace, problem.num_objectives))
        print(f"run failed: {failure}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigurationError, ConfigFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    elapsed = time.perf_counter() - started

    _write_text(trace_path, trace_csv_text(trace, problem.num_objectives))
    record = run_record(trace, resolved, summary, preference)
    _write_text(json_path, json.dumps(record, indent=2, sort_keys=True) + "\n")

    phi = trace.final_phi
    print(f"termination: {trace.termination} after {trace.iterations} iterations "
          f"({elapsed:.2f}s)")
    print("final phi:", "-" if phi is None else " ".join(_fmt(v) for v in phi))
    dns = trace.final_d_norm_sq
    print("final d_norm_sq:", "-" if dns is None else _fmt(dns))
    print("counters (gc_f, gc_g, jv_g, hv_g):", trace.counters.as_tuple())
    print(f"trace: {trace_path}")
    print(f"record: {json_path}")
    return EXIT_OK


def parse_grid(spec: str, s_count: int) -> list:
    """Preference grid from a compact spec string.

    Forms: ``preferred`` / ``extreme`` (one pattern per objective),
    ``uniform``, ``r1=0.1,0.3,...`` (two objectives, varying the first
    weight), or ``list:w1,...,wS;w1,...,wS;...`` (explicit vectors).
    """
    spec = spec.strip()
    if spec == "preferred":
        return [Preference.preferred(s_count, i) for i in range(s_count)]
    if spec == "extreme":
        return [Preference.extreme(s_count, i) for i in range(s_count)]
    if spec == "uniform":
        return [Preference.uniform(s_count)]
    if spec.startswith("r1="):
        if s_count != 2:
            raise ConfigFileError("'r1=' grids need a two-objective problem")
        values = [float(tok) for tok in spec[3:].split(",") if tok.strip()]
        return [Preference(np.array([v, 1.0 - v])) for v in values]
    if spec.startswith("list:"):
        prefs = []
        for chunk in spec[5:].split(";"):
            if chunk.strip():
                prefs.append(Preference(_parse_vector(chunk)))
        if not prefs:
            raise ConfigFileError("empty preference list")
        return prefs
    raise ConfigFileError(f"unrecognized grid spec '{spec}'")


def cmd_sweep(args) -> int:
    try:
        parser = load_config(args.config, args.set or [])
        problem, kind, x0, y0, summary = build_problem(parser, args.config)
        config = build_solver_config(parser, args.config)
        preferences = parse_grid(args.grid, problem.num_objectives)
        summary_path = _get(parser, args.config, "output", "summary_csv", str, default="summary.csv")
        traces_dir = _get(parser, args.config, "output", "traces_dir", str, default="traces")
    except (ConfigFileError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if kind != "deterministic":
        print("config error: sweeps need a deterministic problem", file=sys.stderr)
        return EXIT_CONFIG

    started = time.perf_counter()
    try:
        result = pareto_sweep(
            problem, config, preferences, x0, y0,
            parallel=args.jobs > 1, jobs=args.jobs,
        )
    except (ConfigurationError, ConfigFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    elapsed = time.perf_counter() - started

    s_count = problem.num_objectives
    header = (
        [f"r_{i + 1}" for i in range(s_count)]
        + [f"phi_{i + 1}" for i in range(s_count)]
        + ["d_norm_sq", "status"]
    )
    lines = [",".join(header)]
    failures = 0
    for index, entry in enumerate(result.entries):
        row = [_fmt(v) for v in entry.preference.r]
        if entry.error is None:
            row += [_fmt(v) for v in entry.final_phi]
            row.append(_fmt(entry.final_d_norm_sq))
            row.append("ok")
        else:
            failures += 1
            row += [""] * s_count + ["", "failed"]
        lines.append(",".join(row))
        if entry.trace is not None:
            _write_text(
                os.path.join(traces_dir, f"run_{index:03d}.csv"),
                trace_csv_text(entry.trace, s_count),
            )
    _write_text(summary_path, "\n".join(lines) + "\n")
    print(f"{len(result.entries)} runs ({failures} failed) in {elapsed:.2f}s")
    print(f"summary: {summary_path}")
    print(f"traces: {traces_dir}/")
    return EXIT_RUNTIME if failures else EXIT_OK


# ---------------------------------------------------------------------------
# verify


def _verify_quadratic(seed: int = 0):
    """Problem factory used by the verify checks (patchable in tests)."""
    spec = QuadraticBilevelSpec.random(4, 5, 3, seed=seed, hessian_scale=0.25)
    return make_quadratic(spec)


def _verify_toy():
    spec = HypercleaningToySpec(
        feature_dim=4, n_train=30, n_val=30,
        corruption_rates=(0.0, 0.3, 0.5), seed=5,
    )
    return make_hypercleaning_toy(spec)


def _check_oracle_symmetry():
    problem, constants = _verify_quadratic()
    rng = np.random.default_rng(0)
    diag = validate_problem(problem, rng.standard_normal(4), rng.standard_normal(5))
    ok = diag.max_residual() <= 1e-10
    return ok, f"max residual {diag.max_residual():.2e}"


def _check_oracle_curvature():
    problem, constants = _verify_quadratic()
    rng = np.random.default_rng(1)
    diag = validate_problem(problem, rng.standard_normal(4), rng.standard_normal(5))
    ok = diag.rayleigh_min >= constants.mu_g - 1e-9
    return ok, f"rayleigh {diag.rayleigh_min:.4f} vs mu_g {constants.mu_g:.4f}"


def _check_analytic_consistency():
    worst = 0.0
    for seed in range(5):
        problem, _ = _verify_quadratic(seed)
        rng = np.random.default_rng(seed + 100)
        x = rng.standard_normal(problem.dim_x)
        ys = problem.reference.y_star(x)
        analytic = problem.reference.grad_phi(x)
        for s in range(problem.num_objectives):
            rhs = problem.ul_grad_y(s, x, ys)
            hessian = np.column_stack(
                [problem.ll_hvp(x, ys, e) for e in np.eye(problem.dim_y)]
            )
            v = np.linalg.solve(hessian, rhs)
            implicit = problem.ul_grad_x(s, x, ys) - problem.ll_jvp(x, ys, v)
            worst = max(worst, float(np.abs(implicit - analytic[:, s]).max()))
    return worst <= 1e-10, f"max gap {worst:.2e}"


def _check_finite_difference():
    problem, constants = _verify_quadratic(2)
    rng = np.random.default_rng(7)
    x = rng.standard_normal(problem.dim_x)
    lower = lower_level_solve(problem, x, np.zeros(problem.dim_y), 400, 1.0 / constants.L)
    worst = 0.0
    for s in range(problem.num_objectives):
        grad, _ = hypergrad_cg(problem, x, lower.y_final, s, None, problem.dim_y)
        fd = finite_diff_hypergrad(problem, x, s)
        worst = max(worst, float(np.abs(grad - fd).max()))
    return worst <= 1e-4, f"max coord gap {worst:.2e}"


def _check_simplex_projection():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(30):
        s = int(rng.integers(2, 4))
        z = 3.0 * rng.standard_normal(s)
        w = project_simplex(z).lam

        def objective(grid, z=z):
            diff = grid - z[None, :]
            return np.sum(diff * diff, axis=1)

        best, _ = brute_force_simplex_min(objective, s, 1e-3)
        worst = max(worst, float(np.abs(w - best).max()))
    return worst <= 2e-3, f"max gap to grid {worst:.2e}"


def _check_weight_subproblem():
    rng = np.random.default_rng(4)
    worst_kkt, worst_gap = 0.0, 0.0
    for i in range(20):
        s = 2 + (i % 2)
        cols = rng.standard_normal((5, s))
        gram = cols.T @ cols
        raw = rng.uniform(0.1, 1.0, s)
        r = raw / raw.sum()
        u = float(rng.choice([0.0, 1.0, 10.0]))
        phi = rng.uniform(0.0, 5.0, s)
        sp = WcSubproblem(gram=gram, phi=phi, r=r, u=u)
        lam, kkt = solve_wc_subproblem(sp)
        worst_kkt = max(worst_kkt, kkt)

        def objective(grid, sp=sp, r=r, phi=phi, u=u):
            scaled = grid * r[None, :]
            return np.einsum("ni,ij,nj->n", scaled, sp.gram, scaled) - u * (grid @ (r * phi))

        _, grid_val = brute_force_simplex_min(objective, s, 1e-4)
        worst_gap = max(worst_gap, abs(sp.objective(lam.lam) - grid_val))
    ok = worst_kkt <= 1e-10 and worst_gap <= 1e-6
    return ok, f"kkt {worst_kkt:.2e}, objective gap {worst_gap:.2e}"


def _check_min_norm_equivalence():
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(20):
        s = 2 + (i % 2)
        cols = rng.standard_normal((4, s))
        sp = WcSubproblem(
            gram=cols.T @ cols, phi=np.zeros(s), r=np.full(s, 1.0 / s), u=0.0
        )
        lam, _ = solve_wc_subproblem(sp)
        reference = brute_force_min_norm([cols[:, j] for j in range(s)])
        worst = max(worst, float(np.abs(lam.lam - reference.lam).max()))
    return worst <= 1e-4, f"max weight gap {worst:.2e}"


def _check_descent_inequality():
    problem, _ = _verify_quadratic(3)
    config = SolverConfig(K=40, D=40, option="cg", N=4, u=1e-6, record_hypergrads=True)
    pref = Preference.preferred(problem.num_objectives, 0)
    trace = run_deterministic(
        problem, config, pref, np.full(problem.dim_x, 2.0), np.zeros(problem.dim_y)
    )
    worst = -np.inf
    for rec in trace.records:
        d = rec.hypergrads @ (pref.r * rec.weights.lam)
        dns = float(d @ d)
        for s in range(problem.num_objectives):
            slack = dns - 2.0 * pref.r_max * float(d @ rec.hypergrads[:, s])
            worst = max(worst, slack)
    return worst <= 1e-8, f"worst violation {worst:.2e}"


def _check_counter_identity():
    problem, _ = _verify_quadratic(4)
    pref = Preference.uniform(problem.num_objectives)
    x0 = np.zeros(problem.dim_x)
    y0 = np.zeros(problem.dim_y)
    details = []
    ok = True
    for option in ("cg", "ns"):
        config = SolverConfig(K=7, D=5, N=4, option=option)
        trace = run_deterministic(problem, config, pref, x0, y0)
        expected = expected_counters(config, problem.num_objectives, option)
        match = trace.counters.as_tuple() == expected.as_tuple()
        ok = ok and match
        details.append(f"{option}: {trace.counters.as_tuple()}")
    stoch = wrap_deterministic(problem)
    config = SolverConfig(K=4, D=5, Q=6, option="ns", beta=0.05)
    trace = run_stochastic(stoch, config, pref, x0, y0)
    expected = expected_counters(config, problem.num_objectives, "stochastic")
    ok = ok and trace.counters.as_tuple() == expected.as_tuple()
    details.append(f"stochastic: {trace.counters.as_tuple()}")
    return ok, "; ".join(details)


def _check_replay_determinism():
    problem, _ = _verify_quadratic(6)
    pref = Preference.uniform(problem.num_objectives)
    config = SolverConfig(K=10, D=10, option="cg", N=3, seed=42)
    x0 = np.full(problem.dim_x, 0.5)
    y0 = np.zeros(problem.dim_y)
    first = run_deterministic(problem, config, pref, x0, y0)
    second = run_deterministic(problem, config, pref, x0, y0)
    same = np.array_equal(first.final_x, second.final_x) and all(
        np.array_equal(a.phi, b.phi) and a.d_norm_sq == b.d_norm_sq
        for a, b in zip(first.records, second.records)
    )
    return same, "bitwise equal" if same else "traces differ"


def _check_hypercleaning():
    toy, constants = _verify_toy()
    det = toy.deterministic()
    rng = np.random.default_rng(8)
    diag = validate_problem(det, np.zeros(toy.dim_x), 0.1 * rng.standard_normal(toy.dim_y))
    curvature_ok = diag.rayleigh_min >= constants.mu_g - 1e-12
    full = toy.full_batch("ll_step")
    x = np.zeros(toy.dim_x)
    y = 0.1 * rng.standard_normal(toy.dim_y)
    bitwise = np.array_equal(toy.ll_grad_y(x, y, full), det.ll_grad_y(x, y))
    ok = curvature_ok and bitwise and diag.max_residual() <= 1e-10
    return ok, (
        f"rayleigh {diag.rayleigh_min:.4f} (mu_g {constants.mu_g}), "
        f"full-batch bitwise {bitwise}"
    )


def _check_series_bias_decay():
    spec = QuadraticBilevelSpec.random(4, 5, 2, seed=1, hessian_scale=0.15)
    problem, constants = make_quadratic(spec)
    alpha = 1.0 / constants.L
    bound = (1.0 - alpha * constants.mu_g) ** 8 + 0.05
    x = np.array([1.0, -0.5, 0.8, 0.2])
    y0 = np.full(5, 3.0)
    errors = []
    for depth in (8, 16, 32, 64):
        lower = lower_level_solve(problem, x, y0, depth, alpha, keep_trajectory=True)
        worst = 0.0
        for s in range(2):
            grad = hypergrad_ns(problem, x, lower, s, alpha)
            worst = max(worst, float(np.linalg.norm(grad - problem.reference.grad_phi(x)[:, s])))
        errors.append(worst)
    decreasing = all(b < a for a, b in zip(errors, errors[1:]))
    ratios_ok = all(b <= bound * a for a, b in zip(errors, errors[1:]))
    return decreasing and ratios_ok, f"errors {['%.2e' % e for e in errors]}"


def _check_convergence_rate():
    spec = QuadraticBilevelSpec.random(4, 4, 2, seed=5, hessian_scale=0.1)
    problem, _ = make_quadratic(spec)
    pref = Preference(np.array([0.6, 0.4]))
    config = SolverConfig(K=500, D=64, option="ns", u=0.0)
    trace = run_deterministic(
        problem, config, pref, np.full(4, 2.0), np.zeros(4)
    )
    true_d = np.array([rec.true_d_norm_sq for rec in trace.records])
    ratio = true_d[:400].mean() / true_d[:200].mean()
    ok = ratio <= 0.65 and true_d.min() <= 1e-6
    return ok, f"avg ratio {ratio:.3f}, min true d^2 {true_d.min():.2e}"


def _check_stochastic_consistency():
    toy, constants = _verify_toy()
    config = SolverConfig(
        K=15, D=40, Q=150, T=10**6, D_f=10**6, D_g=10**6, B=10**6,
        option="ns", u=1.0, seed=2,
        alpha=1.0 / constants.L, eta=1.0 / constants.L, beta=0.5,
    )
    pref = Preference.uniform(toy.num_objectives)
    x0 = np.zeros(toy.dim_x)
    y0 = np.zeros(toy.dim_y)
    stochastic = run_stochastic(toy, config, pref, x0, y0)
    deterministic = run_deterministic(toy.deterministic(), config, pref, x0, y0)
    gap = float(np.abs(stochastic.final_phi - deterministic.final_phi).max())
    return gap <= 1e-3, f"final phi gap {gap:.2e}"


def _check_front_exploration():
    spec = QuadraticBilevelSpec(
        dim_x=2, dim_y=2, num_objectives=2,
        hessian=np.array([[1.0, 0.1], [0.1, 0.8]]),
        coupling=np.array([[0.3, 0.1], [0.0, 0.2]]),
        x_targets=np.array([[2.0, 0.0], [-2.0, 0.5]]),
        y_targets=np.array([[1.0, 0.0], [0.0, -1.0]]),
    )
    problem, _ = make_quadratic(spec)
    config = SolverConfig(K=300, D=48, option="cg", N=2, u=10.0)
    grid = [0.1, 0.5, 0.9]
    prefs = [Preference(np.array([g, 1.0 - g])) for g in grid]
    result = pareto_sweep(problem, config, prefs, np.zeros(2), np.zeros(2))
    phi1 = [entry.final_phi[0] for entry in result.entries]
    ok = all(b <= a + 1e-6 for a, b in zip(phi1, phi1[1:]))
    return ok, f"phi_1 along grid {['%.3f' % v for v in phi1]}"


QUICK_CHECKS = (
    ("oracle-symmetry", _check_oracle_symmetry),
    ("oracle-curvature", _check_oracle_curvature),
    ("analytic-consistency", _check_analytic_consistency),
    ("finite-difference", _check_finite_difference),
    ("simplex-projection", _check_simplex_projection),
    ("weight-subproblem", _check_weight_subproblem),
    ("min-norm-equivalence", _check_min_norm_equivalence),
    ("descent-inequality", _check_descent_inequality),
    ("counter-identity", _check_counter_identity),
    ("replay-determinism", _check_replay_determinism),
    ("hypercleaning-oracles", _check_hypercleaning),
)

FULL_CHECKS = (
    ("series-bias-decay", _check_series_bias_decay),
    ("convergence-rate", _check_convergence_rate),
    ("stochastic-consistency", _check_stochastic_consistency),
    ("front-exploration", _check_front_exploration),
)


def cmd_verify(args) -> int:
    checks = list(QUICK_CHECKS)
    if args.full:
        checks += list(FULL_CHECKS)
    failures = []
    for name, check in checks:
        started = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # noqa: BLE001 - report, do not crash
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - started
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name} ({elapsed:.2f}s): {detail}")
        if not ok:
            failures.append(name)
    if failures:
        print(f"failed checks: {', '.join(failures)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mobilevel",
        description="Preference-guided multi-objective bilevel optimization runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="execute one optimizer run from a config")
    run_parser.add_argument("--config", required=True)
    run_parser.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE",
        help="override a config value",
    )
    run_parser.set_defaults(func=cmd_run)

    sweep_parser = sub.add_parser("sweep", help="run a preference grid")
    sweep_parser.add_argument("--config", required=True)
    sweep_parser.add_argument("--grid", required=True)
    sweep_parser.add_argument("--jobs", type=int, default=1)
    sweep_parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    sweep_parser.set_defaults(func=cmd_sweep)

    verify_parser = sub.add_parser("verify", help="run the cross-check suites")
    verify_parser.add_argument("--full", action="store_true")
    verify_parser.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
