"""Outer optimization loops and the preference-sweep driver.

Each outer iteration solves the lower level (warm-started), estimates one
hypergradient column per objective, picks simplex weights by the quadratic
subproblem, and steps the upper variable along the preference-scaled
combination.  The non-preference variant drops the preference scaling and
uses the plain minimum-norm weights.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    DeterministicOracles,
    IterationRecord,
    OracleCounters,
    Preference,
    RunFailure,
    RunTrace,
    SolverConfig,
    StochasticOracles,
    counted_oracles,
    counted_stochastic_oracles,
)
from .hypergrad import (
    build_hypergradient_matrix,
    build_hypergradient_matrix_stochastic,
    lower_level_solve,
    stochastic_lower_solve,
)
from .subsolvers import WcSubproblem, solve_wc_subproblem

TERM_COMPLETED = "completed"
TERM_STATIONARY = "stationary"
TERM_STOP_TOL = "stop_tol"


def _check_dims(problem, x0, y0):
    if np.shape(x0) != (problem.dim_x,):
        raise ConfigurationError(
            f"x0 has shape {np.shape(x0)}, expected ({problem.dim_x},)"
        )
    if np.shape(y0) != (problem.dim_y,):
        raise ConfigurationError(
            f"y0 has shape {np.shape(y0)}, expected ({problem.dim_y},)"
        )


def _run_deterministic_loop(
    problem: DeterministicOracles,
    config: SolverConfig,
    weight_vec: np.ndarray,
    x0: np.ndarray,
    y0: np.ndarray,
    v0: Optional[np.ndarray],
) -> RunTrace:
    """Shared engine of the preference-guided and non-preference loops.

    ``weight_vec`` scales both the Gram term of the subproblem and the
    update direction; the all-ones vector recovers plain minimum-norm
    weighting.
    """
    counters = OracleCounters()
    oracles = counted_oracles(problem, counters)
    s_count = problem.num_objectives
    x = np.array(x0, dtype=float)
    y0 = np.array(y0, dtype=float)
    y_prev = y0.copy()
    warm_v = [
        None if v0 is None else np.array(v0, dtype=float) for _ in range(s_count)
    ]
    lam = np.full(s_count, 1.0 / s_count)
    keep_traj = config.option == "ns"
    records: list = []
    termination = TERM_COMPLETED

    for k in range(config.K):
        try:
            y_start = y_prev if (k > 0 and config.warm_start_y) else y0
            lower = lower_level_solve(
                oracles, x, y_start, config.D, config.alpha, keep_trajectory=keep_traj
            )
            y_prev = lower.y_final
            matrix, warm_v = build_hypergradient_matrix(
                oracles, x, lower, config, warm_v
            )
            subproblem = WcSubproblem(
                gram=matrix.gram(), phi=matrix.phi_values, r=weight_vec, u=config.u
            )
            weights, _ = solve_wc_subproblem(subproblem, warm_start=lam)
            lam = weights.lam
        except Exception as exc:  # noqa: BLE001 - wrap with the partial trace
            raise RunFailure(
                f"run aborted at iteration {k}: {exc}",
                trace=RunTrace(tuple(records), x, y_prev, f"error: {exc}"),
            ) from exc

        direction = matrix.grads @ (weight_vec * lam)
        d_norm_sq = float(direction @ direction)
        true_d_norm_sq = None
        if problem.reference is not None:
            true_direction = problem.reference.grad_phi(x) @ (weight_vec * lam)
            true_d_norm_sq = float(true_direction @ true_direction)
        records.append(
            IterationRecord(
                k=k,
                phi=matrix.phi_values,
                weights=weights,
                d_norm_sq=d_norm_sq,
                counters=counters.snapshot(),
                true_d_norm_sq=true_d_norm_sq,
                hypergrads=matrix.grads if config.record_hypergrads else None,
            )
        )
        if d_norm_sq == 0.0:
            termination = TERM_STATIONARY
            break
        if config.stop_tol > 0.0 and d_norm_sq <= config.stop_tol:
            termination = TERM_STOP_TOL
            break
        x = x - config.beta * direction

    return RunTrace(tuple(records), x, y_prev, termination)


def run_deterministic(
    problem: DeterministicOracles,
    config: SolverConfig,
    r: Preference,
    x0: np.ndarray,
    y0: np.ndarray,
    v0: Optional[np.ndarray] = None,
) -> RunTrace:
    """Preference-guided deterministic run."""
    _check_dims(problem, x0, y0)
    if len(r) != problem.num_objectives:
        raise ConfigurationError("preference length must equal the objective count")
    config = config.resolved(problem.constants, r.r_max)
    return _run_deterministic_loop(problem, config, r.r, x0, y0, v0)


def run_nonpreference(
    problem: DeterministicOracles,
    config: SolverConfig,
    x0: np.ndarray,
    y0: np.ndarray,
    v0: Optional[np.ndarray] = None,
) -> RunTrace:
    """Minimum-norm run without preference scaling.

    The simplex weights minimize the plain Gram quadratic (no preference
    scaling, no alignment term) and the update uses the unscaled weighted
    combination of hypergradient columns.
    """
    _check_dims(problem, x0, y0)
    config = config.resolved(problem.constants, 1.0)
    if config.u != 0.0:
        config = replace(config, u=0.0)
    ones = np.ones(problem.num_objectives)
    return _run_deterministic_loop(problem, config, ones, x0, y0, v0)


def run_stochastic(
    problem: StochasticOracles,
    config: SolverConfig,
    r: Preference,
    x0: np.ndarray,
    y0: np.ndarray,
) -> RunTrace:
    """Preference-guided stochastic run with shrinking Hessian batches.

    Requires ``problem.constants.mu_g`` for the batch-size schedule.  The
    generator state is recorded per iteration so any iterate can be
    replayed exactly.
    """
    _check_dims(problem, x0, y0)
    if len(r) != problem.num_objectives:
        raise ConfigurationError("preference length must equal the objective count")
    if problem.constants is None:
        raise ConfigurationError("stochastic runs need problem constants (mu_g)")
    mu_g = problem.constants.mu_g
    config = config.resolved(problem.constants, r.r_max)
    config.validate_stochastic(mu_g)

    counters = OracleCounters()
    oracles = counted_stochastic_oracles(problem, counters)
    rng = np.random.default_rng(config.seed)
    x = np.array(x0, dtype=float)
    y0 = np.array(y0, dtype=float)
    y_prev = y0.copy()
    s_count = problem.num_objectives
    lam = np.full(s_count, 1.0 / s_count)
    records: list = []
    termination = TERM_COMPLETED

    for k in range(config.K):
        rng_state = rng.bit_generator.state
        try:
            y_start = y_prev if (k > 0 and config.warm_start_y) else y0
            y_d = stochastic_lower_solve(
                oracles, x, y_start, config.D, config.alpha, config.T, rng
            )
            y_prev = y_d
            matrix = build_hypergradient_matrix_stochastic(
                oracles, x, y_d, config, rng, mu_g
            )
            subproblem = WcSubproblem(
                gram=matrix.gram(), phi=matrix.phi_values, r=r.r, u=config.u
            )
            weights, _ = solve_wc_subproblem(subproblem, warm_start=lam)
            lam = weights.lam
        except Exception as exc:  # noqa: BLE001
            raise RunFailure(
                f"run aborted at iteration {k}: {exc}",
                trace=RunTrace(tuple(records), x, y_prev, f"error: {exc}"),
            ) from exc

        direction = matrix.grads @ (r.r * lam)
        d_norm_sq = float(direction @ direction)
        true_d_norm_sq = None
        if problem.reference is not None:
            true_direction = problem.reference.grad_phi(x) @ (r.r * lam)
            true_d_norm_sq = float(true_direction @ true_direction)
        records.append(
            IterationRecord(
                k=k,
                phi=matrix.phi_values,
                weights=weights,
                d_norm_sq=d_norm_sq,
                counters=counters.snapshot(),
                true_d_norm_sq=true_d_norm_sq,
                hypergrads=matrix.grads if config.record_hypergrads else None,
                rng_state=rng_state,
            )
        )
        if d_norm_sq == 0.0:
            termination = TERM_STATIONARY
            break
        if config.stop_tol > 0.0 and d_norm_sq <= config.stop_tol:
            termination = TERM_STOP_TOL
            break
        x = x - config.beta * direction

    return RunTrace(tuple(records), x, y_prev, termination)


@dataclass(frozen=True)
class SweepEntry:
    """Outcome of one preference in a sweep."""

    preference: Preference
    final_phi: Optional[np.ndarray]
    final_d_norm_sq: Optional[float]
    trace: Optional[RunTrace]
    error: Optional[str] = None


@dataclass(frozen=True)
class SweepResult:
    """Per-preference outcomes, aligned with the requested order."""

    entries: Sequence[SweepEntry]

    def __len__(self) -> int:
        return len(self.entries)


def pareto_sweep(
    problem: DeterministicOracles,
    config: SolverConfig,
    preferences: Sequence[Preference],
    x0: np.ndarray,
    y0: np.ndarray,
    v0: Optional[np.ndarray] = None,
    parallel: bool = False,
    jobs: Optional[int] = None,
) -> SweepResult:
    """One full run per preference from identical initial conditions.

    Individual run failures are recorded in their entry without aborting
    the rest of the sweep.  Runs never share solver state, so parallel
    execution returns the same entries as sequential.
    """
    if not preferences:
        raise ConfigurationError("preferences must be nonempty")

    def one(pref: Preference) -> SweepEntry:
        try:
            trace = run_deterministic(problem, config, pref, x0, y0, v0)
        except RunFailure as failure:
            return SweepEntry(
                preference=pref,
                final_phi=None,
                final_d_norm_sq=None,
                trace=failure.trace,
                error=str(failure),
            )
        return SweepEntry(
            preference=pref,
            final_phi=trace.final_phi,
            final_d_norm_sq=trace.final_d_norm_sq,
            trace=trace,
        )

    if parallel:
        with ThreadPoolExecutor(max_workers=jobs or len(preferences)) as pool:
            entries = list(pool.map(one, preferences))
    else:
        entries = [one(pref) for pref in preferences]
    return SweepResult(tuple(entries))


def expected_counters(config: SolverConfig, s_count: int, option: str) -> OracleCounters:
    """Closed-form oracle counts of a completed run.

    ``option`` selects between the two deterministic estimators and the
    stochastic loop.  The identities hold exactly when the run keeps its
    per-solve budgets fixed (``exact_counters`` on) and completes all K
    iterations; for early-stopped runs substitute the recorded iteration
    count for K.
    """
    k, d = config.K, config.D
    if option == "ns":
        return OracleCounters(
            gc_f=2 * k * s_count,
            gc_g=k * d,
            jv_g=k * (d + 1) * s_count,
            hv_g=k * (d + 1) * s_count,
        )
    if option == "cg":
        return OracleCounters(
            gc_f=2 * k * s_count,
            gc_g=k * d,
            jv_g=k * s_count,
            hv_g=k * config.N * s_count,
        )
    if option == "stochastic":
        return OracleCounters(
            gc_f=2 * k * s_count,
            gc_g=k * d,
            jv_g=k * s_count,
            hv_g=k * config.Q * s_count,
        )
    raise ConfigurationError("option must be 'cg', 'ns', or 'stochastic'")
