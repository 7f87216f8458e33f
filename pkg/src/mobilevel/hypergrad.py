"""Hypergradient estimation.

The total derivative of an upper-level objective through the lower-level
solution is  grad_x f - (d2g/dxdy) v  with v solving the lower Hessian
system against grad_y f.  Two estimators are provided: a conjugate-gradient
solve of that system at the final lower iterate, and a truncated-series
estimator that walks the lower-level trajectory backwards applying one
damping factor (I - alpha * H) per recorded point.  A third routine forms
the Hessian-inverse product stochastically with exponentially shrinking
sample batches.

Oracle-call budgets are exact by construction: a lower solve of D steps
costs D gradient calls; the series estimator costs one upper gradient pair,
D+1 Jacobian products, and D+1 Hessian products; a CG solve costs one upper
gradient pair, one Jacobian product, and exactly N Hessian products (warm
starts spend one of the N applications on the initial residual).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    Batch,
    ConfigurationError,
    DeterministicOracles,
    DivergenceError,
    HypergradientMatrix,
    SolverConfig,
    StochasticOracles,
    HESSIAN,
    JACOBIAN,
    LL_STEP,
    UL_BATCH,
)
from .subsolvers import conjugate_gradient

CG_LAZY_TOL = 1e-14


@dataclass(frozen=True)
class LowerSolveResult:
    """Output of the inner gradient descent on the lower-level objective."""

    y_final: np.ndarray
    trajectory: Optional[list]
    steps_taken: int

    def __post_init__(self):
        if self.trajectory is not None:
            if len(self.trajectory) != self.steps_taken + 1:
                raise ValueError("trajectory must hold steps_taken + 1 points")
            if self.trajectory[-1] is not self.y_final and not np.array_equal(
                self.trajectory[-1], self.y_final
            ):
                raise ValueError("trajectory must end at y_final")


def lower_level_solve(
    oracles: DeterministicOracles,
    x: np.ndarray,
    y_init: np.ndarray,
    steps: int,
    step_size: float,
    keep_trajectory: bool = False,
) -> LowerSolveResult:
    """Run ``steps`` gradient-descent steps on the lower objective in y."""
    if step_size <= 0.0:
        raise ValueError("step_size must be positive")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    y = np.array(y_init, dtype=float)
    trajectory = [y.copy()] if keep_trajectory else None
    for t in range(1, steps + 1):
        y = y - step_size * oracles.ll_grad_y(x, y)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"lower-level iterate diverged at step {t}")
        if trajectory is not None:
            trajectory.append(y.copy())
    return LowerSolveResult(y_final=y, trajectory=trajectory, steps_taken=steps)


def hypergrad_cg(
    oracles: DeterministicOracles,
    x: np.ndarray,
    y_d: np.ndarray,
    s: int,
    v0: Optional[np.ndarray],
    n_steps: int,
    tol: float = 0.0,
    *,
    exact_iters: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Hypergradient of objective ``s`` via a CG solve at ``y_d``.

    Returns ``(gradient, v)`` where ``v`` is the CG iterate, reusable as a
    warm start.  The solve spends exactly ``n_steps`` Hessian-vector
    products when ``exact_iters`` is set: all of them on CG updates from a
    zero start, or one on the initial residual plus ``n_steps - 1`` updates
    from a warm start.  With ``exact_iters`` off the solve may stop early
    on a small residual.
    """
    b = oracles.ul_grad_y(s, x, y_d)
    if v0 is None:
        v0 = np.zeros(oracles.dim_y)
    warm = bool(np.any(np.asarray(v0) != 0.0))
    budget = n_steps - 1 if warm else n_steps
    v, _, _ = conjugate_gradient(
        lambda w: oracles.ll_hvp(x, y_d, w),
        b,
        v0,
        max_iters=budget,
        tol=tol if not exact_iters else 0.0,
        force_iters=exact_iters,
    )
    grad = oracles.ul_grad_x(s, x, y_d) - oracles.ll_jvp(x, y_d, v)
    return grad, v


def hypergrad_ns(
    oracles: DeterministicOracles,
    x: np.ndarray,
    lower_result: LowerSolveResult,
    s: int,
    alpha: float,
) -> np.ndarray:
    """Hypergradient of objective ``s`` via the trajectory series estimator.

    Walks the lower trajectory backwards: at each point the current
    propagated vector contributes one Jacobian product, then is damped by
    ``(I - alpha * H)`` at that same point.  Summing the contributions and
    scaling by ``alpha`` telescopes to the Hessian-inverse product in the
    limit (for a constant Hessian the sum is the truncated geometric
    series alpha * sum_m (I - alpha H)^m).
    """
    if lower_result.trajectory is None:
        raise ValueError("trajectory required; rerun the lower solve with keep_trajectory")
    trajectory = lower_result.trajectory
    y_d = trajectory[-1]
    w = oracles.ul_grad_y(s, x, y_d)
    total = np.zeros(oracles.dim_x)
    for y_t in reversed(trajectory):
        total += oracles.ll_jvp(x, y_t, w)
        w = w - alpha * oracles.ll_hvp(x, y_t, w)
    return oracles.ul_grad_x(s, x, y_d) - alpha * total


def neumann_batch_sizes(base: int, q_steps: int, eta: float, mu_g: float) -> list:
    """Shrinking sample sizes for the stochastic Hessian-inverse product.

    Batch ``i`` (applied first for ``i = Q``) has size
    ``ceil(B * Q * (1 - eta*mu_g)^(Q-i))``, floored at one.
    """
    if not (0.0 < eta * mu_g <= 1.0):
        raise ConfigurationError("eta * mu_g must lie in (0, 1]")
    decay = 1.0 - eta * mu_g
    return [
        max(1, math.ceil(base * q_steps * decay ** (q_steps - i)))
        for i in range(1, q_steps + 1)
    ]


def stochastic_hvp_neumann(
    oracles: StochasticOracles,
    x: np.ndarray,
    y_d: np.ndarray,
    v0: np.ndarray,
    q_steps: int,
    eta: float,
    batches: Sequence[Batch],
) -> np.ndarray:
    """Approximate Hessian-inverse product from sampled Hessian products.

    Backward recursion nu <- nu - eta * H(batch_i) nu for i = Q..1 starting
    from ``v0``; the output is eta times the sum of all Q+1 iterates.  With
    full batches and constant Hessian this equals
    ``eta * sum_{m=0..Q} (I - eta H)^m v0`` exactly.
    """
    if len(batches) != q_steps:
        raise ConfigurationError(f"expected {q_steps} batches, got {len(batches)}")
    for batch in batches:
        if len(batch) == 0:
            raise ConfigurationError("empty sample batch")
    nu = np.array(v0, dtype=float)
    total = nu.copy()
    for i in range(q_steps, 0, -1):
        nu = nu - eta * oracles.ll_hvp(x, y_d, nu, batches[i - 1])
        total += nu
    return eta * total


def build_hypergradient_matrix(
    oracles: DeterministicOracles,
    x: np.ndarray,
    lower_result: LowerSolveResult,
    config: SolverConfig,
    warm_v: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> tuple[HypergradientMatrix, list]:
    """One estimated hypergradient column per objective, via the configured option.

    Returns the matrix together with the per-objective CG iterates for warm
    starting the next outer iteration (``None`` entries under the series
    option).  ``config.alpha`` must already be resolved.
    """
    s_count = oracles.num_objectives
    cols = np.empty((oracles.dim_x, s_count))
    phi = np.empty(s_count)
    y_d = lower_result.y_final
    new_warm: list = [None] * s_count
    for s in range(s_count):
        phi[s] = oracles.ul_value(s, x, y_d)
        if config.option == "cg":
            v0 = None
            if config.warm_start_v and warm_v is not None and warm_v[s] is not None:
                v0 = warm_v[s]
            grad, v_n = hypergrad_cg(
                oracles,
                x,
                y_d,
                s,
                v0,
                config.N,
                tol=CG_LAZY_TOL,
                exact_iters=config.exact_counters,
            )
            new_warm[s] = v_n
        else:
            grad = hypergrad_ns(oracles, x, lower_result, s, config.alpha)
        cols[:, s] = grad
    return HypergradientMatrix(grads=cols, phi_values=phi), new_warm


def build_hypergradient_matrix_stochastic(
    oracles: StochasticOracles,
    x: np.ndarray,
    y_d: np.ndarray,
    config: SolverConfig,
    rng: np.random.Generator,
    mu_g: float,
) -> HypergradientMatrix:
    """Sampled hypergradient columns for one outer iteration.

    Draws one Jacobian batch and one set of shrinking Hessian batches shared
    by all objectives, then one upper-level batch per objective.  The
    Hessian-inverse product is seeded from the sampled upper gradient, so
    no warm start is carried across iterations.
    """
    jac_batch = oracles.sample(JACOBIAN, config.D_g, rng)
    sizes = neumann_batch_sizes(config.B, config.Q, config.eta, mu_g)
    hess_batches = [oracles.sample(HESSIAN, size, rng) for size in sizes]
    s_count = oracles.num_objectives
    cols = np.empty((oracles.dim_x, s_count))
    phi = np.empty(s_count)
    for s in range(s_count):
        ul_batch = oracles.sample(UL_BATCH, config.D_f, rng)
        v0 = oracles.ul_grad_y(s, x, y_d, ul_batch)
        v_q = stochastic_hvp_neumann(
            oracles, x, y_d, v0, config.Q, config.eta, hess_batches
        )
        cols[:, s] = oracles.ul_grad_x(s, x, y_d, ul_batch) - oracles.ll_jvp(
            x, y_d, v_q, jac_batch
        )
        phi[s] = oracles.ul_value(s, x, y_d, ul_batch)
    return HypergradientMatrix(grads=cols, phi_values=phi)


def stochastic_lower_solve(
    oracles: StochasticOracles,
    x: np.ndarray,
    y_init: np.ndarray,
    steps: int,
    step_size: float,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Stochastic gradient descent on the lower objective, one batch per step."""
    y = np.array(y_init, dtype=float)
    for t in range(1, steps + 1):
        batch = oracles.sample(LL_STEP, batch_size, rng)
        y = y - step_size * oracles.ll_grad_y(x, y, batch)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"lower-level iterate diverged at step {t}")
    return y
