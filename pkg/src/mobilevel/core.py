"""Shared domain types, oracle contracts, and run records.

Conventions used throughout the package:

* ``x`` is the upper-level variable (dimension ``p``), ``y`` the
  lower-level variable (dimension ``q``); there are ``S`` upper-level
  objectives.
* Oracles are opaque callables supplied by the problem.  The library never
  differentiates anything itself; benchmark problems provide exact analytic
  oracles, and user problems must do the same.
* All types here are immutable after construction except
  :class:`OracleCounters`, which is owned by a single optimizer run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

PREFERENCE_SUM_TOL = 1e-12
PREFERENCE_MIN_COMPONENT = 1e-9
SIMPLEX_SUM_TOL = 1e-10

# Purpose tags understood by stochastic samplers.
LL_STEP = "ll_step"
UL_BATCH = "ul"
JACOBIAN = "jacobian"
HESSIAN = "hessian"
PURPOSES = (LL_STEP, UL_BATCH, JACOBIAN, HESSIAN)


class InvalidProblemError(ValueError):
    """An oracle bundle is inconsistent (dimensions, symmetry, curvature)."""


class ConfigurationError(ValueError):
    """A solver configuration value is missing or out of range."""


class NumericalBreakdownError(RuntimeError):
    """A numerical kernel produced non-finite values."""


class DivergenceError(RuntimeError):
    """A lower-level iteration left the finite range."""


class WcSolverError(RuntimeError):
    """The simplex QP solver exhausted its budget; carries the best iterate."""

    def __init__(self, message, best_weights=None, residual=None):
        super().__init__(message)
        self.best_weights = best_weights
        self.residual = residual


class OracleFailureError(RuntimeError):
    """An independent verification oracle failed to converge."""


class UnsupportedProblemError(ValueError):
    """Requested operation outside the supported problem sizes."""


class RunFailure(RuntimeError):
    """An optimizer run aborted; ``trace`` holds the partial record."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def _frozen_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a nonempty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Preference:
    """Strictly positive objective weights summing to one.

    Components below ``1e-9`` are rejected rather than clamped: the descent
    guarantees of the preference-weighted direction require every weight to
    be bounded away from zero.
    """

    r: np.ndarray

    def __post_init__(self):
        arr = _frozen_vector(self.r, "preference")
        if np.any(arr < PREFERENCE_MIN_COMPONENT):
            raise ValueError(
                "preference components must be strictly positive "
                f"(>= {PREFERENCE_MIN_COMPONENT:g})"
            )
        if abs(float(arr.sum()) - 1.0) > PREFERENCE_SUM_TOL:
            raise ValueError("preference components must sum to 1")
        object.__setattr__(self, "r", arr)

    def __len__(self) -> int:
        return self.r.size

    @property
    def r_max(self) -> float:
        return float(self.r.max())

    @classmethod
    def uniform(cls, size: int) -> "Preference":
        return cls(np.full(size, 1.0 / size))

    @classmethod
    def preferred(cls, size: int, index: int) -> "Preference":
        """One objective weighted 0.8, the rest sharing 0.2 equally."""
        if size == 1:
            return cls(np.ones(1))
        r = np.full(size, 0.2 / (size - 1))
        r[index] = 0.8
        return cls(r)

    @classmethod
    def extreme(cls, size: int, index: int) -> "Preference":
        """One objective weighted 0.96, the rest sharing 0.04 equally."""
        if size == 1:
            return cls(np.ones(1))
        r = np.full(size, 0.04 / (size - 1))
        r[index] = 0.96
        return cls(r)


@dataclass(frozen=True)
class SimplexWeights:
    """Nonnegative weights summing to one."""

    lam: np.ndarray

    def __post_init__(self):
        arr = _frozen_vector(self.lam, "simplex weights")
        if np.any(arr < 0.0):
            raise ValueError("simplex weights must be nonnegative")
        if abs(float(arr.sum()) - 1.0) > SIMPLEX_SUM_TOL:
            raise ValueError("simplex weights must sum to 1")
        object.__setattr__(self, "lam", arr)

    def __len__(self) -> int:
        return self.lam.size


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness metadata for a bilevel problem.

    ``mu_g`` is the strong-convexity constant of the lower level in ``y``
    and is required.  The remaining constants are optional and are used
    only to derive default step sizes; correctness never depends on them.
    ``L`` bounds gradient Lipschitz constants of all objectives, ``M``
    bounds function-value Lipschitz constants, and ``tau``/``rho`` bound
    the Lipschitz constants of the cross and lower Hessian blocks.
    """

    mu_g: float
    L: Optional[float] = None
    M: Optional[float] = None
    tau: Optional[float] = None
    rho: Optional[float] = None

    def __post_init__(self):
        if not (self.mu_g > 0.0):
            raise ValueError("mu_g must be positive")
        if self.L is not None and self.L < self.mu_g:
            raise ValueError("L must be at least mu_g")

    @property
    def kappa(self) -> Optional[float]:
        return None if self.L is None else self.L / self.mu_g

    def smoothness_upper(self) -> Optional[float]:
        """Upper-level smoothness bound; ``None`` when not derivable.

        The bound is L + (2L^2 + tau*M^2)/mu + (rho*L*M + L^3 + tau*L*M)/mu^2
        + rho*L^2*M/mu^3.  Terms multiplied by ``M`` vanish when both
        ``tau`` and ``rho`` are zero, so ``M`` is only required otherwise.
        """
        if self.L is None or self.tau is None or self.rho is None:
            return None
        L, mu, tau, rho = self.L, self.mu_g, self.tau, self.rho
        if (tau > 0.0 or rho > 0.0) and self.M is None:
            return None
        M = 0.0 if self.M is None else self.M
        return (
            L
            + (2.0 * L**2 + tau * M**2) / mu
            + (rho * L * M + L**3 + tau * L * M) / mu**2
            + rho * L**2 * M / mu**3
        )

    def default_ll_step(self) -> Optional[float]:
        return None if self.L is None else 1.0 / self.L

    def default_ul_step(self, r_max: float) -> Optional[float]:
        """Upper-level step min{1/(2(1+L_phi)r_max), 1/(3 L_phi)}."""
        l_phi = self.smoothness_upper()
        if l_phi is None:
            return None
        return min(1.0 / (2.0 * (1.0 + l_phi) * r_max), 1.0 / (3.0 * l_phi))


_OPTIONS = ("cg", "ns")


@dataclass(frozen=True)
class SolverConfig:
    """Every tunable of the optimizer runs.

    Step sizes left as ``None`` are resolved from :class:`ProblemConstants`
    at run start; there are no silent numeric defaults.  ``K`` may be zero
    (an empty run); all other iteration counts are at least one.
    """

    K: int = 100
    D: int = 10
    N: int = 10
    Q: int = 10
    alpha: Optional[float] = None
    beta: Optional[float] = None
    eta: Optional[float] = None
    u: float = 0.0
    option: str = "cg"
    T: int = 32
    D_f: int = 32
    D_g: int = 32
    B: int = 8
    seed: int = 0
    warm_start_y: bool = True
    warm_start_v: bool = True
    stop_tol: float = 0.0
    exact_counters: bool = True
    record_hypergrads: bool = False

    def __post_init__(self):
        if self.K < 0:
            raise ConfigurationError("K must be nonnegative")
        for name in ("D", "N", "Q"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        for name in ("T", "D_f", "D_g", "B"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"batch size {name} must be at least 1")
        for name in ("alpha", "beta", "eta"):
            value = getattr(self, name)
            if value is not None and not (value > 0.0):
                raise ConfigurationError(f"step size {name} must be positive")
        if self.u < 0.0:
            raise ConfigurationError("u must be nonnegative")
        if self.stop_tol < 0.0:
            raise ConfigurationError("stop_tol must be nonnegative")
        if self.option not in _OPTIONS:
            raise ConfigurationError(f"option must be one of {_OPTIONS}")

    def resolved(
        self, constants: Optional[ProblemConstants], r_max: float = 1.0
    ) -> "SolverConfig":
        """Fill missing step sizes from problem constants, or fail loudly."""
        alpha, beta, eta = self.alpha, self.beta, self.eta
        if alpha is None and constants is not None:
            alpha = constants.default_ll_step()
        if beta is None and constants is not None:
            beta = constants.default_ul_step(r_max)
        if eta is None and constants is not None:
            eta = constants.default_ll_step()
        missing = [n for n, v in (("alpha", alpha), ("beta", beta), ("eta", eta)) if v is None]
        if missing:
            raise ConfigurationError(
                "step sizes not set and not derivable from problem constants: "
                + ", ".join(missing)
            )
        return replace(self, alpha=alpha, beta=beta, eta=eta)

    def validate_stochastic(self, mu_g: float) -> None:
        """Check the shrinking-batch feasibility bound B*Q*(1-eta*mu)^(Q-1) >= 1."""
        if self.eta is None:
            raise ConfigurationError("eta must be resolved before a stochastic run")
        floor = self.B * self.Q * (1.0 - self.eta * mu_g) ** (self.Q - 1)
        if floor < 1.0:
            raise ConfigurationError(
                f"B*Q*(1-eta*mu_g)^(Q-1) = {floor:g} < 1; "
                "increase B or Q, or decrease eta"
            )


@dataclass
class OracleCounters:
    """Counts of oracle evaluations during one run.

    ``gc_f`` counts upper-level partial gradients, ``gc_g`` lower-level
    gradients, ``jv_g`` cross Jacobian-vector products, and ``hv_g``
    lower Hessian-vector products.  Function-value evaluations are free.
    """

    gc_f: int = 0
    gc_g: int = 0
    jv_g: int = 0
    hv_g: int = 0

    def snapshot(self) -> "OracleCounters":
        return replace(self)

    def as_tuple(self) -> tuple:
        return (self.gc_f, self.gc_g, self.jv_g, self.hv_g)

    def __ge__(self, other: "OracleCounters") -> bool:
        return all(a >= b for a, b in zip(self.as_tuple(), other.as_tuple()))


@dataclass(frozen=True)
class AnalyticReference:
    """Ground-truth hooks exposed by benchmark problems.

    ``y_star`` maps x to the exact lower-level solution, ``phi`` to the
    vector of upper-level values at that solution, and ``grad_phi`` to the
    p-by-S matrix of exact total derivatives.
    """

    y_star: Callable[[np.ndarray], np.ndarray]
    phi: Callable[[np.ndarray], np.ndarray]
    grad_phi: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DeterministicOracles:
    """First- and second-order oracles of a deterministic bilevel problem.

    ``ll_hvp(x, y, v)`` applies the lower-level Hessian in ``y`` to ``v``
    (q to q) and must be a symmetric positive-definite map for every fixed
    ``(x, y)``.  ``ll_jvp(x, y, v)`` applies the mixed second derivative
    (q to p).
    """

    num_objectives: int
    dim_x: int
    dim_y: int
    ul_value: Callable[[int, np.ndarray, np.ndarray], float]
    ul_grad_x: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    ul_grad_y: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    ll_grad_y: Callable[[np.ndarray, np.ndarray], np.ndarray]
    ll_hvp: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    ll_jvp: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    constants: Optional[ProblemConstants] = None
    reference: Optional[AnalyticReference] = None


@dataclass(frozen=True)
class Batch:
    """A seeded draw of sample indices for one oracle purpose."""

    purpose: str
    indices: np.ndarray

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class StochasticOracles:
    """Sampled oracles plus the sampler that produces batch handles.

    Every oracle takes a :class:`Batch` as its final argument.  Evaluating
    with a full batch must reproduce the deterministic oracle exactly.
    ``dataset_sizes`` maps each purpose tag to its population size.
    """

    num_objectives: int
    dim_x: int
    dim_y: int
    dataset_sizes: Mapping[str, int]
    ul_value: Callable[[int, np.ndarray, np.ndarray, Batch], float]
    ul_grad_x: Callable[[int, np.ndarray, np.ndarray, Batch], np.ndarray]
    ul_grad_y: Callable[[int, np.ndarray, np.ndarray, Batch], np.ndarray]
    ll_grad_y: Callable[[np.ndarray, np.ndarray, Batch], np.ndarray]
    ll_hvp: Callable[[np.ndarray, np.ndarray, np.ndarray, Batch], np.ndarray]
    ll_jvp: Callable[[np.ndarray, np.ndarray, np.ndarray, Batch], np.ndarray]
    constants: Optional[ProblemConstants] = None
    reference: Optional[AnalyticReference] = None

    def sample(self, purpose: str, size: int, rng: np.random.Generator) -> Batch:
        """Draw ``size`` indices without replacement; full batch when size >= n.

        Two calls with identical generator state and purpose return
        identical batches.
        """
        if size < 1:
            raise ConfigurationError("batch size must be at least 1")
        n = self.dataset_sizes[purpose]
        if size >= n:
            return Batch(purpose, np.arange(n))
        return Batch(purpose, np.sort(rng.choice(n, size=size, replace=False)))

    def full_batch(self, purpose: str) -> Batch:
        return Batch(purpose, np.arange(self.dataset_sizes[purpose]))

    def deterministic(self) -> DeterministicOracles:
        """Full-batch view of this problem as deterministic oracles."""
        full = {purpose: self.full_batch(purpose) for purpose in self.dataset_sizes}

        return DeterministicOracles(
            num_objectives=self.num_objectives,
            dim_x=self.dim_x,
            dim_y=self.dim_y,
            ul_value=lambda s, x, y: self.ul_value(s, x, y, full[UL_BATCH]),
            ul_grad_x=lambda s, x, y: self.ul_grad_x(s, x, y, full[UL_BATCH]),
            ul_grad_y=lambda s, x, y: self.ul_grad_y(s, x, y, full[UL_BATCH]),
            ll_grad_y=lambda x, y: self.ll_grad_y(x, y, full[LL_STEP]),
            ll_hvp=lambda x, y, v: self.ll_hvp(x, y, v, full[HESSIAN]),
            ll_jvp=lambda x, y, v: self.ll_jvp(x, y, v, full[JACOBIAN]),
            constants=self.constants,
            reference=self.reference,
        )


def wrap_deterministic(oracles: DeterministicOracles) -> StochasticOracles:
    """Zero-variance stochastic view of a deterministic problem.

    Every purpose has a single pseudo-sample, so every batch is the full
    batch and every sampled oracle returns the wrapped value bitwise.
    """
    return StochasticOracles(
        num_objectives=oracles.num_objectives,
        dim_x=oracles.dim_x,
        dim_y=oracles.dim_y,
        dataset_sizes={purpose: 1 for purpose in PURPOSES},
        ul_value=lambda s, x, y, b: oracles.ul_value(s, x, y),
        ul_grad_x=lambda s, x, y, b: oracles.ul_grad_x(s, x, y),
        ul_grad_y=lambda s, x, y, b: oracles.ul_grad_y(s, x, y),
        ll_grad_y=lambda x, y, b: oracles.ll_grad_y(x, y),
        ll_hvp=lambda x, y, v, b: oracles.ll_hvp(x, y, v),
        ll_jvp=lambda x, y, v, b: oracles.ll_jvp(x, y, v),
        constants=oracles.constants,
        reference=oracles.reference,
    )


def counted_oracles(
    oracles: DeterministicOracles, counters: OracleCounters
) -> DeterministicOracles:
    """View of ``oracles`` whose calls increment ``counters``.

    Value evaluations are not counted; only gradients and second-order
    products are.  Dimension checks on this hot path are assertions only,
    stripped under ``python -O``.
    """
    p, q, s_count = oracles.dim_x, oracles.dim_y, oracles.num_objectives

    def ul_grad_x(s, x, y):
        assert 0 <= s < s_count and len(x) == p and len(y) == q
        counters.gc_f += 1
        return oracles.ul_grad_x(s, x, y)

    def ul_grad_y(s, x, y):
        assert 0 <= s < s_count and len(x) == p and len(y) == q
        counters.gc_f += 1
        return oracles.ul_grad_y(s, x, y)

    def ll_grad_y(x, y):
        assert len(x) == p and len(y) == q
        counters.gc_g += 1
        return oracles.ll_grad_y(x, y)

    def ll_hvp(x, y, v):
        assert len(x) == p and len(v) == q
        counters.hv_g += 1
        return oracles.ll_hvp(x, y, v)

    def ll_jvp(x, y, v):
        assert len(x) == p and len(v) == q
        counters.jv_g += 1
        return oracles.ll_jvp(x, y, v)

    return replace(
        oracles,
        ul_grad_x=ul_grad_x,
        ul_grad_y=ul_grad_y,
        ll_grad_y=ll_grad_y,
        ll_hvp=ll_hvp,
        ll_jvp=ll_jvp,
    )


def counted_stochastic_oracles(
    oracles: StochasticOracles, counters: OracleCounters
) -> StochasticOracles:
    """Stochastic counterpart of :func:`counted_oracles`.

    One counter tick per oracle call regardless of batch size.
    """
    p, q, s_count = oracles.dim_x, oracles.dim_y, oracles.num_objectives

    def ul_grad_x(s, x, y, b):
        assert 0 <= s < s_count and len(x) == p and len(y) == q
        counters.gc_f += 1
        return oracles.ul_grad_x(s, x, y, b)

    def ul_grad_y(s, x, y, b):
        assert 0 <= s < s_count and len(x) == p and len(y) == q
        counters.gc_f += 1
        return oracles.ul_grad_y(s, x, y, b)

    def ll_grad_y(x, y, b):
        assert len(x) == p and len(y) == q
        counters.gc_g += 1
        return oracles.ll_grad_y(x, y, b)

    def ll_hvp(x, y, v, b):
        assert len(x) == p and len(v) == q
        counters.hv_g += 1
        return oracles.ll_hvp(x, y, v, b)

    def ll_jvp(x, y, v, b):
        assert len(x) == p and len(v) == q
        counters.jv_g += 1
        return oracles.ll_jvp(x, y, v, b)

    return replace(
        oracles,
        ul_grad_x=ul_grad_x,
        ul_grad_y=ul_grad_y,
        ll_grad_y=ll_grad_y,
        ll_hvp=ll_hvp,
        ll_jvp=ll_jvp,
    )


@dataclass(frozen=True)
class HypergradientMatrix:
    """Estimated per-objective hypergradients, one column per objective.

    ``phi_values`` holds the upper-level objective values at the point
    where the columns were evaluated.
    """

    grads: np.ndarray
    phi_values: np.ndarray

    def __post_init__(self):
        grads = np.asarray(self.grads, dtype=float)
        phi = np.asarray(self.phi_values, dtype=float)
        if grads.ndim != 2:
            raise ValueError("hypergradient matrix must be 2-d (p x S)")
        if phi.shape != (grads.shape[1],):
            raise ValueError("phi_values length must equal the column count")
        if not (np.all(np.isfinite(grads)) and np.all(np.isfinite(phi))):
            raise ValueError("hypergradient entries must be finite")
        grads.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "grads", grads)
        object.__setattr__(self, "phi_values", phi)

    @property
    def num_objectives(self) -> int:
        return self.grads.shape[1]

    def gram(self) -> np.ndarray:
        return self.grads.T @ self.grads


@dataclass(frozen=True)
class IterationRecord:
    """One outer-iteration snapshot of a run."""

    k: int
    phi: np.ndarray
    weights: SimplexWeights
    d_norm_sq: float
    counters: OracleCounters
    true_d_norm_sq: Optional[float] = None
    hypergrads: Optional[np.ndarray] = None
    rng_state: Optional[dict] = None


@dataclass(frozen=True)
class RunTrace:
    """Per-iteration records plus the final iterates of one run."""

    records: Sequence[IterationRecord]
    final_x: np.ndarray
    final_y: np.ndarray
    termination: str

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_phi(self) -> Optional[np.ndarray]:
        return self.records[-1].phi if self.records else None

    @property
    def final_d_norm_sq(self) -> Optional[float]:
        return self.records[-1].d_norm_sq if self.records else None

    @property
    def counters(self) -> OracleCounters:
        return self.records[-1].counters.snapshot() if self.records else OracleCounters()


@dataclass(frozen=True)
class ProblemDiagnostics:
    """Numerical health report of an oracle bundle at one point."""

    symmetry_residual: float
    hvp_linearity_residual: float
    jvp_linearity_residual: float
    rayleigh_min: float

    def max_residual(self) -> float:
        return max(
            self.symmetry_residual,
            self.hvp_linearity_residual,
            self.jvp_linearity_residual,
        )


def validate_problem(
    problem: DeterministicOracles,
    x: np.ndarray,
    y: np.ndarray,
    probes: int = 8,
    seed: int = 0,
) -> ProblemDiagnostics:
    """Probe an oracle bundle for symmetry, linearity, and curvature.

    Random probe vectors check that ``ll_hvp`` is a symmetric linear map,
    that ``ll_jvp`` is linear, and estimate the smallest Rayleigh quotient
    of the lower-level Hessian.  Raises :class:`InvalidProblemError` on
    dimension mismatches.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (problem.dim_x,):
        raise InvalidProblemError(
            f"x has shape {x.shape}, expected ({problem.dim_x},)"
        )
    if y.shape != (problem.dim_y,):
        raise InvalidProblemError(
            f"y has shape {y.shape}, expected ({problem.dim_y},)"
        )
    rng = np.random.default_rng(seed)
    q, p = problem.dim_y, problem.dim_x

    probe = problem.ll_hvp(x, y, rng.standard_normal(q))
    if np.shape(probe) != (q,):
        raise InvalidProblemError("ll_hvp output dimension mismatch")
    probe = problem.ll_jvp(x, y, rng.standard_normal(q))
    if np.shape(probe) != (p,):
        raise InvalidProblemError("ll_jvp output dimension mismatch")

    sym = 0.0
    hvp_lin = 0.0
    jvp_lin = 0.0
    rayleigh = np.inf
    for _ in range(probes):
        u = rng.standard_normal(q)
        v = rng.standard_normal(q)
        a, b = rng.standard_normal(2)
        hu = problem.ll_hvp(x, y, u)
        hv = problem.ll_hvp(x, y, v)
        uhv = float(u @ hv)
        vhu = float(v @ hu)
        sym = max(sym, abs(uhv - vhu) / max(1.0, abs(uhv), abs(vhu)))
        combo = problem.ll_hvp(x, y, a * u + b * v)
        expect = a * hu + b * hv
        hvp_lin = max(
            hvp_lin,
            float(np.linalg.norm(combo - expect)) / max(1.0, float(np.linalg.norm(expect))),
        )
        ju = problem.ll_jvp(x, y, u)
        jv = problem.ll_jvp(x, y, v)
        jcombo = problem.ll_jvp(x, y, a * u + b * v)
        jexpect = a * ju + b * jv
        jvp_lin = max(
            jvp_lin,
            float(np.linalg.norm(jcombo - jexpect)) / max(1.0, float(np.linalg.norm(jexpect))),
        )
        rayleigh = min(rayleigh, float(u @ hu) / float(u @ u))

    return ProblemDiagnostics(
        symmetry_residual=sym,
        hvp_linearity_residual=hvp_lin,
        jvp_linearity_residual=jvp_lin,
        rayleigh_min=rayleigh,
    )
