"""
Bayesian optimization for coverage closure.

A Gaussian-process surrogate (squared-exponential kernel, constant prior
mean, profiled signal variance) is fitted to the objective values seen so
far, and the next input is the maximizer of Expected Improvement. The
objective is a coverpoint read off a simulated trace:

* ``gap_lower``: minimize y_C(x) - a  (push the observable below ``a``)
* ``gap_upper``: minimize b - y_C(x)  (push it above ``b``)
* ``bug_bin``:   minimize |y_C(x) - (c + d)/2|, stopping as soon as
  y_C(x) lands inside the illegal bin [c, d]

The optimizer works on the unit cube; ``ParameterSpace`` maps to and from
the caller's units.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm, qmc

from core.bins import Bin, BinGrid
from core.coverage_engine import ArtifactError, CoverPoint, artifact_output, evaluate
from core.trace import Trace

logger = logging.getLogger(__name__)

GAP_LOWER = "gap_lower"
GAP_UPPER = "gap_upper"
BUG_BIN = "bug_bin"
OBJECTIVE_KINDS = (GAP_LOWER, GAP_UPPER, BUG_BIN)

# EI at or below this is treated as zero everywhere
EI_FLOOR = 1e-16
_MIN_SIGNAL_VARIANCE = 1e-30


class BayesOptError(Exception):
    """Base class for optimizer failures."""


class SingularKernel(BayesOptError):
    def __init__(self, jitter: float):
        self.jitter = jitter
        super().__init__(f"Kernel matrix is not positive definite even with jitter {jitter!r}")


class NegativeSigma(BayesOptError, ValueError):
    pass


class SimulatorError(BayesOptError):
    """An objective evaluation failed; ``history`` holds everything evaluated before it."""

    def __init__(self, message: str, history: "OptimizationHistory"):
        self.history = history
        super().__init__(message)


@dataclass(frozen=True)
class BoSettings:
    n_candidates: int = 1024
    n_restarts: int = 5
    jitter: float = 1e-10
    max_jitter: float = 1e-6
    lengthscale_grid: int = 16


# ---------------------------------------------------------------------------
# Parameter space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSpace:
    bounds: tuple[tuple[float, float], ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if not bounds:
            raise BayesOptError("Parameter space needs at least one dimension")
        for lo, hi in bounds:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise BayesOptError(f"Invalid parameter bounds [{lo!r}, {hi!r}]")
        object.__setattr__(self, "bounds", bounds)
        names = tuple(self.names) or tuple(f"x{i}" for i in range(len(bounds)))
        if len(names) != len(bounds):
            raise BayesOptError("One name per parameter dimension")
        object.__setattr__(self, "names", names)

    @classmethod
    def from_bin(cls, domain: Bin, name: str = "x") -> "ParameterSpace":
        return cls(((domain.lower, domain.upper),), (name,))

    @property
    def k(self) -> int:
        return len(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    def to_unit(self, x) -> np.ndarray:
        span = self.upper - self.lower
        span = np.where(span > 0, span, 1.0)
        return (np.asarray(x, dtype=np.float64) - self.lower) / span

    def from_unit(self, u) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
        return self.lower + u * (self.upper - self.lower)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GpHyperparams:
    lengthscales: tuple[float, ...]
    signal_variance: Optional[float] = None
    jitter: float = 1e-10
    prior_mean: Optional[float] = None


def _correlation(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    diff = (A[:, None, :] - B[None, :, :]) / lengthscales
    return np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def _factor(corr: np.ndarray, jitter: float, max_jitter: float):
    """Cholesky of corr + j*I, raising j tenfold from ``jitter`` up to ``max_jitter``."""
    n = corr.shape[0]
    j = jitter
    while True:
        try:
            return linalg.cho_factor(corr + j * np.eye(n), lower=True), j
        except linalg.LinAlgError:
            if j >= max_jitter:
                raise SingularKernel(j) from None
            j = min(max(j * 10, 1e-12), max_jitter)
            logger.debug("Kernel factorization failed; retrying with jitter %g", j)


@dataclass(frozen=True)
class GpPosterior:
    X: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal_variance: float
    jitter: float
    prior_mean: float
    _chol: Any = field(repr=False, compare=False)
    _alpha: np.ndarray = field(repr=False, compare=False)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    def predict(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation at each row of ``Xs``."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
        cross = _correlation(Xs, self.X, self.lengthscales)
        mean = self.prior_mean + cross @ self._alpha
        v = linalg.cho_solve(self._chol, cross.T)
        var = self.signal_variance * np.clip(1.0 - np.sum(cross * v.T, axis=1), 0.0, None)
        return mean, np.sqrt(var)

    def log_marginal_likelihood(self) -> float:
        return _profile_lml(self._chol, self.y - self.prior_mean)[0]


def _profile_lml(chol, resid: np.ndarray) -> tuple[float, float]:
    """(profile log marginal likelihood, signal variance) with sigma_f^2 at its optimum."""
    n = resid.size
    quad = float(resid @ linalg.cho_solve(chol, resid))
    sigma2 = max(quad / n, _MIN_SIGNAL_VARIANCE)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return -0.5 * n * math.log(sigma2) - 0.5 * logdet - 0.5 * n, sigma2


def _build(X, y, ls, sigma2, jitter, max_jitter, mean) -> GpPosterior:
    chol, used = _factor(_correlation(X, X, ls), jitter, max_jitter)
    resid = y - mean
    if sigma2 is None:
        _, sigma2 = _profile_lml(chol, resid)
    alpha = linalg.cho_solve(chol, resid)
    return GpPosterior(X, y, ls, float(sigma2), used, float(mean), chol, alpha)


def gp_fit(
    X,
    y,
    hyperparams: Optional[GpHyperparams] = None,
    scale: Optional[Sequence[float]] = None,
    jitter: float = 1e-10,
    max_jitter: float = 1e-6,
    grid_size: int = 16,
) -> GpPosterior:
    """Fit the surrogate; length-scales come from a log-grid likelihood search when
    ``hyperparams`` is omitted.

    The grid is ``logspace(-2, 1, grid_size) * scale`` per dimension: one
    isotropic sweep, then one coordinate-wise sweep for k > 1.

    The prior mean is the constant ``mean(y)`` unless ``hyperparams`` sets
    ``prior_mean`` (pass 0.0 for a zero-mean prior). Objective values are
    offsets from a bound of arbitrary magnitude, so a zero mean would pull
    predictions far from the data toward 0 rather than toward the observed
    level, and the profiled signal variance would absorb that offset.
    """
    X = np.asarray(X, dtype=np.float64)
    X = X[:, None] if X.ndim == 1 else np.atleast_2d(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.size or y.size < 1:
        raise BayesOptError(f"Need matching, nonempty X ({X.shape[0]} rows) and y ({y.size} values)")
    k = X.shape[1]

    if hyperparams is not None:
        ls = np.broadcast_to(np.asarray(hyperparams.lengthscales, dtype=np.float64), (k,)).copy()
        mean = float(np.mean(y)) if hyperparams.prior_mean is None else hyperparams.prior_mean
        return _build(X, y, ls, hyperparams.signal_variance, hyperparams.jitter, max_jitter, mean)

    mean = float(np.mean(y))
    scale = np.ones(k) if scale is None else np.asarray(scale, dtype=np.float64)
    grid = np.logspace(-2, 1, grid_size)
    resid = y - mean

    def score(ls):
        try:
            chol, _ = _factor(_correlation(X, X, ls), jitter, max_jitter)
        except SingularKernel:
            return -math.inf
        return _profile_lml(chol, resid)[0]

    best_ls, best = None, -math.inf
    for g in grid:
        ls = g * scale
        s = score(ls)
        if s > best:
            best_ls, best = ls, s
    if best_ls is None:
        raise SingularKernel(max_jitter)
    if k > 1:
        for d in range(k):
            for g in grid:
                ls = best_ls.copy()
                ls[d] = g * scale[d]
                s = score(ls)
                if s > best:
                    best_ls, best = ls, s
    return _build(X, y, best_ls, None, jitter, max_jitter, mean)


def gp_predict(p: GpPosterior, x) -> tuple[float, float]:
    mean, sd = p.predict(np.atleast_2d(x))
    return float(mean[0]), float(sd[0])


# ---------------------------------------------------------------------------
# Expected improvement
# ---------------------------------------------------------------------------

def expected_improvement(mu, sigma, f_star):
    """E[max(f_star - f, 0)] for f ~ N(mu, sigma^2); exact for sigma == 0."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise NegativeSigma(f"Negative posterior standard deviation {sigma.min()!r}")
    delta = f_star - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, delta / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0, delta * norm.cdf(z) + sigma * norm.pdf(z), np.maximum(delta, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass(frozen=True)
class EiState:
    posterior: GpPosterior
    incumbent: float

    @classmethod
    def from_posterior(cls, posterior: GpPosterior) -> "EiState":
        return cls(posterior, float(np.min(posterior.y)))

    def ei(self, U) -> np.ndarray:
        mu, sd = self.posterior.predict(U)
        return np.atleast_1d(expected_improvement(mu, sd, self.incumbent))


def _candidates(k: int, n: int, seed: int) -> np.ndarray:
    sampler = qmc.Sobol(d=k, scramble=True, seed=seed)
    return sampler.random_base2(m=max(0, math.ceil(math.log2(max(n, 1)))))[:n]


def suggest_next(s: EiState, space: ParameterSpace, settings: BoSettings = BoSettings(), seed: int = 0) -> np.ndarray:
    """argmax EI: best ``n_restarts`` of ``n_candidates`` Sobol points, each polished
    with L-BFGS-B. If EI is zero everywhere, the candidate farthest from the
    training inputs is returned instead."""
    U = _candidates(space.k, settings.n_candidates, seed)
    ei = s.ei(U)
    if float(np.max(ei)) <= EI_FLOOR:
        dist = np.min(np.linalg.norm(U[:, None, :] - s.posterior.X[None, :, :], axis=-1), axis=1)
        logger.debug("EI vanishes everywhere; falling back to the farthest candidate")
        return space.from_unit(U[int(np.argmax(dist))])

    order = np.argsort(-ei, kind="stable")[: settings.n_restarts]
    best_u, best_ei = U[order[0]], float(ei[order[0]])
    for i in order:
        res = optimize.minimize(
            lambda u: -float(s.ei(u[None, :])[0]),
            U[i],
            method="L-BFGS-B",
            bounds=[(0.0, 1.0)] * space.k,
        )
        u = np.clip(res.x, 0.0, 1.0)
        value = float(s.ei(u[None, :])[0])
        if value > best_ei:
            best_u, best_ei = u, value
    return space.from_unit(best_u)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    y_c: float
    value: float
    bug_hit: bool
    trace: Optional[Trace] = None


@dataclass(frozen=True)
class CoverageObjective:
    """Simulate x, read coverpoint ``coverpoint`` off the trace, scalarize."""

    kind: str
    coverpoint: CoverPoint
    simulator: Callable[[np.ndarray], Trace]
    bound: Optional[float] = None
    illegal: Optional[Bin] = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise BayesOptError(f"Objective kind must be one of {OBJECTIVE_KINDS}, got {self.kind!r}")
        if self.kind == BUG_BIN:
            if self.illegal is None or self.illegal.is_degenerate:
                raise BayesOptError("bug_bin needs an illegal bin [c:d] with d > c")
        elif self.bound is None or not math.isfinite(self.bound):
            raise BayesOptError(f"{self.kind} needs a finite bound")

    def extract(self, output: Sequence[Bin]) -> float:
        """y_C from the coverpoint output: the lower/upper edge of its hull, or
        for bug_bin the point of the hull nearest the illegal bin's midpoint."""
        if not output:
            raise ArtifactError(f"Coverpoint '{self.coverpoint.id}' produced no output")
        hull = Bin.hull(output)
        if self.kind == GAP_LOWER:
            return hull.lower
        if self.kind == GAP_UPPER:
            return hull.upper
        return hull.clip(self.illegal.midpoint)

    def scalarize(self, y_c: float) -> float:
        if self.kind == GAP_LOWER:
            return y_c - self.bound
        if self.kind == GAP_UPPER:
            return self.bound - y_c
        return abs(y_c - self.illegal.midpoint)

    def observe(self, x) -> Observation:
        trace = self.simulator(np.asarray(x, dtype=np.float64))
        y_c = self.extract(artifact_output(self.coverpoint, trace))
        bug = self.kind == BUG_BIN and self.illegal.contains(y_c)
        return Observation(y_c, self.scalarize(y_c), bug, trace)


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    phase: str
    x: tuple[float, ...]
    y_c: float
    value: float
    incumbent: float
    ei: Optional[float]
    bug_hit: bool


@dataclass
class OptimizationHistory:
    kind: str
    space: ParameterSpace
    seed: int
    entries: list[HistoryEntry] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def bug_found(self) -> bool:
        return any(e.bug_hit for e in self.entries)

    @property
    def best(self) -> HistoryEntry:
        return min(self.entries, key=lambda e: (e.value, e.iteration))

    @property
    def suggestions(self) -> list[tuple[float, ...]]:
        return [e.x for e in self.entries]

    def running_minimum(self) -> list[float]:
        return [e.incumbent for e in self.entries]

    def evaluations_to(self, tolerance: float, target: float = 0.0) -> Optional[int]:
        """Evaluations until the incumbent is within ``tolerance`` of ``target`` (None if never)."""
        for e in self.entries:
            if e.incumbent <= target + tolerance:
                return e.iteration
        return None

    def evaluations_to_bug(self) -> Optional[int]:
        return next((e.iteration for e in self.entries if e.bug_hit), None)

    def summary(self) -> dict[str, Any]:
        best = self.best
        return {
            "objective": self.kind,
            "evaluations": len(self.entries),
            "best_x": dict(zip(self.space.names, best.x)),
            "best_y_c": best.y_c,
            "best_objective": best.value,
            "bug_found": self.bug_found,
            "bug_iteration": self.evaluations_to_bug(),
            "seed": self.seed,
            "bounds": {n: list(b) for n, b in zip(self.space.names, self.space.bounds)},
            "settings": dict(self.settings),
        }


def history_rows(history: OptimizationHistory) -> list[dict[str, str]]:
    rows = []
    for e in history.entries:
        row = {"iteration": str(e.iteration), "phase": e.phase}
        for name, value in zip(history.space.names, e.x):
            row[name] = repr(value)
        row.update({
            "y_c": repr(e.y_c),
            "objective": repr(e.value),
            "incumbent": repr(e.incumbent),
            "ei": "" if e.ei is None else repr(e.ei),
            "bug": "1" if e.bug_hit else "0",
        })
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

@dataclass
class _Recorder:
    """Evaluates points, grows the history and (optionally) the coverage database."""

    obj: Any
    history: OptimizationHistory
    db: Any = None
    grid: Optional[BinGrid] = None
    test_prefix: str = "bo"

    def __call__(self, x: np.ndarray, phase: str, ei: Optional[float] = None) -> HistoryEntry:
        try:
            obs = self.obj.observe(x)
        except Exception as exc:
            raise SimulatorError(f"Evaluation at x={list(map(float, x))} failed: {exc}", self.history) from exc
        n = len(self.history.entries) + 1
        incumbent = obs.value if n == 1 else min(self.history.entries[-1].incumbent, obs.value)
        entry = HistoryEntry(n, phase, tuple(float(v) for v in x), float(obs.y_c), float(obs.value),
                             float(incumbent), ei, obs.bug_hit)
        self.history.entries.append(entry)
        logger.debug("iter %d [%s] x=%s y_c=%.6g f=%.6g ei=%s", n, phase, entry.x, entry.y_c, entry.value, ei)
        if self.db is not None and self.grid is not None and obs.trace is not None:
            result = evaluate(self.obj.coverpoint, obs.trace, self.grid)
            self.db.accumulate(f"{self.test_prefix}-{n}", [result],
                               inputs=dict(zip(self.history.space.names, entry.x)))
        if obs.bug_hit:
            logger.info("Illegal bin hit at iteration %d, x=%s, y_c=%.6g", n, entry.x, entry.y_c)
        return entry


def default_n_init(space: ParameterSpace) -> int:
    return max(2, 2 * space.k)


def run_optimization(
    obj: CoverageObjective,
    space: ParameterSpace,
    budget: int,
    n_init: Optional[int] = None,
    seed: int = 0,
    settings: BoSettings = BoSettings(),
    db=None,
    grid: Optional[BinGrid] = None,
    test_prefix: str = "bo",
) -> OptimizationHistory:
    """Latin-hypercube initial design, then fit -> suggest -> simulate until
    ``budget`` evaluations are spent (or, for bug_bin, the illegal bin is hit)."""
    n_init = default_n_init(space) if n_init is None else int(n_init)
    if n_init < 2:
        raise BayesOptError(f"n_init must be >= 2, got {n_init}")
    if budget <= n_init:
        raise BayesOptError(f"budget ({budget}) must exceed n_init ({n_init})")

    history = OptimizationHistory(obj.kind, space, seed, settings={
        "budget": budget, "n_init": n_init, **asdict(settings),
    })
    record = _Recorder(obj, history, db, grid, test_prefix)

    design = qmc.LatinHypercube(d=space.k, seed=seed).random(n_init)
    for u in design:
        if record(space.from_unit(u), "init").bug_hit:
            return history

    while len(history) < budget:
        U = space.to_unit(np.array(history.suggestions))
        values = np.array([e.value for e in history.entries])
        posterior = gp_fit(U, values, jitter=settings.jitter, max_jitter=settings.max_jitter,
                           grid_size=settings.lengthscale_grid)
        state = EiState.from_posterior(posterior)
        x_next = suggest_next(state, space, settings, seed=seed + len(history))
        ei = float(state.ei(space.to_unit(x_next)[None, :])[0])
        if record(x_next, "ei", ei).bug_hit:
            break

    best = history.best
    logger.info("%s finished after %d evaluations: best f=%.6g at x=%s%s", obj.kind, len(history),
                best.value, best.x, " (bug found)" if history.bug_found else "")
    return history


def random_search(
    obj: CoverageObjective,
    space: ParameterSpace,
    budget: int,
    seed: int = 0,
    db=None,
    grid: Optional[BinGrid] = None,
    test_prefix: str = "random",
) -> OptimizationHistory:
    """Uniform random baseline with the same history format and early stop."""
    if budget < 1:
        raise BayesOptError("budget must be >= 1")
    history = OptimizationHistory(obj.kind, space, seed, settings={"budget": budget, "baseline": "random"})
    record = _Recorder(obj, history, db, grid, test_prefix)
    rng = np.random.default_rng(seed)
    for _ in range(budget):
        if record(space.from_unit(rng.random(space.k)), "random").bug_hit:
            break
    return history


@dataclass(frozen=True)
class ExtremesResult:
    lower: OptimizationHistory
    upper: OptimizationHistory

    @property
    def reached(self) -> Bin:
        """Observable range spanned by everything both searches evaluated."""
        ys = [e.y_c for e in self.lower.entries + self.upper.entries]
        return Bin.closed(min(ys), max(ys))


def search_extremes(
    objective_lower: CoverageObjective,
    objective_upper: CoverageObjective,
    space: ParameterSpace,
    budget: int,
    n_init: Optional[int] = None,
    seed: int = 0,
    settings: BoSettings = BoSettings(),
    db=None,
    grid: Optional[BinGrid] = None,
) -> ExtremesResult:
    """Run a gap_lower and a gap_upper search with the same seed (x_min and x_max)."""
    if objective_lower.kind != GAP_LOWER or objective_upper.kind != GAP_UPPER:
        raise BayesOptError("search_extremes needs a gap_lower and a gap_upper objective")
    lower = run_optimization(objective_lower, space, budget, n_init, seed, settings, db, grid, "bo-min")
    upper = run_optimization(objective_upper, space, budget, n_init, seed, settings, db, grid, "bo-max")
    return ExtremesResult(lower, upper)
