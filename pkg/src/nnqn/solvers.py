"""
Regularized Gauss-Newton, Broyden and learned-singular-value quasi-Newton solvers.

All three drivers share one iteration: evaluate the forward model, obtain a
Jacobian (recomputed, secant-updated, or assembled from fixed singular
vectors and predicted singular values), take the regularized step

    (J^T W J + Gamma_R) df = J^T W (g - A(f)) - dR,

pick a step length on a fixed grid, project onto the positivity bound and
stop once ||f_{k+1} - f_k||^2 / ||f_k||^2 drops below the tolerance.

The objective used by the line search is ``0.5 * ||r||_W^2 + R(f)``, the
functional for which the step above is the Gauss-Newton step.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from .forward import CEMProblem, forward_map, jacobian_adjoint, jacobian_perturbation
from .mesh import element_adjacency_laplacian
from .priors import LAPLACIAN, NoiseWeighting, Regularizer, regularization_terms

logger = logging.getLogger(__name__)

LINE_SEARCH_GRID = (2.0, 1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125)


class SolverError(ArithmeticError):
    pass


class LineSearchError(SolverError):
    pass


# -- linear algebra ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SVDAnchor:
    """Thin SVD ``J0 = U0 diag(S0) V0^T`` with singular values in descending order."""

    U0: np.ndarray
    S0: np.ndarray
    V0: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U0 * self.S0) @ self.V0.T


def thin_svd(J) -> SVDAnchor:
    J = np.asarray(J, dtype=float)
    if not np.all(np.isfinite(J)):
        raise SolverError("cannot decompose a matrix with non-finite entries")
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    return SVDAnchor(U, s, Vt.T)


@dataclass(frozen=True, eq=False)
class FactoredJacobian:
    """``U diag(s) V^T`` kept in factored form."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    @property
    def shape(self):
        return self.U.shape[0], self.V.shape[0]

    def dense(self) -> np.ndarray:
        return (self.U * self.s) @ self.V.T

    def __matmul__(self, x):
        return self.U @ (self.s * (self.V.T @ x))

    def rmatvec(self, y):
        return self.V @ (self.s * (self.U.T @ y))

    def normal_matrix(self, w) -> np.ndarray:
        Vs = self.V * self.s
        return Vs @ ((self.U.T * w) @ self.U) @ Vs.T


def assemble_learned_jacobian(anchor: SVDAnchor, s_pred, dense: bool = False):
    s_pred = np.asarray(s_pred, dtype=float)
    if s_pred.shape != anchor.S0.shape:
        raise ValueError(f"expected {anchor.S0.size} singular values, got {s_pred.shape}")
    if np.any(s_pred < 0):
        raise ValueError("singular values must be non-negative")
    J = FactoredJacobian(anchor.U0, s_pred, anchor.V0)
    return J.dense() if dense else J


def _normal_parts(J, w):
    if isinstance(J, FactoredJacobian):
        return J.normal_matrix(w), J.rmatvec
    J = np.asarray(J)
    return (J.T * w) @ J, lambda y: J.T @ y


def qn_step(J, W, gamma_r, grad_r, residual, events: list | None = None,
            fixed=None) -> np.ndarray:
    """Solve ``(J^T W J + Gamma_R) df = J^T W r - dR`` by Cholesky.

    ``W`` is the diagonal of the weight matrix. If the matrix is singular to
    working precision, ``eps * I`` with ``eps = 1e-12 * trace / n`` is added
    and the event is appended to ``events``. Entries flagged in the boolean
    mask ``fixed`` are held at zero and the system is solved for the rest.
    """
    w = np.asarray(W, dtype=float).ravel()
    r = np.asarray(residual, dtype=float)
    H, jt = _normal_parts(J, w)
    if gamma_r is not None:
        H = H + (gamma_r.toarray() if hasattr(gamma_r, "toarray") else np.asarray(gamma_r))
    rhs = jt(w * r)
    if grad_r is not None:
        rhs = rhs - np.asarray(grad_r)
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(rhs))):
        raise SolverError("non-finite values in the normal equations")
    if fixed is not None and np.any(fixed):
        free = ~np.asarray(fixed, dtype=bool)
        out = np.zeros_like(rhs)
        if free.any():
            out[free] = _spd_solve(H[np.ix_(free, free)], rhs[free], events)
        return out
    return _spd_solve(H, rhs, events)


def _spd_solve(H, rhs, events):
    n = H.shape[0]
    try:
        factor = sla.cho_factor(H, lower=True, check_finite=False)
        d = np.abs(np.diag(factor[0]))
        singular = d.min() ** 2 <= 1e-13 * d.max() ** 2
    except sla.LinAlgError:
        singular = True
    if singular:
        eps = 1e-12 * max(np.trace(H), np.finfo(float).tiny) / n
        if events is not None:
            events.append({"event": "diagonal_lift", "eps": eps})
        logger.debug("normal matrix singular, lifting diagonal by %.3e", eps)
        factor = sla.cho_factor(H + eps * np.eye(n), lower=True, check_finite=False)
    return sla.cho_solve(factor, rhs, check_finite=False)


def reduced_update(anchor: SVDAnchor, s_pred, residual, rank: int | None = None,
                   rel_threshold: float = 1e-8):
    """``V0 diag(1/s) U0^T r`` with small singular values truncated.

    Returns the update and the number of truncated singular values.
    """
    s = np.asarray(s_pred, dtype=float)
    keep = s > rel_threshold * s.max() if s.max() > 0 else np.zeros(s.shape, bool)
    if rank is not None:
        keep &= np.arange(s.size) < rank
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    n_trunc = int(s.size - keep.sum())
    if n_trunc:
        logger.debug("reduced update truncated %d singular values", n_trunc)
    return anchor.V0 @ (inv * (anchor.U0.T @ np.asarray(residual, dtype=float))), n_trunc


def broyden_update(J, df, dg) -> np.ndarray:
    """Rank-one secant update ``J + (dg - J df) df^T / (df^T df)``."""
    df = np.asarray(df, dtype=float)
    nrm2 = float(df @ df)
    if nrm2 == 0.0:
        raise ValueError("Broyden update needs a non-zero step")
    J = np.asarray(J, dtype=float)
    return J + np.outer(np.asarray(dg) - J @ df, df / nrm2)


def spectral_norm(A, iters: int = 50, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``A^T A``."""
    A = np.asarray(A)
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        u = A @ v
        new = float(np.linalg.norm(u))
        if new == 0.0:
            return 0.0
        v = A.T @ (u / new)
        v /= np.linalg.norm(v)
        if abs(new - est) <= tol * new:
            return new
        est = new
    return float(np.linalg.norm(A @ v))


def stopping_criterion(f_next, f_curr) -> float:
    f_curr = np.asarray(f_curr, dtype=float)
    denom = float(f_curr @ f_curr)
    if denom == 0.0:
        raise ValueError("stopping criterion undefined at a zero iterate")
    d = np.asarray(f_next, dtype=float) - f_curr
    return float(d @ d) / denom


@dataclass
class LineSearchResult:
    step: float
    value: float
    descent: bool
    evaluations: int


def line_search(objective, current_value: float | None = None, grid=LINE_SEARCH_GRID,
                threads: int = 1) -> LineSearchResult:
    """Best step length on a fixed grid.

    ``objective(lam)`` evaluates the objective at the projected trial point.
    Without a decrease relative to ``current_value`` the smallest grid value
    is returned with ``descent=False``.
    """
    grid = tuple(grid)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(objective, grid))
    else:
        values = [objective(lam) for lam in grid]
    values = np.array(values, dtype=float)
    finite = np.isfinite(values)
    if not finite.any():
        raise LineSearchError("objective is non-finite at every trial step")
    values[~finite] = np.inf
    best = int(np.argmin(values))
    if current_value is not None and values[best] > current_value:
        return LineSearchResult(min(grid), float(values[int(np.argmin(grid))]), False, len(grid))
    return LineSearchResult(grid[best], float(values[best]), True, len(grid))


# -- problem and trace ------------------------------------------------------

@dataclass(eq=False)
class InverseProblem:
    problem: CEMProblem
    data: np.ndarray
    weighting: NoiseWeighting
    regularizer: Regularizer
    sigma_exp: float
    max_iter: int = 100
    tol: float = 1e-2
    lower_bound_fraction: float = 0.05
    threads: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.sigma_exp <= 0:
            raise ValueError("initial conductivity must be positive")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.data.shape != (self.problem.n_measurements,):
            raise ValueError("data length does not match the measurement protocol")
        self._laplacian = (element_adjacency_laplacian(self.problem.mesh)
                           if self.regularizer.kind == LAPLACIAN else None)

    @property
    def sigma0(self) -> np.ndarray:
        return np.full(self.problem.n_elements, float(self.sigma_exp))

    @property
    def lower_bound(self) -> float:
        return self.lower_bound_fraction * self.sigma_exp

    def project(self, sigma):
        return np.maximum(sigma, self.lower_bound)

    def prior(self, sigma):
        return regularization_terms(self.problem.mesh, sigma, self.regularizer,
                                    sigma_ref=self.sigma0, laplacian=self._laplacian)

    def objective(self, sigma, model_output=None) -> float:
        if model_output is None:
            model_output = forward_map(self.problem, sigma)
        res = self.weighting.whiten(self.data - model_output)
        value, _, _ = self.prior(sigma)
        return 0.5 * float(res @ res) + value


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    step_length: float
    criterion: float
    wall_ms: float
    jac_err_spectral: float = float("nan")


@dataclass
class SolverTrace:
    method: str
    records: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    initial_objective: float = float("nan")
    status: str = "running"
    forward_evaluations: int = 0
    line_search_evaluations: int = 0
    init_seconds: float = 0.0
    events: list = field(default_factory=list)
    singular_values: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def total_seconds(self) -> float:
        return self.records[-1].wall_ms / 1e3 if self.records else 0.0

    @property
    def jacobian_errors(self) -> np.ndarray:
        return np.array([r.jac_err_spectral for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "step_length", "criterion", "wall_ms",
                        "jac_err_spectral"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.objective), repr(r.step_length),
                            repr(r.criterion), repr(r.wall_ms), repr(r.jac_err_spectral)])


# -- drivers ----------------------------------------------------------------

class _Clock:
    """Wall clock that can be paused while diagnostics run."""

    def __init__(self):
        self.elapsed = 0.0
        self._start = time.perf_counter()

    def pause(self):
        self.elapsed += time.perf_counter() - self._start

    def resume(self):
        self._start = time.perf_counter()

    def ms(self):
        return 1e3 * (self.elapsed + time.perf_counter() - self._start)


def _iterate(spec: InverseProblem, method: str, jacobian_at, after_step=None,
             diagnostics: bool = False, trace: SolverTrace | None = None):
    trace = trace or SolverTrace(method)
    problem = spec.problem
    w = spec.weighting.W
    sigma = spec.sigma0
    clock = _Clock()
    model_output = None
    current = None
    for k in range(spec.max_iter):
        model_output = forward_map(problem, sigma)
        trace.forward_evaluations += 1
        value, grad_r, gamma_r = spec.prior(sigma)
        res = spec.data - model_output
        wres = spec.weighting.whiten(res)
        current = 0.5 * float(wres @ wres) + value
        if k == 0:
            trace.initial_objective = current
        J = jacobian_at(k, sigma, model_output)
        df = qn_step(J, w, gamma_r, grad_r, res, trace.events)
        # hold elements on the positivity bound that the step would push further down
        at_bound = (sigma <= spec.lower_bound * (1 + 1e-12)) & (df < 0)
        if at_bound.any():
            df = qn_step(J, w, gamma_r, grad_r, res, trace.events, fixed=at_bound)

        def trial(lam, sigma=sigma, df=df):
            return spec.objective(spec.project(sigma + lam * df))

        ls = line_search(trial, current, threads=spec.threads)
        trace.line_search_evaluations += ls.evaluations
        if not ls.descent:
            trace.status = "non_descent"
            trace.events.append({"event": "non_descent", "iteration": k})
            logger.info("%s: no descent at iteration %d", method, k)
            break
        sigma_next = spec.project(sigma + ls.step * df)
        crit = stopping_criterion(sigma_next, sigma)
        wall = clock.ms()

        jac_err = float("nan")
        if diagnostics:
            clock.pause()
            J_acc = jacobian_adjoint(problem, sigma)
            J_used = J.dense() if isinstance(J, FactoredJacobian) else J
            jac_err = spectral_norm(J_acc - J_used)
            trace.singular_values.append({
                "iteration": k,
                "accurate": np.linalg.svd(J_acc, compute_uv=False),
                "used": (J.s.copy() if isinstance(J, FactoredJacobian)
                         else np.linalg.svd(J_used, compute_uv=False)),
            })
            clock.resume()

        trace.records.append(IterationRecord(k, ls.value, ls.step, crit, wall, jac_err))
        trace.iterates.append(sigma_next)
        if after_step is not None:
            after_step(sigma, sigma_next, model_output)
        sigma = sigma_next
        if crit <= spec.tol:
            trace.status = "converged"
            break
    else:
        trace.status = "max_iter"
    return sigma, trace


def run_gauss_newton(spec: InverseProblem, jacobian: str = "perturbation",
                     diagnostics: bool = False):
    """Gauss-Newton with the Jacobian recomputed at every iterate."""
    def jacobian_at(k, sigma, model_output):
        if jacobian == "perturbation":
            return jacobian_perturbation(spec.problem, sigma, threads=spec.threads)
        return jacobian_adjoint(spec.problem, sigma)

    return _iterate(spec, "gn", jacobian_at, diagnostics=diagnostics)


def run_broyden(spec: InverseProblem, initial_jacobian=None, diagnostics: bool = False):
    """Quasi-Newton with Broyden's rank-one update of an initial perturbation Jacobian.

    Building the initial Jacobian is initialization and is not part of the
    recorded iteration times.
    """
    t0 = time.perf_counter()
    if initial_jacobian is None:
        initial_jacobian = jacobian_perturbation(spec.problem, spec.sigma0, threads=spec.threads)
    trace = SolverTrace("broyden", init_seconds=time.perf_counter() - t0)
    state = {"J": np.array(initial_jacobian, dtype=float), "pending": None}

    def jacobian_at(k, sigma, model_output):
        if state["pending"] is not None:
            df, prev_output = state["pending"]
            state["J"] = broyden_update(state["J"], df, model_output - prev_output)
            state["pending"] = None
        return state["J"]

    def after_step(sigma, sigma_next, model_output):
        df = sigma_next - sigma
        if np.any(df):
            state["pending"] = (df, model_output)

    return _iterate(spec, "broyden", jacobian_at, after_step, diagnostics, trace)


def run_nnqn(spec: InverseProblem, anchor: SVDAnchor, predictor, diagnostics: bool = False):
    """Quasi-Newton with ``J = U0 diag(predictor(A(f_k))) V0^T``.

    ``predictor`` is an ``MLP`` or any callable ``(model_output, sigma) -> s``.
    An MLP maps ``m`` measurements to ``m`` values; when the mesh has fewer
    elements than that, only the leading ``n_elements`` outputs are used (the
    training targets are zero beyond them). No Jacobian is recomputed after
    the anchor.
    """
    from .mlp import MLP

    m = spec.problem.n_measurements
    if isinstance(predictor, MLP):
        if predictor.n_inputs != m or predictor.n_outputs != m:
            raise ValueError("predictor dimensions do not match the measurement protocol")
        def predict(model_output, sigma):
            return predictor.forward(model_output)[: anchor.S0.size]
    else:
        predict = predictor

    def jacobian_at(k, sigma, model_output):
        s = np.maximum(np.asarray(predict(model_output, sigma), dtype=float), 0.0)
        return assemble_learned_jacobian(anchor, s)

    return _iterate(spec, "nnqn", jacobian_at, diagnostics=diagnostics)


class ExactSingularValues:
    """Oracle predictor returning the singular values of the adjoint Jacobian."""

    def __init__(self, problem: CEMProblem):
        self.problem = problem

    def __call__(self, model_output, sigma):
        J = jacobian_adjoint(self.problem, sigma)
        # min(m, n) values, matching the thin SVD of the anchor
        return np.linalg.svd(J, compute_uv=False)[: len(model_output)]


def compute_anchor(problem: CEMProblem, sigma0, jacobian: str = "perturbation",
                   threads: int = 1) -> SVDAnchor:
    if jacobian == "perturbation":
        J0 = jacobian_perturbation(problem, sigma0, threads=threads)
    else:
        J0 = jacobian_adjoint(problem, sigma0)
    return thin_svd(J0)


def homogeneous_estimate(problem: CEMProblem, data, weighting: NoiseWeighting | None = None,
                         reference: float = 1.0) -> float:
    """Best-fitting constant conductivity in the weighted least-squares sense.

    The scaling ``A(c * sigma) ~ A(sigma) / c`` (exact only when the contact
    impedance scales too) gives a closed-form first guess, which is then
    refined by a bounded scalar search on ``log c``.
    """
    a = forward_map(problem, np.full(problem.n_elements, float(reference)))
    g = np.asarray(data, dtype=float)
    w = np.ones_like(g) if weighting is None else weighting.W
    inv = float(a @ (w * g)) / float(a @ (w * a))
    if not inv > 0:
        raise SolverError("data are not fitted by any positive homogeneous conductivity")
    guess = np.log(reference / inv)

    def misfit(t):
        r = g - forward_map(problem, np.full(problem.n_elements, np.exp(t)))
        return float(r @ (w * r))

    res = minimize_scalar(misfit, bounds=(guess - 1.0, guess + 1.0), method="bounded",
                          options={"xatol": 1e-9})
    best = res.x if res.fun < misfit(guess) else guess
    return float(np.exp(best))


METHODS = ("gn", "broyden", "nnqn")


def compare_methods(spec: InverseProblem, predictor=None, methods=METHODS,
                    jacobian: str = "perturbation", diagnostics: bool = True) -> dict:
    """Run several drivers on the same problem; returns ``{method: (sigma, trace)}``.

    Broyden and NN-QN share one initial Jacobian at ``sigma0``; each trace
    records the time to build it (plus the SVD for NN-QN) as initialization.
    """
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if "nnqn" in methods and predictor is None:
        raise ValueError("NN-QN needs a singular-value predictor")
    results = {}
    J0 = None
    j0_seconds = 0.0
    if "broyden" in methods or "nnqn" in methods:
        t0 = time.perf_counter()
        if jacobian == "perturbation":
            J0 = jacobian_perturbation(spec.problem, spec.sigma0, threads=spec.threads)
        else:
            J0 = jacobian_adjoint(spec.problem, spec.sigma0)
        j0_seconds = time.perf_counter() - t0
    for method in methods:
        if method == "gn":
            results[method] = run_gauss_newton(spec, jacobian, diagnostics)
        elif method == "broyden":
            sigma, trace = run_broyden(spec, J0, diagnostics)
            trace.init_seconds = j0_seconds
            results[method] = (sigma, trace)
        else:
            t0 = time.perf_counter()
            anchor = thin_svd(J0)
            svd_seconds = time.perf_counter() - t0
            sigma, trace = run_nnqn(spec, anchor, predictor, diagnostics)
            trace.init_seconds = j0_seconds + svd_seconds
            results[method] = (sigma, trace)
    return results
