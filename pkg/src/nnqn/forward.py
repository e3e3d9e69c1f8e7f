"""
Complete Electrode Model forward solver on P1 triangles.

Unknowns are the nodal potentials followed by L-1 coordinates of the
electrode potentials in a basis of zero-sum vectors (the grounding). In that
basis the system matrix is symmetric positive definite, so one sparse LU
factorization serves every current pattern at a fixed conductivity.

Units are consistent model units: cm, mS/cm, mA and V.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ElectrodeLayout, Mesh

logger = logging.getLogger(__name__)

DEFAULT_CONTACT_IMPEDANCE = 1e-2
H_REL = 1e-4
H_ABS = 1e-8


class ForwardError(ArithmeticError):
    """Forward solve failed."""


def adjacent_patterns(n_electrodes: int, amplitude: float = 1.0) -> np.ndarray:
    """Row k drives +amplitude into electrode k and draws it out of electrode k+1."""
    pat = np.zeros((n_electrodes, n_electrodes))
    for k in range(n_electrodes):
        pat[k, k] += amplitude
        pat[k, (k + 1) % n_electrodes] -= amplitude
    return pat


@dataclass(frozen=True, eq=False)
class CEMProblem:
    """Static part of the forward model: mesh, electrodes and protocol.

    ``measurement_pattern`` rows select electrode-voltage differences; the
    measurement vector is ordered pattern-major, i.e. entry ``p * M + q`` is
    measurement ``q`` under injection ``p``.
    """

    mesh: Mesh
    layout: ElectrodeLayout
    contact_impedances: np.ndarray
    injection_patterns: np.ndarray
    measurement_pattern: np.ndarray

    def __post_init__(self):
        z = np.array(self.contact_impedances, dtype=float).ravel()
        inj = np.atleast_2d(np.array(self.injection_patterns, dtype=float))
        meas = np.atleast_2d(np.array(self.measurement_pattern, dtype=float))
        n_el = self.layout.n_electrodes
        if z.shape != (n_el,):
            raise ValueError(f"need {n_el} contact impedances, got {z.shape}")
        if np.any(z <= 0):
            raise ValueError("contact impedances must be positive")
        if inj.shape[1] != n_el or meas.shape[1] != n_el:
            raise ValueError("pattern width must equal the electrode count")
        if np.any(np.abs(inj.sum(axis=1)) > 1e-12):
            raise ValueError("every injection pattern must sum to zero")
        for arr in (z, inj, meas):
            arr.setflags(write=False)
        object.__setattr__(self, "contact_impedances", z)
        object.__setattr__(self, "injection_patterns", inj)
        object.__setattr__(self, "measurement_pattern", meas)

    @classmethod
    def adjacent(cls, mesh: Mesh, layout: ElectrodeLayout,
                 contact_impedance: float = DEFAULT_CONTACT_IMPEDANCE,
                 amplitude: float = 1.0) -> "CEMProblem":
        """Adjacent drive, adjacent measurement, all L*L voltages kept."""
        n = layout.n_electrodes
        meas = adjacent_patterns(n)
        return cls(mesh, layout, np.full(n, contact_impedance), adjacent_patterns(n, amplitude), meas)

    @property
    def n_measurements(self) -> int:
        return len(self.injection_patterns) * len(self.measurement_pattern)

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    @cached_property
    def _ground_basis(self) -> np.ndarray:
        # columns e_0 - e_{k+1}: electrode potentials U = N beta sum to zero
        n = self.layout.n_electrodes
        basis = np.zeros((n, n - 1))
        basis[0, :] = 1.0
        basis[np.arange(1, n), np.arange(n - 1)] = -1.0
        return basis

    @cached_property
    def _stiffness_template(self):
        """Sparse map from element conductivities to stiffness entries.

        Returns ``(rows, cols, P)`` where ``P`` has shape (nnz, E) and the
        stiffness triplets for conductivity ``s`` are ``(rows, cols, P @ s)``.
        """
        mesh = self.mesh
        g = mesh.basis_gradients
        local = np.einsum("eik,ejk->eij", g, g) * mesh.areas[:, None, None]
        el = mesh.elements
        rows = np.repeat(el, 3, axis=1).ravel()
        cols = np.tile(el, (1, 3)).ravel()
        n = self.system_size
        key = rows * n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        owner = np.repeat(np.arange(mesh.n_elements), 9)
        P = sp.csr_matrix((local.ravel(), (inv, owner)), shape=(len(uniq), mesh.n_elements))
        return uniq // n, uniq % n, P

    @cached_property
    def _electrode_block(self) -> sp.csr_matrix:
        """Conductivity-independent part of the system from the electrodes."""
        mesh, n_nodes = self.mesh, self.mesh.n_nodes
        n_el = self.layout.n_electrodes
        rows, cols, vals = [], [], []
        C = np.zeros((n_nodes, n_el))
        D = np.zeros(n_el)
        for l, edges in enumerate(self.layout.electrodes):
            inv_z = 1.0 / self.contact_impedances[l]
            for e in edges:
                a, b = mesh.boundary_edges[e]
                h = float(np.hypot(*(mesh.nodes[a] - mesh.nodes[b])))
                rows += [a, b, a, b]
                cols += [a, b, b, a]
                vals += [inv_z * h / 3, inv_z * h / 3, inv_z * h / 6, inv_z * h / 6]
                C[a, l] -= inv_z * h / 2
                C[b, l] -= inv_z * h / 2
                D[l] += inv_z * h
        B = sp.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes))
        N = self._ground_basis
        CN = sp.csr_matrix(C @ N)
        DN = sp.csr_matrix(N.T @ np.diag(D) @ N)
        return sp.bmat([[B, CN], [CN.T, DN]], format="csr")

    @property
    def system_size(self) -> int:
        return self.mesh.n_nodes + self.layout.n_electrodes - 1

    def _rhs(self, patterns: np.ndarray) -> np.ndarray:
        rhs = np.zeros((self.system_size, len(patterns)))
        rhs[self.mesh.n_nodes:] = self._ground_basis.T @ patterns.T
        return rhs

    @cached_property
    def injection_rhs(self) -> np.ndarray:
        return self._rhs(self.injection_patterns)

    @cached_property
    def measurement_rhs(self) -> np.ndarray:
        """Adjoint right-hand sides: functionals extracting each voltage difference."""
        return self._rhs(self.measurement_pattern)

    def electrode_potentials(self, x: np.ndarray) -> np.ndarray:
        """Electrode potentials (L x patterns) from system solutions."""
        return self._ground_basis @ x[self.mesh.n_nodes:]


@dataclass(frozen=True, eq=False)
class MeasurementFrame:
    """Measurement vector with an optional per-entry noise standard deviation."""

    values: np.ndarray
    noise_std: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", values)
        if self.noise_std is not None:
            std = np.array(self.noise_std, dtype=float).ravel()
            if std.shape != values.shape:
                raise ValueError("noise_std must match values")
            if np.any(std <= 0):
                raise ValueError("noise_std entries must be positive")
            object.__setattr__(self, "noise_std", std)


@dataclass(eq=False)
class ForwardSolution:
    """Measurements plus the potentials needed by the adjoint Jacobian."""

    measurements: np.ndarray
    potentials: np.ndarray
    sigma: np.ndarray

    @property
    def frame(self) -> MeasurementFrame:
        return MeasurementFrame(self.measurements)


def check_conductivity(problem: CEMProblem, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (problem.n_elements,):
        raise ValueError(f"conductivity must have length {problem.n_elements}, got {sigma.shape}")
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ValueError("conductivity must be finite and strictly positive")
    return sigma


def stiffness_matrix(mesh_or_problem, sigma) -> sp.csr_matrix:
    """Nodal stiffness ``sum_e sigma_e * grad phi_i . grad phi_j * area_e``."""
    problem = mesh_or_problem
    if isinstance(problem, Mesh):
        raise TypeError("pass a CEMProblem")
    rows, cols, P = problem._stiffness_template
    n = problem.mesh.n_nodes
    vals = P @ np.asarray(sigma, dtype=float)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def assemble_system(problem: CEMProblem, sigma) -> tuple[sp.csc_matrix, np.ndarray]:
    """Grounded CEM system matrix and the injection right-hand sides."""
    sigma = check_conductivity(problem, sigma)
    rows, cols, P = problem._stiffness_template
    n = problem.system_size
    K = sp.csr_matrix((P @ sigma, (rows, cols)), shape=(n, n)) + problem._electrode_block
    return K.tocsc(), problem.injection_rhs.copy()


def _factor(K: sp.csc_matrix):
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise ForwardError(f"singular CEM system ({K.shape[0]} unknowns): {exc}") from exc
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= 1e-14 * diag.max():
        raise ForwardError(
            f"numerically singular CEM system: pivot ratio {diag.min() / diag.max():.2e}")
    return lu


def _measure(problem: CEMProblem, x: np.ndarray) -> np.ndarray:
    U = problem.electrode_potentials(x)
    return (problem.measurement_pattern @ U).T.ravel()


def solve_forward(problem: CEMProblem, sigma) -> ForwardSolution:
    """Solve every injection pattern at conductivity ``sigma``."""
    K, rhs = assemble_system(problem, sigma)
    x = _factor(K).solve(rhs)
    return ForwardSolution(_measure(problem, x), x, np.array(sigma, dtype=float))


def forward_map(problem: CEMProblem, sigma) -> np.ndarray:
    return solve_forward(problem, sigma).measurements


def electrode_currents(problem: CEMProblem, solution: ForwardSolution) -> np.ndarray:
    """Currents (L x patterns) leaving each electrode into the body."""
    mesh = problem.mesh
    n_nodes = mesh.n_nodes
    u = solution.potentials[:n_nodes]
    U = problem.electrode_potentials(solution.potentials)
    out = np.zeros_like(U)
    for l, edges in enumerate(problem.layout.electrodes):
        for e in edges:
            a, b = mesh.boundary_edges[e]
            h = float(np.hypot(*(mesh.nodes[a] - mesh.nodes[b])))
            out[l] += (U[l] - 0.5 * (u[a] + u[b])) * h / problem.contact_impedances[l]
    return out


def finite_difference_jacobian(fun, x, h_rel: float = H_REL, h_abs: float = H_ABS,
                               f0=None, threads: int = 1) -> np.ndarray:
    """Forward-difference Jacobian with step ``max(h_rel * |x_j|, h_abs)``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x) if f0 is None else f0, dtype=float)
    steps = np.maximum(h_rel * np.abs(x), h_abs)

    def column(j):
        xp = x.copy()
        xp[j] += steps[j]
        return (np.asarray(fun(xp)) - f0) / steps[j]

    J = np.empty((f0.size, x.size))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            for j, col in enumerate(pool.map(column, range(x.size))):
                J[:, j] = col
    else:
        for j in range(x.size):
            J[:, j] = column(j)
    return J


def jacobian_perturbation(problem: CEMProblem, sigma, h_rel: float = H_REL,
                          h_abs: float = H_ABS, threads: int = 1) -> np.ndarray:
    """Jacobian by one extra forward solve per element."""
    sigma = check_conductivity(problem, sigma)
    return finite_difference_jacobian(lambda s: forward_map(problem, s), sigma,
                                      h_rel, h_abs, threads=threads)


def jacobian_adjoint(problem: CEMProblem, sigma=None, solution: ForwardSolution | None = None,
                     ) -> np.ndarray:
    """Jacobian from drive and measurement fields.

    Entry ``(p * M + q, e)`` is ``-area_e * grad u_p . grad w_q`` on element
    ``e``, where ``w_q`` is the field excited by measurement pattern ``q``.
    """
    if solution is None:
        solution = solve_forward(problem, sigma)
    sigma = check_conductivity(problem, solution.sigma)
    K, _ = assemble_system(problem, sigma)
    w = _factor(K).solve(problem.measurement_rhs)
    mesh = problem.mesh
    n_nodes = mesh.n_nodes
    g = mesh.basis_gradients
    el = mesh.elements
    u = solution.potentials[:n_nodes]
    # field gradients per element: (E, 2, patterns)
    grad_u = np.einsum("eik,eip->ekp", g, u[el])
    grad_w = np.einsum("eik,eiq->ekq", g, w[:n_nodes][el])
    J = -np.einsum("e,ekp,ekq->pqe", mesh.areas, grad_u, grad_w, optimize=True)
    return J.reshape(-1, mesh.n_elements)


def add_noise(frame: MeasurementFrame, noise_level: float, rng_seed: int,
              floor: float | None = None) -> MeasurementFrame:
    """Add Gaussian noise with std ``noise_level * |g_i| + floor``.

    The default floor is ``noise_level * 1e-2 * max|g|`` so that the
    standard deviation stays positive at measurements close to zero.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    g = frame.values
    if noise_level == 0:
        return MeasurementFrame(g.copy(), frame.noise_std)
    if floor is None:
        floor = noise_level * 1e-2 * float(np.abs(g).max())
    std = noise_level * np.abs(g) + floor
    rng = np.random.default_rng(rng_seed)
    return MeasurementFrame(g + std * rng.standard_normal(g.shape), std)


def noise_model_std(values, noise_level: float) -> np.ndarray:
    """The standard deviations ``add_noise`` would attach at ``noise_level``."""
    g = np.abs(np.asarray(values, dtype=float))
    return noise_level * g + noise_level * 1e-2 * g.max()


def reciprocity_error(problem: CEMProblem, values) -> float:
    """``max |V - V^T| / max |V|`` for the pattern-by-pattern measurement table.

    Only meaningful when drive and measurement patterns coincide.
    """
    n = problem.injection_patterns.shape[0]
    V = np.asarray(values, dtype=float).reshape(n, -1)
    if V.shape[1] != n:
        raise ValueError("reciprocity needs as many measurement as drive patterns")
    return float(np.abs(V - V.T).max() / max(np.abs(V).max(), 1e-300))


def _write_table(path, table: np.ndarray, columns, meta: dict) -> None:
    header = json.dumps({"rows": table.shape[0], "cols": table.shape[1], **meta}, sort_keys=True)
    with open(path, "w", newline="") as fh:
        fh.write("# " + header + "\n")
        if columns is not None:
            fh.write(",".join(columns) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_table(path, has_columns: bool):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing dimension header")
        try:
            meta = json.loads(first[2:])
            rows, cols = int(meta["rows"]), int(meta["cols"])
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}: malformed dimension header") from exc
        columns = fh.readline().strip().split(",") if has_columns else None
        try:
            table = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from exc
    if rows == 0:
        table = np.empty((0, cols))
    if table.shape != (rows, cols):
        raise ValueError(f"{path}: table is {table.shape}, header says {(rows, cols)}")
    return table, columns, meta


def save_frame_csv(path, frame: MeasurementFrame, **meta) -> None:
    """Measurement CSV: a JSON dimension header line, then ``index,value[,noise_std]`` rows."""
    cols = [np.arange(frame.values.size), frame.values]
    names = ["index", "value"]
    if frame.noise_std is not None:
        cols.append(frame.noise_std)
        names.append("noise_std")
    _write_table(path, np.column_stack(cols), names, meta)


def load_frame_csv(path) -> tuple[MeasurementFrame, dict]:
    table, names, meta = _read_table(path, True)
    if names[:2] != ["index", "value"]:
        raise ValueError(f"{path}: expected index,value columns")
    if not np.array_equal(table[:, 0], np.arange(len(table))):
        raise ValueError(f"{path}: measurement indices must be 0..m-1 in order")
    std = table[:, 2] if "noise_std" in names else None
    return MeasurementFrame(table[:, 1], std), meta


def save_matrix_csv(path, matrix, **meta) -> None:
    """Row-major matrix CSV with a JSON dimension header line (Jacobians, for instance)."""
    _write_table(path, np.atleast_2d(np.asarray(matrix, dtype=float)), None, meta)


def load_matrix_csv(path) -> tuple[np.ndarray, dict]:
    table, _, meta = _read_table(path, False)
    return table, meta
