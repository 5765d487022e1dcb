"""Semilinear elliptic state equation and its derivatives.

Discrete residual (after symmetric Dirichlet elimination):

    R(u) = A(m) u + r * ml * u^3 - F z,

where A(m) is the stiffness of exp(m) with identity boundary rows, ml is
the lumped mass with boundary entries zeroed (so the cubic term never
touches pinned nodes), and F holds one Gaussian-bump load per control
with boundary rows zeroed. The Newton operator A + 3r*diag(ml*u^2) is
symmetric, so state, adjoint, and Jacobian-data solves all reuse one set
of triangular factors.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (StructuredMesh, TriangularFactors, apply_dirichlet,
                  assemble_mass, assemble_stiffness, factorize)
from .randfield import FieldSample


class NonConvergenceError(Exception):
    """Newton failed; carries the last iterate and residual norm."""

    def __init__(self, message, last_iterate=None, residual_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm


@dataclass(frozen=True)
class SourceBasis:
    grid: int
    sigma: float
    centers: np.ndarray  # (g*g, 2)
    F: np.ndarray        # (d, g*g) load vectors, boundary rows intact

    @property
    def d_z(self) -> int:
        return self.F.shape[1]


@dataclass
class SemilinearProblem:
    mesh: StructuredMesh
    reaction: float
    sources: SourceBasis
    rtol: float = 1e-10
    atol: float = 1e-12
    max_iter: int = 25
    mass_lumped: sp.spmatrix = None
    _F_bc: np.ndarray = field(default=None, repr=False)
    _ml_bc: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.reaction < 0:
            raise ValueError("reaction coefficient must be nonnegative")
        if self.mass_lumped is None:
            self.mass_lumped = assemble_mass(self.mesh, lumped=True)
        bc = self.mesh.boundary_mask
        self._F_bc = self.sources.F.copy()
        self._F_bc[bc, :] = 0.0
        self._ml_bc = np.where(bc, 0.0, self.mass_lumped.diagonal())

    def stiffness_bc(self, m_values: np.ndarray) -> sp.csr_matrix:
        """Dirichlet-eliminated stiffness of exp(m)."""
        K = assemble_stiffness(self.mesh, np.exp(np.asarray(m_values, dtype=float)))
        K_bc, _ = apply_dirichlet(K, np.zeros(self.mesh.d), self.mesh.boundary_mask)
        return K_bc

    def residual(self, A_bc: sp.spmatrix, u: np.ndarray, z: np.ndarray) -> np.ndarray:
        return A_bc @ u + self.reaction * self._ml_bc * u ** 3 - self._F_bc @ z

    def jacobian(self, A_bc: sp.spmatrix, u: np.ndarray) -> sp.csr_matrix:
        return A_bc + sp.diags(3.0 * self.reaction * self._ml_bc * u ** 2)


@dataclass(frozen=True)
class StateSolution:
    u: np.ndarray
    residual_norm: float
    iterations: int
    factors: TriangularFactors


@dataclass(frozen=True)
class ReducedJacobianData:
    J_r: np.ndarray  # (r_U, d_Z)


def build_source_basis(mesh: StructuredMesh, g: int, sigma: float) -> SourceBasis:
    """Gaussian bumps on an interior g-by-g lattice, lumped-mass weighted.

    Bump i is centered at ((j+1)/(g+1), (k+1)/(g+1)) with i = k*g + j, and
    column i of F is M_L * f_i(nodes) with peak value 1/(sigma*sqrt(2*pi)).
    """
    if g < 1:
        raise ValueError("source grid must have g >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ticks = np.arange(1, g + 1) / (g + 1)
    cx, cy = np.meshgrid(ticks, ticks, indexing="xy")
    centers = np.column_stack([cx.ravel(), cy.ravel()])

    ml = assemble_mass(mesh, lumped=True).diagonal()
    diff = mesh.node_coords[:, None, :] - centers[None, :, :]
    sq = np.sum(diff ** 2, axis=2)
    bumps = np.exp(-sq / (2.0 * sigma ** 2)) / (sigma * np.sqrt(2.0 * np.pi))
    F = ml[:, None] * bumps
    if np.any(np.all(F == 0.0, axis=0)):
        raise ValueError("source basis has an identically zero column")
    return SourceBasis(grid=g, sigma=sigma, centers=centers, F=F)


def solve_state(prob: SemilinearProblem, m, z: np.ndarray,
                rtol: float = None, atol: float = None,
                stiffness_bc: sp.spmatrix = None) -> StateSolution:
    """Newton with backtracking from a zero initial state.

    Pass `stiffness_bc` to reuse a previously assembled stiffness for the
    same field sample (it is constant across Newton iterations and z).
    """
    rtol = prob.rtol if rtol is None else rtol
    atol = prob.atol if atol is None else atol
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("nonfinite control values")
    if z.shape != (prob.sources.d_z,):
        raise ValueError(f"control must have {prob.sources.d_z} components")

    if stiffness_bc is not None:
        A_bc = stiffness_bc
    else:
        m_values = m.values if isinstance(m, FieldSample) else np.asarray(m, dtype=float)
        if not np.all(np.isfinite(m_values)):
            raise ValueError("nonfinite field values")
        A_bc = prob.stiffness_bc(m_values)
    u = np.zeros(prob.mesh.d)
    res = prob.residual(A_bc, u, z)
    rnorm = float(np.linalg.norm(res))
    rnorm0 = rnorm
    converged = rnorm <= atol
    iterations = 0

    for _ in range(prob.max_iter):
        if converged:
            break
        J = prob.jacobian(A_bc, u)
        factors = factorize(J)
        step = factors.solve(-res)
        # backtrack until the residual actually decreases
        s = 1.0
        for _ in range(30):
            u_try = u + s * step
            res_try = prob.residual(A_bc, u_try, z)
            rnorm_try = float(np.linalg.norm(res_try))
            if rnorm_try <= (1.0 - 1e-4 * s) * rnorm:
                break
            s *= 0.5
        else:
            raise NonConvergenceError(
                f"line search stalled at residual {rnorm:.3e}",
                last_iterate=u, residual_norm=rnorm,
            )
        u, res, rnorm = u_try, res_try, rnorm_try
        iterations += 1
        converged = rnorm <= atol or rnorm <= rtol * rnorm0

    if not converged:
        raise NonConvergenceError(
            f"Newton did not converge in {prob.max_iter} iterations "
            f"(residual {rnorm:.3e}, initial {rnorm0:.3e})",
            last_iterate=u, residual_norm=rnorm,
        )
    # factors at the converged state, reused by adjoint and Jacobian solves
    factors = factorize(prob.jacobian(A_bc, u))
    return StateSolution(u=u, residual_norm=rnorm, iterations=iterations,
                         factors=factors)


def performance_gradient(prob: SemilinearProblem, state: StateSolution,
                         qgrad_u: np.ndarray) -> np.ndarray:
    """Control gradient of Q via one adjoint substitution: -F^T p."""
    p = state.factors.solve_transposed(-np.asarray(qgrad_u, dtype=float))
    return -(prob._F_bc.T @ p)


def reduced_control_jacobian(prob: SemilinearProblem, state: StateSolution,
                             modes: np.ndarray, M: sp.spmatrix,
                             route: str = "auto") -> ReducedJacobianData:
    """Phi^T M (du/dz) using back substitutions against the state factors.

    Picks d_Z linearized-state solves when d_Z < r_U, else r_U adjoint
    solves; both routes agree because the Newton operator is symmetric.
    """
    d_z = prob.sources.d_z
    r_u = modes.shape[1]
    if route == "auto":
        route = "forward" if d_z < r_u else "adjoint"
    if route == "forward":
        cols = [state.factors.solve(prob._F_bc[:, k]) for k in range(d_z)]
        J_r = modes.T @ (M @ np.column_stack(cols))
    elif route == "adjoint":
        MPhi = M @ modes
        rows = [state.factors.solve_transposed(MPhi[:, j]) for j in range(r_u)]
        J_r = np.vstack([w @ prob._F_bc for w in rows])
    else:
        raise ValueError(f"unknown route {route!r}")
    return ReducedJacobianData(J_r=J_r)


def timed_state_and_jacobian(prob: SemilinearProblem, m, z, modes, M):
    """Solve the state and its reduced Jacobian, timing both phases."""
    t0 = time.perf_counter()
    state = solve_state(prob, m, z)
    t1 = time.perf_counter()
    jac = reduced_control_jacobian(prob, state, modes, M)
    t2 = time.perf_counter()
    return state, jac, t1 - t0, t2 - t1
