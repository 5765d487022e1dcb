"""Mass-weighted POD of state snapshots and reduced tracking forms.

The basis is M-orthonormal: the SVD runs on M^(1/2)(U - mean)/sqrt(n),
so the stored eigenvalues are the empirical covariance spectrum and the
average squared training reconstruction error at rank r equals the sum
of the trailing eigenvalues exactly.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import weighted_norm


@dataclass(frozen=True)
class PODBasis:
    rank: int
    modes: np.ndarray    # (d, rank), M-orthonormal columns
    bias: np.ndarray     # (d,) snapshot mean
    eigvals: np.ndarray  # full snapshot-covariance spectrum, descending
    n_snapshots: int
    mass: sp.spmatrix = field(repr=False, default=None)

    @property
    def d(self) -> int:
        return self.modes.shape[0]

    def project(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.d,):
            raise ValueError(f"expected state of dimension {self.d}")
        return self.modes.T @ (self.mass @ (u - self.bias))

    def lift(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.rank,):
            raise ValueError(f"expected {self.rank} reduced coefficients")
        return self.modes @ phi + self.bias

    def truncation_residual(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float) - self.lift(self.project(u))


@dataclass(frozen=True)
class ReducedTrackingForm:
    """Q(lift(phi)) = phi.phi + 2 phi.c + q0, exact by M-orthonormality."""
    c: np.ndarray
    q0: float

    @property
    def rank(self) -> int:
        return self.c.shape[0]

    def value(self, phi: np.ndarray) -> float:
        phi = np.asarray(phi, dtype=float)
        return float(phi @ phi + 2.0 * (phi @ self.c) + self.q0)

    def value_and_grad(self, phi: np.ndarray):
        phi = np.asarray(phi, dtype=float)
        return self.value(phi), 2.0 * (phi + self.c)


def compute_pod(snapshots: np.ndarray, M: sp.spmatrix, rank: int) -> PODBasis:
    """POD of the (n, d) snapshot array with M-weighted inner products.

    Requests beyond the numerical rank (trailing singular value below
    1e-14 of the largest) come back truncated to the achieved rank.
    """
    U = np.asarray(snapshots, dtype=float)
    if U.ndim != 2:
        raise ValueError("snapshots must be a 2-D array (n, d)")
    n, d = U.shape
    if not 1 <= rank <= n:
        raise ValueError(f"rank must be in [1, {n}] for {n} snapshots")

    bias = U.mean(axis=0)
    centered = (U - bias).T / np.sqrt(n)  # (d, n)
    if _is_diagonal(M):
        sqrt_m = np.sqrt(M.diagonal())
        X = sqrt_m[:, None] * centered
        unweight = lambda W: W / sqrt_m[:, None]
    else:
        # consistent mass: dense Cholesky M = L L^T, affordable at desk scale
        L = np.linalg.cholesky(M.toarray())
        X = L.T @ centered
        unweight = lambda W: np.linalg.solve(L.T, W)
    W, sv, _ = np.linalg.svd(X, full_matrices=False)
    eigvals = sv ** 2

    achieved = int(np.sum(sv > 1e-14 * (sv[0] if sv.size else 0.0)))
    rank = min(rank, max(achieved, 1))
    modes = unweight(W[:, :rank])
    return PODBasis(rank=rank, modes=modes, bias=bias, eigvals=eigvals,
                    n_snapshots=n, mass=M)


def _is_diagonal(M: sp.spmatrix) -> bool:
    coo = sp.coo_matrix(M)
    return bool(np.all(coo.row == coo.col))


def build_tracking_form(basis: PODBasis, u_target: np.ndarray) -> ReducedTrackingForm:
    """Precompute the reduced quadratic for Q(u) = ||u - u_target||_M^2."""
    u_target = np.asarray(u_target, dtype=float)
    shift = basis.bias - u_target
    c = basis.modes.T @ (basis.mass @ shift)
    q0 = weighted_norm(shift, basis.mass) ** 2
    return ReducedTrackingForm(c=c, q0=q0)
