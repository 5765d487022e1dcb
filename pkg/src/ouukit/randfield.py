"""Gaussian random field with Matern-class covariance and its KLE basis.

The covariance is (gamma*K_N + delta*M)^(-2) in the generalized sense:
eigenpairs (mu_i, v_i) of the pencil (gamma*K_N + delta*M, M), with
Neumann stiffness K_N, give covariance eigenvalues lambda_i = mu_i^(-2)
and M-orthonormal modes v_i. The full spectrum is kept for sampling so
no truncation bias enters the PDE data; only the leading rank feeds the
surrogate input.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import rng
from .fem import StructuredMesh, assemble_mass, assemble_stiffness


class EigensolverError(Exception):
    """Generalized eigenproblem for the covariance failed."""


@dataclass(frozen=True)
class MaternSpec:
    gamma: float
    delta: float
    mean_value: float = -1.0
    alpha: int = 2

    def __post_init__(self):
        if self.gamma <= 0 or self.delta <= 0:
            raise ValueError("gamma and delta must be positive")
        if self.alpha != 2:
            raise ValueError("only alpha = 2 is supported")


@dataclass(frozen=True)
class FieldSample:
    values: np.ndarray
    seed: int
    stream: int
    index: int


@dataclass(frozen=True)
class KLEBasis:
    rank: int
    eigvals: np.ndarray        # (d,) descending covariance eigenvalues
    modes: np.ndarray          # (d, rank) leading M-orthonormal modes
    full_modes: np.ndarray = field(repr=False)  # (d, d), all modes
    mean_value: float = -1.0
    mass: sp.spmatrix = field(repr=False, default=None)

    @property
    def d(self) -> int:
        return self.full_modes.shape[0]

    def realize(self, xi: np.ndarray) -> np.ndarray:
        """Nodal field m = mean + sum_i sqrt(lambda_i) xi_i v_i (full spectrum)."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.d,):
            raise ValueError(f"expected {self.d} coefficients, got {xi.shape}")
        return self.mean_value + self.full_modes @ (np.sqrt(self.eigvals) * xi)

    def encode(self, m: np.ndarray, whiten: bool = False) -> np.ndarray:
        """Leading-mode coefficients of the centered field, M-weighted."""
        coeff = self.modes.T @ (self.mass @ (np.asarray(m, dtype=float) - self.mean_value))
        if whiten:
            coeff = coeff / np.sqrt(self.eigvals[: self.rank])
        return coeff


def build_kle(mesh: StructuredMesh, spec: MaternSpec, rank: int) -> KLEBasis:
    """Solve the covariance eigenproblem; keep the full spectrum."""
    if not 1 <= rank <= mesh.d:
        raise ValueError(f"rank must be in [1, {mesh.d}], got {rank}")
    K = assemble_stiffness(mesh, np.ones(mesh.d))  # Neumann: no Dirichlet rows
    M = assemble_mass(mesh, lumped=True)
    A = (spec.gamma * K + spec.delta * M).toarray()
    try:
        mu, vecs = sla.eigh(A, M.toarray())
    except (sla.LinAlgError, ValueError) as exc:
        raise EigensolverError(f"covariance eigensolve failed: {exc}") from exc
    if mu[0] <= 0:
        raise EigensolverError(f"nonpositive pencil eigenvalue {mu[0]:.3e}")
    # eigh returns ascending mu; lambda = mu^(-alpha) is then descending.
    lam = mu ** (-float(spec.alpha))
    return KLEBasis(
        rank=rank, eigvals=lam, modes=vecs[:, :rank].copy(),
        full_modes=vecs, mean_value=spec.mean_value, mass=M,
    )


def sample_field(kle: KLEBasis, seed: int, index: int,
                 stream: int = rng.STREAM_DATA_FIELD) -> FieldSample:
    """Draw sample `index` of substream (seed, stream); order-independent."""
    xi = rng.substream(seed, stream, index).standard_normal(kle.d)
    return FieldSample(values=kle.realize(xi), seed=seed, stream=stream, index=index)
