"""P1 finite elements on a structured triangulation of the unit square.

Each grid cell is split along its (+1,+1) diagonal into two right
triangles. Nodes are ordered row-major: node(ix, iy) = iy*(nx+1) + ix,
with ix fastest. All operators are assembled as scipy CSR matrices and
factorized with SuperLU; one factorization serves any number of
forward/transpose substitutions.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularOperatorError(Exception):
    """Raised when a factorization hits an (almost) zero pivot."""


@dataclass(frozen=True)
class StructuredMesh:
    nx: int
    ny: int
    h: float
    node_coords: np.ndarray   # (d, 2)
    boundary_mask: np.ndarray  # (d,) bool
    triangles: np.ndarray     # (2*nx*ny, 3) vertex indices

    @property
    def d(self) -> int:
        return self.node_coords.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


@dataclass(frozen=True)
class TriangularFactors:
    """Sparse LU factors of a SparseOperator; reusable for many solves."""
    lu: spla.SuperLU = field(repr=False)
    dimension: int

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(np.asarray(b, dtype=float))

    def solve_transposed(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(np.asarray(b, dtype=float), trans="T")


def build_mesh(nx: int, ny: int) -> StructuredMesh:
    """Triangulate [0,1]^2 with nx-by-ny cells, two triangles per cell."""
    if nx < 2 or ny < 2:
        raise ValueError(f"mesh needs at least 2 cells per axis, got ({nx}, {ny})")
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")  # row iy, column ix
    coords = np.column_stack([X.ravel(), Y.ravel()])

    on_boundary = (
        np.isclose(coords[:, 0], 0.0) | np.isclose(coords[:, 0], 1.0)
        | np.isclose(coords[:, 1], 0.0) | np.isclose(coords[:, 1], 1.0)
    )

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    n00 = (iy * (nx + 1) + ix).ravel()
    n10 = n00 + 1
    n01 = n00 + (nx + 1)
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.vstack([lower, upper])

    return StructuredMesh(
        nx=nx, ny=ny, h=1.0 / nx, node_coords=coords,
        boundary_mask=on_boundary, triangles=triangles,
    )


def _element_geometry(mesh: StructuredMesh):
    """Per-triangle P1 gradient coefficients and areas."""
    tri = mesh.triangles
    p = mesh.node_coords[tri]  # (nt, 3, 2)
    x, y = p[..., 0], p[..., 1]
    # b_i = y_{i+1} - y_{i+2}, c_i = x_{i+2} - x_{i+1}; grad phi_i = (b_i, c_i)/(2A)
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area2 = x[:, 0] * b[:, 0] + x[:, 1] * b[:, 1] + x[:, 2] * b[:, 2]
    area = 0.5 * np.abs(area2)
    return b, c, area


def assemble_stiffness(mesh: StructuredMesh, a: np.ndarray) -> sp.csr_matrix:
    """Stiffness operator for -div(a grad u), a given by nodal values.

    The coefficient is taken constant per element, equal to the mean of
    its three vertex values, so the assembled entries are linear in a.
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (mesh.d,):
        raise ValueError(f"coefficient must have {mesh.d} nodal values")
    if np.any(a <= 0.0):
        raise ValueError("coefficient must be strictly positive at all nodes")

    tri = mesh.triangles
    b, c, area = _element_geometry(mesh)
    a_elem = a[tri].mean(axis=1)
    # K_e[i,j] = a_e * (b_i b_j + c_i c_j) / (4 A)
    scale = a_elem / (4.0 * area)
    ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) * scale[:, None, None]

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(mesh.d, mesh.d))
    return K.tocsr()


def assemble_mass(mesh: StructuredMesh, lumped: bool = True) -> sp.csr_matrix:
    """P1 mass operator; row-sum lumped (diagonal) by default."""
    tri = mesh.triangles
    _, _, area = _element_geometry(mesh)
    if lumped:
        diag = np.zeros(mesh.d)
        np.add.at(diag, tri.ravel(), np.repeat(area / 3.0, 3))
        return sp.diags(diag, format="csr")
    me = (np.ones((3, 3)) + np.eye(3)) / 12.0  # [[2,1,1],[1,2,1],[1,1,2]]/12
    vals = area[:, None, None] * me[None, :, :]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    M = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(mesh.d, mesh.d))
    return M.tocsr()


def apply_dirichlet(op: sp.spmatrix, rhs: np.ndarray, mask: np.ndarray,
                    value: float = 0.0):
    """Eliminate constrained rows/columns symmetrically.

    Masked rows and columns are zeroed, the diagonal is set to one, and
    the right-hand side picks up the column contribution so that the
    solution equals `value` on masked nodes.
    """
    mask = np.asarray(mask, dtype=bool)
    rhs = np.asarray(rhs, dtype=float)
    if mask.shape[0] != op.shape[0] or rhs.shape[0] != op.shape[0]:
        raise ValueError("mask/rhs dimensions do not match operator")

    keep = sp.diags((~mask).astype(float))
    pinned = value * mask.astype(float)
    rhs_out = np.where(mask, value, rhs - op @ pinned)
    op_out = (keep @ op @ keep + sp.diags(mask.astype(float))).tocsr()
    return op_out, rhs_out


def factorize(op: sp.spmatrix) -> TriangularFactors:
    """Sparse LU with a fill-reducing column ordering."""
    csc = sp.csc_matrix(op)
    try:
        lu = spla.splu(csc)
    except RuntimeError as exc:  # SuperLU reports exact singularity this way
        raise SingularOperatorError(str(exc)) from exc
    upiv = np.abs(np.asarray(lu.U.diagonal()))
    if upiv.size and upiv.min() < 1e-14 * max(upiv.max(), 1e-300):
        raise SingularOperatorError(
            f"near-zero pivot: min |U_ii| = {upiv.min():.3e}, max = {upiv.max():.3e}"
        )
    return TriangularFactors(lu=lu, dimension=op.shape[0])


def weighted_inner(u: np.ndarray, v: np.ndarray, M: sp.spmatrix) -> float:
    """u^T M v."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape[0] != M.shape[0] or v.shape[0] != M.shape[1]:
        raise ValueError("dimension mismatch in weighted inner product")
    return float(u @ (M @ v))


def weighted_norm(u: np.ndarray, M: sp.spmatrix) -> float:
    return float(np.sqrt(max(weighted_inner(u, u, M), 0.0)))
