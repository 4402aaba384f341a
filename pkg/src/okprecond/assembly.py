"""P1 finite-element assembly for the discretized Ohta-Kawasaki system.

Builds the mass matrix M, the stiffness matrix S (natural Neumann boundary
conditions, so S*1 = 0 exactly), the solution-weighted mass matrix

    l_ij = int (u_h)^2 phi_i phi_j dx,

and the right-hand-side vectors of the per-iteration block system.  M and S
use exact elementwise integration; the weighted mass uses a quadrature rule
that is exact for its degree-4 integrand (3-point Gauss per segment in 1D,
the 6-point degree-4 symmetric triangle rule in 2D), which keeps the bound
x'Lx <= max(u)^2 x'Mx exact rather than approximate.

Assembly accumulates per-element contributions in coordinate form and
compresses to CSR with duplicate summation in a fixed order, so repeated
assemblies of the same mesh are bit-identical.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, element_volumes

# 3-point Gauss-Legendre on (0,1): exact through degree 5.
_GAUSS3_X = np.array(
    [0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0]
)
_GAUSS3_W = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])

# 6-point symmetric triangle rule, exact through degree 4 (positive weights,
# normalized to unit area).  Two orbits of three barycentric permutations.
_TRI6_BARY = np.array(
    [
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
    ]
)
_TRI6_W = np.array(
    [
        0.223381589678011,
        0.223381589678011,
        0.223381589678011,
        0.109951743655322,
        0.109951743655322,
        0.109951743655322,
    ]
)


def _accumulate(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    """Scatter per-element (ne, k, k) blocks into a canonical CSR matrix."""
    k = mesh.elements.shape[1]
    rows = np.repeat(mesh.elements, k, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, k)).ravel()
    coo = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.p, mesh.p)
    )
    out = coo.tocsr()
    out.sum_duplicates()
    out.sort_indices()
    return out


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Assemble the P1 mass matrix m_ij = int phi_i phi_j dx (SPD, exact)."""
    vol = element_volumes(mesh)
    if mesh.dim == 1:
        ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        ref = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = vol[:, None, None] * ref[None, :, :]
    return _accumulate(mesh, local)


def _triangle_edge_vectors(mesh: Mesh) -> np.ndarray:
    """Opposite-edge vectors (ne, 3, 2): edge i faces local vertex i."""
    a = mesh.vertices[mesh.elements[:, 0]]
    b = mesh.vertices[mesh.elements[:, 1]]
    c = mesh.vertices[mesh.elements[:, 2]]
    return np.stack([c - b, a - c, b - a], axis=1)


def assemble_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """Assemble the P1 stiffness matrix s_ij = int grad phi_i . grad phi_j dx.

    Symmetric positive semidefinite with the constants in its kernel
    (S @ 1 == 0 exactly): there is no essential boundary condition.
    """
    if mesh.dim == 1:
        vol = element_volumes(mesh)
        ref = np.array([[1.0, -1.0], [-1.0, 1.0]])
        local = (1.0 / vol)[:, None, None] * ref[None, :, :]
    else:
        vol = element_volumes(mesh)
        edges = _triangle_edge_vectors(mesh)
        # grad phi_i = perp(edge_i) / (2A); perp drops out of dot products.
        local = np.einsum("eik,ejk->eij", edges, edges) / (4.0 * vol)[:, None, None]
    A = _accumulate(mesh, local)
    A.eliminate_zeros()
    return A


def _quad_basis(mesh: Mesh):
    """Quadrature weights and P1 basis values at the degree-4 rule points.

    Returns (weights, phi) with weights summing to 1 (reference measure) and
    phi of shape (nq, k), the basis values at each quadrature point.
    """
    if mesh.dim == 1:
        phi = np.column_stack([1.0 - _GAUSS3_X, _GAUSS3_X])
        return _GAUSS3_W, phi
    return _TRI6_W, _TRI6_BARY


def assemble_weighted_mass(mesh: Mesh, u_prev: np.ndarray) -> sp.csr_matrix:
    """Assemble l_ij = int (u_h)^2 phi_i phi_j dx for u_h = sum u_prev_i phi_i.

    Symmetric positive semidefinite; the sparsity pattern matches the mass
    matrix (entries that sum to exactly zero, e.g. for u_prev == 0, are kept
    so the pattern never depends on the data).
    """
    u_prev = np.asarray(u_prev, dtype=float)
    if u_prev.shape != (mesh.p,):
        raise ValueError(f"u_prev must have length {mesh.p}, got {u_prev.shape}")
    vol = element_volumes(mesh)
    w, phi = _quad_basis(mesh)
    u_elem = u_prev[mesh.elements]            # (ne, k)
    u_q = u_elem @ phi.T                      # (ne, nq)
    wq = w[None, :] * u_q**2                  # (ne, nq)
    # L_loc[e,i,j] = vol_e * sum_q wq[e,q] phi[q,i] phi[q,j]
    local = np.einsum("eq,qi,qj->eij", wq, phi, phi) * vol[:, None, None]
    return _accumulate(mesh, local)


def bulk_energy_integral(mesh: Mesh, u: np.ndarray) -> float:
    """int Phi(u_h) dx with Phi(v) = (1 - v^2)^2 / 4, same rule as L."""
    u = np.asarray(u, dtype=float)
    vol = element_volumes(mesh)
    w, phi = _quad_basis(mesh)
    u_q = u[mesh.elements] @ phi.T
    phi_vals = 0.25 * (1.0 - u_q**2) ** 2
    return float(np.dot(vol, phi_vals @ w))


def assemble_rhs(
    M: sp.csr_matrix,
    u_prev_time: np.ndarray,
    u_prev_iter: np.ndarray,
    sigma_dt: float,
    mean_mass: float,
):
    """Right-hand sides of the per-iteration block system.

    F = M u^{n-1} + sigma*dt * m * (M 1)   (the source term (m, phi_j) is
    m * (M 1)_j by partition of unity), and E = -M u_prev_iter.
    """
    ones = np.ones(M.shape[0])
    F = M @ u_prev_time + sigma_dt * mean_mass * (M @ ones)
    E = -(M @ u_prev_iter)
    return F, E


def is_symmetric(A: sp.spmatrix, tol: float = 0.0) -> bool:
    """Check value symmetry of a sparse matrix (exact when tol=0)."""
    d = (A - A.T).tocoo()
    if d.nnz == 0:
        return True
    return bool(np.max(np.abs(d.data)) <= tol)
