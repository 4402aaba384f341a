"""Matrix-free linear algebra kernel.

Provides the Krylov solvers used everywhere else (unrestarted GMRES with
right preconditioning, conjugate gradients for SPD inner solves), dense
eigenvalue computation for the desk-scale diagnostics, power iteration for
spectral-radius estimates, and a reusable solver object for the fixed SPD
matrices that appear inside the preconditioners.

GMRES uses modified Gram-Schmidt with one reorthogonalization pass, which
keeps the Arnoldi basis orthogonal enough for the tight 1e-10 outer
tolerances used throughout.  Right preconditioning means every reported
residual is a residual of the original system, never of a transformed one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class LinearSolveError(RuntimeError):
    """Raised when an iterative solve fails (breakdown, non-convergence)."""


class IndefiniteOperatorError(LinearSolveError):
    """Raised when CG meets a direction of nonpositive curvature."""


class DenseSizeError(ValueError):
    """Raised when a dense computation is requested above the size threshold."""


#: Largest dimension the dense eigenvalue/SVD paths accept by default.
DENSE_THRESHOLD = 2000


def as_matvec(A):
    """Normalize a matrix-like object to (n, matvec).

    Accepts numpy arrays, scipy sparse matrices, objects exposing
    ``shape``/``matvec``, or ``(n, callable)`` tuples.
    """
    if isinstance(A, tuple) and len(A) == 2 and callable(A[1]):
        return int(A[0]), A[1]
    if sp.issparse(A):
        n = A.shape[0]
        return n, lambda x: A @ x
    if isinstance(A, np.ndarray):
        n = A.shape[0]
        return n, lambda x: A @ x
    if hasattr(A, "matvec") and hasattr(A, "shape"):
        return A.shape[0], A.matvec
    if callable(A):
        # Bare callable: the dimension is taken from the context it is
        # used in (only preconditioner slots accept this form).
        return None, A
    raise TypeError(f"cannot interpret {type(A)!r} as a linear operator")


@dataclass
class SolveReport:
    """Outcome of one Krylov solve.

    residual_history holds relative residual norms, starting with the
    initial one; within an unrestarted GMRES cycle it is nonincreasing and
    its final entry is at most the tolerance exactly when converged.
    """

    iterations: int
    converged: bool
    residual_history: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_history": [float(r) for r in self.residual_history],
            "wall_time_s": self.wall_time_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def spmv(A: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product with an explicit dimension check."""
    x = np.asarray(x)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {x.shape}")
    return A @ x


def gmres(
    A,
    b: np.ndarray,
    M_right=None,
    tol: float = 1e-10,
    max_iter: int = 300,
    restart: int | None = None,
    x0: np.ndarray | None = None,
):
    """Right-preconditioned GMRES.

    Solves A x = b to a relative residual ||b - A x|| / ||b|| <= tol.  With
    a right preconditioner the Krylov space is built for A*M_right, and the
    minimized residual is the true residual of the original system.

    Returns (x, SolveReport).  Non-convergence within max_iter is reported,
    not raised; an Arnoldi breakdown converts to convergence when the
    residual is already below tolerance and to a failure otherwise.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n, amv = as_matvec(A)
    if n is None:
        raise TypeError("the system operator needs an explicit dimension")
    pmv = None
    if M_right is not None:
        _, pmv = as_matvec(M_right)
    b = np.asarray(b, dtype=float)
    t0 = time.perf_counter()

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, True, [0.0], time.perf_counter() - t0)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    m = max_iter if restart is None else min(restart, max_iter)
    history: list[float] = []
    total = 0
    converged = False
    prev_rel = np.inf

    # Convergence is always declared on a freshly computed true residual at
    # the top of a cycle; a cycle whose Givens estimate reached tol but
    # whose true residual did not has hit the rounding floor of the
    # preconditioner application and triggers one corrective cycle.
    while True:
        r = b - amv(x)
        beta = np.linalg.norm(r)
        rel = beta / bnorm
        history.append(rel)
        if rel <= tol:
            converged = True
            break
        if total >= max_iter:
            break
        if rel > 0.5 * prev_rel and prev_rel < np.inf:
            break  # stagnation across cycles: rounding floor reached
        prev_rel = rel

        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n)) if pmv is not None else None
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j_used = 0
        breakdown = False

        for j in range(m):
            if pmv is not None:
                z = pmv(V[j])
                Z[j] = z
            else:
                z = V[j]
            w = amv(z)
            # Modified Gram-Schmidt with one reorthogonalization pass.
            for i in range(j + 1):
                hij = np.dot(w, V[i])
                H[i, j] = hij
                w -= hij * V[i]
            for i in range(j + 1):
                c = np.dot(w, V[i])
                H[i, j] += c
                w -= c * V[i]
            H[j + 1, j] = np.linalg.norm(w)

            # Apply accumulated Givens rotations, then the new one.
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j] = H[j, j] / denom
                sn[j] = H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]

            total += 1
            j_used = j + 1
            rel = abs(g[j + 1]) / bnorm
            history.append(rel)

            subdiag = np.linalg.norm(w)
            if subdiag < 1e-300:
                breakdown = True
                break
            V[j + 1] = w / subdiag
            if rel <= tol or total >= max_iter:
                break

        # Solve the small triangular system; the update is assembled from
        # the stored preconditioned basis so it is consistent with H.
        if j_used > 0:
            y = sla.solve_triangular(H[:j_used, :j_used], g[:j_used], lower=False)
            x = x + (Z[:j_used].T @ y if pmv is not None else V[:j_used].T @ y)

        if breakdown:
            r = b - amv(x)
            rel = np.linalg.norm(r) / bnorm
            history.append(rel)
            converged = rel <= tol
            break

    return x, SolveReport(total, converged, history, time.perf_counter() - t0)


def cg(
    A,
    b: np.ndarray,
    tol: float = 1e-12,
    max_iter: int | None = None,
    diag: np.ndarray | None = None,
    label: str = "A",
    x0: np.ndarray | None = None,
):
    """Jacobi-preconditioned conjugate gradients for SPD systems.

    Raises IndefiniteOperatorError when a search direction has p'Ap <= 0
    (the operator named by ``label`` is not positive definite on the Krylov
    space) and LinearSolveError when max_iter is exhausted.
    """
    n, amv = as_matvec(A)
    if n is None:
        raise TypeError("the system operator needs an explicit dimension")
    b = np.asarray(b, dtype=float)
    if max_iter is None:
        max_iter = 20 * n + 200
    if diag is None and sp.issparse(A):
        diag = A.diagonal()
    if diag is not None:
        d = np.asarray(diag, dtype=float)
        inv = np.where(np.abs(d) > 0, 1.0 / np.where(d == 0, 1.0, d), 1.0)
        prec = lambda r: inv * r
    else:
        prec = lambda r: r

    t0 = time.perf_counter()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, True, [0.0], time.perf_counter() - t0)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - amv(x) if x0 is not None else b.copy()
    z = prec(r)
    p = z.copy()
    rz = np.dot(r, z)
    history = [np.linalg.norm(r) / bnorm]

    for k in range(max_iter):
        if history[-1] <= tol:
            return x, SolveReport(k, True, history, time.perf_counter() - t0)
        Ap = amv(p)
        pAp = np.dot(p, Ap)
        if pAp <= 0.0:
            raise IndefiniteOperatorError(
                f"operator {label!r} is not positive definite: p'Ap = {pAp:.3e}"
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        history.append(np.linalg.norm(r) / bnorm)
        z = prec(r)
        rz_new = np.dot(r, z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p

    if history[-1] <= tol:
        return x, SolveReport(max_iter, True, history, time.perf_counter() - t0)
    raise LinearSolveError(
        f"CG on {label!r} did not reach tol={tol:g} in {max_iter} iterations "
        f"(final relative residual {history[-1]:.3e})"
    )


def dense_eigenvalues(
    A: np.ndarray,
    generalized_B: np.ndarray | None = None,
    threshold: int = DENSE_THRESHOLD,
) -> np.ndarray:
    """Eigenvalues of a dense matrix, sorted by real part.

    With ``generalized_B`` (SPD) the eigenvalues of B^{-1} A are computed by
    Cholesky reduction: B = R R', then eig(R^{-1} A R^{-T}), which is
    similar to B^{-1} A.  Sizes above ``threshold`` are refused outright
    rather than approximated.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    if n > threshold:
        raise DenseSizeError(
            f"dense eigenvalue computation refused for n={n} > threshold={threshold}"
        )
    if generalized_B is not None:
        B = np.asarray(generalized_B, dtype=float)
        R = np.linalg.cholesky(B)  # B = R R^T, R lower triangular
        Y = sla.solve_triangular(R, A, lower=True)
        C = sla.solve_triangular(R, Y.T, lower=True).T
        vals = np.linalg.eigvals(C)
    else:
        vals = np.linalg.eigvals(A)
    order = np.lexsort((vals.imag, vals.real))
    return vals[order]


@dataclass(frozen=True)
class PowerResult:
    value: float
    converged: bool
    iterations: int


def power_iteration(
    A,
    tol: float = 1e-10,
    max_iter: int = 5000,
    seed: int = 0,
) -> PowerResult:
    """Spectral-radius estimate by power iteration with a seeded start.

    For symmetric operators the returned value is the Rayleigh quotient of
    the final iterate, accurate to the eigenvector residual.  For
    nonsymmetric operators it is a safeguard estimate only.
    """
    n, amv = as_matvec(A)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for k in range(1, max_iter + 1):
        w = amv(v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return PowerResult(0.0, True, k)
        new_est = abs(np.dot(v, w))
        resid = np.linalg.norm(w - np.dot(v, w) * v)
        v = w / nrm
        if resid <= tol * max(new_est, 1e-300) or abs(new_est - est) <= tol * max(
            new_est, 1e-300
        ):
            return PowerResult(float(new_est), True, k)
        est = new_est
    return PowerResult(float(est), False, max_iter)


def _bandwidth(A: sp.spmatrix) -> int:
    coo = A.tocoo()
    if coo.nnz == 0:
        return 0
    return int(np.max(np.abs(coo.row - coo.col)))


class SpdSolver:
    """Reusable solver for a fixed sparse SPD matrix.

    Narrow-band matrices (everything the 1D discretization produces, and
    the moderate bands of small 2D grids) are solved through a cached LAPACK
    banded Cholesky factorization; anything wider falls back to
    Jacobi-preconditioned CG at ``tol``.  Both paths are deterministic and
    accurate well beyond the outer solver tolerances, so callers may treat
    ``solve`` as an exact application of the inverse.
    """

    def __init__(
        self,
        A: sp.spmatrix,
        tol: float = 1e-12,
        method: str = "auto",
        label: str = "spd",
        max_bandwidth: int = 160,
    ):
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        self.A = A.tocsr()
        self.n = A.shape[0]
        self.tol = tol
        self.label = label
        bw = _bandwidth(self.A)
        if method == "auto":
            method = "banded" if (bw <= max_bandwidth and bw < self.n) else "cg"
        self.method = method
        if method == "banded":
            ab = np.zeros((bw + 1, self.n))
            for k in range(bw + 1):
                ab[bw - k, k:] = self.A.diagonal(k)
            try:
                self._factor = sla.cholesky_banded(ab, lower=False)
            except np.linalg.LinAlgError as exc:
                raise LinearSolveError(
                    f"banded Cholesky of {label!r} failed: {exc}"
                ) from exc
            self._diag = None
        elif method == "cg":
            self._factor = None
            self._diag = self.A.diagonal()
        else:
            raise ValueError(f"unknown method {method!r}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.method == "banded":
            return sla.cho_solve_banded((self._factor, False), b)
        x, _ = cg(self.A, b, tol=self.tol, diag=self._diag, label=self.label)
        return x

    def __call__(self, b: np.ndarray) -> np.ndarray:
        return self.solve(b)
