"""Block preconditioners for the linearized convex-splitting system.

Three preconditioners are provided, all applied matrix-free through SPD
inner solves:

* block triangular (BT) for the full arrangement, built from the Schur
  complement approximation K~ = (M + eps*sqrt(zeta) S) M^{-1}
  (M + eps*sqrt(zeta) S);
* the L-discarding variant (EL) for the row-scaled arrangement, whose own
  Schur complement coincides with K~ identically;
* a modified Hermitian/skew-Hermitian splitting (MHSS) preconditioner for
  the saddle arrangement,
  P = (1/alpha) diag(A, alpha I) [[alpha I, -M], [M, B]],
  whose (1,1) inverse A^{-1} is replaced in practice by a truncated
  Neumann-series approximation.

The series writes A = P - Q with P = eps^2 S + e~ I and Q = e~ I - L; for
e~ above the largest eigenvalue of L both summands are definite and
G = P^{-1} Q is a contraction, so

    A^{-1} = (I + G + G^2 + ...) P^{-1}

truncates to P_d with P_d A = I - G^d exactly.  An adaptive variant reuses
the previous inverse when L barely changed between fixed-point iterates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import (
    LinearSolveError,
    SpdSolver,
    cg,
    dense_eigenvalues,
    power_iteration,
)
from .params import Params


class SeriesDivergenceError(LinearSolveError):
    """Raised when the truncated-series increments grow instead of decay.

    Growth signals a spectral radius at or above one, i.e. the splitting
    P - Q lost the definiteness P + Q > 0 that certifies contraction
    (typically because eps_tilde is not above the largest eigenvalue of L).
    """


@dataclass
class PrecondConfig:
    """Preconditioner selection knobs.

    kind: "none", "bt", "el" or "mhss".
    alpha: "trace_a", "trace_m4", or a fixed positive number.
    eps1 / eps1_adaptive: truncation tolerances of the static and adaptive
        series.
    eps2: switch threshold on ||L_k - L_{k+1}||_F for reusing the previous
        inverse adaptively; None means 0.1 * ||L_k||_F.
    safety: factor c_s > 1 applied to the certified eps_tilde bound.
    adaptive: whether the run may use the adaptive series at all.
    inner_method: "auto" (banded Cholesky for narrow bands, CG otherwise),
        "banded", or "cg".
    """

    kind: str = "mhss"
    alpha: str | float = "trace_a"
    eps1: float = 1e-2
    eps1_adaptive: float = 1e-2
    eps2: float | None = None
    safety: float = 1.5
    adaptive: bool = False
    inner_method: str = "auto"

    def __post_init__(self):
        self.kind = str(self.kind).lower()
        if self.kind not in ("none", "bt", "el", "mhss"):
            raise ValueError(f"unknown preconditioner kind {self.kind!r}")
        if isinstance(self.alpha, str):
            self.alpha = self.alpha.lower()
            if self.alpha not in ("trace_a", "trace_m4"):
                raise ValueError(f"unknown alpha strategy {self.alpha!r}")
        elif not self.alpha > 0:
            raise ValueError("fixed alpha must be positive")
        if not (0 < self.eps1 < 1) or not (0 < self.eps1_adaptive < 1):
            raise ValueError("series tolerances must lie in (0, 1)")
        if not self.safety > 1:
            raise ValueError("safety factor must exceed 1")


class InnerSolvers:
    """Caches the SPD solves shared by all preconditioner applications.

    The matrices M and M + eps*sqrt(zeta) S are fixed for a whole run; the
    D = B + M^2/alpha solver is cached per alpha value.  In the CG path
    M^2 is never formed: D is applied as B x + M (M x)/alpha.
    """

    def __init__(
        self,
        M: sp.csr_matrix,
        S: sp.csr_matrix,
        params: Params,
        method: str = "auto",
        cg_tol: float = 1e-12,
    ):
        self.M = M
        self.S = S
        self.params = params
        self.method = method
        self.cg_tol = cg_tol
        self.p = M.shape[0]
        self._solver_M = SpdSolver(M, tol=cg_tol, method=method, label="M")
        Ks = (M + params.eps * np.sqrt(params.zeta) * S).tocsr()
        self._solver_Ks = SpdSolver(
            Ks, tol=cg_tol, method=method, label="M+eps*sqrt(zeta)*S"
        )
        self._B = (params.zeta * S).tocsr()
        self._D_cache: dict[float, object] = {}

    @property
    def B(self) -> sp.csr_matrix:
        return self._B

    def solve_M(self, r: np.ndarray) -> np.ndarray:
        return self._solver_M.solve(r)

    def solve_Ktilde(self, r: np.ndarray) -> np.ndarray:
        """Apply K~^{-1} = (M+eps*sqrt(zeta)S)^{-1} M (M+eps*sqrt(zeta)S)^{-1}."""
        return self._solver_Ks.solve(self.M @ self._solver_Ks.solve(r))

    def solve_D(self, r: np.ndarray, alpha: float) -> np.ndarray:
        """Solve (B + M^2/alpha) x = r."""
        key = float(alpha)
        solver = self._D_cache.get(key)
        if solver is None:
            use_banded = self.method in ("auto", "banded")
            if use_banded:
                D = (self._B + (self.M @ self.M) / key).tocsr()
                cand = SpdSolver(
                    D, tol=self.cg_tol, method=self.method, label="B+M^2/alpha"
                )
                if cand.method == "banded":
                    solver = cand
            if solver is None:
                M, B = self.M, self._B
                mv = lambda x: B @ x + (M @ (M @ x)) / key
                rowsq = np.asarray(self.M.multiply(self.M).sum(axis=1)).ravel()
                diag = B.diagonal() + rowsq / key
                solver = _MatFreeCg(
                    (self.p, mv), diag, self.cg_tol, "B+M^2/alpha"
                )
            self._D_cache[key] = solver
        return solver.solve(r)


class _MatFreeCg:
    def __init__(self, op, diag, tol, label):
        self.op = op
        self.diag = diag
        self.tol = tol
        self.label = label

    def solve(self, b):
        x, _ = cg(self.op, b, tol=self.tol, diag=self.diag, label=self.label)
        return x


def _default_solvers(M, S, params, solvers):
    return solvers if solvers is not None else InnerSolvers(M, S, params)


def bt_apply(
    r: np.ndarray,
    M: sp.csr_matrix,
    S: sp.csr_matrix,
    L: sp.csr_matrix,
    params: Params,
    solvers: InnerSolvers | None = None,
) -> np.ndarray:
    """Apply the inverse of the block triangular preconditioner.

    P_BT = [[(1+sigma*dt) M, 0], [-eps^2 S - L, K~]]: forward substitution
    costs one M-solve, one sparse product with eps^2 S + L, and one K~
    application (two SPD solves around one mass product).
    """
    sol = _default_solvers(M, S, params, solvers)
    p = M.shape[0]
    r1, r2 = r[:p], r[p:]
    z1 = sol.solve_M(r1) / (1.0 + params.sigma * params.dt)
    t = r2 + (params.eps**2) * (S @ z1) + L @ z1
    z2 = sol.solve_Ktilde(t)
    return np.concatenate([z1, z2])


def el_apply(
    r: np.ndarray,
    M: sp.csr_matrix,
    S: sp.csr_matrix,
    params: Params,
    solvers: InnerSolvers | None = None,
) -> np.ndarray:
    """Apply the inverse of the L-discarding preconditioner.

    P_EL = [[M, zeta S], [-eps^2 S, M + 2 eps sqrt(zeta) S]].  Its Schur
    complement M + 2 eps sqrt(zeta) S + eps^2 zeta S M^{-1} S equals K~
    identically, so the block elimination reuses the same K~ solve as BT.
    Independent of L by construction.
    """
    sol = _default_solvers(M, S, params, solvers)
    p = M.shape[0]
    r1, r2 = r[:p], r[p:]
    y = sol.solve_M(r1)
    z2 = sol.solve_Ktilde(r2 + (params.eps**2) * (S @ y))
    z1 = y - params.zeta * sol.solve_M(S @ z2)
    return np.concatenate([z1, z2])


def mhss_apply(
    r: np.ndarray,
    A_inv,
    M: sp.csr_matrix,
    B: sp.csr_matrix,
    alpha: float,
    solvers: InnerSolvers | None = None,
    params: Params | None = None,
) -> np.ndarray:
    """Apply the inverse of the MHSS preconditioner to a stacked residual.

    Uses the four-factor decomposition
    P = (1/alpha) diag(A, alpha I) [[I,0],[M/alpha,I]]
        diag(alpha I, B + M^2/alpha) [[I,-M/alpha],[0,I]]
    inverted factor by factor; A^{-1} is whatever operator ``A_inv``
    applies (a truncated-series inverse in production, an exact solve in
    the diagnostics).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if solvers is None:
        if params is None:
            raise ValueError("mhss_apply needs either a solver cache or params")
        # Recover S from B = zeta*S for the cache construction.
        S = (B / params.zeta).tocsr()
        solvers = InnerSolvers(M, S, params)
    a_mv = A_inv.apply if hasattr(A_inv, "apply") else A_inv
    p = M.shape[0]
    r1, r2 = r[:p], r[p:]
    s1 = alpha * a_mv(r1)
    s2 = r2 - (M @ s1) / alpha
    s1 = s1 / alpha
    s2 = solvers.solve_D(s2, alpha)
    s1 = s1 + (M @ s2) / alpha
    return np.concatenate([s1, s2])


def select_alpha(
    M: sp.csr_matrix,
    S: sp.csr_matrix,
    L: sp.csr_matrix,
    params: Params,
    strategy: str | float = "trace_a",
    n_probes: int = 32,
    seed: int = 12345,
    cg_tol: float = 1e-8,
    exact_threshold: int = 200,
) -> float:
    """Choose the MHSS shift alpha for A = eps^2 S + L.

    "trace_a" returns trace(A)/p.  "trace_m4" returns
    trace(M^4)/trace(M^4 A^{-1}) with both traces estimated by Hutchinson
    probing with seeded Rademacher vectors (computed exactly at desk
    scale).  A fixed number passes through unchanged.
    """
    p = M.shape[0]
    if isinstance(strategy, (int, float)) and not isinstance(strategy, bool):
        alpha = float(strategy)
    else:
        strat = str(strategy).lower()
        if strat == "trace_a":
            alpha = ((params.eps**2) * S.diagonal().sum() + L.diagonal().sum()) / p
        elif strat == "trace_m4":
            A = ((params.eps**2) * S + L).tocsr()
            if p <= exact_threshold:
                Md = M.toarray()
                M4 = np.linalg.matrix_power(Md, 4)
                tr_m4 = np.trace(M4)
                tr_m4ainv = np.trace(np.linalg.solve(A.toarray(), M4.T).T)
            else:
                rng = np.random.default_rng(seed)
                diag_A = A.diagonal()
                tr_m4 = 0.0
                tr_m4ainv = 0.0
                for _ in range(n_probes):
                    z = rng.choice([-1.0, 1.0], size=p)
                    m2z = M @ (M @ z)
                    tr_m4 += np.dot(m2z, m2z)
                    w, _ = cg(A, z, tol=cg_tol, diag=diag_A, label="A")
                    m4w = M @ (M @ (M @ (M @ w)))
                    tr_m4ainv += np.dot(z, m4w)
                tr_m4 /= n_probes
                tr_m4ainv /= n_probes
            alpha = tr_m4 / tr_m4ainv
        else:
            raise ValueError(f"unknown alpha strategy {strategy!r}")
    if not alpha > 0:
        raise ValueError(f"alpha selection produced a nonpositive value: {alpha}")
    return float(alpha)


def alpha_optimal(lambda_min: float, lambda_max: float) -> float:
    """Minimizer of max_i |1 - alpha/lambda_i| over the spectrum of A."""
    return 2.0 * lambda_min * lambda_max / (lambda_min + lambda_max)


def sigma_tilde(alpha: float, eigenvalues: np.ndarray) -> float:
    """Upper bound max_i |1 - alpha/lambda_i(A)| on the MHSS iteration radius."""
    lam = np.asarray(eigenvalues, dtype=float)
    return float(np.max(np.abs(1.0 - alpha / lam)))


def select_eps_tilde(
    u_prev: np.ndarray,
    M: sp.csr_matrix,
    c_s: float,
    rho_M: float | None = None,
) -> float:
    """Certified shift eps_tilde > lambda_max(L) for the series splitting.

    Uses the quadratic-form bound L <= max|u|^2 M: eps_tilde =
    c_s * max|u|^2 * rho(M) with c_s > 1 guarantees Q = eps_tilde I - L > 0.
    rho(M) is estimated by power iteration when not supplied.
    """
    if not c_s > 1:
        raise ValueError("safety factor c_s must exceed 1")
    if rho_M is None:
        rho_M = power_iteration(M, tol=1e-10, max_iter=10000, seed=0).value
    umax = float(np.max(np.abs(u_prev))) if len(u_prev) else 0.0
    if umax == 0.0:
        warnings.warn(
            "u_prev is identically zero; L vanishes and eps_tilde falls back "
            "to a machine-scale positive shift",
            RuntimeWarning,
        )
        return c_s * rho_M * np.finfo(float).eps
    return c_s * umax**2 * rho_M


class ExactInverse:
    """Exact SPD inverse application for desk-scale diagnostics.

    Presents the same interface as NeumannInverse (``apply``, ``L``,
    ``eps_tilde``) so it can stand in wherever the theorems assume the
    (1,1)-block inverse is applied exactly.
    """

    def __init__(self, A, L: sp.csr_matrix | None = None, eps_tilde: float = np.inf):
        import scipy.linalg as _sla

        Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        self._factor = _sla.cho_factor(Ad)
        self.L = L
        self.eps_tilde = eps_tilde

    def apply(self, v: np.ndarray) -> np.ndarray:
        import scipy.linalg as _sla

        return _sla.cho_solve(self._factor, v)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)


@dataclass
class NeumannInverse:
    """Truncated-series approximate inverse of A = eps^2 S + L.

    mode "static": applies P_d v = sum_{l<d} G^l P^{-1} v by the Horner
    recursion t <- P^{-1}(Q t), accumulating d terms, each term one SPD
    solve with P = eps^2 S + eps_tilde I.

    mode "adaptive": applies the restarted series built on a previous
    inverse: terms are H^l (previous applied to v) with
    H y = prev((L_prev - L) y), valid while L changed little.
    """

    mode: str
    eps_tilde: float
    depth: int
    L: sp.csr_matrix
    solver_P: SpdSolver | None = None
    prev: "NeumannInverse | None" = None
    delta_L: sp.csr_matrix | None = None
    probe_increments: list = field(default_factory=list)

    @property
    def p(self) -> int:
        return self.L.shape[0]

    def _term_map(self, t: np.ndarray) -> np.ndarray:
        if self.mode == "static":
            return self.solver_P.solve(self.eps_tilde * t - self.L @ t)
        return self.prev.apply(self.delta_L @ t)

    def _base(self, v: np.ndarray) -> np.ndarray:
        if self.mode == "static":
            return self.solver_P.solve(v)
        return self.prev.apply(v)

    def apply(self, v: np.ndarray) -> np.ndarray:
        t = self._base(v)
        y = t.copy()
        for _ in range(self.depth - 1):
            t = self._term_map(t)
            y += t
        return y

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)

    def dense(self) -> np.ndarray:
        """Materialize the operator column by column (diagnostics only)."""
        cols = [self.apply(col) for col in np.eye(self.p)]
        return np.column_stack(cols)


def neumann_inverse_build(
    S: sp.csr_matrix,
    L: sp.csr_matrix,
    eps: float,
    eps_tilde: float,
    mode: str = "static",
    prev: NeumannInverse | None = None,
    tol: float = 1e-2,
    depth: int | None = None,
    max_depth: int = 200,
    probe_seed: int = 7,
    inner_method: str = "auto",
    cg_tol: float = 1e-12,
) -> NeumannInverse:
    """Build a truncated-series inverse with probe-selected depth.

    The depth grows until the latest series increment falls below
    ``tol`` times the accumulated sum on a seeded probe vector (a working
    surrogate for the depth formula floor(log_{||G||} tol) + 1, whose norm
    is not cheaply available matrix-free).  Three consecutive increment
    growths abort the build: the series only converges while the splitting
    keeps P + Q positive definite, i.e. rho(P^{-1}Q) < 1.
    """
    if mode not in ("static", "adaptive"):
        raise ValueError(f"mode must be 'static' or 'adaptive', got {mode!r}")
    if eps_tilde <= 0:
        raise ValueError("eps_tilde must be positive")
    p = L.shape[0]

    if mode == "static":
        P = ((eps**2) * S + eps_tilde * sp.identity(p, format="csr")).tocsr()
        op = NeumannInverse(
            mode="static",
            eps_tilde=eps_tilde,
            depth=1,
            L=L.tocsr(),
            solver_P=SpdSolver(P, tol=cg_tol, method=inner_method, label="P"),
        )
    else:
        if prev is None:
            raise ValueError("adaptive mode needs the previous inverse")
        op = NeumannInverse(
            mode="adaptive",
            eps_tilde=eps_tilde,
            depth=1,
            L=L.tocsr(),
            prev=prev,
            delta_L=(prev.L - L).tocsr(),
        )

    if depth is not None:
        op.depth = int(depth)
        return op

    rng = np.random.default_rng(probe_seed)
    v = rng.standard_normal(p)
    t = op._base(v)
    y = t.copy()
    increments = [float(np.linalg.norm(t))]
    d = 1
    growth = 0
    while increments[-1] > tol * np.linalg.norm(y):
        if d >= max_depth:
            raise SeriesDivergenceError(
                f"series not converged after {max_depth} terms; the "
                "contraction ratio is too close to one"
            )
        t = op._term_map(t)
        y += t
        d += 1
        inc = float(np.linalg.norm(t))
        growth = growth + 1 if inc > increments[-1] else 0
        increments.append(inc)
        if growth >= 3:
            raise SeriesDivergenceError(
                "series increments are growing: the splitting is not a "
                "contraction (requires P + Q > 0, i.e. eps_tilde above the "
                "largest eigenvalue of L)"
            )
    op.depth = d
    op.probe_increments = increments
    return op


def series_depth_from_norm(norm_G: float, tol: float) -> int:
    """Depth floor(log_{||G||} tol) + 1 for dense diagnostic instances."""
    if not 0 < norm_G < 1:
        raise ValueError("series depth formula needs 0 < ||G|| < 1")
    return int(np.floor(np.log(tol) / np.log(norm_G))) + 1


def adaptive_advantage_check(
    L_k: sp.spmatrix | np.ndarray,
    L_k1: sp.spmatrix | np.ndarray,
    P: sp.spmatrix | np.ndarray,
    eps_tilde: float,
    dense_threshold: int = 2000,
):
    """Compare the adaptive and static series contraction radii.

    Returns (rho_adaptive, rho_static, ordering_holds) where the radii are
    rho[(I-G_k)^{-1}(G_{k+1}-G_k)] and rho(G_{k+1}) for G = P^{-1}
    (eps_tilde I - L), and ordering_holds records whether the hypothesis
    L_k - L_{k+1} >= 0 was satisfied (the ordering
    rho_adaptive <= rho_static < 1 is only guaranteed under it).
    """
    Lk = L_k.toarray() if sp.issparse(L_k) else np.asarray(L_k, dtype=float)
    Lk1 = L_k1.toarray() if sp.issparse(L_k1) else np.asarray(L_k1, dtype=float)
    Pd = P.toarray() if sp.issparse(P) else np.asarray(P, dtype=float)
    p = Pd.shape[0]
    if p > dense_threshold:
        raise ValueError("adaptive advantage check is a desk-scale diagnostic")
    eigs_diff = np.linalg.eigvalsh(0.5 * ((Lk - Lk1) + (Lk - Lk1).T))
    ordering_holds = bool(eigs_diff.min() >= -1e-10)

    eye = np.eye(p)
    G_k = np.linalg.solve(Pd, eps_tilde * eye - Lk)
    G_k1 = np.linalg.solve(Pd, eps_tilde * eye - Lk1)
    H = np.linalg.solve(eye - G_k, G_k1 - G_k)
    rho_adaptive = float(np.max(np.abs(np.linalg.eigvals(H))))
    rho_static = float(np.max(np.abs(np.linalg.eigvals(G_k1))))
    return rho_adaptive, rho_static, ordering_holds
