"""Desk-scale spectral diagnostics and theorem certificates.

Everything here materializes operators densely (column by column through
the very same application routines the solver uses) and is therefore
restricted to small instances; production solves never touch these paths.
The certificates check, numerically, each spectral claim behind the
preconditioners:

* block triangular: all eigenvalues real inside
  (1/2, 1 + sqrt(zeta)/(4 eps) * lambda_max(M^{-1}L));
* L-discarding: spectrum identical to the block triangular one;
* MHSS: at least p unit eigenvalues, the rest real and positive inside the
  interval built from the extremal eigenvalues of A, B and M;
* the iteration-matrix bound rho(T(alpha)) <= max_i |1 - alpha/lambda_i(A)|
  and the closed-form minimizer of its right-hand side;
* the adaptive-series ordering rho_adaptive <= rho_static < 1 under the
  monotonicity hypothesis on L.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import assemble_mass, assemble_stiffness, assemble_weighted_mass
from .blocks import BlockOperator
from .linalg import DENSE_THRESHOLD, DenseSizeError, dense_eigenvalues, power_iteration
from .mesh import Mesh
from .params import Params
from .precond import (
    ExactInverse,
    InnerSolvers,
    PrecondConfig,
    adaptive_advantage_check,
    alpha_optimal,
    bt_apply,
    el_apply,
    mhss_apply,
    select_alpha,
    sigma_tilde,
)
from .scheme import initial_condition

#: Spurious imaginary parts produced by the dense QR iteration on
#: nonsymmetric matrices; eigenvalues with |Im| below this are called real.
REALNESS_TOL = 1e-7


@dataclass
class SpectralReport:
    """Eigenvalues of one (preconditioned) operator plus its theorem bound."""

    label: str
    eigenvalues: np.ndarray
    bound: tuple | None = None
    realness_claimed: bool = False
    realness_tol: float = REALNESS_TOL
    unit_count: int | None = None
    constants: dict = field(default_factory=dict)

    @property
    def violations(self) -> int:
        count = 0
        if self.realness_claimed:
            count += int(np.sum(np.abs(self.eigenvalues.imag) > self.realness_tol))
        if self.bound is not None:
            lo, hi = self.bound
            re = self.eigenvalues.real
            inside_unit = np.abs(self.eigenvalues - 1.0) <= self.realness_tol
            checked = re[~inside_unit] if self.unit_count is not None else re
            count += int(
                np.sum((checked < lo - self.realness_tol) | (checked > hi + self.realness_tol))
            )
        return count

    def to_dict(self) -> dict:
        out = {
            "label": self.label,
            "eigenvalues_re": self.eigenvalues.real.tolist(),
            "eigenvalues_im": self.eigenvalues.imag.tolist(),
            "violations": self.violations,
            "realness_claimed": self.realness_claimed,
        }
        if self.bound is not None:
            out["bound"] = [float(self.bound[0]), float(self.bound[1])]
        if self.unit_count is not None:
            out["unit_count"] = self.unit_count
        if self.constants:
            out["constants"] = {k: float(v) for k, v in self.constants.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def eigenvalues_csv(self) -> str:
        lines = ["re,im"]
        for z in self.eigenvalues:
            lines.append(f"{float(z.real)!r},{float(z.imag)!r}")
        return "\n".join(lines) + "\n"


def linearized_instance(mesh: Mesh, params: Params, u_state: np.ndarray | None = None):
    """Assembled matrices of the first linearized pass on a seeded state."""
    M = assemble_mass(mesh)
    S = assemble_stiffness(mesh)
    if u_state is None:
        u_state = initial_condition(
            mesh, params.m, params.amplitude, params.seed, M=M
        )
    L = assemble_weighted_mass(mesh, u_state)
    return {"M": M, "S": S, "L": L, "u": u_state}


def lambda_plus(M: sp.csr_matrix, L: sp.csr_matrix, dense_threshold: int = DENSE_THRESHOLD) -> float:
    """lambda_max(M^{-1} L), dense at desk scale, power iteration above it."""
    p = M.shape[0]
    if p <= dense_threshold:
        vals = dense_eigenvalues(L.toarray(), generalized_B=M.toarray())
        return float(np.max(vals.real))
    from .linalg import SpdSolver

    solver = SpdSolver(M, label="M")
    op = (p, lambda x: solver.solve(L @ x))
    return power_iteration(op, tol=1e-8, max_iter=20000, seed=0).value


def _materialize(n: int, apply_fn) -> np.ndarray:
    cols = [apply_fn(col) for col in np.eye(n)]
    return np.column_stack(cols)


def preconditioned_matrix(
    mesh: Mesh,
    params: Params,
    pcfg: PrecondConfig,
    u_state: np.ndarray | None = None,
    dense_threshold: int = DENSE_THRESHOLD,
):
    """Materialize the preconditioned block system column by column.

    Returns (matrix, instance).  The preconditioner inverses are applied by
    the production routines with exact inner solves; the MHSS (1,1) inverse
    is exact here because the spectral theorems are statements about the
    ideal preconditioner.
    """
    inst = linearized_instance(mesh, params, u_state)
    M, S, L = inst["M"], inst["S"], inst["L"]
    p = mesh.p
    if 2 * p > dense_threshold:
        raise DenseSizeError(
            f"refusing to materialize a {2*p} x {2*p} preconditioned system "
            f"(threshold {dense_threshold})"
        )
    solvers = InnerSolvers(M, S, params)
    kind = pcfg.kind
    if kind == "none":
        op = BlockOperator("full", M, S, L, params)
        mat = op.dense()
        return mat, inst
    if kind == "bt":
        op = BlockOperator("full", M, S, L, params)
        pre = lambda r: bt_apply(r, M, S, L, params, solvers=solvers)
    elif kind == "el":
        op = BlockOperator("hat", M, S, L, params)
        pre = lambda r: el_apply(r, M, S, params, solvers=solvers)
    else:
        op = BlockOperator("saddle", M, S, L, params)
        A = ((params.eps**2) * S + L).tocsr()
        alpha = select_alpha(M, S, L, params, pcfg.alpha)
        a_inv = ExactInverse(A, L=L)
        pre = lambda r: mhss_apply(r, a_inv, M, solvers.B, alpha, solvers=solvers)
        inst["alpha"] = alpha
    mat = _materialize(2 * p, lambda e: pre(op.matvec(e)))
    return mat, inst


def bt_bound(mesh: Mesh, params: Params, inst: dict) -> tuple:
    """Theorem interval (1/2, 1 + sqrt(zeta)/(4 eps) lambda_plus) for BT/EL."""
    lam_plus = lambda_plus(inst["M"], inst["L"])
    hi = 1.0 + np.sqrt(params.zeta) / (4.0 * params.eps) * lam_plus
    return 0.5, float(hi), float(lam_plus)


def mhss_bound(params: Params, inst: dict, alpha: float) -> tuple:
    """Eigenvalue interval for the nonunit MHSS eigenvalues.

    Built from dense extremal eigenvalues: sigma (B), c (M), theta (A),
    subscript 1 = largest, p = smallest.
    """
    M, S, L = inst["M"], inst["S"], inst["L"]
    A = ((params.eps**2) * S + L).toarray()
    B = (params.zeta * S).toarray()
    sig = np.linalg.eigvalsh(B)
    cm = np.linalg.eigvalsh(M.toarray())
    th = np.linalg.eigvalsh(A)
    sigma1, sigma_p = sig[-1], sig[0]
    c1, c_p = cm[-1], cm[0]
    theta1, theta_p = th[-1], th[0]
    lo = alpha * c_p**2 / (theta1 * (c1**2 + alpha * sigma1))
    hi = alpha * (sigma1 * theta_p + c1**2) / (theta_p * c_p**2)
    constants = {
        "sigma1": sigma1,
        "sigma_p": sigma_p,
        "c1": c1,
        "c_p": c_p,
        "theta1": theta1,
        "theta_p": theta_p,
        "alpha": alpha,
    }
    return float(lo), float(hi), constants


def preconditioned_spectrum(
    mesh: Mesh,
    params: Params,
    pcfg: PrecondConfig,
    u_state: np.ndarray | None = None,
    dense_threshold: int = DENSE_THRESHOLD,
    realness_tol: float = REALNESS_TOL,
) -> SpectralReport:
    """Dense spectrum of the (preconditioned) system with its theorem bound."""
    mat, inst = preconditioned_matrix(
        mesh, params, pcfg, u_state, dense_threshold=dense_threshold
    )
    vals = dense_eigenvalues(mat, threshold=dense_threshold)
    kind = pcfg.kind
    if kind == "none":
        return SpectralReport(label="raw", eigenvalues=vals)
    if kind in ("bt", "el"):
        lo, hi, lam_plus = bt_bound(mesh, params, inst)
        return SpectralReport(
            label=kind,
            eigenvalues=vals,
            bound=(lo, hi),
            realness_claimed=True,
            realness_tol=realness_tol,
            constants={"lambda_plus": lam_plus, "zeta": params.zeta},
        )
    lo, hi, constants = mhss_bound(params, inst, inst["alpha"])
    unit = int(np.sum(np.abs(vals - 1.0) <= realness_tol))
    constants["zeta"] = params.zeta
    return SpectralReport(
        label="mhss",
        eigenvalues=vals,
        bound=(lo, hi),
        realness_claimed=True,
        realness_tol=realness_tol,
        unit_count=unit,
        constants=constants,
    )


def condition_number(A: np.ndarray, dense_threshold: int = DENSE_THRESHOLD) -> float:
    """Two-norm condition number from dense extreme singular values."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n > dense_threshold:
        raise DenseSizeError(
            f"dense condition number refused for n={n} > threshold={dense_threshold}"
        )
    s = np.linalg.svd(A, compute_uv=False)
    return float(s[0] / s[-1])


def condition_sweep(
    sizes,
    params: Params,
    dense_threshold: int = 4200,
) -> list:
    """Condition numbers of the raw first-pass system over mesh sizes.

    Mirrors the refinement study of the block system's conditioning: one
    seeded random state, the first linearized pass, sizes given as vertex
    counts per field.
    """
    rows = []
    for p_target in sizes:
        mesh = build_mesh_1d_for_p(p_target)
        inst = linearized_instance(mesh, params)
        op = BlockOperator("full", inst["M"], inst["S"], inst["L"], params)
        kappa = condition_number(op.dense(), dense_threshold=dense_threshold)
        rows.append({"p": mesh.p, "dof": 2 * mesh.p, "cond": kappa})
    return rows


def build_mesh_1d_for_p(p: int) -> Mesh:
    """1D mesh with exactly p vertices."""
    from .mesh import build_mesh

    return build_mesh(1, p - 1)


def mhss_iteration_matrix(
    M: np.ndarray, A: np.ndarray, B: np.ndarray, alpha: float
) -> np.ndarray:
    """Dense nonunit block D^{-1}F of the MHSS iteration matrix T(alpha)."""
    D = B + (M @ M) / alpha
    F = (M @ M) / alpha - M @ np.linalg.solve(A, M)
    return np.linalg.solve(D, F)


def theorem_certificates(
    mesh: Mesh,
    params: Params,
    u_state: np.ndarray | None = None,
    alpha_grid_size: int = 20,
    dense_threshold: int = DENSE_THRESHOLD,
    realness_tol: float = REALNESS_TOL,
) -> dict:
    """Evaluate every spectral certificate on one desk-scale state.

    Returns a dict bundle; failures are recorded in the entries (violation
    counts, flags), never raised.
    """
    inst = linearized_instance(mesh, params, u_state)
    M, S, L, u = inst["M"], inst["S"], inst["L"], inst["u"]
    p = mesh.p

    bt_report = preconditioned_spectrum(
        mesh, params, PrecondConfig(kind="bt"), u_state=u,
        dense_threshold=dense_threshold, realness_tol=realness_tol,
    )
    el_report = preconditioned_spectrum(
        mesh, params, PrecondConfig(kind="el"), u_state=u,
        dense_threshold=dense_threshold, realness_tol=realness_tol,
    )
    mhss_report = preconditioned_spectrum(
        mesh, params, PrecondConfig(kind="mhss"), u_state=u,
        dense_threshold=dense_threshold, realness_tol=realness_tol,
    )

    bt_sorted = np.sort(bt_report.eigenvalues.real)
    el_sorted = np.sort(el_report.eigenvalues.real)
    el_bt_deviation = float(np.max(np.abs(bt_sorted - el_sorted)))

    # Adaptive ordering on a constructed monotone pair: scaling the state
    # scales L quadratically, so L(u) - L(0.8 u) >= 0 holds exactly.
    from .precond import select_eps_tilde

    eps_tilde = select_eps_tilde(u, M, 1.5)
    P = ((params.eps**2) * S + eps_tilde * sp.identity(p, format="csr")).tocsr()
    L_next = assemble_weighted_mass(mesh, 0.8 * u)
    rho_a, rho_s, holds = adaptive_advantage_check(L, L_next, P, eps_tilde)

    # Iteration-radius bound over an alpha grid, with the closed-form
    # minimizer and the practical trace choice marked.
    A = ((params.eps**2) * S + L).toarray()
    Bd = (params.zeta * S).toarray()
    Md = M.toarray()
    lam_A = np.linalg.eigvalsh(A)
    a_star = alpha_optimal(lam_A[0], lam_A[-1])
    a_prac = select_alpha(M, S, L, params, "trace_a")
    grid = np.geomspace(lam_A[0], lam_A[-1], alpha_grid_size)
    grid = np.unique(np.concatenate([grid, [a_star, a_prac]]))
    alpha_rows = []
    for a in grid:
        Tmat = mhss_iteration_matrix(Md, A, Bd, a)
        rho = float(np.max(np.abs(np.linalg.eigvals(Tmat))))
        alpha_rows.append(
            {
                "alpha": float(a),
                "rho": rho,
                "sigma_tilde": sigma_tilde(a, lam_A),
                "bound_holds": rho <= sigma_tilde(a, lam_A) + 1e-8,
            }
        )
    st_star = sigma_tilde(a_star, lam_A)
    star_minimal = all(st_star <= row["sigma_tilde"] + 1e-12 for row in alpha_rows)

    return {
        "bt": bt_report,
        "el": el_report,
        "mhss": mhss_report,
        "el_bt_max_deviation": el_bt_deviation,
        "el_bt_match": el_bt_deviation <= 1e-7,
        "adaptive": {
            "rho_adaptive": rho_a,
            "rho_static": rho_s,
            "ordering_holds": holds,
            "ordering_satisfied": (not holds) or (rho_a <= rho_s + 1e-10 and rho_s < 1.0),
        },
        "alpha": {
            "grid": alpha_rows,
            "alpha_star": float(a_star),
            "alpha_practical": float(a_prac),
            "sigma_tilde_star": float(st_star),
            "star_minimal_on_grid": bool(star_minimal),
            "bound_holds_everywhere": all(r["bound_holds"] for r in alpha_rows),
        },
        "unit_count_ok": (mhss_report.unit_count or 0) >= p,
    }


def certificates_to_json(bundle: dict) -> str:
    """Serialize a certificate bundle, flattening the spectral reports."""

    def conv(obj):
        if isinstance(obj, SpectralReport):
            return obj.to_dict()
        if isinstance(obj, dict):
            return {k: conv(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [conv(v) for v in obj]
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        if isinstance(obj, np.bool_):
            return bool(obj)
        return obj

    return json.dumps(conv(bundle), indent=2)
