"""Model and solver parameters for the convex-splitting scheme."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Params:
    """Scalar parameters of the model, the time stepping and the solvers.

    Attributes
    ----------
    eps : float
        Interface width (> 0).
    sigma : float
        Strength of the nonlocal interaction (>= 0).
    dt : float
        Time step (> 0).
    m : float
        Target mean mass, |m| < 1.
    T : float
        Final time (>= 0).
    amplitude, seed
        Random initial-condition amplitude and generator seed.
    tol_fp, k_max
        Fixed-point stopping tolerance (M-weighted norm of the iterate
        increment) and iteration cap per time step.
    gmres_tol, gmres_max, restart
        Outer Krylov solve controls.
    cg_tol
        Relative tolerance of the SPD inner solves; two orders below the
        outer tolerance so inner inexactness never shows up outside.
    tol_ss
        Steady-state stopping tolerance on ||u^n - u^{n-1}||_M.
    zeta : float
        Derived combined factor dt / (1 + sigma*dt), cached at construction.
    """

    eps: float
    sigma: float
    dt: float
    m: float = 0.0
    T: float = 0.0
    amplitude: float = 1.0
    seed: int = 0
    tol_fp: float = 1e-9
    k_max: int = 50
    gmres_tol: float = 1e-10
    gmres_max: int = 300
    restart: int | None = None
    cg_tol: float = 1e-12
    tol_ss: float = 1e-10
    zeta: float = field(init=False)

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not abs(self.m) < 1:
            raise ValueError(f"|m| must be below 1, got {self.m}")
        if self.T < 0:
            raise ValueError(f"T must be nonnegative, got {self.T}")
        object.__setattr__(self, "zeta", self.dt / (1.0 + self.sigma * self.dt))

    @property
    def n_steps(self) -> int:
        """Number of time steps to reach T (rounded to the nearest step)."""
        return int(round(self.T / self.dt))
