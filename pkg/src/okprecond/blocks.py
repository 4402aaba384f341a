"""The 2p x 2p block operators of the linearized time step.

Each fixed-point iteration solves one of three algebraically equivalent
arrangements of the same linear relation between the concentration and the
chemical potential:

* ``full``   [[(1+sigma*dt) M, dt S], [-eps^2 S - L, M]], rhs (F, E);
* ``saddle`` [[eps^2 S + L, -M], [M, zeta S]], rhs (-E, F/(1+sigma*dt)),
  which is the generalized saddle-point arrangement: its rows are
  (-row2, row1/(1+sigma*dt)) of the full form;
* ``hat``    the full form with its first row divided by (1+sigma*dt),
  which is the system the L-discarding block preconditioner targets.

The operator is matrix-free: it composes the assembled M, S and L and is
never materialized except by the desk-scale diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .params import Params

FORMS = ("full", "saddle", "hat")


@dataclass(frozen=True)
class BlockOperator:
    """Matrix-free block system over assembled M, S, L."""

    form: str
    M: sp.csr_matrix
    S: sp.csr_matrix
    L: sp.csr_matrix
    params: Params

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}, got {self.form!r}")

    @property
    def p(self) -> int:
        return self.M.shape[0]

    @property
    def shape(self):
        return (2 * self.p, 2 * self.p)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        p = self.p
        u, w = x[:p], x[p:]
        prm = self.params
        Su = self.S @ u
        if self.form == "full":
            y1 = (1.0 + prm.sigma * prm.dt) * (self.M @ u) + prm.dt * (self.S @ w)
            y2 = -(prm.eps**2) * Su - self.L @ u + self.M @ w
        elif self.form == "hat":
            y1 = self.M @ u + prm.zeta * (self.S @ w)
            y2 = -(prm.eps**2) * Su - self.L @ u + self.M @ w
        else:  # saddle
            y1 = (prm.eps**2) * Su + self.L @ u - self.M @ w
            y2 = self.M @ u + prm.zeta * (self.S @ w)
        return np.concatenate([y1, y2])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.matvec(x)

    def rhs(self, F: np.ndarray, E: np.ndarray) -> np.ndarray:
        """Right-hand side matching this arrangement of the system."""
        prm = self.params
        if self.form == "full":
            return np.concatenate([F, E])
        if self.form == "hat":
            return np.concatenate([F / (1.0 + prm.sigma * prm.dt), E])
        return np.concatenate([-E, F / (1.0 + prm.sigma * prm.dt)])

    def dense(self) -> np.ndarray:
        """Materialize the 2p x 2p matrix (desk-scale diagnostics only)."""
        prm = self.params
        M = self.M.toarray()
        S = self.S.toarray()
        L = self.L.toarray()
        if self.form == "full":
            top = np.hstack([(1.0 + prm.sigma * prm.dt) * M, prm.dt * S])
            bot = np.hstack([-(prm.eps**2) * S - L, M])
        elif self.form == "hat":
            top = np.hstack([M, prm.zeta * S])
            bot = np.hstack([-(prm.eps**2) * S - L, M])
        else:
            top = np.hstack([(prm.eps**2) * S + L, -M])
            bot = np.hstack([M, prm.zeta * S])
        return np.vstack([top, bot])
