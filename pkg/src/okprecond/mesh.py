"""Uniform meshes on the unit interval and the unit square.

The solver only ever needs two mesh families: a uniform partition of
(0, 1) into segments, and a uniform triangulation of (0, 1)^2 obtained by
splitting every grid cell along the same (lower-left to upper-right)
diagonal.  Keeping a single triangulation convention makes every assembled
matrix, and therefore every spectrum reported by the diagnostics,
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh construction requests."""


@dataclass(frozen=True)
class Mesh:
    """Conforming P1 mesh of the unit interval or unit square.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    vertices : ndarray
        Vertex coordinates, shape (p,) in 1D and (p, 2) in 2D.
    elements : ndarray
        Vertex indices per element, shape (ne, 2) for segments and
        (ne, 3) for triangles.
    h : float
        Maximum element diameter.
    """

    dim: int
    vertices: np.ndarray
    elements: np.ndarray
    h: float

    @property
    def p(self) -> int:
        """Number of vertices, i.e. degrees of freedom per scalar field."""
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]


def build_mesh(dim: int, n: int) -> Mesh:
    """Build a uniform mesh of (0,1)^dim with ``n`` cells per axis.

    Parameters
    ----------
    dim : int
        1 for segments on (0, 1), 2 for triangles on the unit square.
    n : int
        Cells per axis; must be at least 2.

    Returns
    -------
    Mesh
        In 1D: p = n+1 vertices, n segments, h = 1/n.  In 2D:
        p = (n+1)^2 vertices, 2 n^2 triangles, h = sqrt(2)/n (each cell is
        split along its lower-left to upper-right diagonal).
    """
    if dim not in (1, 2):
        raise MeshError(f"dim must be 1 or 2, got {dim}")
    if n < 2:
        raise MeshError(f"need at least 2 cells per axis, got n={n}")

    if dim == 1:
        vertices = np.linspace(0.0, 1.0, n + 1)
        elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        return Mesh(dim=1, vertices=vertices, elements=elements, h=1.0 / n)

    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    # Vertex index of grid point (i, j), row-major in y.
    def vid(i, j):
        return j * (n + 1) + i

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    ll = vid(i, j)
    lr = vid(i + 1, j)
    ul = vid(i, j + 1)
    ur = vid(i + 1, j + 1)
    # Diagonal ll-ur: lower triangle (ll, lr, ur), upper triangle (ll, ur, ul).
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    elements = np.vstack([lower, upper]).astype(np.int64)
    return Mesh(dim=2, vertices=vertices, elements=elements, h=np.sqrt(2.0) / n)


def element_volumes(mesh: Mesh) -> np.ndarray:
    """Lengths of the segments (1D) or areas of the triangles (2D)."""
    if mesh.dim == 1:
        xa = mesh.vertices[mesh.elements[:, 0]]
        xb = mesh.vertices[mesh.elements[:, 1]]
        return np.abs(xb - xa)
    a = mesh.vertices[mesh.elements[:, 0]]
    b = mesh.vertices[mesh.elements[:, 1]]
    c = mesh.vertices[mesh.elements[:, 2]]
    return 0.5 * np.abs(
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )
