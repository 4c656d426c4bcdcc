"""Discrete eigenbases of the grid Laplacians.

The cosine basis (Neumann) and sine basis (Dirichlet) below are exact
eigenvectors of the 5-point Laplacian with reflection ghosts, and are
orthonormal in the trapezoid inner product, so modal coefficients and
nodal values are related by two small dense matrix products.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np

from .grid import Grid


def _eig_1d(n_intervals: int, h: float, modes: np.ndarray) -> np.ndarray:
    return (2.0 * np.sin(0.5 * np.pi * modes / n_intervals) / h) ** 2


class NeumannBasis:
    """Cosine modes e_mn(y, z) on all nodes, m = 0..ny-1, n = 0..nz-1."""

    bc = "neumann"

    def __init__(self, grid: Grid):
        self.grid = grid
        self.Cy = self._matrix(grid.ny, 2.0 * grid.l)
        self.Cz = self._matrix(grid.nz, grid.d)
        self._wy = grid.weights_y()
        self._wz = grid.weights_z()

    @staticmethod
    def _matrix(n: int, length: float) -> np.ndarray:
        N = n - 1
        i = np.arange(n)[:, None]
        m = np.arange(n)[None, :]
        scale = np.full(n, np.sqrt(2.0 / length))
        scale[[0, -1]] = np.sqrt(1.0 / length)
        return np.cos(np.pi * i * m / N) * scale[None, :]

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """-Laplacian eigenvalue of each mode, shape (ny, nz); mode (0, 0) is zero."""
        g = self.grid
        ly = _eig_1d(g.ny - 1, g.dy, np.arange(g.ny))
        lz = _eig_1d(g.nz - 1, g.dz, np.arange(g.nz))
        return ly[:, None] + lz[None, :]

    def to_nodal(self, a: np.ndarray) -> np.ndarray:
        return self.Cy @ a @ self.Cz.T

    def to_modal(self, f: np.ndarray) -> np.ndarray:
        return self.Cy.T @ (self._wy[:, None] * f * self._wz[None, :]) @ self.Cz

    def surface_values(self) -> np.ndarray:
        """e_mn(y_i, d) for all i, shape (ny, ny, nz)."""
        return self.Cy[:, :, None] * self.Cz[-1][None, None, :]


class DirichletBasis:
    """Sine modes vanishing on the boundary, m = 1..ny-2, n = 1..nz-2."""

    bc = "dirichlet"

    def __init__(self, grid: Grid):
        self.grid = grid
        self.Sy = self._matrix(grid.ny, 2.0 * grid.l)
        self.Sz = self._matrix(grid.nz, grid.d)
        self._wy = grid.weights_y()
        self._wz = grid.weights_z()

    @staticmethod
    def _matrix(n: int, length: float) -> np.ndarray:
        N = n - 1
        i = np.arange(n)[:, None]
        m = np.arange(1, N)[None, :]
        S = np.sin(np.pi * i * m / N) * np.sqrt(2.0 / length)
        S[[0, -1], :] = 0.0
        return S

    @property
    def shape(self) -> tuple[int, int]:
        return (self.grid.ny - 2, self.grid.nz - 2)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        g = self.grid
        ly = _eig_1d(g.ny - 1, g.dy, np.arange(1, g.ny - 1))
        lz = _eig_1d(g.nz - 1, g.dz, np.arange(1, g.nz - 1))
        return ly[:, None] + lz[None, :]

    def to_nodal(self, a: np.ndarray) -> np.ndarray:
        return self.Sy @ a @ self.Sz.T

    def to_modal(self, f: np.ndarray) -> np.ndarray:
        return self.Sy.T @ (self._wy[:, None] * f * self._wz[None, :]) @ self.Sz


def modes_by_eigenvalue(eigenvalues: np.ndarray) -> np.ndarray:
    """Flat mode indices sorted by ascending eigenvalue (stable on ties)."""
    return np.argsort(eigenvalues, axis=None, kind="stable")
