"""Uniform node-centred mesh on the meridional rectangle [-l, l] x [0, d].

Arrays are indexed ``f[i, j]`` with ``i`` along y (latitude) and ``j`` along
z (depth, z = d is the air-sea surface).  All integrals use the 2D
trapezoid rule, which is the inner product under which the discrete
Laplacians and the Arakawa Jacobian have their symmetry properties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
BC_KINDS = (DIRICHLET, NEUMANN)


@dataclass(frozen=True)
class Grid:
    ny: int
    nz: int
    l: float
    d: float
    dy: float = field(init=False)
    dz: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "dy", 2.0 * self.l / (self.ny - 1))
        object.__setattr__(self, "dz", self.d / (self.nz - 1))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nz)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(-self.l, self.l, self.ny)

    @property
    def z(self) -> np.ndarray:
        return np.linspace(0.0, self.d, self.nz)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(Y, Z)`` node coordinates, each of shape (ny, nz)."""
        return np.meshgrid(self.y, self.z, indexing="ij")

    @property
    def area(self) -> float:
        return 2.0 * self.l * self.d

    def weights_y(self) -> np.ndarray:
        w = np.full(self.ny, self.dy)
        w[[0, -1]] *= 0.5
        return w

    def weights_z(self) -> np.ndarray:
        w = np.full(self.nz, self.dz)
        w[[0, -1]] *= 0.5
        return w

    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights (cell areas) for every node."""
        return np.outer(self.weights_y(), self.weights_z())

    def interior_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[1:-1, 1:-1] = True
        return m

    def boundary_mask(self) -> np.ndarray:
        return ~self.interior_mask()

    def surface_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[:, -1] = True
        return m

    def check(self, *fields: np.ndarray) -> None:
        for f in fields:
            if np.shape(f) != self.shape:
                raise ValueError(f"field shape {np.shape(f)} does not match grid {self.shape}")


def make_grid(ny: int, nz: int, l: float, d: float) -> Grid:
    """Build a grid; stencils need at least two interior rows in each direction."""
    if int(ny) != ny or int(nz) != nz:
        raise ValueError("ny and nz must be integers")
    if ny < 4 or nz < 4:
        raise ValueError(f"need ny, nz >= 4, got ny={ny}, nz={nz}")
    for name, v in (("l", l), ("d", d)):
        if not math.isfinite(v) or v <= 0:
            raise ValueError(f"{name} must be finite and positive, got {v!r}")
    return Grid(int(ny), int(nz), float(l), float(d))


def inner(f: np.ndarray, g: np.ndarray, grid: Grid) -> float:
    """Trapezoid-rule L2 inner product over D."""
    return float(np.sum(grid.weights() * f * g))


def norm2(f: np.ndarray, grid: Grid) -> float:
    """Squared L2 norm (trapezoid rule)."""
    return inner(f, f, grid)


def integrate(f: np.ndarray, grid: Grid) -> float:
    return float(np.sum(grid.weights() * f))


def mean(f: np.ndarray, grid: Grid) -> float:
    return integrate(f, grid) / grid.area


def surface_inner(a: np.ndarray, b: np.ndarray, grid: Grid) -> float:
    """Trapezoid inner product of two profiles over y in [-l, l]."""
    return float(np.sum(grid.weights_y() * a * b))


def integrate_profile(a: np.ndarray, grid: Grid) -> float:
    return float(np.sum(grid.weights_y() * a))


def pad(f: np.ndarray, bc: str) -> np.ndarray:
    """Add one ghost layer: even reflection for Neumann, odd for Dirichlet."""
    if bc not in BC_KINDS:
        raise ValueError(f"unknown boundary condition {bc!r}")
    g = np.pad(f, 1, mode="reflect")
    if bc == DIRICHLET:
        g[0, :] *= -1.0
        g[-1, :] *= -1.0
        g[:, 0] *= -1.0
        g[:, -1] *= -1.0
    return g
