"""Spatial operators and field containers for the vorticity-form THC model.

Field conventions: ``psi`` and ``q`` are Dirichlet-zero (stream function and
vorticity under no-normal-flow / free-slip walls), ``T`` and ``S`` and the
OU field are homogeneous Neumann.  Inhomogeneous surface fluxes enter the
T and S equations as sources on the z = d row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.sparse as sp

from .grid import DIRICHLET, NEUMANN, Grid, integrate_profile, norm2, pad


class ConvergenceError(RuntimeError):
    """A linear solve failed to meet its residual tolerance."""


@dataclass
class PhysParams:
    nu: float
    kappa_T: float
    kappa_S: float
    g: float
    alpha_T: float
    alpha_S: float
    lam: float
    k: float
    theta_profile: np.ndarray
    F_profile: np.ndarray

    def __post_init__(self):
        for name in ("nu", "kappa_T", "kappa_S", "lam"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        for name in ("g", "alpha_T", "alpha_S", "k"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
        self.theta_profile = np.asarray(self.theta_profile, dtype=float)
        self.F_profile = np.asarray(self.F_profile, dtype=float)

    def check(self, grid: Grid) -> None:
        for name in ("theta_profile", "F_profile"):
            p = getattr(self, name)
            if p.shape != (grid.ny,):
                raise ValueError(f"{name} has shape {p.shape}, expected ({grid.ny},)")
            if not np.all(np.isfinite(p)):
                raise ValueError(f"{name} contains non-finite values")
        check_zero_flux(self.F_profile, grid)

    def with_(self, **changes) -> "PhysParams":
        return replace(self, **changes)


def flux_integral_tolerance(F: np.ndarray, grid: Grid) -> float:
    return 1e-12 * float(np.max(np.abs(F), initial=0.0)) * max(1.0, 2.0 * grid.l)


def check_zero_flux(F: np.ndarray, grid: Grid) -> float:
    """Raise unless the freshwater flux integrates to zero over [-l, l]."""
    total = integrate_profile(F, grid)
    if abs(total) > flux_integral_tolerance(F, grid):
        raise ValueError(
            f"freshwater flux must integrate to zero over [-l, l]; trapezoid integral = {total:.6e}"
        )
    return total


def theta_cosine(grid: Grid, theta0: float) -> np.ndarray:
    """Equator-to-pole surface temperature theta0 * cos(pi y / 2l)."""
    return theta0 * np.cos(np.pi * grid.y / (2.0 * grid.l))


def flux_cosine(grid: Grid, F0: float) -> np.ndarray:
    """Freshwater flux F0 * cos(pi y / l); zero mean on the node set."""
    return F0 * np.cos(np.pi * grid.y / grid.l)


@dataclass
class State:
    psi: np.ndarray
    q: np.ndarray
    T: np.ndarray
    S: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls, grid: Grid, t: float = 0.0) -> "State":
        z = lambda: np.zeros(grid.shape)  # noqa: E731
        return cls(z(), z(), z(), z(), t)

    def copy(self) -> "State":
        return State(self.psi.copy(), self.q.copy(), self.T.copy(), self.S.copy(), self.t)

    def fields(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.psi, self.q, self.T, self.S)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(f)) for f in self.fields())


def state_from_vorticity(q: np.ndarray, T: np.ndarray, S: np.ndarray, grid: Grid, t: float = 0.0) -> State:
    q = np.array(q, dtype=float)
    q[grid.boundary_mask()] = 0.0
    return State(poisson_solve_dirichlet(q, grid), q, np.array(T, dtype=float), np.array(S, dtype=float), t)


# --- Jacobian ---------------------------------------------------------------

def _jpp(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[2:, 1:-1] - a[:-2, 1:-1]) * (b[1:-1, 2:] - b[1:-1, :-2]) - (
        a[1:-1, 2:] - a[1:-1, :-2]
    ) * (b[2:, 1:-1] - b[:-2, 1:-1])


def _jpx(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (
        a[2:, 1:-1] * (b[2:, 2:] - b[2:, :-2])
        - a[:-2, 1:-1] * (b[:-2, 2:] - b[:-2, :-2])
        - a[1:-1, 2:] * (b[2:, 2:] - b[:-2, 2:])
        + a[1:-1, :-2] * (b[2:, :-2] - b[:-2, :-2])
    )


def arakawa_jacobian(
    psi: np.ndarray, f: np.ndarray, grid: Grid, psi_bc: str = DIRICHLET, f_bc: str = NEUMANN
) -> np.ndarray:
    """Arakawa (1966) nine-point Jacobian J(psi, f) = psi_y f_z - psi_z f_y.

    Evaluated at every node using reflection ghosts for each argument.  With
    trapezoid weights this makes sum(w * f * J(psi, f)) vanish to round-off
    whenever psi is zero on the boundary, and J(a, b) == -J(b, a) bit for bit.
    Output is zeroed on the boundary when ``f_bc`` is Dirichlet.
    """
    grid.check(psi, f)
    a = pad(psi, psi_bc)
    b = pad(f, f_bc)
    x = _jpx(a, b) - _jpx(b, a)
    J = (_jpp(a, b) + x) / (12.0 * grid.dy * grid.dz)
    if f_bc == DIRICHLET and psi_bc == DIRICHLET:
        J[0, :] = J[-1, :] = 0.0
        J[:, 0] = J[:, -1] = 0.0
    return J


# --- Laplacians and linear solves --------------------------------------------

def laplacian(f: np.ndarray, grid: Grid, bc: str = NEUMANN) -> np.ndarray:
    """Five-point Laplacian with odd (Dirichlet) or even (Neumann) ghosts."""
    grid.check(f)
    g = pad(f, bc)
    lap = (g[2:, 1:-1] - 2.0 * f + g[:-2, 1:-1]) / grid.dy**2 + (
        g[1:-1, 2:] - 2.0 * f + g[1:-1, :-2]
    ) / grid.dz**2
    if bc == DIRICHLET:
        lap[0, :] = lap[-1, :] = 0.0
        lap[:, 0] = lap[:, -1] = 0.0
    return lap


def grad_norm2(f: np.ndarray, grid: Grid, bc: str = NEUMANN) -> float:
    """Discrete Dirichlet form <-Lap f, f>, the squared gradient norm."""
    return -float(np.sum(grid.weights() * laplacian(f, grid, bc) * f))


@lru_cache(maxsize=32)
def _dirichlet_eigs(grid: Grid) -> np.ndarray:
    my = np.arange(1, grid.ny - 1)
    mz = np.arange(1, grid.nz - 1)
    ly = (2.0 * np.sin(0.5 * np.pi * my / (grid.ny - 1)) / grid.dy) ** 2
    lz = (2.0 * np.sin(0.5 * np.pi * mz / (grid.nz - 1)) / grid.dz) ** 2
    return ly[:, None] + lz[None, :]


@lru_cache(maxsize=32)
def _neumann_eigs(grid: Grid) -> np.ndarray:
    my = np.arange(grid.ny)
    mz = np.arange(grid.nz)
    ly = (2.0 * np.sin(0.5 * np.pi * my / (grid.ny - 1)) / grid.dy) ** 2
    lz = (2.0 * np.sin(0.5 * np.pi * mz / (grid.nz - 1)) / grid.dz) ** 2
    return ly[:, None] + lz[None, :]


def solve_dirichlet_shifted(rhs: np.ndarray, grid: Grid, shift: float, scale: float) -> np.ndarray:
    """Solve (shift - scale * Lap_D) u = rhs on interior nodes by sine transform."""
    out = np.zeros(grid.shape)
    r = scipy.fft.dstn(rhs[1:-1, 1:-1], type=1, norm="ortho")
    r /= shift + scale * _dirichlet_eigs(grid)
    out[1:-1, 1:-1] = scipy.fft.idstn(r, type=1, norm="ortho")
    return out


def solve_neumann_shifted(rhs: np.ndarray, grid: Grid, shift: float, scale: float) -> np.ndarray:
    """Solve (shift - scale * Lap_N) u = rhs on all nodes by cosine transform.

    Requires shift > 0 (the constant mode has a zero eigenvalue).
    """
    r = scipy.fft.dctn(rhs, type=1)
    r /= shift + scale * _neumann_eigs(grid)
    return scipy.fft.idctn(r, type=1)


def poisson_solve_dirichlet(q: np.ndarray, grid: Grid, tol: float = 1e-10) -> np.ndarray:
    """Return psi with Lap psi = q in the interior and psi = 0 on the boundary."""
    grid.check(q)
    psi = -solve_dirichlet_shifted(q, grid, 0.0, 1.0)
    qi = np.where(grid.interior_mask(), q, 0.0)
    res = laplacian(psi, grid, DIRICHLET) - qi
    rn = math.sqrt(norm2(res, grid))
    qn = math.sqrt(norm2(qi, grid))
    if rn > tol * qn:
        raise ConvergenceError(f"Poisson residual {rn:.3e} exceeds {tol:.1e} * |q| = {tol * qn:.3e}")
    return psi


def neumann_laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    """Sparse form of ``laplacian(., bc='neumann')`` on C-ordered (ny, nz) arrays."""

    def one_d(n, h):
        main = np.full(n, -2.0)
        upper = np.ones(n - 1)
        lower = np.ones(n - 1)
        upper[0] = 2.0
        lower[-1] = 2.0
        return sp.diags([lower, main, upper], [-1, 0, 1]) / h**2

    Ly = one_d(grid.ny, grid.dy)
    Lz = one_d(grid.nz, grid.dz)
    return (sp.kron(Ly, sp.identity(grid.nz)) + sp.kron(sp.identity(grid.ny), Lz)).tocsr()


def surface_row_matrix(grid: Grid) -> sp.csr_matrix:
    """Diagonal selector of the z = d nodes."""
    return sp.diags(grid.surface_mask().ravel().astype(float)).tocsr()


# --- derivative-based operators ---------------------------------------------

def velocity(psi: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """(v, w) = (-psi_z, psi_y); centred inside, one-sided second order at walls."""
    grid.check(psi)
    psi_y, psi_z = np.gradient(psi, grid.dy, grid.dz, edge_order=2)
    return -psi_z, psi_y


def divergence(v: np.ndarray, w: np.ndarray, grid: Grid) -> np.ndarray:
    return np.gradient(v, grid.dy, axis=0, edge_order=2) + np.gradient(w, grid.dz, axis=1, edge_order=2)


def buoyancy_torque(T: np.ndarray, S: np.ndarray, params: PhysParams, grid: Grid) -> np.ndarray:
    """g (alpha_T T_y - alpha_S S_y) with centred y-differences, zero on the boundary."""
    grid.check(T, S)
    out = np.zeros(grid.shape)
    dTy = T[2:, 1:-1] - T[:-2, 1:-1]
    dSy = S[2:, 1:-1] - S[:-2, 1:-1]
    out[1:-1, 1:-1] = params.g * (params.alpha_T * dTy - params.alpha_S * dSy) / (2.0 * grid.dy)
    return out


def surface_flux_sources(
    T: np.ndarray, S: np.ndarray, params: PhysParams, grid: Grid
) -> tuple[np.ndarray, np.ndarray]:
    """Air-sea flux sources on the z = d row.

    The surface node owns a half cell of height dz/2, so a boundary flux
    kappa * phi enters as 2 kappa phi / dz there.  With the trapezoid rule
    this reproduces the surface integrals of the flux exactly.
    """
    grid.check(T, S)
    check_zero_flux(params.F_profile, grid)
    srcT = np.zeros(grid.shape)
    srcS = np.zeros(grid.shape)
    srcT[:, -1] = 2.0 * params.kappa_T * params.lam * (params.theta_profile - T[:, -1]) / grid.dz
    srcS[:, -1] = 2.0 * params.kappa_S * params.F_profile / grid.dz
    return srcT, srcS
