"""Spatially coloured, temporally white noise and the stationary OU process.

Every Gaussian draw is produced by a Philox counter-based generator keyed
by ``(seed, base_step)``, so an increment is a pure function of where it
sits on the time axis.  Shifting a path (the Wiener shift) only moves the
origin; pullback, twin and cocycle experiments replay identical noise.

A path of step ``dt`` may be built on a finer base resolution
(``substeps`` base increments per step).  Coarse increments are then exact
sums of fine ones, which is what strong-convergence comparisons need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .grid import Grid
from .operators import PhysParams
from .spectral import NeumannBasis

_MASK64 = (1 << 64) - 1

# third counter word separates independent streams under one key
_STREAM_INCREMENT = 0
_STREAM_STATIONARY = 1


class CovarianceSpectrum:
    """Diagonal covariance Q over the Neumann cosine basis of the grid."""

    def __init__(self, coefficients: np.ndarray, grid: Grid):
        q = np.asarray(coefficients, dtype=float)
        if q.shape != grid.shape:
            raise ValueError(f"spectrum shape {q.shape} does not match grid {grid.shape}")
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise ValueError("covariance coefficients must be finite and non-negative")
        if q[0, 0] != 0.0:
            # the constant mode has zero decay rate: no stationary OU law exists
            raise ValueError("covariance of the constant mode (0, 0) must be exactly 0")
        self.coefficients = q
        self.grid = grid
        self.basis = NeumannBasis(grid)

    @property
    def trace(self) -> float:
        return float(self.coefficients.sum())

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.basis.eigenvalues

    @classmethod
    def zeros(cls, grid: Grid) -> "CovarianceSpectrum":
        return cls(np.zeros(grid.shape), grid)

    @classmethod
    def power_law(cls, grid: Grid, s_q: float = 2.0, trace: float = 1.0, cutoff: int | None = None):
        """q_mn proportional to lambda_mn**(-s_q), scaled to the given trace.

        ``cutoff`` keeps modes with m, n <= cutoff (default: every grid mode).
        """
        if trace < 0 or not math.isfinite(trace):
            raise ValueError(f"trace must be finite and >= 0, got {trace!r}")
        lam = NeumannBasis(grid).eigenvalues
        q = np.zeros(grid.shape)
        keep = lam > 0
        if cutoff is not None:
            if cutoff < 1:
                raise ValueError("cutoff must be >= 1")
            m = np.arange(grid.ny)[:, None]
            n = np.arange(grid.nz)[None, :]
            keep &= (m <= cutoff) & (n <= cutoff)
        q[keep] = lam[keep] ** (-s_q)
        if trace > 0:
            q *= trace / q.sum()
        else:
            q[:] = 0.0
        return cls(q, grid)

    @classmethod
    def from_table(cls, grid: Grid, rows: Iterable[tuple[int, int, float]]):
        q = np.zeros(grid.shape)
        for m, n, v in rows:
            if not (0 <= m < grid.ny and 0 <= n < grid.nz):
                raise ValueError(f"mode ({m}, {n}) outside the grid's {grid.shape} cosine modes")
            q[m, n] = v
        return cls(q, grid)

    def decay_rates(self, params: PhysParams) -> np.ndarray:
        """mu_mn = nu (k + 1) lambda_mn, the OU relaxation rate of each mode."""
        return params.nu * (params.k + 1.0) * self.eigenvalues

    def stationary_variance(self, params: PhysParams) -> np.ndarray:
        mu = self.decay_rates(params)
        out = np.zeros_like(mu)
        pos = mu > 0
        out[pos] = self.coefficients[pos] / (2.0 * mu[pos])
        return out


@dataclass(frozen=True)
class NoisePath:
    """One realisation omega of the Wiener process, addressed by step index."""

    seed: int
    dt: float
    origin_step: int = 0
    substeps: int = 1

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def base_dt(self) -> float:
        return self.dt / self.substeps

    def _generator(self, base_index: int, stream: int) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=self.seed & _MASK64,
            counter=np.array([0, base_index & _MASK64, stream, 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def base_normals(self, base_index: int, shape: tuple[int, int]) -> np.ndarray:
        return self._generator(base_index, _STREAM_INCREMENT).standard_normal(shape)

    def normals(self, step: int, shape: tuple[int, int]) -> np.ndarray:
        """Standard normals for every base increment inside ``step``, shape (substeps, *shape)."""
        first = (self.origin_step + step) * self.substeps
        return np.stack([self.base_normals(first + s, shape) for s in range(self.substeps)])

    def stationary_normals(self, step: int, shape: tuple[int, int]) -> np.ndarray:
        """Normals reserved for drawing a stationary OU state at epoch ``step``."""
        base = (self.origin_step + step) * self.substeps
        return self._generator(base, _STREAM_STATIONARY).standard_normal(shape)

    def coarsen(self, factor: int) -> "NoisePath":
        """Same omega observed with a step ``factor`` times longer."""
        if factor < 1 or self.origin_step % factor:
            raise ValueError("origin_step must be divisible by the coarsening factor")
        return NoisePath(self.seed, self.dt * factor, self.origin_step // factor, self.substeps * factor)


def shift_path(path: NoisePath, steps: int) -> NoisePath:
    """Wiener shift by ``steps`` steps: shifted increment i == original increment i + steps."""
    return replace(path, origin_step=path.origin_step + int(steps))


def modal_increment(path: NoisePath, step: int, spectrum: CovarianceSpectrum) -> np.ndarray:
    xi = path.normals(step, spectrum.grid.shape)
    return np.sqrt(spectrum.coefficients * path.base_dt) * xi.sum(axis=0)


def wiener_increment(path: NoisePath, step: int, spectrum: CovarianceSpectrum, grid: Grid) -> np.ndarray:
    """Nodal field of W(t_{step+1}) - W(t_step) for the path's step size."""
    if spectrum.grid != grid:
        raise ValueError("spectrum was built for a different grid")
    return spectrum.basis.to_nodal(modal_increment(path, step, spectrum))


@dataclass
class OUState:
    """OU field held by its cosine-mode amplitudes; ``eta`` is the nodal view."""

    amps: np.ndarray
    basis: NeumannBasis

    @property
    def eta(self) -> np.ndarray:
        return self.basis.to_nodal(self.amps)

    @classmethod
    def zeros(cls, grid: Grid) -> "OUState":
        return cls(np.zeros(grid.shape), NeumannBasis(grid))

    @classmethod
    def from_nodal(cls, eta: np.ndarray, basis: NeumannBasis) -> "OUState":
        return cls(basis.to_modal(eta), basis)

    def copy(self) -> "OUState":
        return OUState(self.amps.copy(), self.basis)


def _check_dt(dt: float, path: NoisePath) -> None:
    if not math.isclose(dt, path.dt, rel_tol=1e-12):
        raise ValueError(f"step dt={dt} does not match the noise path's dt={path.dt}")


def ou_transition(params: PhysParams, spectrum: CovarianceSpectrum, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode decay factor exp(-mu h) and conditional standard deviation over time h."""
    mu = spectrum.decay_rates(params)
    decay = np.exp(-mu * h)
    var = np.zeros_like(mu)
    pos = mu > 0
    var[pos] = spectrum.coefficients[pos] * (-np.expm1(-2.0 * mu[pos] * h)) / (2.0 * mu[pos])
    return decay, np.sqrt(var)


def ou_exact_step(
    state: OUState,
    dt: float,
    params: PhysParams,
    spectrum: CovarianceSpectrum,
    path: NoisePath,
    step: int,
) -> OUState:
    """Exact transition of d eta = nu (k+1) Lap eta dt + dW over one path step.

    Each base sub-interval uses the exact Gaussian transition driven by the
    same normals that build the Wiener increment, so the OU path and the
    increments fed to the SPDE come from one omega.
    """
    if params.k < 0:
        raise ValueError("k must be >= 0")
    _check_dt(dt, path)
    decay, sigma = ou_transition(params, spectrum, path.base_dt)
    a = state.amps.copy()
    for xi in path.normals(step, spectrum.grid.shape):
        a = decay * a + sigma * xi
    return OUState(a, state.basis)


def ou_implicit_step(
    state: OUState,
    dt: float,
    params: PhysParams,
    spectrum: CovarianceSpectrum,
    path: NoisePath,
    step: int,
) -> OUState:
    """Backward-Euler OU update (1 + mu dt) a' = a + dW, the SPDE scheme's own discretisation."""
    _check_dt(dt, path)
    mu = spectrum.decay_rates(params)
    a = (state.amps + modal_increment(path, step, spectrum)) / (1.0 + mu * dt)
    return OUState(a, state.basis)


def ou_stationary_sample(
    spectrum: CovarianceSpectrum, params: PhysParams, rng_seed=None
) -> OUState:
    """Draw eta from the stationary law: independent modes with variance q / (2 mu)."""
    if isinstance(rng_seed, np.random.Generator):
        xi = rng_seed.standard_normal(spectrum.grid.shape)
    else:
        xi = np.random.default_rng(rng_seed).standard_normal(spectrum.grid.shape)
    return OUState(np.sqrt(spectrum.stationary_variance(params)) * xi, spectrum.basis)


def ou_stationary_on_path(
    spectrum: CovarianceSpectrum, params: PhysParams, path: NoisePath, step: int = 0
) -> OUState:
    """Stationary OU state keyed to the path epoch (reproducible from the seed)."""
    xi = path.stationary_normals(step, spectrum.grid.shape)
    return OUState(np.sqrt(spectrum.stationary_variance(params)) * xi, spectrum.basis)


def ou_expected_norms(spectrum: CovarianceSpectrum, params: PhysParams) -> tuple[float, float]:
    """Stationary E|eta|^2 and E|grad eta|^2 from the modal variances."""
    var = spectrum.stationary_variance(params)
    return float(var.sum()), float((var * spectrum.eigenvalues).sum())


def interval_lambda1(d: float) -> float:
    """First nonzero Neumann eigenvalue of -d^2/dz^2 on (0, d)."""
    return (math.pi / d) ** 2


@dataclass
class ControlVerdict:
    passed: bool
    lambda1: float
    threshold: float
    deficit: float
    epsilon: float
    expected_eta_w12: float
    expected_gamma: float

    @property
    def gamma_positive(self) -> bool:
        return self.expected_gamma > 0


def control_parameter_check(
    spectrum: CovarianceSpectrum, params: PhysParams, epsilon: float, lambda1: float | None = None
) -> ControlVerdict:
    """Test lambda1 > tr Q / ((k+1) nu^3) and evaluate E gamma from the modal moments.

    ``deficit`` is threshold - lambda1; positive means k is too small.
    """
    lam1 = interval_lambda1(spectrum.grid.d) if lambda1 is None else lambda1
    nu = params.nu
    if not (0 < epsilon < lam1 * nu / 2):
        raise ValueError(f"epsilon must lie in (0, lambda1 nu / 2) = (0, {lam1 * nu / 2:.6g}), got {epsilon!r}")
    threshold = spectrum.trace / ((params.k + 1.0) * nu**3)
    l2, grad = ou_expected_norms(spectrum, params)
    w12 = l2 + grad
    return ControlVerdict(
        passed=lam1 > threshold,
        lambda1=lam1,
        threshold=threshold,
        deficit=threshold - lam1,
        epsilon=epsilon,
        expected_eta_w12=w12,
        expected_gamma=lam1 * nu - epsilon - w12 / nu,
    )


def smallest_k(spectrum: CovarianceSpectrum, params: PhysParams, lambda1: float | None = None) -> int:
    """Smallest integer k >= 0 with lambda1 > tr Q / ((k+1) nu^3)."""
    lam1 = interval_lambda1(spectrum.grid.d) if lambda1 is None else lambda1
    return max(0, math.floor(spectrum.trace / (lam1 * params.nu**3)))
