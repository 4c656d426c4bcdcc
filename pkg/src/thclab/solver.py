"""Time stepping for the stochastic THC system and its random-ODE transform.

Both schemes are semi-implicit: diffusion (and the linear part of the
surface heat exchange) implicit, Jacobian, buoyancy, surface forcing and
noise explicit.  The vorticity and salinity solves are diagonalised by
sine / cosine transforms; temperature carries the surface relaxation term
and is solved with a cached sparse LU factorisation.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import RunConfig, build_grid, build_params, build_path, build_spectrum, initial_state
from .diagnostics import (
    DerivedConstants,
    DiagnosticsRecord,
    EnvelopeAuditor,
    derive_constants,
    energy_record,
    h_norm,
)
from .grid import DIRICHLET, NEUMANN, Grid, mean, norm2
from .noise import (
    CovarianceSpectrum,
    NoisePath,
    OUState,
    ou_exact_step,
    ou_implicit_step,
    ou_stationary_on_path,
    shift_path,
    wiener_increment,
)
from .operators import (
    ConvergenceError,
    PhysParams,
    State,
    arakawa_jacobian,
    buoyancy_torque,
    check_zero_flux,
    laplacian,
    neumann_laplacian_matrix,
    poisson_solve_dirichlet,
    solve_dirichlet_shifted,
    solve_neumann_shifted,
    state_from_vorticity,
    surface_row_matrix,
)
from .spectral import DirichletBasis, NeumannBasis


class BlowUpError(RuntimeError):
    """Non-finite values appeared in the state."""

    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite field values at step {step} (t = {t:.6g})")
        self.step = step
        self.t = t


@lru_cache(maxsize=16)
def _temperature_solver(grid: Grid, kappa_T: float, lam: float, dt: float):
    n = grid.ny * grid.nz
    A = (
        sp.identity(n, format="csc")
        - dt * kappa_T * neumann_laplacian_matrix(grid)
        + dt * (2.0 * kappa_T * lam / grid.dz) * surface_row_matrix(grid)
    )
    return spla.splu(A.tocsc())


def solve_temperature(rhs: np.ndarray, grid: Grid, params: PhysParams, dt: float) -> np.ndarray:
    """Solve (I - dt kappa_T Lap_N + dt R) T = rhs, R the surface relaxation."""
    lu = _temperature_solver(grid, params.kappa_T, params.lam, dt)
    return lu.solve(rhs.ravel()).reshape(grid.shape)


def surface_forcing(params: PhysParams, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """State-independent parts of the surface sources (theta and F terms)."""
    fT = np.zeros(grid.shape)
    fS = np.zeros(grid.shape)
    fT[:, -1] = 2.0 * params.kappa_T * params.lam * params.theta_profile / grid.dz
    fS[:, -1] = 2.0 * params.kappa_S * params.F_profile / grid.dz
    return fT, fS


def _advance(
    state: State,
    rq: np.ndarray,
    rT: np.ndarray,
    rS: np.ndarray,
    params: PhysParams,
    grid: Grid,
    dt: float,
    step_index: int,
) -> State:
    """Implicit diffusion solves given the explicit right-hand sides."""
    q = solve_dirichlet_shifted(state.q + dt * rq, grid, 1.0, dt * params.nu)
    T = solve_temperature(state.T + dt * rT, grid, params, dt)
    S = solve_neumann_shifted(state.S + dt * rS, grid, 1.0, dt * params.kappa_S)
    new = State(np.zeros(grid.shape), q, T, S, state.t + dt)
    if not new.is_finite():
        raise BlowUpError(step_index, new.t)
    new.psi = poisson_solve_dirichlet(q, grid)
    return new


def step_spde(
    state: State,
    params: PhysParams,
    spectrum: CovarianceSpectrum,
    path: NoisePath | None,
    step_index: int,
    dt: float,
    *,
    jacobian: bool = True,
) -> State:
    """One semi-implicit Euler-Maruyama step of the vorticity/heat/salt system.

    ``path=None`` switches the noise off.  The Wiener increment is added to
    the vorticity at interior nodes only (q is Dirichlet-zero).
    """
    grid = spectrum.grid
    if dt <= 0:
        raise ValueError("dt must be positive")
    fT, fS = surface_forcing(params, grid)
    rq = buoyancy_torque(state.T, state.S, params, grid)
    rT = fT.copy()
    rS = fS.copy()
    if jacobian:
        rq -= arakawa_jacobian(state.psi, state.q, grid, DIRICHLET, DIRICHLET)
        rT -= arakawa_jacobian(state.psi, state.T, grid, DIRICHLET, NEUMANN)
        rS -= arakawa_jacobian(state.psi, state.S, grid, DIRICHLET, NEUMANN)
    if path is not None:
        dW = wiener_increment(path, step_index, spectrum, grid)
        dW[grid.boundary_mask()] = 0.0
        rq = rq + dW / dt
    return _advance(state, rq, rT, rS, params, grid, dt, step_index)


def restrict_dirichlet(f: np.ndarray, grid: Grid) -> np.ndarray:
    out = f.copy()
    out[grid.boundary_mask()] = 0.0
    return out


def vorticity_shift(eta: np.ndarray, grid: Grid) -> np.ndarray:
    """Z in the vorticity slot: the OU field restricted to interior nodes."""
    return restrict_dirichlet(eta, grid)


def boundary_mismatch(eta: np.ndarray, params: PhysParams, grid: Grid) -> np.ndarray:
    """nu (Lap_D P eta - P Lap_N eta): the coupling created by eta's Neumann walls."""
    Peta = vorticity_shift(eta, grid)
    return params.nu * (
        laplacian(Peta, grid, DIRICHLET) - restrict_dirichlet(laplacian(eta, grid, NEUMANN), grid)
    )


def eta_coupling(
    v: State,
    eta_now: np.ndarray,
    eta_next: np.ndarray,
    params: PhysParams,
    grid: Grid,
    *,
    jacobian: bool = True,
    coupling: str = "exact",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Extra drift terms in the equation for v = u - Z.

    ``coupling="exact"`` assembles the terms that make u = v + Z an identity
    of the discrete system: with psi_eta = Lap_D^{-1} P eta,

        q: -J(psi_v, P eta) - J(psi_eta, q_v) - J(psi_eta, P eta)
           - nu k P Lap_N eta + nu (Lap_D P eta - P Lap_N eta)
        T, S: -J(psi_eta, T), -J(psi_eta, S)

    Jacobian terms use ``eta_now``; the linear terms use ``eta_next``, which
    matches the backward-Euler diffusion of the q solve.

    ``coupling="literal"`` uses J(eta, q_v) + J(psi_v, Lap eta) + J(eta, Lap eta)
    - nu k Lap eta with eta treated as a stream-function perturbation and no
    T, S terms.  It is kept for comparison and does not preserve u = v + Z.
    """
    cq = np.zeros(grid.shape)
    cT = np.zeros(grid.shape)
    cS = np.zeros(grid.shape)
    if coupling == "exact":
        Peta = vorticity_shift(eta_now, grid)
        if jacobian:
            psi_eta = poisson_solve_dirichlet(Peta, grid)
            cq -= arakawa_jacobian(v.psi, Peta, grid, DIRICHLET, DIRICHLET)
            cq -= arakawa_jacobian(psi_eta, v.q, grid, DIRICHLET, DIRICHLET)
            cq -= arakawa_jacobian(psi_eta, Peta, grid, DIRICHLET, DIRICHLET)
            cT -= arakawa_jacobian(psi_eta, v.T, grid, DIRICHLET, NEUMANN)
            cS -= arakawa_jacobian(psi_eta, v.S, grid, DIRICHLET, NEUMANN)
        lap_next = laplacian(eta_next, grid, NEUMANN)
        cq -= params.nu * params.k * restrict_dirichlet(lap_next, grid)
        cq += boundary_mismatch(eta_next, params, grid)
    elif coupling == "literal":
        lap_eta = laplacian(eta_now, grid, NEUMANN)
        if jacobian:
            cq += arakawa_jacobian(eta_now, v.q, grid, NEUMANN, DIRICHLET)
            cq += arakawa_jacobian(v.psi, lap_eta, grid, DIRICHLET, NEUMANN)
            cq += arakawa_jacobian(eta_now, lap_eta, grid, NEUMANN, NEUMANN)
        cq -= params.nu * params.k * lap_eta
        cq = restrict_dirichlet(cq, grid)
    else:
        raise ValueError(f"unknown coupling {coupling!r}")
    return cq, cT, cS


def step_random_ode(
    v: State,
    eta: OUState | np.ndarray,
    params: PhysParams,
    dt: float,
    eta_next: OUState | np.ndarray | None = None,
    *,
    grid: Grid | None = None,
    jacobian: bool = True,
    coupling: str = "exact",
    step_index: int = 0,
) -> State:
    """One step of the pathwise random ODE for v = (q - P eta, T, S).

    ``eta`` is the OU state at the start of the step and ``eta_next`` at its
    end (defaults to ``eta``).  No Wiener increment enters: the randomness
    is carried entirely by the OU path.
    """
    eta_now = eta.eta if isinstance(eta, OUState) else np.asarray(eta)
    if eta_next is None:
        eta_new = eta_now
    else:
        eta_new = eta_next.eta if isinstance(eta_next, OUState) else np.asarray(eta_next)
    if grid is None:
        if not isinstance(eta, OUState):
            raise ValueError("grid is required when eta is a plain array")
        grid = eta.basis.grid
    if dt <= 0:
        raise ValueError("dt must be positive")
    fT, fS = surface_forcing(params, grid)
    rq = buoyancy_torque(v.T, v.S, params, grid)
    rT = fT.copy()
    rS = fS.copy()
    if jacobian:
        rq -= arakawa_jacobian(v.psi, v.q, grid, DIRICHLET, DIRICHLET)
        rT -= arakawa_jacobian(v.psi, v.T, grid, DIRICHLET, NEUMANN)
        rS -= arakawa_jacobian(v.psi, v.S, grid, DIRICHLET, NEUMANN)
    cq, cT, cS = eta_coupling(v, eta_now, eta_new, params, grid, jacobian=jacobian, coupling=coupling)
    return _advance(v, rq + cq, rT + cT, rS + cS, params, grid, dt, step_index)


def to_random_ode_state(u: State, eta: np.ndarray, grid: Grid) -> State:
    """v = u - Z with Z = (P eta, 0, 0)."""
    q = u.q - vorticity_shift(eta, grid)
    return State(poisson_solve_dirichlet(q, grid), q, u.T.copy(), u.S.copy(), u.t)


def from_random_ode_state(v: State, eta: np.ndarray, grid: Grid) -> State:
    q = v.q + vorticity_shift(eta, grid)
    return State(poisson_solve_dirichlet(q, grid), q, v.T.copy(), v.S.copy(), v.t)


@dataclass
class Model:
    """Everything a trajectory needs besides its state and noise path."""

    grid: Grid
    params: PhysParams
    spectrum: CovarianceSpectrum
    dt: float

    def __post_init__(self):
        self.params.check(self.grid)
        check_zero_flux(self.params.F_profile, self.grid)
        if self.spectrum.grid != self.grid:
            raise ValueError("spectrum grid does not match model grid")

    def step(self, state: State, path: NoisePath | None, step_index: int, **kw) -> State:
        return step_spde(state, self.params, self.spectrum, path, step_index, self.dt, **kw)

    def integrate(
        self, state: State, path: NoisePath | None, nsteps: int, start_step: int = 0, callback=None, **kw
    ) -> State:
        """Advance ``nsteps`` steps; ``callback(i, state)`` sees every new state."""
        for i in range(nsteps):
            state = self.step(state, path, start_step + i, **kw)
            if callback is not None:
                callback(start_step + i + 1, state)
        return state


# --- orchestration ----------------------------------------------------------

def thread_count() -> int:
    """Worker threads for independent trajectories (THC_THREADS, default 1)."""
    raw = os.environ.get("THC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"THC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"THC_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn, items):
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


class SimulationError(RuntimeError):
    """A run aborted; carries whatever was produced before the failure."""

    def __init__(self, cause: Exception, trajectory, record, last_state=None):
        super().__init__(str(cause))
        self.cause = cause
        self.trajectory = trajectory
        self.record = record
        self.last_state = last_state


@dataclass
class Setup:
    config: RunConfig
    model: Model
    path: NoisePath
    initial: State

    @property
    def grid(self) -> Grid:
        return self.model.grid


def setup_from_config(config: RunConfig) -> Setup:
    grid = build_grid(config)
    params = build_params(config, grid)
    model = Model(grid, params, build_spectrum(config, grid), config.time.dt)
    return Setup(config, model, build_path(config), initial_state(config, grid))


def initial_eta(setup: Setup) -> OUState:
    m = setup.model
    if setup.config.initial.eta == "zero":
        return OUState.zeros(m.grid)
    return ou_stationary_on_path(m.spectrum, m.params, setup.path, setup.config.start_step)


def poisson_residual(state: State, grid: Grid) -> float:
    qn = math.sqrt(norm2(state.q, grid))
    r = math.sqrt(norm2(laplacian(state.psi, grid, DIRICHLET) - state.q, grid))
    return r / qn if qn > 0 else r


def run(config: RunConfig, *, constants: DerivedConstants | None = None, on_snapshot=None):
    """Integrate from t0 to t1 and return (trajectory, DiagnosticsRecord).

    The trajectory holds the initial state, every ``snapshot_every``-th
    state and the final state.  The OU field is advanced exactly alongside
    on the same noise path, so the record carries the energies of
    v = u - Z and the gamma / r samples at every step.  ``on_snapshot(i,
    state)`` is called for each trajectory entry as it is produced.
    """
    s = setup_from_config(config)
    m, grid = s.model, s.grid
    constants = derive_constants(m.params, grid) if constants is None else constants
    record = DiagnosticsRecord(constants, m.dt)
    auditor = EnvelopeAuditor(constants)
    auditor.report = record.envelope
    cadence = config.time.snapshot_every
    state, eta = s.initial, initial_eta(s)
    trajectory = [state]
    if on_snapshot is not None:
        on_snapshot(0, state)

    def add_row(i, st, et, env):
        e = energy_record(st, et, constants)
        record.add(
            step=i, t=st.t, ts_energy=e.ts_energy, q_energy=e.q_energy, grad_ts=e.grad_ts,
            eta_w12=e.eta_w12, gamma=e.gamma_sample, r=e.r_sample,
            envelope_lhs=env.lhs if env else math.nan,
            envelope_bound=env.bound if env else math.nan,
            envelope_slack=env.slack if env else math.nan,
            mean_S=mean(st.S, grid), norm_S=math.sqrt(norm2(st.S, grid)),
            poisson_residual=poisson_residual(st, grid),
            boundary_mismatch=math.sqrt(norm2(boundary_mismatch(et.eta, m.params, grid), grid)),
        )

    add_row(0, state, eta, None)
    t_start = time.perf_counter()
    n = config.nsteps
    try:
        for i in range(n):
            k = config.start_step + i
            new = m.step(state, s.path, k)
            eta = ou_exact_step(eta, m.dt, m.params, m.spectrum, s.path, k)
            env = auditor.update(i + 1, state, new)
            state = new
            if (i + 1) % config.time.diag_every == 0 or i + 1 == n:
                add_row(i + 1, state, eta, env)
            if (i + 1) % cadence == 0 or i + 1 == n:
                trajectory.append(state)
                if on_snapshot is not None:
                    on_snapshot(i + 1, state)
    except (BlowUpError, ConvergenceError) as exc:
        record.wall_time = time.perf_counter() - t_start
        record.finalize()
        raise SimulationError(exc, trajectory, record, state) from exc
    record.wall_time = time.perf_counter() - t_start
    record.finalize()
    return trajectory, record


def random_perturbation(grid: Grid, scale: float, seed: int) -> State:
    """Smooth random (dq, dT, dS) with |.|_H = scale; dS has zero mean.

    Modal amplitudes fall off like 1 / (1 + lambda) so the perturbation is
    resolved on the grid.
    """
    if not math.isfinite(scale):
        raise ValueError("perturbation scale must be finite")
    rng = np.random.default_rng([abs(int(seed)), 0x7E1A])
    D, N = DirichletBasis(grid), NeumannBasis(grid)
    dq = D.to_nodal(rng.standard_normal(D.shape) / (1.0 + D.eigenvalues))
    aT = rng.standard_normal(N.shape) / (1.0 + N.eigenvalues)
    aS = rng.standard_normal(N.shape) / (1.0 + N.eigenvalues)
    aS[0, 0] = 0.0
    dT, dS = N.to_nodal(aT), N.to_nodal(aS)
    h = h_norm(dq, dT, dS, grid)
    f = scale / h if h > 0 else 0.0
    return state_from_vorticity(f * dq, f * dT, f * dS, grid)


@dataclass
class TwinResult:
    times: np.ndarray
    gap_H: np.ndarray
    noise_gap: np.ndarray
    functional_values: dict[str, np.ndarray]
    final: tuple[State, State]
    mean_S: np.ndarray


def twin_run(config: RunConfig, perturbation: State | None, functionals=()) -> TwinResult:
    """Two trajectories from u1 and u1 + perturbation on one noise path.

    Records |u1 - u2|_H, the values of each functional set on u1 - u2, and
    the gap between the two OU fields each twin carries (zero by
    construction) at every step.  Since both twins share Z, u1 - u2 equals
    v1 - v2.
    """
    s = setup_from_config(config)
    m, grid = s.model, s.grid
    u1 = s.initial
    if perturbation is None:
        u2 = u1.copy()
    else:
        grid.check(perturbation.q, perturbation.T, perturbation.S)
        u2 = state_from_vorticity(u1.q + perturbation.q, u1.T + perturbation.T, u1.S + perturbation.S, grid, u1.t)
    e1 = initial_eta(s)
    e2 = e1.copy()
    n = config.nsteps
    times = np.empty(n + 1)
    gap = np.empty(n + 1)
    ngap = np.empty(n + 1)
    msS = np.empty(n + 1)
    fvals = {f.name: np.empty((n + 1, f.count)) for f in functionals}

    def rec(i):
        dq, dT, dS = u1.q - u2.q, u1.T - u2.T, u1.S - u2.S
        times[i] = u1.t
        gap[i] = h_norm(dq, dT, dS, grid)
        ngap[i] = float(np.max(np.abs(e1.amps - e2.amps)))
        msS[i] = max(abs(mean(u1.S, grid)) / max(math.sqrt(norm2(u1.S, grid)), 1e-300),
                     abs(mean(u2.S, grid)) / max(math.sqrt(norm2(u2.S, grid)), 1e-300))
        for f in functionals:
            fvals[f.name][i] = f.evaluate(dq, dT, dS)

    rec(0)
    for i in range(n):
        k = config.start_step + i
        u1 = m.step(u1, s.path, k)
        u2 = m.step(u2, s.path, k)
        e1 = ou_exact_step(e1, m.dt, m.params, m.spectrum, s.path, k)
        e2 = ou_exact_step(e2, m.dt, m.params, m.spectrum, s.path, k)
        rec(i + 1)
    return TwinResult(times, gap, ngap, fvals, (u1, u2), msS)


def pullback_run(config: RunConfig, t_back_list, initial: State | None = None, callback=None) -> list[State]:
    """End states at the config's start epoch of runs started t_back earlier.

    Every run uses shift_path(path, -t_back / dt), so all of them see the
    same omega and end at the same noise epoch.  ``callback(t_back, i,
    state)`` sees every intermediate state.
    """
    t_back_list = [float(t) for t in t_back_list]
    if t_back_list != sorted(t_back_list):
        raise ValueError("t_back_list must be sorted ascending")
    s = setup_from_config(config)
    m = s.model
    u0 = s.initial if initial is None else initial
    end_step = config.start_step

    def one(tb: float) -> State:
        n = int(round(tb / m.dt))
        if abs(n * m.dt - tb) > 1e-9 * max(1.0, tb):
            raise ValueError(f"t_back = {tb} is not a multiple of dt")
        path = shift_path(s.path, end_step - n)
        start = u0.copy()
        start.t = config.time.t0 - n * m.dt
        cb = None if callback is None else (lambda i, st: callback(tb, i, st))
        return m.integrate(start, path, n, callback=cb)

    return _map(one, t_back_list)


def cocycle_check(config: RunConfig, s: float, t: float, mutate_offset: int = 0) -> float:
    """max |phi(s + t, w, u) - phi(t, theta_s w, phi(s, w, u))| over all nodes and fields.

    ``mutate_offset`` shifts the second leg's path by extra steps to show
    the check notices a wrong shift.
    """
    st = setup_from_config(config)
    m = st.model
    ns, nt = int(round(s / m.dt)), int(round(t / m.dt))
    for name, val, n_ in (("s", s, ns), ("t", t, nt)):
        if val < 0 or abs(n_ * m.dt - val) > 1e-9 * max(1.0, val):
            raise ValueError(f"{name} = {val} is not a non-negative multiple of dt")
    k0 = config.start_step
    whole = m.integrate(st.initial, st.path, ns + nt, start_step=k0)
    first = m.integrate(st.initial, st.path, ns, start_step=k0)
    second = m.integrate(first, shift_path(st.path, k0 + ns + mutate_offset), nt)
    return float(max(np.max(np.abs(a - b)) for a, b in zip(whole.fields(), second.fields())))


def transform_pair(
    model: Model,
    u0: State,
    eta0: OUState,
    path: NoisePath,
    nsteps: int,
    *,
    ou: str = "exact",
    coupling: str = "exact",
    jacobian: bool = True,
    start_step: int = 0,
) -> tuple[State, State, OUState]:
    """Advance u with step_spde and v = u - Z with step_random_ode on one path.

    Returns (u, v + Z, eta) at the end.  ``ou="implicit"`` uses the
    backward-Euler OU update that the SPDE scheme applies implicitly, for
    which the two routes agree up to roundoff when the Jacobian is off.
    """
    stepper = {"exact": ou_exact_step, "implicit": ou_implicit_step}[ou]
    grid, p = model.grid, model.params
    u, eta = u0, eta0
    v = to_random_ode_state(u0, eta0.eta, grid)
    for i in range(nsteps):
        k = start_step + i
        u = step_spde(u, p, model.spectrum, path, k, model.dt, jacobian=jacobian)
        nxt = stepper(eta, model.dt, p, model.spectrum, path, k)
        v = step_random_ode(v, eta, p, model.dt, nxt, grid=grid, jacobian=jacobian, coupling=coupling, step_index=k)
        eta = nxt
    return u, from_random_ode_state(v, eta.eta, grid), eta
