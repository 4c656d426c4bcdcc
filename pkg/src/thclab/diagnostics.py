"""Energy diagnostics, dissipativity constants and determining-functional tests.

Every norm here is the discrete one the solver's identities hold in: the
trapezoid L2 product, the gradient seminorm |grad f|^2 := <-Lap f, f> and
the trapezoid product along the surface row.  Constants (Poincare, trace)
are computed for those discrete forms, so the envelope inequality is a
statement about the scheme rather than about the continuum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import DIRICHLET, NEUMANN, Grid, inner, norm2, surface_inner
from .noise import OUState, interval_lambda1
from .operators import PhysParams, State, arakawa_jacobian, grad_norm2, neumann_laplacian_matrix
from .spectral import DirichletBasis, NeumannBasis, modes_by_eigenvalue


# --- constants --------------------------------------------------------------

def _mass_matrices(grid: Grid):
    w = grid.weights().ravel()
    W = sp.diags(w)
    K = -(W @ neumann_laplacian_matrix(grid))
    top = np.zeros(grid.shape)
    top[:, -1] = grid.weights_y()
    E = sp.diags(top.ravel())
    return w, W, K.tocsc(), E


def poincare_surface_constant(grid: Grid) -> float:
    """Smallest c with |T|^2 <= c (|T|_surface^2 + |grad T|^2) on the grid."""
    w, W, K, E = _mass_matrices(grid)
    return _rayleigh_max(K + E, W)


def trace_constant(grid: Grid) -> float:
    """Smallest c3 with |S|_surface^2 <= c3 (|S|^2 + |grad S|^2) on the grid."""
    w, W, K, E = _mass_matrices(grid)
    return _rayleigh_max(K + W, E)


def _rayleigh_max(A: sp.spmatrix, B: sp.spmatrix, tol: float = 1e-12, maxiter: int = 20000) -> float:
    """max over x of x'Bx / x'Ax (A SPD, B PSD) by power iteration on A^{-1}B."""
    lu = spla.splu(A.tocsc())
    B = B.tocsr()
    x = np.random.default_rng(0).standard_normal(A.shape[0])
    est = 0.0
    for _ in range(maxiter):
        y = lu.solve(B @ x)
        Ay = A @ y
        new = float(y @ (B @ y)) / float(y @ Ay)
        x = y / math.sqrt(float(y @ Ay))
        if abs(new - est) <= tol * abs(new):
            return new
        est = new
    raise RuntimeError("power iteration for a grid constant did not converge")


def neumann_poincare_constant(grid: Grid) -> float:
    """1 / (smallest nonzero Neumann eigenvalue): |S|^2 <= P |grad S|^2 for mean-zero S."""
    lam = NeumannBasis(grid).eigenvalues.ravel()
    return 1.0 / float(np.min(lam[lam > 0]))


def interval_dirichlet_poincare(grid: Grid) -> float:
    """Discrete Poincare constant on (0, d) with zero end values."""
    return 1.0 / (2.0 * math.sin(0.5 * math.pi / (grid.nz - 1)) / grid.dz) ** 2


def domain_lambda1(grid: Grid) -> float:
    """First nonzero Neumann eigenvalue of the rectangle (continuum value)."""
    return min((math.pi / (2.0 * grid.l)) ** 2, (math.pi / grid.d) ** 2)


@dataclass
class DerivedConstants:
    grid: Grid
    nu: float
    k: float
    lambda1: float
    lambda1_domain: float
    a: float
    epsilon: float
    c_T: float
    c3: float
    P_S: float
    alpha_T_env: float
    alpha_S_env: float
    alpha_env: float
    c5_chain: float
    c5_sharp: float
    c5_env: float
    c6: float
    c7: float
    c8: float
    g_tilde: float
    delta_eps: float
    lambda1_note: str = "lambda1 = (pi/d)^2: first nonzero Neumann eigenvalue on (0, d)"

    @property
    def R1_sq(self) -> float:
        return 2.0 * self.c5_env / self.alpha_env

    def table(self) -> list[tuple[str, float]]:
        keys = (
            "lambda1", "lambda1_domain", "a", "epsilon", "c_T", "c3", "P_S",
            "alpha_T_env", "alpha_S_env", "alpha_env", "c5_chain", "c5_sharp", "c5_env",
            "c6", "c7", "c8", "g_tilde", "delta_eps",
        )
        return [(k, float(getattr(self, k))) for k in keys] + [("R1_sq", self.R1_sq)]


def a_interval(params: PhysParams) -> tuple[float, float]:
    """Allowed open interval for the Young splitting constant a."""
    if params.lam <= 0:
        raise ValueError("lambda must be positive")
    return max(0.0, 2.0 - 2.0 * params.kappa_T / params.lam), 2.0


def envelope_maximizer(params: PhysParams, grid: Grid, alpha: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Supremum over (T, S) of the right side of the discrete envelope inequality.

    The right side is alpha(|grad T|^2 + |T|^2 + |grad S|^2 + |S|^2)
    - 2 kT |grad T|^2 - 2 kT lam |T_s|^2 + 2 kT lam <theta, T_s>
    - 2 kS |grad S|^2 + 2 kS <F, S_s>, a concave quadratic over mean-zero S.
    Returns the supremum and the maximising fields.
    """
    w, W, K, E = _mass_matrices(grid)
    kT, kS, lam = params.kappa_T, params.kappa_S, params.lam
    top = np.zeros(grid.shape)
    top[:, -1] = grid.weights_y() * params.theta_profile
    bT = kT * lam * top.ravel()
    top[:, -1] = grid.weights_y() * params.F_profile
    bS = kS * top.ravel()
    QT = (2 * kT - alpha) * K + 2 * kT * lam * E - alpha * W
    QS = (2 * kS - alpha) * K - alpha * W
    xT = spla.spsolve(QT.tocsc(), bT)
    # mean-zero constraint on S through a bordered (Lagrange multiplier) system
    n = grid.ny * grid.nz
    Sb = sp.bmat([[QS, w[:, None]], [w[None, :], None]]).tocsc()
    xS = spla.spsolve(Sb, np.concatenate([bS, [0.0]]))[:n]
    return float(bT @ xT + bS @ xS), xT.reshape(grid.shape), xS.reshape(grid.shape)


def sharp_c5(params: PhysParams, grid: Grid, alpha: float) -> float:
    return envelope_maximizer(params, grid, alpha)[0]


def derive_constants(params: PhysParams, grid: Grid, *, epsilon: float | None = None) -> DerivedConstants:
    """Explicit discrete constants for the dissipativity estimates.

    The chain: Young with the midpoint ``a`` on the heat-exchange term,
    surface Poincare constant c_T for T, trace constant c3 and mean-zero
    Poincare constant P_S for S, giving alpha = min(alpha_T, alpha_S) and
    c5 = kT lam |theta|^2 / a + kS c3 (1 + P_S) |F|^2.
    """
    params.check(grid)
    lo, hi = a_interval(params)
    a = 0.5 * (lo + hi)
    lambda1 = interval_lambda1(grid.d)
    eps = lambda1 * params.nu / 4.0 if epsilon is None else float(epsilon)
    if not (0 < eps < lambda1 * params.nu / 2.0):
        raise ValueError(f"epsilon must lie in (0, lambda1 nu / 2) = (0, {lambda1 * params.nu / 2:.6g})")
    c_T = poincare_surface_constant(grid)
    c3 = trace_constant(grid)
    P_S = neumann_poincare_constant(grid)
    kT, kS, lam = params.kappa_T, params.kappa_S, params.lam
    alpha_T = min(2.0 * kT, (2.0 - a) * kT * lam) / (1.0 + c_T)
    alpha_S = kS / (1.0 + P_S)
    alpha = min(alpha_T, alpha_S)
    theta2 = surface_inner(params.theta_profile, params.theta_profile, grid)
    F2 = surface_inner(params.F_profile, params.F_profile, grid)
    c5_chain = kT * lam * theta2 / a + kS * c3 * (1.0 + P_S) * F2
    c5_sharp = sharp_c5(params, grid, alpha)
    g_tilde = params.g * math.hypot(params.alpha_T, params.alpha_S)
    c7 = c8 = 1.0 / eps
    return DerivedConstants(
        grid=grid,
        nu=params.nu,
        k=params.k,
        lambda1=lambda1,
        lambda1_domain=domain_lambda1(grid),
        a=a,
        epsilon=eps,
        c_T=c_T,
        c3=c3,
        P_S=P_S,
        alpha_T_env=alpha_T,
        alpha_S_env=alpha_S,
        alpha_env=alpha,
        c5_chain=c5_chain,
        c5_sharp=c5_sharp,
        c5_env=c5_chain,
        c6=interval_dirichlet_poincare(grid),
        c7=c7,
        c8=c8,
        g_tilde=g_tilde,
        delta_eps=c7 * g_tilde**2,
    )


# --- energies ---------------------------------------------------------------

def eta_w12(eta: OUState | np.ndarray, grid: Grid) -> float:
    """|eta|^2 + |grad eta|^2 with the Neumann gradient form."""
    if isinstance(eta, OUState):
        a = eta.amps
        return float(np.sum(a * a * (1.0 + eta.basis.eigenvalues)))
    return norm2(eta, grid) + grad_norm2(eta, grid, NEUMANN)


def gamma_of(w12: float | np.ndarray, constants: DerivedConstants):
    """lambda1 nu - eps - |eta|^2_{W12} / nu."""
    c = constants
    return c.lambda1 * c.nu - c.epsilon - np.asarray(w12) / c.nu


def r_of(w12: float | np.ndarray, constants: DerivedConstants):
    c = constants
    w12 = np.asarray(w12)
    return (2.0 * c.lambda1 * c.c8 * c.k**2 * c.nu**2 + c.nu) * w12 + c.c6 / (4.0 * c.nu) * w12**2


@dataclass
class EnergyRecord:
    t: float
    ts_energy: float
    q_energy: float
    grad_ts: float
    eta_w12: float
    gamma_sample: float
    r_sample: float


def energy_record(
    state: State, eta: OUState | np.ndarray | None, constants: DerivedConstants, *, transformed: bool = False
) -> EnergyRecord:
    """Energies of v = u - Z and the gamma, r samples of the current OU state.

    ``state`` is the SPDE state u unless ``transformed`` is set, in which
    case its vorticity is already q - P eta.
    """
    grid = constants.grid
    if eta is None:
        eta_nodal = np.zeros(grid.shape)
        w12 = 0.0
    else:
        eta_nodal = eta.eta if isinstance(eta, OUState) else np.asarray(eta)
        w12 = eta_w12(eta, grid)
    q = state.q
    if not transformed:
        q = q - np.where(grid.interior_mask(), eta_nodal, 0.0)
    return EnergyRecord(
        t=state.t,
        ts_energy=norm2(state.T, grid) + norm2(state.S, grid),
        q_energy=norm2(q, grid),
        grad_ts=grad_norm2(state.T, grid) + grad_norm2(state.S, grid),
        eta_w12=w12,
        gamma_sample=float(gamma_of(w12, constants)),
        r_sample=float(r_of(w12, constants)),
    )


def gronwall_envelope(E0: float, t, constants: DerivedConstants):
    """E0 exp(-alpha t) + c5 / alpha."""
    a = constants.alpha_env
    return E0 * np.exp(-a * np.asarray(t)) + constants.c5_env / a


# --- envelope audit ---------------------------------------------------------

@dataclass
class EnvelopeStep:
    step: int
    t: float
    lhs: float
    bound: float
    slack: float

    @property
    def violated(self) -> bool:
        return self.lhs > self.bound + self.slack


@dataclass
class EnvelopeReport:
    c5: float
    alpha: float
    steps: list[EnvelopeStep] = field(default_factory=list)

    @property
    def violations(self) -> list[EnvelopeStep]:
        return [s for s in self.steps if s.violated]

    @property
    def max_excess(self) -> float:
        """Largest lhs - (bound + slack); negative when nothing is violated."""
        return max((s.lhs - s.bound - s.slack for s in self.steps), default=-math.inf)


class EnvelopeAuditor:
    """Streaming check of the discrete (T, S) dissipation inequality.

    For consecutive states the left side is
    (E_{n+1} - E_n)/dt + alpha(|grad v_{n+1}|^2 + |v_{n+1}|^2), which the
    scheme bounds by c5 plus 2|<J(psi_n, T_n), T_{n+1} - T_n>| (and the S
    analogue): the explicit advection is the only term not covered by the
    constants.  A roundoff allowance proportional to E/dt is added.
    """

    def __init__(self, constants: DerivedConstants, c5: float | None = None, rtol: float = 1e-11):
        self.grid = constants.grid
        self.alpha = constants.alpha_env
        self.c5 = constants.c5_env if c5 is None else float(c5)
        self.rtol = rtol
        self.report = EnvelopeReport(self.c5, self.alpha)

    def update(self, step: int, prev: State, new: State) -> EnvelopeStep:
        g = self.grid
        dt = new.t - prev.t
        if dt <= 0:
            raise ValueError("states must be in increasing time order")
        E0 = norm2(prev.T, g) + norm2(prev.S, g)
        E1 = norm2(new.T, g) + norm2(new.S, g)
        d1 = grad_norm2(new.T, g) + grad_norm2(new.S, g)
        lhs = (E1 - E0) / dt + self.alpha * (d1 + E1)
        adv = 0.0
        for a, b in ((prev.T, new.T), (prev.S, new.S)):
            adv += 2.0 * abs(inner(arakawa_jacobian(prev.psi, a, g, DIRICHLET, NEUMANN), b - a, g))
        slack = adv + self.rtol * (E0 + E1 + 1.0) / dt
        rec = EnvelopeStep(step, new.t, lhs, self.c5, slack)
        self.report.steps.append(rec)
        return rec


def envelope_audit(trajectory, constants: DerivedConstants, c5: float | None = None) -> EnvelopeReport:
    """Check every consecutive pair of a trajectory (states spaced one step apart)."""
    auditor = EnvelopeAuditor(constants, c5)
    traj = list(trajectory)
    for i in range(1, len(traj)):
        auditor.update(i, traj[i - 1], traj[i])
    return auditor.report


# --- absorbing radius -------------------------------------------------------

@dataclass
class AbsorbingRadius:
    R1_sq: float
    R2_sq: np.ndarray
    converged: np.ndarray
    gamma_mean: float

    @property
    def R_sq(self) -> np.ndarray:
        return self.R1_sq + self.R2_sq


def absorbing_radius(eta_trajectory, constants: DerivedConstants, dt: float, tail_tol: float = 0.01) -> AbsorbingRadius:
    """Running estimate of R^2(theta_t omega) = R1^2 + R2^2 along an OU path.

    R2^2 at time t is the integral over s < t of
    (r(s) + (delta / alpha)(c5 / alpha) gamma(s)) exp(-int_s^t gamma),
    where |v|^2 has been replaced by its asymptotic bound c5 / alpha.  It is
    accumulated forward with gamma and r piecewise constant over each step.
    The part of the integral before the first sample is unknown; a sample
    counts as converged once that tail, estimated with the path means of the
    integrand and gamma, is below ``tail_tol`` of the accumulated value.

    ``eta_trajectory`` is a sequence of OU states (or nodal fields, or
    precomputed |eta|^2_{W12} values) one step apart.
    """
    c = constants
    w12 = np.array([v if np.isscalar(v) else eta_w12(v, c.grid) for v in eta_trajectory], dtype=float)
    gam = gamma_of(w12, c)
    f = r_of(w12, c) + (c.delta_eps / c.alpha_env) * (c.c5_env / c.alpha_env) * gam
    # exact step factors for piecewise-constant gamma; gamma <= 0 lets X grow
    # without bound (to inf), which the convergence flag then reports
    x = gam[:-1] * dt
    with np.errstate(over="ignore", invalid="ignore"):
        decay = np.exp(-x)
        phi = np.where(x == 0.0, dt, -np.expm1(-x) / np.where(x == 0.0, 1.0, gam[:-1]))
    X = np.zeros_like(w12)
    for j in range(1, len(w12)):
        carried = X[j - 1] * decay[j - 1] if X[j - 1] != 0.0 else 0.0
        X[j] = carried + f[j - 1] * phi[j - 1]
    gmean = float(np.mean(gam))
    Gamma = np.concatenate([[0.0], np.cumsum(gam[:-1] * dt)])
    if gmean <= 0:
        converged = np.zeros(len(w12), dtype=bool)
    else:
        tail = np.exp(-Gamma) * abs(float(np.mean(f))) / gmean
        converged = (tail <= tail_tol * np.abs(X)) | (tail == 0.0)
    return AbsorbingRadius(2.0 * c.c5_env / c.alpha_env, X, converged, gmean)


# --- determining functionals ------------------------------------------------

def _field_spectra(grid: Grid) -> dict[str, np.ndarray]:
    """Laplacian eigenvalues per field, in eigenvalue order (S excludes the mean)."""
    lam_D = DirichletBasis(grid).eigenvalues.ravel()
    lam_N = NeumannBasis(grid).eigenvalues.ravel()
    order_N = modes_by_eigenvalue(NeumannBasis(grid).eigenvalues)
    return {
        "q": lam_D[modes_by_eigenvalue(DirichletBasis(grid).eigenvalues)],
        "T": lam_N[order_N],
        "S": lam_N[order_N][1:],
    }


class FourierFunctionals:
    """l_j(u): the first n modal coefficients of each of q, T, S (lowest eigenvalues first)."""

    kind = "modes"

    def __init__(self, grid: Grid, n: int):
        if n < 1:
            raise ValueError("need at least one functional per field")
        self.grid = grid
        self.n = int(n)
        self._D = DirichletBasis(grid)
        self._N = NeumannBasis(grid)
        oD = modes_by_eigenvalue(self._D.eigenvalues)
        oN = modes_by_eigenvalue(self._N.eigenvalues)
        self._idx = {"q": oD[:n], "T": oN[:n], "S": oN[1 : n + 1]}
        total = sum(len(v) for v in _field_spectra(grid).values())
        if n > max(len(v) for v in _field_spectra(grid).values()):
            raise ValueError(f"n = {n} exceeds the number of grid modes ({total} in total)")

    @property
    def name(self) -> str:
        return f"modes{self.n}"

    @property
    def count(self) -> int:
        return sum(len(v) for v in self._idx.values())

    def evaluate(self, dq: np.ndarray, dT: np.ndarray, dS: np.ndarray) -> np.ndarray:
        return np.concatenate([
            self._D.to_modal(dq).ravel()[self._idx["q"]],
            self._N.to_modal(dT).ravel()[self._idx["T"]],
            self._N.to_modal(dS).ravel()[self._idx["S"]],
        ])


class LocalAverages:
    """l_j(u): trapezoid averages of q, T, S over an nby x nbz block partition.

    Block edges must fall on grid lines, so (ny - 1) and (nz - 1) must be
    divisible by the block counts.
    """

    kind = "averages"

    def __init__(self, grid: Grid, nby: int, nbz: int):
        if nby < 1 or nbz < 1 or (grid.ny - 1) % nby or (grid.nz - 1) % nbz:
            raise ValueError("block counts must divide the number of grid intervals")
        self.grid = grid
        self.nby, self.nbz = int(nby), int(nbz)
        self._Wy = self._block_weights(grid.ny, grid.dy, nby)
        self._Wz = self._block_weights(grid.nz, grid.dz, nbz)

    @staticmethod
    def _block_weights(n: int, h: float, nb: int) -> np.ndarray:
        per = (n - 1) // nb
        out = np.zeros((nb, n))
        for b in range(nb):
            w = np.full(per + 1, h)
            w[[0, -1]] *= 0.5
            out[b, b * per : (b + 1) * per + 1] = w / (per * h)
        return out

    @property
    def name(self) -> str:
        return f"averages{self.nby}x{self.nbz}"

    @property
    def count(self) -> int:
        return 3 * self.nby * self.nbz

    def evaluate(self, dq: np.ndarray, dT: np.ndarray, dS: np.ndarray) -> np.ndarray:
        return np.concatenate([(self._Wy @ f @ self._Wz.T).ravel() for f in (dq, dT, dS)])


@dataclass
class EpsilonL:
    epsilon_L: float
    C_L: float
    s: float
    n_functionals: int
    eigenvalues: dict[str, np.ndarray]


def epsilon_L_for_modes(N: int, grid: Grid, s: float = 0.2) -> EpsilonL:
    """Constants in |u|_H <= C_L max_j |l_j(u)| + eps_L |u|_X for the first N modes per field.

    |u|_X^2 = sum lambda^s |a|^2 over every mode of every field.  The tail
    beyond mode N of each field is bounded by lambda_{N+1}^{-s} |u|_X^2, and
    the head by the number of functionals times the largest squared
    coefficient, so C_L = sqrt(#functionals) and eps_L = max over fields of
    lambda_{N+1}^{-s/2} (zero for a field whose modes are all measured).
    """
    spectra = _field_spectra(grid)
    if N < 1 or N > max(len(v) for v in spectra.values()):
        raise ValueError(f"N = {N} outside 1..{max(len(v) for v in spectra.values())}")
    if not (0.0 < s):
        raise ValueError("s must be positive")
    eps = 0.0
    count = 0
    for lam in spectra.values():
        count += min(N, len(lam))
        if N < len(lam):
            eps = max(eps, float(lam[N]) ** (-0.5 * s))
    return EpsilonL(eps, math.sqrt(count), s, count, spectra)


def x_norm(dq: np.ndarray, dT: np.ndarray, dS: np.ndarray, grid: Grid, s: float = 0.2) -> float:
    """Spectrally weighted norm sqrt(sum lambda^s |a|^2) over q, T, S modes."""
    D, Nb = DirichletBasis(grid), NeumannBasis(grid)
    total = float(np.sum(D.eigenvalues**s * D.to_modal(dq) ** 2))
    lamN = Nb.eigenvalues**s
    for f in (dT, dS):
        total += float(np.sum(lamN * Nb.to_modal(f) ** 2))
    return math.sqrt(total)


def h_norm(dq: np.ndarray, dT: np.ndarray, dS: np.ndarray, grid: Grid) -> float:
    return math.sqrt(norm2(dq, grid) + norm2(dT, grid) + norm2(dS, grid))


BOTH_DECAY = "both-decay"
FUNCTIONALS_ONLY = "functionals-decay-state-does-not"
NEITHER = "neither"


@dataclass
class DeterminingReport:
    descriptor: str
    epsilon_L: float
    C_L: float
    window_t: np.ndarray
    window_gap: np.ndarray
    state_t: np.ndarray
    state_gap: np.ndarray
    functional_rate: float
    state_rate: float
    functionals_decay: bool
    state_decays: bool
    verdict: str


def _decays(series: np.ndarray, rel_tol: float) -> bool:
    return bool(series[-1] <= rel_tol * series[0])


def _decay_rate(t: np.ndarray, series: np.ndarray) -> float:
    pos = series > 0
    if pos.sum() < 2:
        return math.inf if series[0] > 0 else 0.0
    return float(-np.polyfit(t[pos], np.log(series[pos]), 1)[0])


def determining_verdict(twin, functionals, *, window: float = 1.0, rel_tol: float = 1e-6, s: float = 0.2):
    """Both quantities of the determining-functionals definition for a twin run.

    The windowed series is int_t^{t+window} max_j |l_j(v1 - v2)|^2, by the
    trapezoid rule at step resolution; the state series is |v1 - v2|_H.
    Each is said to decay when its last value is at most ``rel_tol`` times
    its first.  The implication between them is reported, not assumed.
    """
    if functionals.name not in twin.functional_values:
        raise ValueError(f"twin run did not record functionals {functionals.name!r}")
    vals = twin.functional_values[functionals.name]
    m = np.max(vals**2, axis=1)
    t = np.asarray(twin.times)
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    W = max(1, int(round(window / dt)))
    if len(t) <= W:
        raise ValueError("twin run is shorter than one window")
    # direct window sums: differencing a cumulative sum loses tiny late values
    seg = 0.5 * (m[1:] + m[:-1]) * dt
    wgap = np.convolve(seg, np.ones(W), mode="valid")
    wt = t[: len(wgap)]
    sgap = np.asarray(twin.gap_H)
    fd, sd = _decays(wgap, rel_tol), _decays(sgap, rel_tol)
    if fd and sd:
        verdict = BOTH_DECAY
    elif fd:
        verdict = FUNCTIONALS_ONLY
    else:
        verdict = NEITHER
    if functionals.kind == "modes":
        el = epsilon_L_for_modes(functionals.n, functionals.grid, s)
        eps_L, C_L = el.epsilon_L, el.C_L
    else:
        eps_L, C_L = math.nan, math.nan
    return DeterminingReport(
        descriptor=functionals.name,
        epsilon_L=eps_L,
        C_L=C_L,
        window_t=wt,
        window_gap=wgap,
        state_t=t,
        state_gap=sgap,
        functional_rate=_decay_rate(wt, wgap),
        state_rate=_decay_rate(t, sgap),
        functionals_decay=fd,
        state_decays=sd,
        verdict=verdict,
    )


# --- per-run record ---------------------------------------------------------

RECORD_COLUMNS = (
    "step", "t", "ts_energy", "q_energy", "grad_ts", "eta_w12", "gamma", "r",
    "envelope_lhs", "envelope_bound", "envelope_slack", "mean_S", "norm_S",
    "poisson_residual", "boundary_mismatch",
)


class DiagnosticsRecord:
    """Per-step diagnostic series of one run, plus quantities derived at the end."""

    columns = RECORD_COLUMNS

    def __init__(self, constants: DerivedConstants, dt: float):
        self.constants = constants
        self.dt = dt
        self._rows: list[tuple] = []
        self.envelope = EnvelopeReport(constants.c5_env, constants.alpha_env)
        self.radius: AbsorbingRadius | None = None
        self.wall_time: float | None = None

    def add(self, **row) -> None:
        self._rows.append(tuple(float(row[c]) for c in self.columns))

    def __len__(self) -> int:
        return len(self._rows)

    def table(self) -> np.ndarray:
        return np.array(self._rows, dtype=float).reshape(len(self._rows), len(self.columns))

    def column(self, name: str) -> np.ndarray:
        return self.table()[:, self.columns.index(name)]

    def finalize(self) -> None:
        if len(self):
            self.radius = absorbing_radius(self.column("eta_w12"), self.constants, self.dt)

    def v_norm2(self) -> np.ndarray:
        """|v|^2 = |q - P eta|^2 + |T|^2 + |S|^2 at every recorded step."""
        return self.column("q_energy") + self.column("ts_energy")
