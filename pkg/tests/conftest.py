import numpy as np
import pytest

from thclab.config import parse_config
from thclab.grid import make_grid
from thclab.operators import PhysParams, flux_cosine, state_from_vorticity, theta_cosine


def make_params(grid, nu=0.5, kappa_T=0.5, kappa_S=0.5, g=1.0, lam=5.0, k=1.0, theta0=1.0, F0=0.1):
    return PhysParams(nu, kappa_T, kappa_S, g, 1.0, 1.0, lam, k, theta_cosine(grid, theta0), flux_cosine(grid, F0))


def default_initial(grid, amp=1.0):
    Y, Z = grid.mesh()
    q = -3.0 * amp * np.sin(np.pi * (Y + grid.l) / (2 * grid.l)) * np.sin(np.pi * Z / grid.d)
    T = 0.5 * amp * np.cos(np.pi * Z / grid.d)
    S = 0.2 * amp * np.cos(np.pi * Y / grid.l)
    return state_from_vorticity(q, T, S, grid)


def small_config(**overrides):
    """Config text for a 32x16 run; overrides are 'section.key' -> raw TOML value."""
    base = {
        "grid.ny": "32", "grid.nz": "16",
        "noise.seed": "7",
        "time.t1": "0.2", "time.dt": "2e-3", "time.snapshot_every": "50",
    }
    base.update(overrides)
    sections: dict[str, list[str]] = {}
    for key, val in base.items():
        sec, name = key.split(".")
        sections.setdefault(sec, []).append(f"{name} = {val}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in sections.items()) + "\n"


@pytest.fixture
def grid():
    return make_grid(32, 16, 1.0, 1.0)


@pytest.fixture
def params(grid):
    return make_params(grid)


@pytest.fixture
def small_cfg():
    return parse_config(small_config())


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
