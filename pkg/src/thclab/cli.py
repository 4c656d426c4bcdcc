"""Command-line entry point: ``thclab <subcommand> --config FILE [--out DIR]``.

Exit codes: 0 success, 1 invalid input (config, arguments), 2 runtime
failure (blow-up, solver non-convergence).  Every run directory holds the
echoed config, CSV tables, snapshots and a manifest with checksums; the
manifest's ``timing`` block is the only part that varies between reruns.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, build_grid, build_params, build_spectrum, parse_config, render_config
from .diagnostics import (
    FourierFunctionals,
    derive_constants,
    determining_verdict,
    epsilon_L_for_modes,
    h_norm,
)
from .noise import control_parameter_check, ou_stationary_sample
from .operators import ConvergenceError
from .serialize import sha256_file, write_csv, write_manifest, write_snapshot
from .solver import (
    BlowUpError,
    SimulationError,
    cocycle_check,
    pullback_run,
    random_perturbation,
    run,
    setup_from_config,
    twin_run,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class RunDir:
    """Collects output files of one run and writes its manifest."""

    def __init__(self, root, cfg: RunConfig, mode: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "snapshots").mkdir(exist_ok=True)
        self.cfg = cfg
        self.mode = mode
        self.files: list[str] = []
        self.results: dict = {}
        self.echo()

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def echo(self) -> None:
        self.path("config.toml").write_text(render_config(self.cfg))

    def snapshot(self, name: str, state) -> None:
        with open(self.path(f"snapshots/{name}"), "wb") as fh:
            write_snapshot(state, fh)

    def finish(self, status: str, wall_time: float | None = None, error: str | None = None) -> None:
        manifest = {
            "format": "thclab-run/1",
            "mode": self.mode,
            "status": status,
            "seed": self.cfg.noise.seed,
            "versions": {
                "thclab": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": {name: sha256_file(self.root / name) for name in sorted(set(self.files))},
            "results": self.results,
            "timing": {
                "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                "wall_time_s": wall_time,
            },
        }
        if error is not None:
            manifest["error"] = error
        write_manifest(self.root / "manifest.json", manifest)


def _write_record(rd: RunDir, record, name: str = "diagnostics.csv") -> None:
    table = record.table()
    cols = list(record.columns)
    extra = []
    if record.radius is not None:
        cols += ["R_sq", "R_converged"]
        extra = np.column_stack([record.radius.R_sq, record.radius.converged.astype(float)])
    rows = np.column_stack([table, extra]) if len(extra) else table
    write_csv(rd.path(name), "diagnostics", cols, rows)


def _summarise_record(record) -> dict:
    out = {
        "steps_recorded": len(record),
        "envelope_violations": len(record.envelope.violations),
        "envelope_max_excess": record.envelope.max_excess,
        "max_rel_mean_S": float(np.max(np.abs(record.column("mean_S")) / np.maximum(record.column("norm_S"), 1e-300))),
    }
    if record.radius is not None and len(record):
        v = np.sqrt(record.v_norm2())
        R = np.sqrt(record.radius.R_sq)
        half = len(v) // 2
        out["R1_sq"] = record.radius.R1_sq
        out["R_sq_final"] = float(record.radius.R_sq[-1])
        out["inside_1p1R_final_half"] = bool(np.all(v[half:] <= 1.1 * R[half:]))
        out["radius_converged_final_half"] = bool(np.all(record.radius.converged[half:]))
    return out


def cmd_simulate(cfg: RunConfig, args) -> int:
    rd = RunDir(args.out, cfg, "simulate")
    snap = lambda i, st: rd.snapshot(f"snap_{i:08d}.bin", st)  # noqa: E731
    try:
        _, record = run(cfg, on_snapshot=snap)
    except SimulationError as exc:
        if exc.last_state is not None:
            rd.snapshot("last_good.bin", exc.last_state)
        _write_record(rd, exc.record)
        rd.results = {"steps_completed": len(exc.record) and int(exc.record.column("step")[-1])}
        rd.finish("failed", exc.record.wall_time, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_record(rd, record)
    rd.results = _summarise_record(record)
    rd.finish("ok", record.wall_time)
    print(f"simulate: {len(record)} records, {rd.results['envelope_violations']} envelope violations, "
          f"wall {record.wall_time:.2f} s -> {rd.root}")
    return EXIT_OK


def cmd_twin(cfg: RunConfig, args) -> int:
    rd = RunDir(args.out, cfg, "twin")
    setup = setup_from_config(cfg)
    scale = cfg.experiment.perturb_scale if args.perturb_scale is None else args.perturb_scale
    modes = cfg.experiment.modes if args.modes is None else args.modes
    funcs = FourierFunctionals(setup.grid, modes)
    pert = random_perturbation(setup.grid, scale, cfg.noise.seed)
    tw = twin_run(cfg, pert, [funcs])
    rep = determining_verdict(tw, funcs, window=cfg.experiment.window, rel_tol=cfg.experiment.rel_tol,
                              s=cfg.experiment.s_X)
    wg = np.full(len(rep.state_t), math.nan)
    wg[: len(rep.window_gap)] = rep.window_gap
    write_csv(rd.path("determining.csv"), "determining", ["t", "state_gap", "window_gap", "noise_gap"],
              np.column_stack([rep.state_t, rep.state_gap, wg, tw.noise_gap]))
    rd.snapshot("twin1_final.bin", tw.final[0])
    rd.snapshot("twin2_final.bin", tw.final[1])
    rd.results = {
        "functionals": rep.descriptor, "perturb_scale": scale, "verdict": rep.verdict,
        "epsilon_L": rep.epsilon_L, "C_L": rep.C_L,
        "functional_rate": rep.functional_rate, "state_rate": rep.state_rate,
        "window_gap_ratio": float(rep.window_gap[-1] / rep.window_gap[0]) if rep.window_gap[0] > 0 else 0.0,
        "state_gap_ratio": float(rep.state_gap[-1] / rep.state_gap[0]) if rep.state_gap[0] > 0 else 0.0,
    }
    rd.finish("ok")
    print(f"twin: verdict {rep.verdict} ({rep.descriptor}, eps_L={rep.epsilon_L:.6g}, C_L={rep.C_L:.6g})")
    return EXIT_OK


def cmd_pullback(cfg: RunConfig, args) -> int:
    rd = RunDir(args.out, cfg, "pullback")
    setup = setup_from_config(cfg)
    tb = cfg.experiment.t_back
    other = setup.initial.copy()
    for f in (other.psi, other.q, other.T, other.S):
        f *= -2.0
    ends_a = pullback_run(cfg, tb)
    ends_b = pullback_run(cfg, tb, other)
    rows = []
    for t, a, b in zip(tb, ends_a, ends_b):
        gap = h_norm(a.q - b.q, a.T - b.T, a.S - b.S, setup.grid)
        size = h_norm(a.q, a.T, a.S, setup.grid)
        rows.append((t, gap, gap / size if size > 0 else math.inf))
        rd.snapshot(f"pullback_a_{t:g}.bin", a)
        rd.snapshot(f"pullback_b_{t:g}.bin", b)
    write_csv(rd.path("pullback.csv"), "pullback", ["t_back", "gap", "rel_gap"], rows)
    rd.results = {"rel_gaps": [r[2] for r in rows]}
    rd.finish("ok")
    for r in rows:
        print(f"pullback t_back={r[0]:g}: relative end-state gap {r[2]:.3e}")
    return EXIT_OK


def cmd_ou_check(cfg: RunConfig, args) -> int:
    rd = RunDir(args.out, cfg, "ou-check")
    grid = build_grid(cfg)
    params, spec = build_params(cfg, grid), build_spectrum(cfg, grid)
    rng = np.random.default_rng(cfg.noise.seed)
    lam = spec.eigenvalues
    l2, g2 = [], []
    for _ in range(cfg.experiment.ou_samples):
        a = ou_stationary_sample(spec, params, rng).amps
        l2.append(float(np.sum(a * a)))
        g2.append(float(np.sum(lam * a * a)))
    expected_grad = spec.trace / (2.0 * params.nu * (params.k + 1.0))
    write_csv(rd.path("ou_check.csv"), "ou-check", ["eta_l2_sq", "eta_grad_sq"], np.column_stack([l2, g2]))
    consts = derive_constants(params, grid)
    verdict = control_parameter_check(spec, params, consts.epsilon, consts.lambda1)
    rd.results = {
        "samples": len(g2), "mean_grad_sq": float(np.mean(g2)), "expected_grad_sq": expected_grad,
        "rel_error": float(abs(np.mean(g2) / expected_grad - 1.0)) if expected_grad > 0 else float(np.mean(g2)),
        "control_passed": verdict.passed, "expected_gamma": verdict.expected_gamma,
    }
    rd.finish("ok")
    print(f"ou-check: E|grad eta|^2 = {np.mean(g2):.6g} (expected {expected_grad:.6g}); "
          f"control condition {'holds' if verdict.passed else 'fails'}")
    return EXIT_OK


def cmd_constants(cfg: RunConfig, args) -> int:
    grid = build_grid(cfg)
    params, spec = build_params(cfg, grid), build_spectrum(cfg, grid)
    c = derive_constants(params, grid)
    v = control_parameter_check(spec, params, c.epsilon, c.lambda1)
    el = epsilon_L_for_modes(cfg.experiment.modes, grid, cfg.experiment.s_X)
    rows = c.table() + [("epsilon_L", el.epsilon_L), ("C_L", el.C_L)]
    width = max(len(k) for k, _ in rows + [("expected_eta_w12", 0)])
    print("derived constants")
    for k, val in rows:
        print(f"  {k:<{width}}  {val:.10g}")
    print(f"  note: {c.lambda1_note}")
    print("control-parameter check (lambda1 > tr Q / ((k+1) nu^3))")
    print(f"  {'passed':<{width}}  {v.passed}")
    for k in ("lambda1", "threshold", "deficit", "expected_eta_w12", "expected_gamma"):
        print(f"  {k:<{width}}  {getattr(v, k):.10g}")
    if args.out:
        rd = RunDir(args.out, cfg, "constants")
        with open(rd.path("constants.csv"), "w") as fh:
            fh.write("# thclab constants v1\nname,value\n")
            for k, val in rows:
                fh.write(f"{k},{format(val, '.17g')}\n")
        rd.results = {"control_passed": v.passed}
        rd.finish("ok")
    return EXIT_OK


def cmd_cocycle(cfg: RunConfig, args) -> int:
    rd = RunDir(args.out, cfg, "cocycle-check")
    rng = np.random.default_rng(cfg.noise.seed)
    dt = cfg.time.dt
    n = max(cfg.nsteps, 2)
    rows = []
    for _ in range(cfg.experiment.cocycle_splits):
        ns = int(rng.integers(0, n))
        nt = int(rng.integers(1, n - ns + 1))
        rows.append((ns * dt, nt * dt, cocycle_check(cfg, ns * dt, nt * dt), 0.0))
    ns = n // 2
    rows.append((ns * dt, (n - ns) * dt, cocycle_check(cfg, ns * dt, (n - ns) * dt, mutate_offset=1), 1.0))
    write_csv(rd.path("cocycle.csv"), "cocycle", ["s", "t", "discrepancy", "mutated"], rows)
    exact = all(r[2] == 0.0 for r in rows if r[3] == 0.0)
    rd.results = {"exact": exact, "mutation_detected": rows[-1][2] > 0}
    rd.finish("ok")
    print(f"cocycle-check: {'exact' if exact else 'NOT exact'} on {len(rows) - 1} splits; "
          f"mutated discrepancy {rows[-1][2]:.3e}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "twin": cmd_twin,
    "pullback": cmd_pullback,
    "ou-check": cmd_ou_check,
    "constants": cmd_constants,
    "cocycle-check": cmd_cocycle,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thclab", description="Stochastic thermohaline circulation lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run configuration file")
        sp.add_argument("--out", required=(name != "constants"), help="run directory")
        if name == "twin":
            sp.add_argument("--perturb-scale", type=float, default=None)
            sp.add_argument("--modes", type=int, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        text = Path(args.config).read_text(encoding="utf-8")
        cfg = parse_config(text).with_mode(args.command)
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](cfg, args)
    except (BlowUpError, ConvergenceError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
