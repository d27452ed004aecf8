"""Command-line scenario runner.

Every subcommand reads a config file, applies ``--set section.key=value``
overrides, runs one scenario and writes ``report.json`` plus CSV files into
the output directory. Exit codes: 0 success, 2 solver non-convergence,
3 configuration error, 4 blow-up.
"""

from __future__ import annotations

import argparse
from datetime import datetime, timezone
import json
import logging
from pathlib import Path
import sys

import numpy as np

from .config import MODES, ConfigError, ScenarioConfig, parse_config
from .control import HUMConfig, NonConvergenceError, hum_solve, local_control
from .dynamics import SimOptions, simulate
from .model import BlowUpError, NonlinearityError, damping_profile, polynomial, zero_nonlinearity
from .spectral import GeometryError, ModalState, build_geometry, random_state, x_norm

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG, EXIT_BLOWUP = 0, 2, 3, 4

log = logging.getLogger("hingeplate")


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Run:
    """Builds the model objects of one scenario and collects its outputs."""

    def __init__(self, cfg: ScenarioConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.headline: dict = {}
        self.files: list[str] = []
        self.diagnostics: dict = {}
        self.rng = np.random.default_rng(cfg.get("run", "seed"))
        g = cfg.sections["geometry"]
        self.geom = build_geometry(g["kind"], cfg.get("geometry", "d"), g["N"], cfg.get("geometry", "beta"))
        if cfg.has("nonlinearity") and cfg.get("nonlinearity", "coefficients"):
            self.spec = polynomial(
                self.geom,
                cfg.get("nonlinearity", "coefficients"),
                cfg.get("nonlinearity", "tag"),
                cfg.get("nonlinearity", "R"),
                cfg.get("nonlinearity", "alpha"),
            )
        else:
            self.spec = zero_nonlinearity(self.geom)
        self.damping = None
        if cfg.has("damping"):
            self.damping = damping_profile(
                self.geom, cfg.get("damping", "boxes"), cfg.get("damping", "gamma0"), cfg.get("damping", "delta")
            )

    def run(self, name: str):
        return getattr(self, "mode_" + name.replace("-", "_"))()

    def csv(self, name: str, header, rows):
        write_csv(self.out / name, header, rows)
        self.files.append(name)

    def summary(self):
        self.csv("summary.csv", ["quantity", "value"],
                 [(k, v) for k, v in self.headline.items() if isinstance(v, (int, float, np.number))])

    def hum_config(self, potential=None) -> HUMConfig:
        c = self.cfg
        return HUMConfig(self.damping, c.get("run", "T"), c.get("run", "dt"), c.get("run", "tol"), potential=potential)

    # -- modes ---------------------------------------------------------

    def mode_simulate(self):
        c = self.cfg
        st = random_state(self.geom, self.rng, c.get("run", "data_norm"))
        damp = self.damping if c.get("damping", "enabled") else None
        opts = SimOptions(dt=c.get("run", "dt"), T=c.get("run", "T"), nonlinearity=self.spec,
                          damping=damp, record_every=c.get("run", "record_every"))
        traj = simulate(st, opts)
        E = traj.energy
        norms = x_norm(self.geom, traj.u, traj.v)
        self.csv("energy.csv", ["t", "E", "kinetic", "bending", "mass", "potential", "dissipation_cum", "norm_X"],
                 zip(traj.times, E, traj.kinetic, traj.bending, traj.mass, traj.potential, traj.dissipation,
                     np.atleast_1d(norms)))
        scale = E[0] if E[0] > 0 else 1.0
        self.headline.update(
            E0=float(E[0]), ET=float(E[-1]), dissipation=float(traj.dissipation[-1]),
            relative_drift=float(np.max(np.abs(E - E[0])) / scale),
            balance_defect=float(abs(E[-1] - E[0] + traj.dissipation[-1]) / scale),
        )
        self._figure("simulate", times=traj.times, energy=E, dissipation=traj.dissipation)

    def mode_observability(self):
        from .observability import plate_gramian, schrodinger_gramian

        c = self.cfg
        Ts = c.get("run", "T_values") or [c.get("run", "T")]
        dt = c.get("run", "dt")
        rows = []
        for T in Ts:
            if c.get("run", "gramian") == "schrodinger":
                rep = schrodinger_gramian(self.geom, self.damping.boxes, T, dt)
            else:
                rep = plate_gramian(self.geom, self.damping, T, dt, c.get("run", "potential") or None,
                                    c.get("run", "plate_mode"))
            rows.append((T, rep.n_modes, rep.mu_min, rep.c_obs if np.isfinite(rep.c_obs) else float("nan"),
                         rep.observable))
        self.csv("gramian.csv", ["T", "n_modes", "mu_min", "c_obs", "observable"], rows)
        for T, _, mu, cobs, obs in rows:
            self.headline[f"mu_min[T={T:g}]"] = mu
        mus = [r[2] for r in rows]
        self.headline["mu_min_monotone"] = int(all(b >= a for a, b in zip(mus, mus[1:])))
        self._figure("observability", T=[r[0] for r in rows], mu=mus)

    def mode_hum(self):
        hcfg = self.hum_config()
        target = random_state(self.geom, self.rng, self.cfg.get("run", "data_norm"))
        sol = hum_solve(target, hcfg)
        sol.write(self.out / "control")
        self.files += ["control.json", "control.csv"]
        self.headline.update(terminal_error=sol.terminal_error, iterations=sol.iterations,
                             control_max=sol.max_abs(), target_norm=target.x_norm())
        self._figure("control", solution=sol)

    def _equilibrium_seed(self, value: float) -> np.ndarray:
        from .attractor import constant_seed

        if value == 0.0:
            return self.geom.zeros()
        return constant_seed(self.geom, value)

    def mode_local_control(self):
        from .attractor import solve_equilibrium

        c = self.cfg
        eq = solve_equilibrium(self.spec, self._equilibrium_seed(c.get("run", "equilibrium")))
        rest = eq.state(self.geom)
        a = rest + random_state(self.geom, self.rng, c.get("run", "data_norm"))
        b = rest + random_state(self.geom, self.rng, c.get("run", "data_norm"))
        sol = local_control(eq.e_hat, a, b, self.spec, self.hum_config(), c.get("run", "picard_tol"),
                            c.get("run", "max_iter"))
        sol.write(self.out / "control")
        self.files += ["control.json", "control.csv"]
        it = sol.diagnostics["phase_iterations"]
        self.headline.update(terminal_error=sol.terminal_error, phase1_iterations=it[0], phase2_iterations=it[1],
                             equilibrium_residual=eq.residual, control_max=sol.max_abs())
        self._figure("control", solution=sol)

    def _equilibria(self):
        from .attractor import enumerate_equilibria, random_seeds

        c = self.cfg
        seeds = [self._equilibrium_seed(float(v)) for v in (c.get("run", "seeds") or [])]
        n_rand = c.get("run", "random_seeds")
        if n_rand:
            seeds += random_seeds(self.geom, self.rng, n_rand, max(1.0, 2 * c.get("nonlinearity", "R")))
        if not seeds:
            seeds = [self.geom.zeros()]
        return enumerate_equilibria(self.spec, seeds)

    def mode_equilibria(self):
        from .attractor import a_priori_bound

        eqs = self._equilibria()
        rows = []
        for eq in eqs:
            b = a_priori_bound(self.spec, eq)
            mean = eq.e_hat[0] / np.sqrt(self.geom.measure) if self.geom.kind == "torus" else float("nan")
            rows.append((eq.index, eq.residual, eq.iterations, eq.n_unstable, float(np.linalg.norm(eq.e_hat)),
                         mean, b.lhs, b.bound, b.satisfied))
        self.csv("equilibria.csv", ["index", "residual", "iterations", "n_unstable", "l2_norm", "mean",
                                    "bound_lhs", "bound_rhs", "bound_ok"], rows)
        self.csv("equilibria_modes.csv", ["index"] + [f"c{k}" for k in range(self.geom.n_modes)],
                 [(eq.index, *eq.e_hat) for eq in eqs])
        self.headline.update(count=len(eqs), max_residual=max((r[1] for r in rows), default=0.0),
                             all_bounded=int(all(r[-1] for r in rows)))
        self._figure("equilibria", equilibria=eqs)

    def mode_steer(self):
        from .attractor import SteeringError, plan_steering, probe_radii

        c = self.cfg
        eqs = self._equilibria()
        hcfg = self.hum_config()
        probe_radii(eqs, self.spec, hcfg, seed=c.get("run", "seed"), r0=c.get("run", "radius_max"),
                    tol=c.get("run", "picard_tol"))
        start, end = c.get("run", "start"), c.get("run", "end")
        zero = self.geom.zeros()
        U0 = (ModalState(self._equilibrium_seed(start), zero, self.geom) if start is not None
              else random_state(self.geom, self.rng, c.get("run", "data_norm")))
        U1 = ModalState(self._equilibrium_seed(end), zero, self.geom) if end is not None else ModalState.zeros(self.geom)
        self.diagnostics["equilibria"] = [eq.to_dict() for eq in eqs]
        try:
            plan, sol = plan_steering(U0, U1, self.spec, self.damping, eqs, hcfg, tol=c.get("run", "tol"),
                                      max_coast=c.get("run", "max_coast"))
        except SteeringError as exc:
            self.diagnostics["failing_leg"] = exc.leg
            self.diagnostics["partial_plan"] = exc.plan.to_dict()
            raise
        sol.write(self.out / "control")
        (self.out / "plan.json").write_text(json.dumps(_jsonable(plan.to_dict()), indent=2, sort_keys=True))
        self.files += ["control.json", "control.csv", "plan.json"]
        self.csv("legs.csv", ["leg", "kind", "t0", "duration", "equilibrium", "checkpoint_error"],
                 [(i, leg.kind, leg.t0, leg.duration, -1 if leg.equilibrium is None else leg.equilibrium, err)
                  for i, (leg, err) in enumerate(zip(plan.legs, plan.checkpoint_errors))])
        self.headline.update(terminal_error=plan.terminal_error, duration=plan.duration,
                             T_max=plan.budget["T_max"], n_legs=len(plan.legs))
        self._figure("control", solution=sol)

    # -- figures -------------------------------------------------------

    def _figure(self, kind: str, **data):
        if "png" not in self.cfg.get("output", "formats"):
            return
        try:
            from . import figures
        except ImportError as exc:
            self.diagnostics["figures"] = f"skipped: {exc}"
            return
        self.files += figures.render(kind, self.out, self.geom, **data)


def _write_report(out: Path, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def execute(mode: str, config_text: str, overrides=(), out: str | None = None, seed: int | None = None) -> int:
    over = list(overrides)
    if seed is not None:
        over.append(f"run.seed={int(seed)}")
    if out is not None:
        over.append(f"output.directory={json.dumps(str(out))}")
    stamp = datetime.now(timezone.utc).isoformat()
    try:
        cfg = parse_config(config_text, over, mode)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        if out is not None:
            _write_report(Path(out), {"mode": mode, "status": "config-error", "exit_code": EXIT_CONFIG,
                                      "errors": exc.errors, "timestamp": stamp})
        return EXIT_CONFIG
    out_dir = Path(cfg.get("output", "directory"))
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"mode": mode, "config_hash": cfg.digest(), "config": cfg.to_dict(), "seed": cfg.get("run", "seed"),
              "timestamp": stamp}
    runner = None
    code, status = EXIT_OK, "ok"
    try:
        runner = Run(cfg, out_dir)
        runner.run(mode)
    except (GeometryError, NonlinearityError) as exc:
        code, status = EXIT_CONFIG, "config-error"
        report["errors"] = [str(exc)]
    except BlowUpError as exc:
        code, status = EXIT_BLOWUP, "blow-up"
        report["errors"] = [str(exc)]
        report["blowup_time"] = exc.t
    except NonConvergenceError as exc:
        code, status = EXIT_SOLVER, "no-convergence"
        report["errors"] = [str(exc)]
        report["history"] = [float(h) for h in exc.history][-20:]
        report.setdefault("diagnostics", {}).update(exc.diagnostics)
    if runner is not None:
        if code == EXIT_OK or runner.headline:
            runner.summary()
        report["headline"] = runner.headline
        report.setdefault("diagnostics", {}).update(runner.diagnostics)
        report["files"] = sorted(set(runner.files + ["report.json"]))
    report["status"], report["exit_code"] = status, code
    _write_report(out_dir, report)
    if code:
        print(f"{mode}: {status}: {'; '.join(report.get('errors', []))}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hingeplate", description="Hinged plate simulation and control scenarios.")
    sub = p.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        s = sub.add_parser(mode)
        s.add_argument("--config", required=True, help="scenario file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override, e.g. --set run.T=2 (repeatable)")
        s.add_argument("--out", help="output directory (overrides output.directory)")
        s.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides run.seed)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return execute(args.mode, text, args.set, args.out, args.seed)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
