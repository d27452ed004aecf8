"""HUM linear control and the Picard fixed point for local nonlinear control.

Conventions
-----------
Adjoint data (Φ0, Φ1) ∈ X' = L² × H_D^{-2} are stored as ModalState objects
(``u`` holds Φ0, ``v`` holds Φ1). The X'×X pairing is

    ⟨(Φ0, Φ1), (u0, u1)⟩ = Σ Φ1·u0 − Σ Φ0·u1,

and for v'' + Lv = s with v(T) = 0 and Φ'' + LΦ = 0 from (Φ0, Φ1) one has
∫_0^T ∫ s Φ = ⟨(Φ0, Φ1), (v, v')(0)⟩. ``apply_S`` consumes the applied
source s (already localised, e.g. s = γ² h) and ``apply_S_star`` returns the
localised observation γ²Φ, so Λ = S S* satisfies ⟨Φ, ΛΦ⟩ = ∬ |γΦ|².

Controls are stored as segments of grid samples of the applied source at the
step times; the time discretisation is the package's splitting scheme, for
which the pairing identity above holds exactly with trapezoid weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import json

import numpy as np

from .dynamics import PlateIntegrator
from .model import BlowUpError, DampingProfile, Nonlinearity, linearized_potential
from .spectral import Geometry, ModalState, from_physical, to_physical, x_norm


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, history=None, diagnostics=None):
        super().__init__(message)
        self.history = list(history or [])
        self.diagnostics = dict(diagnostics or {})


class OutOfRadiusError(NonConvergenceError):
    """Picard iteration diverged or the nonlinear solve blew up."""


# ---------------------------------------------------------------- configuration


@dataclass
class HUMConfig:
    damping: DampingProfile
    T: float
    dt: float
    tol: float = 1e-10
    max_iter: int = 500
    potential: np.ndarray | float | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("control horizon T must be positive")
        if not 0 < self.tol < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(n, 1):
            raise ValueError("T/dt must be an integer")

    @property
    def geometry(self) -> Geometry:
        return self.damping.geometry

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def weights(self) -> np.ndarray:
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def linear(self) -> PlateIntegrator:
        if "linear" not in self._cache:
            self._cache["linear"] = PlateIntegrator(self.geometry, potential=self.potential)
        return self._cache["linear"]

    def gamma_matrix(self) -> np.ndarray:
        return self.damping.matrix()

    def with_potential(self, potential) -> "HUMConfig":
        return replace(self, potential=potential, _cache={})


# ---------------------------------------------------------------- pairings


def pairing(phi: ModalState, state: ModalState) -> float:
    """⟨(Φ0, Φ1), (u0, u1)⟩_{X'×X} = Σ Φ1 u0 − Σ Φ0 u1."""
    return float(np.dot(phi.v, state.u) - np.dot(phi.u, state.v))


def dual_inner(a: ModalState, b: ModalState) -> float:
    """X' = L² × H_D^{-2} inner product."""
    w = (1.0 + a.geometry.eigenvalues) ** -2
    return float(np.dot(a.u, b.u) + np.dot(w * a.v, b.v))


def dual_norm(a: ModalState) -> float:
    return float(np.sqrt(max(dual_inner(a, a), 0.0)))


def riesz_to_dual(state: ModalState) -> ModalState:
    """R: X → X' with (Φ, R U)_{X'} = ⟨Φ, U⟩ for all Φ."""
    geom = state.geometry
    return ModalState(-state.v, (1.0 + geom.eigenvalues) ** 2 * state.u, geom, state.t)


# ---------------------------------------------------------------- S, S*, Λ


def adjoint_trace(phi0, phi1, cfg: HUMConfig) -> np.ndarray:
    """Modal samples Φ(t_n) of the adjoint solution (shape (n_t, n_modes))."""
    traj = cfg.linear().run(phi0, phi1, cfg.dt, cfg.n_steps, energies=False)
    return traj.u


def apply_S_star(phi0, phi1, cfg: HUMConfig) -> np.ndarray:
    """Grid samples of the observation γ²Φ(t_n, x); shape (n_t, *grid)."""
    phi = adjoint_trace(phi0, phi1, cfg)
    return cfg.damping.gamma_squared() * to_physical(cfg.geometry, phi)


def _sources_from_adjoint(phi: np.ndarray, cfg: HUMConfig) -> np.ndarray:
    # P(γ² Φ) for each sample; Γ is symmetric
    return phi @ cfg.gamma_matrix()


def apply_S(g: np.ndarray, cfg: HUMConfig, modal: bool = False) -> ModalState:
    """(v, v')(0) for v'' + Lv = g with (v, v')(T) = 0.

    ``g`` holds grid samples (n_t, *grid) of the applied source, or modal
    samples (n_t, n_modes) when ``modal`` is set.
    """
    geom = cfg.geometry
    src = np.asarray(g, dtype=float) if modal else from_physical(geom, g)
    zero = np.zeros(src.shape[1:])
    traj = cfg.linear().run(zero, zero, cfg.dt, cfg.n_steps, src, cfg.T, energies=False, direction=-1)
    return ModalState(traj.u[0], traj.v[0], geom)


def apply_Lambda(phi0, phi1, cfg: HUMConfig) -> ModalState:
    phi = adjoint_trace(phi0, phi1, cfg)
    return apply_S(_sources_from_adjoint(phi, cfg), cfg, modal=True)


def observation_energy(phi0, phi1, cfg: HUMConfig) -> float:
    """∫_0^T ‖γΦ‖² dt by trapezoid on the grid."""
    obs = apply_S_star(phi0, phi1, cfg)
    phi = to_physical(cfg.geometry, adjoint_trace(phi0, phi1, cfg))
    per_t = cfg.geometry.integrate(obs * phi)
    return float(np.dot(cfg.weights(), per_t))


# ---------------------------------------------------------------- control container


@dataclass
class ControlSegment:
    """Applied source sampled on a uniform time grid starting at ``t0``."""

    t0: float
    dt: float
    samples: np.ndarray  # (n_steps + 1, *grid) applied source values
    kind: str = "hum"
    center: np.ndarray | None = None  # frame used by the integrator on this segment
    damping_sign: float = 0.0  # nonzero for feedback coasts (recorded open-loop)

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass
class ControlSolution:
    geometry: Geometry
    segments: list
    phi0: np.ndarray | None = None
    phi1: np.ndarray | None = None
    iterations: int = 0
    terminal_error: float = float("nan")
    residual_history: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return float(sum(seg.duration for seg in self.segments))

    def times_and_values(self):
        """Concatenated samples; junction times appear twice (left and right values)."""
        ts = [seg.times for seg in self.segments]
        vs = [seg.samples for seg in self.segments]
        if not ts:
            return np.zeros(0), np.zeros((0,) + self.geometry.grid_shape)
        return np.concatenate(ts), np.concatenate(vs)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(s.samples))) for s in self.segments), default=0.0)

    def header(self) -> dict:
        return {
            "geometry": {
                "kind": self.geometry.kind,
                "modes": list(self.geometry.modes),
                "beta": self.geometry.beta,
                "grid_shape": list(self.geometry.grid_shape),
            },
            "segments": [
                {"t0": s.t0, "dt": s.dt, "n_steps": s.n_steps, "kind": s.kind} for s in self.segments
            ],
            "duration": self.duration,
            "iterations": self.iterations,
            "terminal_error": self.terminal_error,
            "residual_history": [float(r) for r in self.residual_history],
            "diagnostics": self.diagnostics,
        }

    def write(self, stem) -> None:
        """Write ``<stem>.json`` (header) and ``<stem>.csv`` (t, then grid values row-major)."""
        from pathlib import Path

        stem = Path(stem)
        stem.with_suffix(".json").write_text(json.dumps(self.header(), indent=2, default=_json_default))
        t, vals = self.times_and_values()
        flat = vals.reshape(vals.shape[0], -1)
        ncol = flat.shape[1]
        with open(stem.with_suffix(".csv"), "w") as fh:
            fh.write("t," + ",".join(f"g{i}" for i in range(ncol)) + "\n")
            for ti, row in zip(t, flat):
                fh.write(f"{ti:.17g}," + ",".join(f"{x:.17g}" for x in row) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj)}")


def resimulate(
    solution: ControlSolution,
    start: ModalState,
    nonlinearity: Nonlinearity | None,
    return_states: bool = False,
):
    """Run the undamped controlled plate through every segment of ``solution``.

    Feedback coasts are replayed open-loop from their recorded samples. With
    ``return_states`` the state at the end of every segment is returned.
    """
    geom = solution.geometry
    u, v, t = start.u.copy(), start.v.copy(), start.t
    states = []
    for seg in solution.segments:
        integ = PlateIntegrator(geom, nonlinearity, center=seg.center)
        src = from_physical(geom, seg.samples)
        traj = integ.run(u, v, seg.dt, seg.n_steps, src, t, energies=False)
        u, v, t = traj.u[-1], traj.v[-1], float(traj.times[-1])
        states.append(ModalState(u, v, geom, t))
    if return_states:
        return states
    return ModalState(u, v, geom, t)


# ---------------------------------------------------------------- HUM solve


def _cg(apply_A, b: ModalState, x0: ModalState | None, tol: float, max_iter: int):
    """Conjugate gradients for A x = b in the X' inner product."""
    geom = b.geometry
    bnorm = dual_norm(b)
    x = ModalState.zeros(geom) if x0 is None else x0.copy()
    history = []
    if bnorm == 0:
        return ModalState.zeros(geom), 0, [0.0]
    r = b - apply_A(x) if x0 is not None and np.any(x0.u) | np.any(x0.v) else b.copy()
    p = r.copy()
    rr = dual_inner(r, r)
    history.append(np.sqrt(rr) / bnorm)
    it = 0
    while history[-1] > tol:
        if it >= max_iter:
            raise NonConvergenceError(
                f"CG did not reach {tol:g} in {max_iter} iterations (residual {history[-1]:.3g})",
                history,
            )
        Ap = apply_A(p)
        curv = dual_inner(p, Ap)
        if curv <= 0:
            raise NonConvergenceError("operator lost positivity (observation vanished)", history)
        alpha = rr / curv
        x = x + p.scaled(alpha)
        r = r - Ap.scaled(alpha)
        rr_new = dual_inner(r, r)
        history.append(np.sqrt(rr_new) / bnorm)
        p = r + p.scaled(rr_new / rr)
        rr = rr_new
        it += 1
    return x, it, history


def solve_lambda(target: ModalState, cfg: HUMConfig, x0: ModalState | None = None, tol=None):
    """(Φ0, Φ1) = Λ^{-1} target by CG on R Λ in X'."""
    def apply_A(phi):
        return riesz_to_dual(apply_Lambda(phi.u, phi.v, cfg))

    return _cg(apply_A, riesz_to_dual(target), x0, cfg.tol if tol is None else tol, cfg.max_iter)


def _hum_segment(phi: ModalState, cfg: HUMConfig, center=None, t0=0.0, reverse=False) -> ControlSegment:
    samples = apply_S_star(phi.u, phi.v, cfg)
    if reverse:
        samples = samples[::-1].copy()
    return ControlSegment(t0, cfg.dt, samples, "hum", center)


def hum_solve(target: ModalState, cfg: HUMConfig, x0: ModalState | None = None) -> ControlSolution:
    """Null control of the linear system from ``target`` at t=0 on [0, T].

    The control is g = γ²Φ with (Φ0, Φ1) = Λ^{-1} target; success is
    certified by re-simulating the linear system.
    """
    geom = cfg.geometry
    if target.x_norm() == 0:
        seg = ControlSegment(0.0, cfg.dt, np.zeros((cfg.n_steps + 1,) + geom.grid_shape))
        return ControlSolution(geom, [seg], geom.zeros(), geom.zeros(), 0, 0.0, [0.0])
    phi, iters, history = solve_lambda(target, cfg, x0)
    seg = _hum_segment(phi, cfg)
    src = from_physical(geom, seg.samples)
    traj = cfg.linear().run(target.u, target.v, cfg.dt, cfg.n_steps, src, energies=False)
    err = x_norm(geom, traj.u[-1], traj.v[-1])
    return ControlSolution(geom, [seg], phi.u, phi.v, iters, err, history)


# ---------------------------------------------------------------- nonlinear local control


@dataclass
class _LocalProblem:
    cfg: HUMConfig  # potential = f'(e)
    nonlinear: PlateIntegrator  # full f in the frame centred at e
    center: np.ndarray

    def remainder(self, z: np.ndarray) -> np.ndarray:
        """R(z) = 𝔣(z) − 𝔣'(0) z in modal form, for stacked samples z."""
        lin = self.cfg.linear().potential
        out = self.nonlinear.force(z)
        return out if lin is None else out - z @ lin


def _local_problem(e_hat, nonlinearity: Nonlinearity, cfg: HUMConfig) -> _LocalProblem:
    geom = cfg.geometry
    e_hat = np.asarray(e_hat, dtype=float)
    pot = linearized_potential(nonlinearity, e_hat)
    lcfg = cfg.with_potential(pot)
    return _LocalProblem(lcfg, PlateIntegrator(geom, nonlinearity, center=e_hat), e_hat)


def _nonlinear_backward(prob: _LocalProblem, src: np.ndarray):
    """Shifted variable z = u − e (samples, then z(0) and z'(0)) from z(T) = 0 backward."""
    cfg = prob.cfg
    e = prob.center
    zero = np.zeros(cfg.geometry.n_modes)
    try:
        traj = prob.nonlinear.run(e, zero, cfg.dt, cfg.n_steps, src, cfg.T, energies=False, direction=-1)
    except BlowUpError as exc:
        raise OutOfRadiusError(f"nonlinear solve left the trusted range: {exc}") from exc
    return traj.u - e, traj.v


def operator_K(phi: ModalState, prob: _LocalProblem):
    """K(Φ) = (v, v')(0) where v solves the linearised system with source −R(z).

    Returns (K(Φ), z(0)); z(0) = Λ_NL(Φ) is the state reached backward by the
    nonlinear system under control γ²Φ.
    """
    cfg = prob.cfg
    src = _sources_from_adjoint(adjoint_trace(phi.u, phi.v, cfg), cfg)
    z, zdot = _nonlinear_backward(prob, src)
    k = apply_S(-prob.remainder(z), cfg, modal=True)
    z0 = ModalState(z[0], zdot[0], cfg.geometry)
    return k, z0


def _picard(prob: _LocalProblem, target: ModalState, tol: float, max_iter: int):
    """Fixed point Φ = Λ^{-1}(target − K(Φ)) with relaxation on stall."""
    cfg = prob.cfg
    geom = cfg.geometry
    phi = ModalState.zeros(geom)
    history, steps = [], []
    growth = 0
    relax = 1.0
    scale = max(target.x_norm(), 1e-300)
    cg_tol = min(cfg.tol, 1e-3 * tol / scale)
    for it in range(max_iter + 1):
        k, z0 = operator_K(phi, prob)
        miss = x_norm(geom, z0.u - target.u, z0.v - target.v)
        history.append(miss)
        if miss <= tol:
            return phi, it, history
        if it == max_iter:
            break
        new, _, _ = solve_lambda(target - k, cfg, phi, tol=cg_tol)
        step = dual_norm(new - phi)
        if step == 0.0:
            break
        if steps and step >= steps[-1]:
            growth += 1
            relax = 0.5
        else:
            growth = 0
        if growth >= 3:
            raise OutOfRadiusError(
                "Picard iteration diverged (3 consecutive growths)", history,
                {"contraction_estimate": step / steps[-1]},
            )
        steps.append(step)
        phi = phi + (new - phi).scaled(relax)
    raise OutOfRadiusError(f"Picard did not reach {tol:g} in {max_iter} iterations", history,
                           {"contraction_estimate": steps[-1] / steps[-2] if len(steps) > 1 else None})


def null_control(
    e_hat,
    start: ModalState,
    nonlinearity: Nonlinearity,
    cfg: HUMConfig,
    tol: float = 1e-9,
    max_iter: int = 20,
) -> ControlSolution:
    """Steer ``start`` to (e, 0) in time T (shifted system, Picard on the fixed-point map)."""
    geom = cfg.geometry
    e_hat = np.asarray(e_hat, dtype=float)
    prob = _local_problem(e_hat, nonlinearity, cfg)
    target = ModalState(start.u - e_hat, start.v, geom)
    phi, iters, history = _picard(prob, target, tol, max_iter)
    seg = _hum_segment(phi, prob.cfg, center=e_hat)
    return ControlSolution(geom, [seg], phi.u, phi.v, iters, history[-1], history)


def local_control(
    e_hat,
    start: ModalState,
    end: ModalState,
    nonlinearity: Nonlinearity,
    cfg: HUMConfig,
    tol: float = 1e-9,
    max_iter: int = 20,
) -> ControlSolution:
    """Two-phase control on [0, 2T]: start → (e, 0), then (e, 0) → end.

    The second phase is the null control of the velocity-flipped end state,
    replayed backward in time.
    """
    geom = cfg.geometry
    e_hat = np.asarray(e_hat, dtype=float)
    n1 = cfg.n_steps
    rest = ModalState(e_hat, geom.zeros(), geom)
    zero = np.zeros((n1 + 1,) + geom.grid_shape)
    segs, iters, history = [], [], []
    phis = []
    for phase, state in enumerate((start, ModalState(end.u, -end.v, geom))):
        if state.distance(rest) == 0:
            seg = ControlSegment(phase * cfg.T, cfg.dt, zero.copy(), "local", e_hat)
            segs.append(seg)
            iters.append(0)
            history.append([0.0])
            phis.append((geom.zeros(), geom.zeros()))
            continue
        sol = null_control(e_hat, state, nonlinearity, cfg, tol, max_iter)
        seg = sol.segments[0]
        seg.kind = "local"
        if phase == 1:
            seg.samples = seg.samples[::-1].copy()
            seg.t0 = cfg.T
        segs.append(seg)
        iters.append(sol.iterations)
        history.append(sol.residual_history)
        phis.append((sol.phi0, sol.phi1))
    out = ControlSolution(geom, segs, phis[0][0], phis[0][1], max(iters), float("nan"),
                          history[0], {"phase_iterations": iters, "phase_history": history})
    final = resimulate(out, start, nonlinearity)
    out.terminal_error = final.distance(end)
    return out


def u_turn(e_hat, state: ModalState, nonlinearity: Nonlinearity, cfg: HUMConfig, **kw) -> ControlSolution:
    """Local control from ``state`` to its velocity flip."""
    flipped = ModalState(state.u, -state.v, state.geometry, state.t)
    return local_control(e_hat, state, flipped, nonlinearity, cfg, **kw)
