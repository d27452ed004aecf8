"""Equilibria, gradient-structure diagnostics and the steering planner.

Steering works on the damped flow's gradient structure: damped coasts carry
any state into a small ball around some equilibrium, local controls move
within such a ball, and the velocity-flipped (anti-damped) flow travels the
heteroclinic connections backward. Every coast is stored as the open-loop
source g = ∓γ²∂t u sampled along the coast, so the whole manoeuvre is a
single control for the undamped plate.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.optimize import minimize_scalar

from .control import (
    ControlSegment,
    ControlSolution,
    HUMConfig,
    NonConvergenceError,
    local_control,
    resimulate,
)
from .dynamics import PlateIntegrator, damped_decay_rate
from .model import (
    BlowUpError,
    DampingProfile,
    Nonlinearity,
    eval_f,
    linearized_potential,
)
from .spectral import Geometry, ModalState, projection_matrix, random_state, to_physical, x_norm

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
MAX_NEWTON = 50
DEDUPE_DISTANCE = 1e-6
HANDOFF_TOL = 1e-6


# ---------------------------------------------------------------- equilibria


@dataclass
class Equilibrium:
    e_hat: np.ndarray
    residual: float
    iterations: int
    potential: np.ndarray  # ∂_s f(x, e(x)) on the collocation grid
    jacobian_eigenvalues: np.ndarray = field(repr=False)
    jacobian_vectors: np.ndarray = field(repr=False)
    radius: float | None = None
    index: int = -1

    def state(self, geom: Geometry) -> ModalState:
        return ModalState(self.e_hat, np.zeros_like(self.e_hat), geom)

    @property
    def unstable_directions(self) -> np.ndarray:
        """Columns spanning the negative eigenspace of the stationary operator."""
        return self.jacobian_vectors[:, self.jacobian_eigenvalues < -1e-9]

    @property
    def n_unstable(self) -> int:
        return int(np.sum(self.jacobian_eigenvalues < -1e-9))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "e_hat": self.e_hat.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "n_unstable": self.n_unstable,
            "radius": self.radius,
        }


class EquilibriumError(NonConvergenceError):
    pass


def equilibrium_residual(spec: Nonlinearity, e_hat: np.ndarray) -> np.ndarray:
    """Modal residual of Δ²e + βe + f(x, e) = 0."""
    geom = spec.geometry
    return geom.omega_squared * e_hat + eval_f(spec, e_hat)


def stationary_jacobian(spec: Nonlinearity, e_hat: np.ndarray) -> np.ndarray:
    """(λ² + β) diag + P f'_s(·, e) P, on the grid used for the residual."""
    geom = spec.geometry
    shape = spec.grid_shape() if spec.degree else geom.grid_shape
    jac = np.diag(geom.omega_squared)
    if spec.degree:
        jac = jac + projection_matrix(geom, linearized_potential(spec, e_hat, shape))
    return jac


def solve_equilibrium(
    spec: Nonlinearity,
    guess: np.ndarray,
    tol: float = RESIDUAL_TOL,
    max_iter: int = MAX_NEWTON,
) -> Equilibrium:
    """Damped Newton on the modal residual; the Jacobian may be singular, so steps use lstsq."""
    e = np.array(guess, dtype=float)
    res = equilibrium_residual(spec, e)
    norm = float(np.linalg.norm(res))
    history = [norm]
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise EquilibriumError(f"Newton did not converge in {max_iter} iterations", history)
        jac = stationary_jacobian(spec, e)
        step = np.linalg.lstsq(jac, -res, rcond=1e-13)[0]
        alpha = 1.0
        while True:
            trial = e + alpha * step
            try:
                tres = equilibrium_residual(spec, trial)
                tnorm = float(np.linalg.norm(tres))
            except BlowUpError:
                tnorm = np.inf
            if tnorm < (1.0 - 1e-4 * alpha) * norm or alpha < 1e-6:
                break
            alpha *= 0.5
        if not np.isfinite(tnorm):
            raise EquilibriumError("Newton step left the trusted range", history)
        if alpha < 1e-6 and tnorm >= norm:
            raise EquilibriumError("line search stalled", history)
        e, res, norm = trial, tres, tnorm
        history.append(norm)
        it += 1
    if it:
        # one polishing step toward round-off; kept only if it helps
        trial = e + np.linalg.lstsq(stationary_jacobian(spec, e), -res, rcond=1e-13)[0]
        tnorm = float(np.linalg.norm(equilibrium_residual(spec, trial)))
        if tnorm < norm:
            e, norm = trial, tnorm
    return _finish(spec, e, norm, it)


def _finish(spec: Nonlinearity, e: np.ndarray, residual: float, iterations: int) -> Equilibrium:
    jac = stationary_jacobian(spec, e)
    evals, evecs = np.linalg.eigh(0.5 * (jac + jac.T))
    pot = linearized_potential(spec, e) if spec.degree else np.zeros(spec.geometry.grid_shape)
    return Equilibrium(e, residual, iterations, pot, evals, evecs)


def enumerate_equilibria(
    spec: Nonlinearity,
    seeds,
    workers: int = 1,
    tol: float = RESIDUAL_TOL,
) -> list[Equilibrium]:
    """Converged, deduplicated equilibria from the seeds (plus −e when f is odd)."""
    geom = spec.geometry
    seeds = [np.asarray(s, dtype=float) for s in seeds]

    def attempt(seed):
        try:
            return solve_equilibrium(spec, seed, tol)
        except NonConvergenceError as exc:
            log.info("equilibrium seed dropped: %s", exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            found = list(pool.map(attempt, seeds))
    else:
        found = [attempt(s) for s in seeds]
    out: list[Equilibrium] = []

    def add(eq):
        for other in out:
            if x_norm(geom, eq.e_hat - other.e_hat, geom.zeros()) <= DEDUPE_DISTANCE:
                return
        out.append(eq)

    for eq in found:
        if eq is None:
            continue
        add(eq)
        if spec.is_odd:
            mirror = -eq.e_hat
            add(_finish(spec, mirror, float(np.linalg.norm(equilibrium_residual(spec, mirror))), 0))
    for i, eq in enumerate(out):
        eq.index = i
    return out


def constant_seed(geom: Geometry, value: float) -> np.ndarray:
    """Modal coefficients of the constant function (torus only)."""
    if geom.kind != "torus":
        raise ValueError("constant states are admissible only on the torus")
    c = geom.zeros()
    c[0] = value * np.sqrt(geom.measure)
    return c


def random_seeds(geom: Geometry, rng: np.random.Generator, count: int, scale: float = 1.0):
    """Displacement parts of seeded spectral noise states, rescaled to L^∞-size ``scale``."""
    seeds = []
    for _ in range(count):
        u = random_state(geom, rng, 1.0).u
        peak = np.max(np.abs(to_physical(geom, u)))
        seeds.append(u * (scale / peak) if peak > 0 else u)
    return seeds


@dataclass
class BoundCheck:
    lhs: float  # ∫ |Δe|² + β|e|²
    bound: float  # −meas · inf_{x,s} s f(x, s)
    identity_defect: float  # |lhs + ∫ f(x,e) e|

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.bound * (1 + 1e-9) + 1e-12


def _inf_sf(spec: Nonlinearity, span: float) -> float:
    geom = spec.geometry
    shape = geom.grid_shape
    s = np.linspace(-span, span, 20_001)
    coeffs = [np.broadcast_to(np.asarray(c.on(geom, shape), dtype=float), shape).ravel() for c in spec.coefficients]
    if not coeffs:
        return 0.0
    A = np.stack(coeffs, axis=1)  # (points, p)
    powers = np.stack([s ** (j + 2) for j in range(A.shape[1])])  # s·s^j
    vals = A @ powers
    i, k = np.unravel_index(np.argmin(vals), vals.shape)
    a = A[i]

    def sf(x):
        return float(sum(a[j] * x ** (j + 2) for j in range(a.size)))

    ds = s[1] - s[0]
    lo, hi = max(s[k] - ds, -span), min(s[k] + ds, span)
    best = minimize_scalar(sf, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return min(float(vals[i, k]), float(best.fun), 0.0)


def a_priori_bound(spec: Nonlinearity, eq: Equilibrium, span: float | None = None) -> BoundCheck:
    """Multiply the equilibrium equation by e: ∫|Δe|² + β|e|² = −∫ f(x,e) e ≤ −meas · inf sf."""
    geom = spec.geometry
    e = eq.e_hat
    lhs = float(np.sum(geom.omega_squared * e * e))
    if spec.degree == 0:
        return BoundCheck(lhs, 0.0, lhs)
    shape = spec.grid_shape()
    grid = to_physical(geom, e, shape=shape)
    work = float(geom.integrate(spec.values(grid, shape) * grid))
    if span is None:
        span = 10.0 * max(1.0, spec.radius, float(np.max(np.abs(grid))))
    bound = -geom.measure * _inf_sf(spec, span)
    return BoundCheck(lhs, bound, abs(lhs + work))


# ---------------------------------------------------------------- coasts


@dataclass
class CoastResult:
    duration: float
    target: int | None  # index of the equilibrium whose ball was entered
    end: ModalState
    samples: np.ndarray  # applied source g = ∓γ² v on the grid, one per step time
    max_speed: float  # max ‖∂t u‖_{L²} over the last sample
    dt: float
    sign: float

    @property
    def reached(self) -> bool:
        return self.target is not None


class CoastTimeout(NonConvergenceError):
    pass


def lasalle_coast(
    state: ModalState,
    equilibria: list[Equilibrium],
    radii,
    max_duration: float,
    spec: Nonlinearity,
    damping: DampingProfile,
    dt: float,
    sign: float = 1.0,
    exclude: int | None = None,
    chunk: float = 1.0,
) -> CoastResult:
    """Damped (sign=+1) or anti-damped (sign=−1) run until an equilibrium ball is entered.

    ``exclude`` ignores one equilibrium until the trajectory has left its ball.
    Raises CoastTimeout when ``max_duration`` elapses first.
    """
    geom = state.geometry
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(equilibria),))
    centers = np.array([eq.e_hat for eq in equilibria]) if equilibria else np.zeros((0, geom.n_modes))
    integ = PlateIntegrator(geom, spec, damping, damping_sign=sign)
    gsq = damping.gamma_squared()

    def hit(u, v):
        if not len(centers):
            return np.full(u.shape[0], -1), np.zeros((u.shape[0], 0))
        d = np.sqrt(np.sum(geom.omega_squared * (u[:, None, :] - centers[None]) ** 2, axis=-1)
                    + np.sum(v * v, axis=-1)[:, None])
        inside = d <= radii[None]
        return inside, d

    us, vs = [state.u[None]], [state.v[None]]
    armed = exclude is None
    n_chunk = max(1, int(round(chunk / dt)))
    n_max = int(round(max_duration / dt))
    done = 0
    u, v = state.u, state.v
    found = None
    k_hit = None
    # check the starting state as step 0
    pending_u, pending_v = state.u[None], state.v[None]
    while True:
        inside, _ = hit(pending_u, pending_v)
        for j in range(pending_u.shape[0]):
            row = inside[j]
            if not armed:
                if not row[exclude]:
                    armed = True
                else:
                    row = row.copy()
                    row[exclude] = False
            if np.any(row):
                found = int(np.argmax(row))
                k_hit = done - pending_u.shape[0] + 1 + j
                break
        if found is not None or done >= n_max:
            break
        take = min(n_chunk, n_max - done)
        traj = integ.run(u, v, dt, take, None, state.t + done * dt, energies=False)
        pending_u, pending_v = traj.u[1:], traj.v[1:]
        us.append(pending_u)
        vs.append(pending_v)
        u, v = traj.u[-1], traj.v[-1]
        done += take
    U = np.concatenate(us)
    V = np.concatenate(vs)
    if found is None:
        raise CoastTimeout(
            f"no equilibrium ball reached within {max_duration:g} (radii may be too small or the cap too short)",
            diagnostics={"final_distance": float(np.min(hit(U[-1:], V[-1:])[1])) if len(centers) else None},
        )
    U, V = U[: k_hit + 1], V[: k_hit + 1]
    samples = -sign * gsq * to_physical(geom, V)
    end = ModalState(U[-1], V[-1], geom, state.t + k_hit * dt)
    return CoastResult(k_hit * dt, found, end, samples, float(np.linalg.norm(V[-1])), dt, sign)


def coast_for(
    state: ModalState,
    duration: float,
    spec: Nonlinearity,
    damping: DampingProfile,
    dt: float,
    sign: float = 1.0,
) -> CoastResult:
    """Fixed-duration damped or anti-damped coast, recorded as open-loop samples."""
    geom = state.geometry
    n = int(round(duration / dt))
    integ = PlateIntegrator(geom, spec, damping, damping_sign=sign)
    traj = integ.run(state.u, state.v, dt, n, None, state.t, energies=False)
    samples = -sign * damping.gamma_squared() * to_physical(geom, traj.v)
    end = ModalState(traj.u[-1], traj.v[-1], geom, state.t + n * dt)
    return CoastResult(n * dt, None, end, samples, float(np.linalg.norm(traj.v[-1])), dt, sign)


def linear_decay_time(geom: Geometry, damping: DampingProfile, dt: float, horizon: float = 40.0, seed: int = 0) -> float:
    """Energy time constant 1/rate of the linear damped plate, fitted on [horizon/4, horizon]."""
    rng = np.random.default_rng(seed)
    st = random_state(geom, rng, 1.0)
    integ = PlateIntegrator(geom, None, damping)
    traj = integ.run(st.u, st.v, dt, int(round(horizon / dt)), record_every=max(1, int(round(0.05 / dt))))
    rate, _ = damped_decay_rate(traj.times, traj.energy, horizon / 4)
    if rate <= 0:
        raise NonConvergenceError("linear damped plate shows no decay; damping region too small?")
    return 1.0 / rate


def horizon_cap(geom: Geometry, damping: DampingProfile, dt: float, factor: float = 10.0) -> float:
    """``factor`` linear amplitude time constants (amplitude decays at half the energy rate)."""
    return factor * 2.0 * linear_decay_time(geom, damping, dt)


# ---------------------------------------------------------------- gradient diagnostic


@dataclass
class GradientDiagnostic:
    energy_increase: float  # max positive jump of E between samples (0 for a gradient flow)
    dissipation: float
    silent: bool
    max_speed: float
    equilibrium: Equilibrium | None

    @property
    def consistent(self) -> bool:
        if self.silent:
            return self.max_speed <= 1e-5 and self.equilibrium is not None
        return True


def gradient_diagnostic(traj, spec: Nonlinearity, silence: float = 1e-12) -> GradientDiagnostic:
    """Check E non-increasing; a silent run (dissipation ≤ ``silence``) must sit at an equilibrium."""
    energy = traj.energy
    jumps = np.diff(energy)
    scale = max(1.0, float(np.max(np.abs(energy))))
    increase = float(max(np.max(jumps, initial=0.0), 0.0)) / scale
    diss = float(traj.dissipation[-1])
    speed = float(np.max(np.linalg.norm(traj.v, axis=-1)))
    silent = diss <= silence
    eq = None
    if silent:
        try:
            eq = solve_equilibrium(spec, traj.u[0])
        except NonConvergenceError:
            eq = None
    return GradientDiagnostic(increase, diss, silent, speed, eq)


# ---------------------------------------------------------------- radius probe


def probe_radius(
    eq: Equilibrium,
    spec: Nonlinearity,
    cfg: HUMConfig,
    rng: np.random.Generator,
    r0: float = 1e-1,
    r_min: float = 1e-6,
    tol: float = 1e-9,
    tries: int = 1,
) -> float:
    """Largest r = r0 / 2^k for which local control between random states at distance r succeeds."""
    geom = spec.geometry
    rest = eq.state(geom)
    r = r0
    while r >= r_min:
        ok = True
        for _ in range(tries):
            a = rest + random_state(geom, rng, r)
            b = rest + random_state(geom, rng, r)
            try:
                sol = local_control(eq.e_hat, a, b, spec, cfg, tol=tol)
                ok = sol.terminal_error <= 10 * tol
            except NonConvergenceError:
                ok = False
            if not ok:
                break
        if ok:
            eq.radius = r
            return r
        r *= 0.5
    raise NonConvergenceError(f"no controllable radius above {r_min:g} at equilibrium {eq.index}")


def probe_radii(equilibria, spec, cfg, seed: int = 0, workers: int = 1, **kw) -> list[float]:
    def one(pair):
        i, eq = pair
        if eq.radius is not None:
            return eq.radius
        return probe_radius(eq, spec, cfg, np.random.default_rng([seed, i]), **kw)

    items = list(enumerate(equilibria))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, items))
    return [one(p) for p in items]


# ---------------------------------------------------------------- steering


@dataclass
class Leg:
    kind: str  # "damped-coast" | "backward-coast" | "local-control"
    t0: float
    duration: float
    start: ModalState
    end: ModalState
    equilibrium: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "t0": self.t0,
            "duration": self.duration,
            "equilibrium": self.equilibrium,
            "start_norm": self.start.x_norm(),
            "end_norm": self.end.x_norm(),
            "diagnostics": self.diagnostics,
        }


@dataclass
class Connection:
    """Damped coast from ``start`` (near equilibrium ``source``) into the ball of ``target``."""

    source: int
    target: int
    start: ModalState
    entry: ModalState
    duration: float


@dataclass
class SteeringPlan:
    legs: list = field(default_factory=list)
    route: list = field(default_factory=list)
    budget: dict = field(default_factory=dict)
    terminal_error: float = float("nan")
    checkpoint_errors: list = field(default_factory=list)

    @property
    def duration(self) -> float:
        return float(sum(leg.duration for leg in self.legs))

    def kinds(self) -> list[str]:
        return [leg.kind for leg in self.legs]

    def handoff_defects(self) -> list[float]:
        return [a.end.distance(b.start) for a, b in zip(self.legs, self.legs[1:])]

    def to_dict(self) -> dict:
        return {
            "legs": [leg.to_dict() for leg in self.legs],
            "route": self.route,
            "duration": self.duration,
            "budget": self.budget,
            "terminal_error": self.terminal_error,
            "checkpoint_errors": self.checkpoint_errors,
        }


class SteeringError(NonConvergenceError):
    def __init__(self, message, plan: SteeringPlan, leg: dict):
        super().__init__(message, diagnostics={"failing_leg": leg})
        self.plan = plan
        self.leg = leg


def discover_connections(
    equilibria: list[Equilibrium],
    spec: Nonlinearity,
    damping: DampingProfile,
    dt: float,
    max_duration: float,
    offset: float = 0.5,
) -> list[Connection]:
    """Coast off each unstable equilibrium along ± its unstable eigenvectors.

    The kick is ``offset`` times the equilibrium's radius in X-distance.
    """
    geom = spec.geometry
    radii = [eq.radius for eq in equilibria]
    out = []
    for eq in equilibria:
        for w in eq.unstable_directions.T:
            w = w / x_norm(geom, w, geom.zeros())
            for sgn in (1.0, -1.0):
                start = ModalState(eq.e_hat + sgn * offset * eq.radius * w, geom.zeros(), geom)
                try:
                    res = lasalle_coast(start, equilibria, radii, max_duration, spec, damping, dt, exclude=eq.index)
                except (CoastTimeout, BlowUpError) as exc:
                    log.info("connection probe from %d dropped: %s", eq.index, exc)
                    continue
                if res.target == eq.index:
                    continue
                out.append(Connection(eq.index, res.target, start, res.end, res.duration))
    return out


def _route(connections: list[Connection], first: int, last: int, equilibria, geom) -> list[tuple[int, Connection, str]]:
    """Greedy depth-first route with a visited set; next ball = nearest to the goal in X-distance."""
    if first == last:
        return []
    goal = equilibria[last].e_hat

    def neighbours(i):
        steps = []
        for c in connections:
            if c.source == i:
                steps.append((c.target, c, "down"))
            elif c.target == i:
                steps.append((c.source, c, "up"))
        steps.sort(key=lambda s: x_norm(geom, equilibria[s[0]].e_hat - goal, geom.zeros()))
        return steps

    visited = {first}

    def dfs(i):
        if i == last:
            return []
        for j, c, how in neighbours(i):
            if j in visited:
                continue
            visited.add(j)
            rest = dfs(j)
            if rest is not None:
                return [(j, c, how)] + rest
        return None

    path = dfs(first)
    if path is None:
        raise NonConvergenceError(f"no known connection chain from equilibrium {first} to {last}")
    return path


def _flip(state: ModalState) -> ModalState:
    return ModalState(state.u, -state.v, state.geometry, state.t)


def plan_steering(
    U0: ModalState,
    U1: ModalState,
    spec: Nonlinearity,
    damping: DampingProfile,
    equilibria: list[Equilibrium],
    cfg: HUMConfig,
    coast_dt: float | None = None,
    max_coast: float | None = None,
    tol: float = 1e-10,
    connections: list[Connection] | None = None,
) -> tuple[SteeringPlan, ControlSolution]:
    """Chain coasts and local controls from U0 to U1 and certify by one re-simulation.

    Every equilibrium needs a probed radius. Raises SteeringError with the
    partial plan when a leg fails.
    """
    geom = spec.geometry
    dt = cfg.dt if coast_dt is None else coast_dt
    if any(eq.radius is None for eq in equilibria):
        raise ValueError("probe the equilibrium radii first")
    radii = [eq.radius for eq in equilibria]
    if max_coast is None:
        max_coast = horizon_cap(geom, damping, dt)
    plan = SteeringPlan()
    segments: list[ControlSegment] = []
    clock = [U0.t]

    def push(leg: Leg, segs):
        plan.legs.append(leg)
        for s in segs:
            s.t0 = clock[0]
            clock[0] += s.duration
            segments.append(s)

    def fail(msg, leg):
        raise SteeringError(msg, plan, leg)

    if U0.distance(U1) == 0 and any(U0.distance(eq.state(geom)) == 0 for eq in equilibria):
        seg = ControlSegment(U0.t, cfg.dt, np.zeros((1,) + geom.grid_shape), "empty")
        sol = ControlSolution(geom, [seg], terminal_error=0.0)
        plan.terminal_error = 0.0
        plan.budget = {"T0": 0.0, "TA": 0.0, "N": 0, "tau": 2 * cfg.T, "T_max": 0.0}
        return plan, sol

    # entry coast: U0 into some ball
    try:
        head = lasalle_coast(U0, equilibria, radii, max_coast, spec, damping, dt)
    except (CoastTimeout, BlowUpError) as exc:
        fail(f"initial coast failed: {exc}", {"kind": "damped-coast", "error": str(exc)})
    # exit coast: flipped target forward, to be replayed backward at the end
    try:
        tail = lasalle_coast(_flip(U1), equilibria, radii, max_coast, spec, damping, dt)
    except (CoastTimeout, BlowUpError) as exc:
        fail(f"final coast failed: {exc}", {"kind": "backward-coast", "error": str(exc)})

    if connections is None and head.target != tail.target:
        connections = discover_connections(equilibria, spec, damping, dt, max_coast)
    try:
        path = _route(connections or [], head.target, tail.target, equilibria, geom)
    except NonConvergenceError as exc:
        fail(str(exc), {"kind": "route", "from": head.target, "to": tail.target})
    plan.route = [head.target] + [j for j, _, _ in path]

    if head.duration > 0:
        push(Leg("damped-coast", clock[0], head.duration, U0, head.end, head.target),
             [ControlSegment(0.0, dt, head.samples, "coast", None, 1.0)])
    current = ModalState(head.end.u, head.end.v, geom)
    here = head.target

    def local(goal: ModalState):
        nonlocal current
        eq = equilibria[here]
        diag = {"equilibrium": here, "start_distance": current.distance(eq.state(geom)),
                "end_distance": goal.distance(eq.state(geom)), "radius": eq.radius}
        try:
            sol = local_control(eq.e_hat, current, goal, spec, cfg, tol=tol)
        except NonConvergenceError as exc:
            diag.update(error=str(exc), history=[float(h) for h in exc.history][-5:])
            fail(f"local control at equilibrium {here} failed: {exc}", {"kind": "local-control", **diag})
        end = resimulate(sol, current, spec)
        diag.update(terminal_error=sol.terminal_error, iterations=sol.diagnostics.get("phase_iterations"))
        if sol.terminal_error > HANDOFF_TOL:
            fail("local control missed its handoff tolerance", {"kind": "local-control", **diag})
        push(Leg("local-control", clock[0], sol.duration, current, end, here, diag), sol.segments)
        current = ModalState(end.u, end.v, geom)

    def coast(duration, sign, goal_eq):
        nonlocal current
        try:
            res = coast_for(current, duration, spec, damping, dt, sign)
        except BlowUpError as exc:
            fail(f"coast blew up: {exc}", {"kind": "coast", "error": str(exc)})
        kind = "damped-coast" if sign > 0 else "backward-coast"
        push(Leg(kind, clock[0], res.duration, current, res.end, goal_eq,
                 {"distance_to_equilibrium": res.end.distance(equilibria[goal_eq].state(geom))}),
             [ControlSegment(0.0, dt, res.samples, "coast", None, sign)])
        current = ModalState(res.end.u, res.end.v, geom)

    coast_times = []
    for nxt, conn, how in path:
        if how == "down":
            local(conn.start)
            coast(conn.duration, 1.0, nxt)
        else:
            local(_flip(conn.entry))
            coast(conn.duration, -1.0, nxt)
        coast_times.append(conn.duration)
        here = nxt
    # last ball: steer to the flipped end of the exit coast, then replay it backward
    local(_flip(tail.end))
    if tail.duration > 0:
        coast(tail.duration, -1.0, here)
        plan.legs[-1].equilibrium = None

    sol = ControlSolution(geom, segments)
    states = resimulate(sol, U0, spec, return_states=True)
    final = states[-1]
    sol.terminal_error = final.distance(U1)
    plan.terminal_error = sol.terminal_error
    # leg boundaries in the re-simulation versus the plan
    seg_end = np.cumsum([s.duration for s in segments]) + U0.t
    leg_end = [leg.t0 + leg.duration for leg in plan.legs]
    for leg, t_end in zip(plan.legs, leg_end):
        j = int(np.argmin(np.abs(seg_end - t_end)))
        plan.checkpoint_errors.append(states[j].distance(leg.end))
    tau = 2.0 * cfg.T
    T0 = max(head.duration, tail.duration)
    TA = max(coast_times, default=0.0)
    N = len(plan.route)
    plan.budget = {
        "T0": T0,
        "TA": TA,
        "N": N,
        "tau": tau,
        "T_max": 2 * T0 + 2 * TA + N * (TA + tau),
        "measured": plan.duration,
    }
    sol.diagnostics = {"plan": plan.to_dict()}
    return plan, sol
