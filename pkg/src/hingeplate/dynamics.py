"""Time integration of the free, damped and forced plate.

The integrator is a kick-rotate-kick splitting: the linear part
u'' + (Δ² + β)u = 0 is advanced exactly per mode, and everything else
(nonlinear force, optional linear potential, damping, source) enters as two
half kicks on the velocity. The closing half kick treats the damping
implicitly, so over consecutive steps damping acts through the trapezoid rule
on the sampled velocities. Two consequences used throughout the package:

* the energy balance closes exactly against the trapezoid sum of the sampled
  dissipation rate v·Γv, up to the conservative splitting error;
* a run with damping matrix D is reversed exactly by the velocity-flipped
  run with -D, so backward solves are forward solves of the flipped system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    BlowUpError,
    DampingProfile,
    Nonlinearity,
    check_amplitude,
    energy_parts,
)
from .spectral import (
    Geometry,
    ModalState,
    from_physical,
    projection_matrix,
    to_physical,
    x_norm,
)

BLOWUP_NORM = 1e8


def linear_propagate(state: ModalState, dt: float) -> ModalState:
    """Exact flow of u'' + Δ²u + βu = 0 over time dt."""
    geom = state.geometry
    c, s_over_w, w_s = _rotation_factors(geom.frequencies, dt)
    u = c * state.u + s_over_w * state.v
    v = -w_s * state.u + c * state.v
    return ModalState(u, v, geom, state.t + dt)


def time_reverse(state: ModalState) -> ModalState:
    return ModalState(state.u.copy(), -state.v, state.geometry, state.t)


def _rotation_factors(freq: np.ndarray, dt: float):
    phase = freq * dt
    c = np.cos(phase)
    s = np.sin(phase)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_over_w = np.where(freq > 0, s / np.where(freq > 0, freq, 1.0), dt)
    return c, s_over_w, freq * s


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    """Sampled run of the plate. ``u`` and ``v`` have shape (n_samples, ..., n_modes)."""

    geometry: Geometry
    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    dissipation: np.ndarray  # cumulative damping work at each sample
    kinetic: np.ndarray | None = None
    bending: np.ndarray | None = None
    mass: np.ndarray | None = None
    potential: np.ndarray | None = None

    @property
    def energy(self) -> np.ndarray:
        if self.kinetic is None:
            raise ValueError("energies were not recorded for this run")
        return self.kinetic + self.bending + self.mass + self.potential

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def state(self, i: int) -> ModalState:
        return ModalState(self.u[i], self.v[i], self.geometry, float(self.times[i]))

    @property
    def initial(self) -> ModalState:
        return self.state(0)

    @property
    def final(self) -> ModalState:
        return self.state(-1)

    def norm_x(self) -> np.ndarray:
        return np.array([x_norm(self.geometry, a, b) for a, b in zip(self.u, self.v)])


@dataclass
class SimOptions:
    """Run parameters. ``control`` holds modal source samples at every step time."""

    dt: float
    T: float
    nonlinearity: Nonlinearity | None = None
    damping: DampingProfile | None = None
    damping_on: bool = True
    damping_sign: float = 1.0
    potential: np.ndarray | float | None = None
    control: np.ndarray | None = None
    direction: int = 1
    center: np.ndarray | None = None
    record_every: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < 0:
            raise ValueError("T must be non-negative")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"T/dt = {n} is not an integer")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


# ---------------------------------------------------------------- integrator


class PlateIntegrator:
    """u'' + (Δ²+β)u + Qu + f(x,u) + D u' = s(t) on the modal space.

    ``damping`` is a profile (D = sign·P γ² P) or an explicit matrix;
    ``potential`` is a grid function V(x) (Q = P V P) or a constant;
    ``center`` shifts the variables so that the state c is simulated as 0,
    which keeps an equilibrium c an exact fixed point of the discrete flow.
    """

    def __init__(
        self,
        geom: Geometry,
        nonlinearity: Nonlinearity | None = None,
        damping: DampingProfile | np.ndarray | None = None,
        damping_sign: float = 1.0,
        potential: np.ndarray | float | None = None,
        center: np.ndarray | None = None,
    ):
        self.geometry = geom
        self.nonlinearity = nonlinearity if nonlinearity is not None and nonlinearity.degree > 0 else None
        if isinstance(damping, DampingProfile):
            damping = damping.matrix()
        self.damping = None if damping is None or damping_sign == 0 else damping_sign * np.asarray(damping)
        self.potential = self._potential_matrix(potential)
        self.center = None if center is None or not np.any(center) else np.array(center, dtype=float)
        self._offset = None
        if self.center is not None:
            self._offset = geom.omega_squared * self.center
        self._cache: dict = {}
        self._shape = self.nonlinearity.grid_shape() if self.nonlinearity else None

    def _potential_matrix(self, potential):
        if potential is None:
            return None
        geom = self.geometry
        if np.isscalar(potential):
            if potential == 0:
                return None
            return float(potential) * np.eye(geom.n_modes)
        potential = np.asarray(potential, dtype=float)
        if not np.any(potential):
            return None
        return projection_matrix(geom, potential)

    def reversed(self) -> "PlateIntegrator":
        """Integrator of the velocity-flipped system (damping sign flipped)."""
        other = PlateIntegrator.__new__(PlateIntegrator)
        other.__dict__.update(self.__dict__)
        other.damping = None if self.damping is None else -self.damping
        other._cache = {}
        return other

    # -- force pieces -------------------------------------------------

    def force(self, z: np.ndarray, t: float | None = None) -> np.ndarray:
        """Q u + P f(u) (+ (Δ²+β) c in the shifted frame), with u = z + c."""
        u = z if self.center is None else z + self.center
        out = np.zeros_like(z)
        if self.potential is not None:
            out = out + u @ self.potential
        if self.nonlinearity is not None:
            grid = to_physical(self.geometry, u, shape=self._shape)
            check_amplitude(grid, t)
            out = out + from_physical(self.geometry, self.nonlinearity.values(grid, self._shape))
        if self._offset is not None:
            out = out + self._offset
        return out

    def _factors(self, dt: float):
        key = float(dt)
        if key not in self._cache:
            rot = _rotation_factors(self.geometry.frequencies, dt)
            inv = None
            if self.damping is not None:
                inv = np.linalg.inv(np.eye(self.geometry.n_modes) + 0.5 * dt * self.damping)
            self._cache[key] = (rot, inv)
        return self._cache[key]

    # -- stepping -----------------------------------------------------

    def step(self, z, w, dt, s_now=None, s_next=None, force_now=None, t=0.0):
        """One step from (z, w) at time t; returns (z, w, force at the new state, damping work)."""
        (c, s_over_w, w_s), inv = self._factors(dt)
        h2 = 0.5 * dt
        f0 = self.force(z, t) if force_now is None else force_now
        kick = -f0 if s_now is None else s_now - f0
        work = 0.0
        if self.damping is not None:
            dv = w @ self.damping
            w_half = w + h2 * (kick - dv)
            work = h2 * np.sum(dv * 0.5 * (w + w_half), axis=-1)
        else:
            w_half = w + h2 * kick
        z_new = c * z + s_over_w * w_half
        w_rot = -w_s * z + c * w_half
        f1 = self.force(z_new, t + dt)
        kick = -f1 if s_next is None else s_next - f1
        rhs = w_rot + h2 * kick
        if inv is not None:
            w_new = rhs @ inv.T
            dv = w_new @ self.damping
            work = work + h2 * np.sum(dv * 0.5 * (w_rot + w_new), axis=-1)
        else:
            w_new = rhs
        return z_new, w_new, f1, work

    def run(
        self,
        u0: np.ndarray,
        v0: np.ndarray,
        dt: float,
        n_steps: int,
        source: np.ndarray | None = None,
        t0: float = 0.0,
        record_every: int = 1,
        energies: bool = True,
        direction: int = 1,
    ) -> Trajectory:
        """Advance ``n_steps`` steps; ``source`` has shape (n_steps+1, ..., n_modes).

        With ``direction=-1`` the data are terminal values at ``t0`` and the
        run goes backward in time to ``t0 - n_steps*dt``; the returned
        trajectory is in increasing time order.
        """
        if direction == -1:
            src = None if source is None else np.asarray(source)[::-1]
            traj = self.reversed().run(
                u0, -np.asarray(v0, dtype=float), dt, n_steps, src, 0.0, record_every, False, 1
            )
            times = t0 - traj.times[::-1]
            out = Trajectory(
                self.geometry, times, traj.u[::-1].copy(), -traj.v[::-1],
                traj.dissipation[::-1] - traj.dissipation[-1],
            )
            if energies:
                self._attach_energies(out)
            return out

        geom = self.geometry
        z = np.array(u0, dtype=float)
        w = np.array(v0, dtype=float)
        if self.center is not None:
            z = z - self.center
        if source is not None:
            source = np.asarray(source, dtype=float)
            if source.shape[0] != n_steps + 1:
                raise ValueError(f"source needs {n_steps + 1} samples, got {source.shape[0]}")
        n_rec = n_steps // record_every + 1
        us = np.empty((n_rec,) + z.shape)
        vs = np.empty((n_rec,) + w.shape)
        diss = np.zeros((n_rec,) + z.shape[:-1])
        times = t0 + dt * record_every * np.arange(n_rec)
        us[0], vs[0] = z, w
        total = np.zeros(z.shape[:-1])
        f_now = None
        t = t0
        for n in range(n_steps):
            s_now = None if source is None else source[n]
            s_next = None if source is None else source[n + 1]
            z, w, f_now, work = self.step(z, w, dt, s_now, s_next, f_now, t)
            total = total + work
            t = t0 + (n + 1) * dt
            if (n + 1) % record_every == 0:
                norm = np.max(x_norm(geom, z, w))
                if not np.isfinite(norm) or norm > BLOWUP_NORM:
                    raise BlowUpError(f"X-norm {norm:.3g} exceeds {BLOWUP_NORM:g}", t)
                i = (n + 1) // record_every
                us[i], vs[i], diss[i] = z, w, total
        if self.center is not None:
            us += self.center
        traj = Trajectory(geom, times, us, vs, diss)
        if energies:
            self._attach_energies(traj)
        return traj

    def _attach_energies(self, traj: Trajectory) -> None:
        spec = self.nonlinearity
        kin, bend, mass, pot = energy_parts(self.geometry, spec, traj.u, traj.v)
        traj.kinetic, traj.bending, traj.mass, traj.potential = kin, bend, mass, pot


def integrator_for(geom: Geometry, opts: SimOptions) -> PlateIntegrator:
    damping = opts.damping if opts.damping_on else None
    return PlateIntegrator(geom, opts.nonlinearity, damping, opts.damping_sign, opts.potential, opts.center)


def step(state: ModalState, dt: float, opts: SimOptions) -> ModalState:
    """One splitting step; ``opts.control`` holds the two source samples of the step,
    first at the current time, then at the time reached (in the direction of travel)."""
    integ = integrator_for(state.geometry, opts)
    src = None if opts.control is None else opts.control
    s_now = None if src is None else src[0]
    s_next = None if src is None else src[1]
    z = state.u if integ.center is None else state.u - integ.center
    if opts.direction == -1:
        integ = integ.reversed()
        z, w, _, _ = integ.step(z, -state.v, dt, s_now, s_next, None, 0.0)
        w = -w
        t = state.t - dt
    else:
        z, w, _, _ = integ.step(z, state.v, dt, s_now, s_next, None, state.t)
        t = state.t + dt
    u = z if integ.center is None else z + integ.center
    norm = x_norm(state.geometry, u, w)
    if not np.isfinite(norm) or norm > BLOWUP_NORM:
        raise BlowUpError(f"X-norm {norm:.3g} exceeds {BLOWUP_NORM:g}", t)
    return ModalState(u, w, state.geometry, t)


def simulate(state0: ModalState, opts: SimOptions) -> Trajectory:
    """Repeated steps with energy and cumulative dissipation samples."""
    integ = integrator_for(state0.geometry, opts)
    return integ.run(
        state0.u, state0.v, opts.dt, opts.n_steps, opts.control, state0.t,
        opts.record_every, True, opts.direction,
    )


def solve_adjoint(
    geom: Geometry,
    phi0: np.ndarray,
    phi1: np.ndarray,
    potential: np.ndarray | float | None,
    T: float,
    dt: float,
) -> Trajectory:
    """Φ'' + Δ²Φ + βΦ + V(x)Φ = 0 forward from (Φ0, Φ1) at t = 0."""
    opts = SimOptions(dt=dt, T=T)  # validates T/dt
    integ = PlateIntegrator(geom, potential=potential)
    return integ.run(phi0, phi1, dt, opts.n_steps, energies=False)


def schrodinger_propagate(v0: np.ndarray, eigenvalues: np.ndarray, T: float, dt: float):
    """Exact modal phases of e^{itΔ}: v_k(t) = e^{-iλ_k t} v_k(0). Returns (times, samples)."""
    n = int(round(T / dt)) if T > 0 else 0
    times = np.linspace(0.0, T, n + 1) if n > 0 else np.array([0.0])
    v0 = np.asarray(v0, dtype=complex)
    phases = np.exp(-1j * np.outer(times, eigenvalues))
    return times, phases * v0


def damped_decay_rate(times: np.ndarray, energy: np.ndarray, t_min: float = 0.0):
    """Least-squares fit log E ≈ a - rate·t on t >= t_min. Returns (rate, r_squared)."""
    sel = (times >= t_min) & (energy > 0)
    t = times[sel]
    y = np.log(energy[sel])
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(-slope), float(r2)
