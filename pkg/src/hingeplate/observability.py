"""Truncated observability Gramians for the Schrödinger group and the plate.

The smallest Gramian eigenvalue μ_min is the best constant in
‖data‖² ≤ (1/μ_min) ∫_0^T ‖observation‖² dt restricted to the retained modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .dynamics import PlateIntegrator, SimOptions, simulate
from .model import DampingProfile, Nonlinearity
from .spectral import (
    Geometry,
    ModalState,
    projection_matrix,
    sobolev_weights,
)

OBSERVABLE_FLOOR = 1e-12
PLATE_MODES = ("boundary", "torus", "potential")


@dataclass
class GramianReport:
    T: float
    n_modes: int
    mu_min: float
    dt: float
    eigenvalues: np.ndarray = field(repr=False)
    gramian: np.ndarray = field(repr=False)
    history: list = field(default_factory=list)

    @property
    def c_obs(self) -> float:
        return float("inf") if self.mu_min <= 0 else 1.0 / self.mu_min

    @property
    def observable(self) -> bool:
        return self.mu_min >= OBSERVABLE_FLOOR

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "n_modes": self.n_modes,
            "mu_min": self.mu_min,
            "c_obs": self.c_obs if np.isfinite(self.c_obs) else None,
            "observable": self.observable,
            "dt": self.dt,
            "history": self.history,
        }


def _trapezoid_weights(n_steps: int, dt: float) -> np.ndarray:
    w = np.full(n_steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    if n_steps == 0:
        w[:] = 0.0
    return w


def _report(G: np.ndarray, T: float, dt: float) -> GramianReport:
    G = 0.5 * (G + G.conj().T)
    evals = eigh(G, eigvals_only=True)
    mu = float(max(evals[0].real, 0.0))
    return GramianReport(T, G.shape[0], mu, dt, evals.real, G)


# ---------------------------------------------------------------- regions


def _interval_integral(kind: str, i: int, j: int, lo: float, hi: float) -> float:
    """∫_lo^hi φ_i φ_j dx for 1D basis positions i, j (closed form)."""
    def terms(pos):
        if kind == "hinged":
            return [(pos + 1, "s", np.sqrt(2.0 / np.pi))]
        k = (pos + 1) // 2
        if pos == 0:
            return [(0, "c", 1.0 / np.sqrt(2.0 * np.pi))]
        return [(k, "c" if pos % 2 == 1 else "s", 1.0 / np.sqrt(np.pi))]

    def prim_cos(m, x):  # ∫ cos(m x)
        return x if m == 0 else np.sin(m * x) / m

    def prim_sin(m, x):  # ∫ sin(m x)
        return 0.0 if m == 0 else -np.cos(m * x) / m

    (a, ta, ca), = terms(i)
    (b, tb, cb), = terms(j)
    # product-to-sum identities
    if ta == "c" and tb == "c":
        val = 0.5 * (prim_cos(a - b, hi) - prim_cos(a - b, lo) + prim_cos(a + b, hi) - prim_cos(a + b, lo))
    elif ta == "s" and tb == "s":
        val = 0.5 * (prim_cos(a - b, hi) - prim_cos(a - b, lo) - prim_cos(a + b, hi) + prim_cos(a + b, lo))
    else:
        s_, c_ = (a, b) if ta == "s" else (b, a)
        # sin(s x) cos(c x) = [sin((s+c)x) + sin((s-c)x)] / 2
        d = s_ - c_
        sign = 1.0 if d >= 0 else -1.0
        val = 0.5 * (prim_sin(s_ + c_, hi) - prim_sin(s_ + c_, lo)
                     + sign * (prim_sin(abs(d), hi) - prim_sin(abs(d), lo)))
    return float(ca * cb * val)


def region_mass_matrix(geom: Geometry, boxes) -> np.ndarray:
    """Exact ∫_ω φ_k φ_l over a union of disjoint axis-aligned boxes."""
    n = geom.n_modes
    M = np.zeros((n, n))
    for box in boxes:
        per_dir = []
        for d, (lo, hi) in enumerate(box):
            m = geom.modes[d]
            tab = np.array([[_interval_integral(geom.kind, i, j, lo, hi) for j in range(m)] for i in range(m)])
            per_dir.append(tab)
        block = np.ones((n, n))
        for d, tab in enumerate(per_dir):
            pos = geom.positions[:, d]
            block = block * tab[np.ix_(pos, pos)]
        M += block
    return 0.5 * (M + M.T)


def _normalise_boxes(geom: Geometry, region):
    if isinstance(region, DampingProfile):
        return region.boxes
    arr = region
    if geom.dim == 1 and len(arr) == 2 and np.isscalar(arr[0]):
        return [[tuple(arr)]]
    if np.isscalar(arr[0][0]):
        return [arr]
    return arr


# ---------------------------------------------------------------- Schrödinger


def schrodinger_gramian(
    geom: Geometry,
    region,
    T: float,
    dt: float,
    weight: str = "indicator",
) -> GramianReport:
    """G_{kl} = ∫_0^T ⟨1_ω e^{itΔ}φ_k, 1_ω e^{itΔ}φ_l⟩ dt with exact phases.

    ``region`` is a box list (indicator, integrated exactly) or a
    DampingProfile (``weight="smooth"`` uses its bump b_ω = γ/γ0 on the grid).
    """
    if weight == "smooth":
        if not isinstance(region, DampingProfile):
            raise ValueError("smooth weight needs a DampingProfile")
        b = region.gamma() / region.gamma0
        mass = projection_matrix(geom, b**2)
    else:
        mass = region_mass_matrix(geom, _normalise_boxes(geom, region))
    n_steps = int(round(T / dt)) if T > 0 else 0
    times = np.linspace(0.0, T, n_steps + 1) if n_steps else np.array([0.0])
    weights = _trapezoid_weights(n_steps, dt)
    lam = geom.eigenvalues
    # only λ_k - λ_l enters; sum the phase over time once per distinct difference
    diff = lam[:, None] - lam[None, :]
    uniq, inv = np.unique(diff, return_inverse=True)
    phase_sums = (weights[None, :] * np.exp(1j * np.outer(uniq, times))).sum(axis=1)
    G = mass * phase_sums[inv.reshape(diff.shape)]
    return _report(G, T, dt)


# ---------------------------------------------------------------- plate


def plate_gramian(
    geom: Geometry,
    observer: DampingProfile,
    T: float,
    dt: float,
    potential: np.ndarray | float | None = None,
    mode: str = "potential",
    s: float = 0.0,
) -> GramianReport:
    """Gramian of the plate observation map over X^s-normalised basis data.

    Modes:
      ``"boundary"``  observes b_ω Δz in H_D^s, data in H_D^{2+s} × H_D^s;
      ``"torus"``     observes b_ω z in H^{2+s}, data in H^{2+s} × H^s;
      ``"potential"`` observes γ z in H_D², data in H_D² × L² (s ignored).
    b_ω is the bump γ/γ0 of the profile. Basis data are normalised in the
    left-hand norm, so μ_min lower-bounds the observability inequality.
    """
    if mode not in PLATE_MODES:
        raise ValueError(f"mode must be one of {PLATE_MODES}")
    n = geom.n_modes
    if mode == "potential":
        s = 0.0
        weight = observer.gamma()
        obs_s = 2.0
    else:
        weight = observer.gamma() / observer.gamma0
        obs_s = s if mode == "boundary" else 2.0 + s
    left_u = sobolev_weights(geom, 2.0 + s)
    left_v = sobolev_weights(geom, s)
    # basis data: (e_k / left_u, 0) then (0, e_k / left_v), batched as columns
    u0 = np.concatenate([np.diag(1.0 / left_u), np.zeros((n, n))], axis=0)
    v0 = np.concatenate([np.zeros((n, n)), np.diag(1.0 / left_v)], axis=0)
    integ = PlateIntegrator(geom, potential=potential)
    n_steps = int(round(T / dt)) if T > 0 else 0
    obs = projection_matrix(geom, weight) * sobolev_weights(geom, obs_s)
    if mode == "boundary":
        obs = -geom.eigenvalues[:, None] * obs
    w = _trapezoid_weights(n_steps, dt)
    G = np.zeros((2 * n, 2 * n))
    u, v, done = u0, v0, 0
    chunk = max(1, 4_000_000 // (4 * n * n))
    while True:
        take = min(chunk, n_steps - done)
        traj = integ.run(u, v, dt, take, energies=False)
        start = 0 if done == 0 else 1
        y = traj.u[start:] @ obs  # (t, 2n, n)
        G += np.einsum("t,tin,tjn->ij", w[done + start: done + take + 1], y, y)
        done += take
        u, v = traj.u[-1], traj.v[-1]
        if done >= n_steps:
            break
    return _report(G, T, dt)


# ---------------------------------------------------------------- nonlinear check


@dataclass
class NonlinearObservabilityReport:
    ratios: np.ndarray
    energies: np.ndarray
    dissipations: np.ndarray
    skipped: int
    flagged: int

    @property
    def constant(self) -> float:
        return float(np.max(self.ratios)) if self.ratios.size else 0.0


def check_nonlinear_observability(
    initial_states: list[ModalState],
    nonlinearity: Nonlinearity | None,
    damping: DampingProfile,
    T: float,
    dt: float,
) -> NonlinearObservabilityReport:
    """Ratio E(U(0)) / ∬γ²|∂t u|² over [0, T] for each initial state."""
    ratios, energies, diss = [], [], []
    skipped = flagged = 0
    for st in initial_states:
        opts = SimOptions(dt=dt, T=T, nonlinearity=nonlinearity, damping=damping)
        traj = simulate(st, opts)
        e0 = float(traj.energy[0])
        d = float(traj.dissipation[-1])
        if e0 == 0.0 and d == 0.0:
            skipped += 1
            continue
        if d < 1e-14:
            flagged += 1
            continue
        ratios.append(e0 / d)
        energies.append(e0)
        diss.append(d)
    return NonlinearObservabilityReport(np.array(ratios), np.array(energies), np.array(diss), skipped, flagged)
