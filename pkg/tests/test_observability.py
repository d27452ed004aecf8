import numpy as np
import pytest
from scipy.integrate import quad

from hingeplate.model import damping_profile, full_damping, polynomial
from hingeplate.observability import (
    check_nonlinear_observability,
    plate_gramian,
    region_mass_matrix,
    schrodinger_gramian,
)
from hingeplate.spectral import ModalState, basis_functions_1d, build_geometry, random_state


@pytest.fixture
def torus16():
    return build_geometry("torus", 1, 16, beta=1.0)


def test_full_observation_gives_time_times_identity(torus16):
    rep = schrodinger_gramian(torus16, [(0.0, 2 * np.pi)], T=1.5, dt=1e-2)
    np.testing.assert_allclose(rep.gramian, 1.5 * np.eye(16), atol=1e-10)


def test_zero_horizon_is_unobservable(torus16):
    rep = schrodinger_gramian(torus16, [(0.0, np.pi / 2)], T=0.0, dt=1e-2)
    assert rep.mu_min == 0.0
    assert not rep.observable
    assert rep.c_obs == float("inf")


@pytest.mark.parametrize("n", [16, 32])
def test_quarter_interval_closed_form(n):
    geom = build_geometry("torus", 1, n, beta=1.0)
    rep = schrodinger_gramian(geom, [(0.0, np.pi / 2)], T=2 * np.pi, dt=np.pi / 100)
    assert rep.mu_min == pytest.approx(np.pi / 2 - 1, rel=1e-9)


def brute_force_gramian(geom, lo, hi, T, dt, n_x=400):
    """Midpoint rule in space, trapezoid in time, explicit complex modes."""
    x = lo + (hi - lo) * (np.arange(n_x) + 0.5) / n_x
    phi = basis_functions_1d(geom.kind, geom.n_modes, x)
    n_t = int(round(T / dt))
    times = np.linspace(0, T, n_t + 1)
    w = np.full(n_t + 1, dt)
    w[[0, -1]] *= 0.5
    G = np.zeros((geom.n_modes, geom.n_modes), dtype=complex)
    for t, wt in zip(times, w):
        psi = phi * np.exp(-1j * geom.eigenvalues * t)
        G += wt * (hi - lo) / n_x * psi.conj().T @ psi
    return G


def test_quarter_interval_against_brute_force():
    geom = build_geometry("torus", 1, 17, beta=1.0)  # |k| <= 8
    T, dt = 2 * np.pi, np.pi / 50
    rep = schrodinger_gramian(geom, [(0.0, np.pi / 2)], T=T, dt=dt)
    G = brute_force_gramian(geom, 0.0, np.pi / 2, T, dt / 10)
    mu = np.linalg.eigvalsh(0.5 * (G + G.conj().T))[0]
    assert rep.mu_min == pytest.approx(mu, rel=1e-2)


def test_region_mass_matrix_against_quadrature(torus16):
    mass = region_mass_matrix(torus16, [[(0.3, 1.7)]])
    for i, j in [(0, 0), (1, 2), (3, 7), (5, 5)]:
        ref, _ = quad(lambda x: (basis_functions_1d("torus", 16, np.array([x]))[0, [i, j]]).prod(), 0.3, 1.7)
        assert mass[i, j] == pytest.approx(ref, abs=1e-12)


def test_plate_gramian_diagonal_closed_form():
    geom = build_geometry("hinged", 1, 8)
    T = 1.0
    rep = plate_gramian(geom, full_damping(geom, 1.0), T=T, dt=1e-3)
    w = geom.frequencies
    expected = T / 2 + np.sin(2 * w * T) / (4 * w)
    np.testing.assert_allclose(np.diag(rep.gramian)[:8], expected, atol=1e-3)


def test_plate_gramian_symmetry_and_monotonicity(hinged16, middle_damping):
    reps = [plate_gramian(hinged16, middle_damping, T=T, dt=1e-2) for T in (1.0, 2.0, 4.0)]
    for rep in reps:
        np.testing.assert_allclose(rep.gramian, rep.gramian.T, atol=1e-14)
        assert rep.mu_min > 0
    mus = [r.mu_min for r in reps]
    assert mus[0] < mus[1] < mus[2]


def test_plate_gramian_grows_with_region(hinged16):
    small = damping_profile(hinged16, (1.2, 1.8), delta=0.3)
    large = damping_profile(hinged16, (0.8, 2.2), delta=0.3)
    assert plate_gramian(hinged16, small, 2.0, 1e-2).mu_min < plate_gramian(hinged16, large, 2.0, 1e-2).mu_min


def test_small_potential_moves_mu_min_slightly(hinged16, middle_damping):
    base = plate_gramian(hinged16, middle_damping, 2.0, 1e-2).mu_min
    moved = plate_gramian(hinged16, middle_damping, 2.0, 1e-2, potential=1e-3).mu_min
    assert abs(moved - base) <= 0.05 * base


@pytest.mark.parametrize("mode", ["boundary", "torus"])
def test_other_plate_modes_positive(mode):
    geom = build_geometry("torus", 1, 9, beta=1.0) if mode == "torus" else build_geometry("hinged", 1, 9)
    prof = damping_profile(geom, (0.5, 1.5))
    assert plate_gramian(geom, prof, 2.0, 1e-2, mode=mode).mu_min > 0


def test_plate_gramian_rejects_unknown_mode(hinged16, middle_damping):
    with pytest.raises(ValueError):
        plate_gramian(hinged16, middle_damping, 1.0, 1e-2, mode="wave")


def damped_mode_ratio(w, T):
    """E(0) / (E(0) - E(T)) for u'' + u' + w² u = 0 with u(0) = 1, u'(0) = 0."""
    nu = np.sqrt(w * w - 0.25)
    u = np.exp(-T / 2) * (np.cos(nu * T) + np.sin(nu * T) / (2 * nu))
    v = -np.exp(-T / 2) * (w * w / nu) * np.sin(nu * T)
    e0 = 0.5 * w * w
    return e0 / (e0 - 0.5 * (v * v + w * w * u * u))


def test_nonlinear_observability_linear_closed_form():
    geom = build_geometry("hinged", 1, 4)
    states = [ModalState(np.eye(4)[k], np.zeros(4), geom) for k in range(2)]
    rep = check_nonlinear_observability(states, None, full_damping(geom, 1.0), T=2.0, dt=1e-3)
    expected = [damped_mode_ratio(w, 2.0) for w in geom.frequencies[:2]]
    np.testing.assert_allclose(rep.ratios, expected, rtol=1e-5)


def test_nonlinear_observability_skips_zero_and_is_stable(hinged16, cubic16, middle_damping, rng):
    states = [ModalState.zeros(hinged16)] + [random_state(hinged16, rng) for _ in range(6)]
    rep = check_nonlinear_observability(states, cubic16, middle_damping, T=2.0, dt=1e-2)
    assert rep.skipped == 1 and rep.flagged == 0
    assert np.all(np.isfinite(rep.ratios)) and np.all(rep.ratios > 1)
    assert rep.ratios.max() / rep.ratios.min() < 3.0
