"""Polynomial nonlinearities, localized damping profiles and the plate energy."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Callable, Sequence

import numpy as np

from .spectral import (
    Geometry,
    ModalState,
    from_physical,
    projection_matrix,
    sobolev_norm,
    to_physical,
)

BLOWUP_AMPLITUDE = 1e8
TAGS = ("defocusing", "asymptotic-defocusing", "general")


class BlowUpError(FloatingPointError):
    """Raised when a state leaves the range the solver is trusted on."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} (t = {t:.6g})")
        self.t = t


class NonlinearityError(ValueError):
    pass


# ---------------------------------------------------------------- coefficient fields


class Field:
    """A spatially varying coefficient that can be sampled on any collocation grid.

    Built from a constant, a function of the coordinates, or modal coefficients.
    """

    def __init__(self, sampler: Callable[[Geometry, tuple], np.ndarray | float], constant: float | None = None):
        self._sampler = sampler
        self.constant = constant
        self._cache: dict = {}

    @classmethod
    def const(cls, value: float) -> "Field":
        value = float(value)
        return cls(lambda geom, shape: value, constant=value)

    @classmethod
    def from_function(cls, fn: Callable[..., np.ndarray]) -> "Field":
        return cls(lambda geom, shape: np.asarray(fn(*geom.mesh(shape)), dtype=float))

    @classmethod
    def from_modal(cls, coeffs: np.ndarray) -> "Field":
        coeffs = np.array(coeffs, dtype=float)
        return cls(lambda geom, shape: to_physical(geom, coeffs, shape=shape))

    def on(self, geom: Geometry, shape: tuple[int, ...]):
        if self.constant is not None:
            return self.constant
        key = (id(geom), tuple(shape))
        if key not in self._cache:
            vals = np.asarray(self._sampler(geom, tuple(shape)), dtype=float)
            self._cache[key] = np.broadcast_to(vals, tuple(shape)).copy()
        return self._cache[key]

    def is_zero(self) -> bool:
        return self.constant == 0.0


def _as_field(value) -> Field:
    if isinstance(value, Field):
        return value
    if callable(value):
        return Field.from_function(value)
    return Field.const(value)


# ---------------------------------------------------------------- nonlinearity


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """f(x, u) = Σ_{j=1..p} a_j(x) u^j with a class tag checked by sampling."""

    geometry: Geometry
    coefficients: tuple[Field, ...]
    tag: str = "general"
    radius: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.tag not in TAGS:
            raise NonlinearityError(f"unknown class tag {self.tag!r}")
        if self.tag != "general":
            _verify_tag(self)

    @property
    def degree(self) -> int:
        for j in range(len(self.coefficients), 0, -1):
            if not self.coefficients[j - 1].is_zero():
                return j
        return 0

    @property
    def is_odd(self) -> bool:
        """True when every even-power coefficient vanishes identically."""
        return all(self.coefficients[j - 1].is_zero() for j in range(2, len(self.coefficients) + 1, 2))

    def is_linear(self) -> bool:
        return self.degree <= 1

    def grid_shape(self) -> tuple[int, ...]:
        return self.geometry.shape_for_degree(max(self.degree, 1))

    def _coeffs(self, shape):
        return [c.on(self.geometry, shape) for c in self.coefficients]

    def values(self, u: np.ndarray, shape=None) -> np.ndarray:
        """Pointwise f(x, u) for grid values u (trailing axes = grid)."""
        shape = u.shape[u.ndim - self.geometry.dim:] if shape is None else shape
        coeffs = self._coeffs(shape)
        if not coeffs:
            return np.zeros_like(u)
        acc = np.zeros_like(u) + coeffs[-1]
        for a in reversed(coeffs[:-1]):
            acc = acc * u + a
        return acc * u

    def derivative_values(self, u: np.ndarray, shape=None) -> np.ndarray:
        """Pointwise ∂_s f(x, u)."""
        shape = u.shape[u.ndim - self.geometry.dim:] if shape is None else shape
        coeffs = self._coeffs(shape)
        if not coeffs:
            return np.zeros_like(u)
        p = len(coeffs)
        acc = np.zeros_like(u) + p * coeffs[-1]
        for j in range(p - 1, 0, -1):
            acc = acc * u + j * coeffs[j - 1]
        return acc

    def primitive_values(self, u: np.ndarray, shape=None) -> np.ndarray:
        """Pointwise V(x, u) = ∫_0^u f(x, s) ds."""
        shape = u.shape[u.ndim - self.geometry.dim:] if shape is None else shape
        coeffs = self._coeffs(shape)
        if not coeffs:
            return np.zeros_like(u)
        p = len(coeffs)
        acc = np.zeros_like(u) + coeffs[-1] / (p + 1)
        for j in range(p - 1, 0, -1):
            acc = acc * u + coeffs[j - 1] / (j + 1)
        return acc * u * u


def polynomial(
    geom: Geometry,
    coefficients: Sequence,
    tag: str = "general",
    radius: float = 0.0,
    alpha: float = 0.0,
) -> Nonlinearity:
    """Build f(x,u) = Σ a_j u^j from [a_1, a_2, ...]; entries are numbers, callables of coordinates or Fields."""
    fields = tuple(_as_field(c) for c in coefficients)
    return Nonlinearity(geom, fields, tag, float(radius), float(alpha))


def zero_nonlinearity(geom: Geometry) -> Nonlinearity:
    return Nonlinearity(geom, ())


def _verify_tag(spec: Nonlinearity) -> None:
    """Dense sampling of s·f(x,s) on [-10R, 10R] × grid (10⁴ s-values)."""
    geom = spec.geometry
    scale = spec.radius if spec.radius > 0 else 1.0
    s = np.linspace(-10 * scale, 10 * scale, 10_000)
    shape = geom.grid_shape
    coeffs = spec._coeffs(shape)
    xs = np.stack([np.broadcast_to(np.asarray(a, dtype=float), shape).ravel() for a in coeffs], axis=1) \
        if coeffs else np.zeros((int(np.prod(shape)), 0))
    if spec.tag == "defocusing" and geom.kind == "torus" and spec.alpha <= 0:
        raise NonlinearityError("defocusing on the torus requires s f(x,s) >= alpha s² with a declared alpha > 0")
    floor = spec.alpha * s * s if (spec.tag == "defocusing" and geom.kind == "torus") else 0.0 * s
    mask = np.ones_like(s, dtype=bool)
    if spec.tag == "asymptotic-defocusing":
        if spec.radius <= 0:
            raise NonlinearityError("asymptotic-defocusing tag needs a radius R > 0")
        mask = np.abs(s) >= spec.radius
    powers = np.stack([s ** (j + 1) for j in range(xs.shape[1])], axis=0)  # (p, S)
    for start in range(0, xs.shape[0], 512):
        sf = s * (xs[start:start + 512] @ powers) if xs.shape[1] else np.zeros((1, s.size))
        slack = 1e-12 * (1.0 + np.abs(sf))
        bad = (sf < floor - slack) & mask
        if np.any(bad):
            i, k = np.argwhere(bad)[0]
            raise NonlinearityError(
                f"{spec.tag} condition violated: s*f(x,s) = {sf[i, k]:.3g} at s = {s[k]:.3g}"
            )


def eval_f(spec: Nonlinearity, u_hat: np.ndarray) -> np.ndarray:
    """Modal coefficients of x ↦ f(x, u(x)), computed on a dealiased grid."""
    geom = spec.geometry
    if spec.degree == 0:
        return np.zeros_like(np.asarray(u_hat, dtype=float))
    shape = spec.grid_shape()
    u = to_physical(geom, u_hat, shape=shape)
    check_amplitude(u)
    return from_physical(geom, spec.values(u, shape))


def check_amplitude(u_grid: np.ndarray, t: float | None = None) -> None:
    peak = float(np.max(np.abs(u_grid))) if u_grid.size else 0.0
    if not np.isfinite(peak) or peak > BLOWUP_AMPLITUDE:
        raise BlowUpError(f"grid amplitude {peak:.3g} exceeds {BLOWUP_AMPLITUDE:g}", t)


def linearized_potential(spec: Nonlinearity, e_hat: np.ndarray, shape=None) -> np.ndarray:
    """Grid values of ∂_s f(x, e(x)) on the default collocation grid."""
    geom = spec.geometry
    shape = geom.grid_shape if shape is None else tuple(shape)
    e = to_physical(geom, e_hat, shape=shape)
    return np.broadcast_to(spec.derivative_values(e, shape), shape).copy()


def shifted_nonlinearity(spec: Nonlinearity, e_hat: np.ndarray) -> Nonlinearity:
    """𝔣(x, z) = f(x, z + e) - f(x, e), re-expanded in powers of z."""
    e_hat = np.array(e_hat, dtype=float)
    if not np.any(e_hat):
        return Nonlinearity(spec.geometry, spec.coefficients, "general")
    p = len(spec.coefficients)
    e_field = Field.from_modal(e_hat)

    def make(m):
        def sampler(geom, shape):
            e = e_field.on(geom, shape)
            total = 0.0
            for j in range(m, p + 1):
                total = total + comb(j, m) * spec.coefficients[j - 1].on(geom, shape) * e ** (j - m)
            return total
        return Field(sampler)

    return Nonlinearity(spec.geometry, tuple(make(m) for m in range(1, p + 1)), "general")


# ---------------------------------------------------------------- energy


@dataclass
class EnergyReport:
    kinetic: float
    bending: float
    mass: float
    potential: float

    @property
    def total(self) -> float:
        return self.kinetic + self.bending + self.mass + self.potential


def energy_parts(geom: Geometry, spec: Nonlinearity | None, u: np.ndarray, v: np.ndarray):
    """Vectorised (kinetic, bending, mass, potential) over leading batch axes."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    kinetic = 0.5 * np.sum(v * v, axis=-1)
    bending = 0.5 * np.sum(geom.eigenvalues**2 * u * u, axis=-1)
    mass = 0.5 * geom.beta * np.sum(u * u, axis=-1)
    if spec is None or spec.degree == 0:
        potential = np.zeros_like(kinetic)
    else:
        shape = spec.grid_shape()
        grid = to_physical(geom, u, shape=shape)
        check_amplitude(grid)
        potential = geom.integrate(spec.primitive_values(grid, shape))
    return kinetic, bending, mass, potential


def total_energy(spec: Nonlinearity | None, state: ModalState) -> EnergyReport:
    parts = energy_parts(state.geometry, spec, state.u, state.v)
    return EnergyReport(*(float(p) for p in parts))


# ---------------------------------------------------------------- damping


def _smooth_step(t: np.ndarray) -> np.ndarray:
    """C^∞ transition: 0 for t <= 0, 1 for t >= 1, built from exp(-1/t)."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def _box_distance(x: np.ndarray, lo: float, hi: float, period: float | None) -> np.ndarray:
    if period is None:
        return np.maximum(np.maximum(lo - x, x - hi), 0.0)
    if hi - lo >= period:
        return np.zeros_like(x)
    # distance on the circle to the arc [lo, hi]
    rel = np.mod(x - lo, period)
    width = hi - lo
    return np.where(rel <= width, 0.0, np.minimum(rel - width, period - rel))


@dataclass(frozen=True, eq=False)
class DampingProfile:
    """γ(x) = γ0 on the union of boxes ω, decaying smoothly to 0 over width δ."""

    geometry: Geometry
    boxes: tuple
    gamma0: float
    delta: float
    _cache: dict = field(default_factory=dict, repr=False)

    def gamma(self, shape=None) -> np.ndarray:
        geom = self.geometry
        shape = geom.grid_shape if shape is None else tuple(shape)
        key = ("gamma", shape)
        if key not in self._cache:
            mesh = geom.mesh(shape)
            period = None if geom.kind == "hinged" else geom.side
            outside = np.ones(shape)
            for box in self.boxes:
                inside = np.ones(shape)
                for x, (lo, hi) in zip(mesh, box):
                    d = _box_distance(x, lo, hi, period)
                    inside = inside * _smooth_step(1.0 - d / self.delta)
                outside = outside * (1.0 - inside)
            self._cache[key] = self.gamma0 * (1.0 - outside)
        return self._cache[key]

    def gamma_squared(self, shape=None) -> np.ndarray:
        return self.gamma(shape) ** 2

    def region_mask(self, shape=None) -> np.ndarray:
        geom = self.geometry
        mesh = geom.mesh(shape)
        period = None if geom.kind == "hinged" else geom.side
        mask = np.zeros(mesh[0].shape, dtype=bool)
        for box in self.boxes:
            inside = np.ones_like(mask)
            for x, (lo, hi) in zip(mesh, box):
                inside &= _box_distance(x, lo, hi, period) == 0
            mask |= inside
        return mask

    def enlarged_mask(self, shape=None) -> np.ndarray:
        """Grid points of ω̃ = {γ > γ0/2}."""
        return self.gamma(shape) > 0.5 * self.gamma0

    def support_mask(self, shape=None) -> np.ndarray:
        return self.gamma(shape) > 0

    def matrix(self) -> np.ndarray:
        """Modal matrix of v ↦ P(γ² v) on the default grid."""
        return projection_matrix(self.geometry, self.gamma_squared())


def damping_profile(
    geom: Geometry,
    boxes,
    gamma0: float = 1.0,
    delta: float = 0.3,
) -> DampingProfile:
    """Damping supported near a union of axis-aligned boxes.

    ``boxes`` is one box or a list of boxes; a box is a sequence of (lo, hi)
    per direction. In 1D a bare pair (lo, hi) is accepted.
    """
    arr = boxes
    if geom.dim == 1 and len(arr) == 2 and np.isscalar(arr[0]):
        arr = [[tuple(arr)]]
    elif len(arr) and np.isscalar(arr[0][0]):
        arr = [arr]
    norm = []
    for box in arr:
        if len(box) != geom.dim:
            raise ValueError(f"box {box} does not have {geom.dim} intervals")
        ivals = []
        for lo, hi in box:
            if not hi > lo:
                raise ValueError(f"empty interval ({lo}, {hi})")
            ivals.append((float(lo), float(hi)))
        norm.append(tuple(ivals))
    if gamma0 <= 0 or delta <= 0:
        raise ValueError("gamma0 and delta must be positive")
    return DampingProfile(geom, tuple(norm), float(gamma0), float(delta))


def full_damping(geom: Geometry, gamma0: float = 1.0) -> DampingProfile:
    return damping_profile(geom, [tuple((0.0, geom.side) for _ in range(geom.dim))], gamma0, 1.0)


# ---------------------------------------------------------------- composition estimates


@dataclass
class CompositionReport:
    sobolev_ratios: np.ndarray
    remainder_ratios: np.ndarray
    amplitude: float
    s: float

    @property
    def max_sobolev_ratio(self) -> float:
        return float(np.max(self.sobolev_ratios))

    @property
    def max_remainder_ratio(self) -> float:
        return float(np.max(self.remainder_ratios))

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.sobolev_ratios)) and np.all(np.isfinite(self.remainder_ratios)))


def check_composition_bound(
    spec: Nonlinearity,
    samples: int = 100,
    s: float = 1.0,
    amplitude: float = 1.0,
    rng: np.random.Generator | None = None,
) -> CompositionReport:
    """Empirical ratios ‖f(u)‖_{H^s}/‖u‖_{H^s} and ‖f(u) - f'(0)u‖/(‖u‖_∞‖u‖)
    over random fields u whose sup norm is drawn uniformly in (0, amplitude]."""
    if not 0 < s <= 2:
        raise ValueError("s must lie in (0, 2]")
    if samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng() if rng is None else rng
    geom = spec.geometry
    shape = spec.grid_shape()
    slope = spec.coefficients[0].on(geom, shape) if spec.coefficients else 0.0
    first = np.empty(samples)
    second = np.empty(samples)
    for i in range(samples):
        c = rng.standard_normal(geom.n_modes) / (1.0 + geom.eigenvalues)
        u = to_physical(geom, c, shape=shape)
        c *= amplitude * rng.uniform(0.05, 1.0) / np.max(np.abs(u))
        u = to_physical(geom, c, shape=shape)
        fu = spec.values(u, shape)
        f_hat = from_physical(geom, fu)
        first[i] = sobolev_norm(geom, f_hat, s) / sobolev_norm(geom, c, s)
        remainder = fu - slope * u
        l2 = np.sqrt(geom.integrate(remainder**2))
        second[i] = l2 / (np.max(np.abs(u)) * np.sqrt(geom.integrate(u**2)))
    return CompositionReport(first, second, float(amplitude), float(s))
