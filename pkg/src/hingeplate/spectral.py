"""Eigenbasis bookkeeping, modal/physical transforms and Sobolev norms.

Two flat geometries are supported:

* ``"hinged"``: the box (0, pi)^d with u = Δu = 0 on the boundary, expanded in
  the L²-orthonormal sine basis prod_j sqrt(2/pi) sin(k_j x_j), k_j >= 1.
* ``"torus"``: the periodic box (0, 2pi)^d expanded in the real orthonormal
  basis 1/sqrt(2pi), cos(kx)/sqrt(pi), sin(kx)/sqrt(pi) per direction.

Modal arrays are flat, one entry per retained multi-index, enumerated in
C order over the per-direction basis positions. Along one direction the
positions are sorted by wavenumber, so in 1D the eigenvalue table is sorted.
Grid functions are d-dimensional arrays of collocation values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
import math

import numpy as np

KINDS = ("hinged", "torus")

# polynomial degree whose pseudospectral products the default grid resolves
BASE_DEGREE = 3
PAD_DEGREE = 5


class GeometryError(ValueError):
    """Invalid geometry configuration."""


# ---------------------------------------------------------------- 1D tables


def wavenumbers_1d(kind: str, n_modes: int) -> np.ndarray:
    """Wavenumber |k| of each basis position along one direction."""
    if kind == "hinged":
        return np.arange(1, n_modes + 1)
    return (np.arange(n_modes) + 1) // 2


def points_1d(kind: str, n_points: int) -> np.ndarray:
    if kind == "hinged":
        return np.pi * np.arange(1, n_points + 1) / (n_points + 1)
    return 2.0 * np.pi * np.arange(n_points) / n_points


def weight_1d(kind: str, n_points: int) -> float:
    """Uniform quadrature weight (trapezoid on the periodic/odd extension)."""
    if kind == "hinged":
        return np.pi / (n_points + 1)
    return 2.0 * np.pi / n_points


def basis_functions_1d(kind: str, n_modes: int, x: np.ndarray) -> np.ndarray:
    """Orthonormal basis functions evaluated at points ``x``; shape (len(x), n_modes)."""
    x = np.asarray(x, dtype=float)
    out = np.empty((x.size, n_modes))
    if kind == "hinged":
        k = np.arange(1, n_modes + 1)
        out[:] = math.sqrt(2.0 / np.pi) * np.sin(np.outer(x, k))
        return out
    for i in range(n_modes):
        j = (i + 1) // 2
        if i == 0:
            out[:, i] = 1.0 / math.sqrt(2.0 * np.pi)
        elif i % 2 == 1:
            out[:, i] = np.cos(j * x) / math.sqrt(np.pi)
        else:
            out[:, i] = np.sin(j * x) / math.sqrt(np.pi)
    return out


@lru_cache(maxsize=256)
def _basis_matrix(kind: str, n_modes: int, n_points: int) -> np.ndarray:
    mat = basis_functions_1d(kind, n_modes, points_1d(kind, n_points))
    mat.setflags(write=False)
    return mat


def min_points_1d(kind: str, n_modes: int, degree: int) -> int:
    """Fewest collocation points integrating products of degree+1 modes exactly.

    Hinged: the discrete sine transform on M interior points integrates
    cos(m x) exactly for m < 2(M+1), hence M + 1 > (degree+1) N / 2.
    Torus: the periodic trapezoid rule needs M > (degree+1) K with K the
    largest wavenumber.
    """
    degree = max(int(degree), 1)
    if kind == "hinged":
        return ((degree + 1) * n_modes) // 2
    kmax = int(wavenumbers_1d(kind, n_modes)[-1])
    return max((degree + 1) * kmax + 1, n_modes)


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True, eq=False)
class Geometry:
    """Immutable description of the domain and the truncated eigenbasis."""

    kind: str
    modes: tuple[int, ...]
    beta: float
    positions: np.ndarray  # (n_modes, d) basis position per direction
    wavenumbers: np.ndarray  # (n_modes, d)
    eigenvalues: np.ndarray  # λ_k of -Δ
    grid_shape: tuple[int, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return len(self.modes)

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def side(self) -> float:
        return np.pi if self.kind == "hinged" else 2.0 * np.pi

    @property
    def measure(self) -> float:
        return self.side**self.dim

    @property
    def omega_squared(self) -> np.ndarray:
        """λ_k² + β, the squared modal frequencies of the free plate."""
        return self.eigenvalues**2 + self.beta

    @property
    def frequencies(self) -> np.ndarray:
        return np.sqrt(self.omega_squared)

    def shape_for_degree(self, degree: int) -> tuple[int, ...]:
        """Grid shape on which pseudospectral products of the given degree are exact."""
        need = tuple(min_points_1d(self.kind, n, degree) for n in self.modes)
        return tuple(max(a, b) for a, b in zip(need, self.grid_shape))

    def padded_shape(self) -> tuple[int, ...]:
        return self.shape_for_degree(PAD_DEGREE)

    def points(self, shape: tuple[int, ...] | None = None) -> tuple[np.ndarray, ...]:
        shape = self.grid_shape if shape is None else tuple(shape)
        return tuple(points_1d(self.kind, m) for m in shape)

    def mesh(self, shape: tuple[int, ...] | None = None) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.points(shape), indexing="ij"))

    def cell_volume(self, shape: tuple[int, ...] | None = None) -> float:
        shape = self.grid_shape if shape is None else tuple(shape)
        return float(np.prod([weight_1d(self.kind, m) for m in shape]))

    def basis_matrices(self, shape: tuple[int, ...] | None = None) -> tuple[np.ndarray, ...]:
        shape = self.grid_shape if shape is None else tuple(shape)
        return tuple(_basis_matrix(self.kind, n, m) for n, m in zip(self.modes, shape))

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature of grid functions over the domain (trailing d axes)."""
        values = np.asarray(values)
        shape = values.shape[values.ndim - self.dim:]
        axes = tuple(range(values.ndim - self.dim, values.ndim))
        return self.cell_volume(shape) * values.sum(axis=axes)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_modes)


def build_geometry(
    kind: str = "hinged",
    dim: int = 1,
    modes: int | tuple[int, ...] | list[int] = 16,
    beta: float = 0.0,
) -> Geometry:
    """Construct a geometry with its eigenvalue table and collocation grid."""
    if kind not in KINDS:
        raise GeometryError(f"unknown domain kind {kind!r}; expected one of {KINDS}")
    if dim not in (1, 2, 3):
        raise GeometryError(f"dimension must be 1, 2 or 3, got {dim}")
    if np.isscalar(modes):
        modes = (int(modes),) * dim
    modes = tuple(int(m) for m in modes)
    if len(modes) != dim:
        raise GeometryError(f"expected {dim} mode counts, got {len(modes)}")
    if any(m < 2 for m in modes):
        raise GeometryError(f"each direction needs at least 2 modes, got {modes}")
    beta = float(beta)
    if not np.isfinite(beta) or beta < 0:
        raise GeometryError(f"beta must be finite and >= 0, got {beta}")
    if kind == "torus" and beta <= 0:
        raise GeometryError(
            "torus requires beta > 0: without a boundary the Poincaré-like "
            "inequality fails and constants are undamped zero modes"
        )

    positions = np.array(list(product(*(range(m) for m in modes))), dtype=int).reshape(-1, dim)
    per_dir = [wavenumbers_1d(kind, m) for m in modes]
    wavenumbers = np.stack([per_dir[j][positions[:, j]] for j in range(dim)], axis=1)
    eigenvalues = (wavenumbers.astype(float) ** 2).sum(axis=1)
    grid_shape = tuple(min_points_1d(kind, m, BASE_DEGREE) for m in modes)
    for arr in (positions, wavenumbers, eigenvalues):
        arr.setflags(write=False)
    return Geometry(kind, modes, beta, positions, wavenumbers, eigenvalues, grid_shape)


# ---------------------------------------------------------------- transforms


def _apply_axes(arr: np.ndarray, mats: tuple[np.ndarray, ...], transpose: bool) -> np.ndarray:
    d = len(mats)
    for j, mat in enumerate(mats):
        axis = arr.ndim - d + j
        arr = np.moveaxis(arr, axis, -1)
        arr = arr @ (mat if transpose else mat.T)
        arr = np.moveaxis(arr, -1, axis)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite entries in {what}")


def to_physical(
    geom: Geometry,
    coeffs: np.ndarray,
    pad: bool = False,
    shape: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Evaluate Σ c_k φ_k on the collocation grid.

    ``pad=True`` uses the enlarged dealiasing grid (3/2 of the default one in
    the sense of resolvable polynomial degree). Leading batch axes are kept.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1:] != (geom.n_modes,):
        raise ValueError(f"expected {geom.n_modes} coefficients, got shape {coeffs.shape}")
    if shape is None:
        shape = geom.padded_shape() if pad else geom.grid_shape
    arr = coeffs.reshape(coeffs.shape[:-1] + geom.modes)
    return _apply_axes(arr, geom.basis_matrices(shape), transpose=False)


def from_physical(geom: Geometry, values: np.ndarray) -> np.ndarray:
    """L²-orthogonal projection of grid values onto the retained basis.

    The grid shape is read from the trailing axes; it must be a valid
    collocation grid for this geometry (at least exact for products of two modes).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim < geom.dim:
        raise ValueError(f"grid function needs {geom.dim} axes, got shape {values.shape}")
    shape = values.shape[values.ndim - geom.dim:]
    need = tuple(min_points_1d(geom.kind, n, 1) for n in geom.modes)
    if any(m < r for m, r in zip(shape, need)):
        raise ValueError(f"grid shape {shape} too coarse for modes {geom.modes}")
    mats = geom.basis_matrices(shape)
    coeffs = _apply_axes(values, mats, transpose=True) * geom.cell_volume(shape)
    return coeffs.reshape(values.shape[: values.ndim - geom.dim] + (geom.n_modes,))


def projection_matrix(geom: Geometry, weight: np.ndarray) -> np.ndarray:
    """Matrix of u ↦ P(weight · u) on the modal space (symmetric)."""
    weight = np.asarray(weight, dtype=float)
    key = ("proj", weight.shape, weight.tobytes())
    cached = geom._cache.get(key)
    if cached is not None:
        return cached
    eye = np.eye(geom.n_modes)
    mat = from_physical(geom, weight * to_physical(geom, eye, shape=weight.shape))
    mat = 0.5 * (mat + mat.T)
    mat.setflags(write=False)
    if len(geom._cache) < 64:
        geom._cache[key] = mat
    return mat


# ---------------------------------------------------------------- norms


def sobolev_weights(geom: Geometry, s: float) -> np.ndarray:
    """w_k = (1+λ_k)^{s/2}."""
    return (1.0 + geom.eigenvalues) ** (0.5 * s)


def sobolev_norm(geom: Geometry, coeffs: np.ndarray, s: float = 0.0) -> float:
    coeffs = np.asarray(coeffs, dtype=float)
    _check_finite(coeffs, "sobolev_norm input")
    return float(np.sqrt(np.sum((sobolev_weights(geom, s) * coeffs) ** 2)))


# ---------------------------------------------------------------- states


@dataclass
class ModalState:
    """Plate state (u, ∂t u) as modal coefficient arrays at time ``t``."""

    u: np.ndarray
    v: np.ndarray
    geometry: Geometry
    t: float = 0.0

    def __post_init__(self):
        n = self.geometry.n_modes
        self.u = np.array(self.u, dtype=float)
        self.v = np.array(self.v, dtype=float)
        if self.u.shape != (n,) or self.v.shape != (n,):
            raise ValueError(f"state arrays must have shape ({n},), got {self.u.shape}, {self.v.shape}")
        _check_finite(self.u, "ModalState.u")
        _check_finite(self.v, "ModalState.v")

    @classmethod
    def zeros(cls, geom: Geometry, t: float = 0.0) -> "ModalState":
        return cls(np.zeros(geom.n_modes), np.zeros(geom.n_modes), geom, t)

    def copy(self) -> "ModalState":
        return ModalState(self.u.copy(), self.v.copy(), self.geometry, self.t)

    def x_norm(self) -> float:
        return x_norm(self.geometry, self.u, self.v)

    def distance(self, other: "ModalState") -> float:
        return x_norm(self.geometry, self.u - other.u, self.v - other.v)

    def __add__(self, other: "ModalState") -> "ModalState":
        return ModalState(self.u + other.u, self.v + other.v, self.geometry, self.t)

    def __sub__(self, other: "ModalState") -> "ModalState":
        return ModalState(self.u - other.u, self.v - other.v, self.geometry, self.t)

    def scaled(self, factor: float) -> "ModalState":
        return ModalState(factor * self.u, factor * self.v, self.geometry, self.t)


def x_norm(geom: Geometry, u: np.ndarray, v: np.ndarray) -> float:
    """Energy norm on X = H_D² × L²: (Σ (λ²+β) u_k² + v_k²)^{1/2}.

    This is the norm in which the free plate group is unitary; on the hinged
    box and on the torus with β > 0 it is equivalent to the (1+λ)-weighted one.
    Batched inputs give an array of norms.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    out = np.sqrt(np.sum(geom.omega_squared * u * u, axis=-1) + np.sum(v * v, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def riesz_map(
    state: ModalState,
    from_space: tuple[float, float],
    to_space: tuple[float, float],
) -> ModalState:
    """Rescale componentwise by (1+λ)^{(s-s')/2}, an isometry H_D^s → H_D^{s'}."""
    geom = state.geometry
    su, sv = from_space
    tu, tv = to_space
    base = 1.0 + geom.eigenvalues
    return ModalState(
        state.u * base ** (0.5 * (su - tu)),
        state.v * base ** (0.5 * (sv - tv)),
        geom,
        state.t,
    )


def random_state(
    geom: Geometry,
    rng: np.random.Generator,
    norm: float = 1.0,
) -> ModalState:
    """Seeded spectral noise c_k ∝ ξ_k (1+λ_k)^{-1} in both components, scaled to the X-norm."""
    decay = 1.0 / (1.0 + geom.eigenvalues)
    u = rng.standard_normal(geom.n_modes) * decay
    v = rng.standard_normal(geom.n_modes) * decay
    scale = x_norm(geom, u, v)
    if norm == 0 or scale == 0:
        return ModalState.zeros(geom)
    return ModalState(u * norm / scale, v * norm / scale, geom)
