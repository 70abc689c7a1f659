"""Cosine-basis spatial statistics on a rectangular search domain.

Everything in this module is pure and deterministic.  Coefficient vectors
are plain float64 arrays whose entry order follows ``IndexSet.indices``
(row-major over the per-dimension orders ``(k_1, ..., k_nu)``); that
ordering is part of the file and wire contract and must not change.

The basis is orthonormal on the domain: ``F_k(s) = (1/h_k) prod_i
cos(k_i pi s_i / L_i)`` with ``h_k = prod_i sqrt(L_i/2)`` for ``k_i != 0``
and ``sqrt(L_i)`` for ``k_i = 0``.  Cosines are globally defined, so basis
evaluation is still valid for points transiently outside the domain.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SearchDomain",
    "IndexSet",
    "SpatialGrid",
    "TrajectorySegment",
    "lambda_weight",
    "lambda_weights",
    "normalizing_factor",
    "basis_eval",
    "basis_grad",
    "basis_matrix",
    "basis_grad_matrix",
    "uniform_grid",
    "distribution_coeffs",
    "trajectory_coeffs",
    "recursive_coeff_update",
    "ergodic_metric",
    "reconstruct_statistics",
    "coeffs_to_bytes",
    "coeffs_from_bytes",
]


@dataclass(frozen=True)
class SearchDomain:
    """Axis-aligned box ``[0, L_1] x ... x [0, L_nu]``."""

    nu: int
    bounds: tuple[float, ...]

    def __post_init__(self):
        if self.nu < 1:
            raise ValueError("domain dimension must be >= 1")
        if len(self.bounds) != self.nu:
            raise ValueError("bounds length must equal domain dimension")
        if any(b <= 0.0 for b in self.bounds):
            raise ValueError("all domain bounds must be positive")
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))

    @property
    def volume(self) -> float:
        return float(np.prod(self.bounds))


class IndexSet:
    """All multi-indices ``0 <= k_i <= K`` in fixed row-major order."""

    def __init__(self, order: int, nu: int):
        if order < 0:
            raise ValueError("coefficient order must be >= 0")
        if nu < 1:
            raise ValueError("nu must be >= 1")
        self.order = int(order)
        self.nu = int(nu)
        grids = np.meshgrid(*([np.arange(order + 1)] * nu), indexing="ij")
        self.indices = np.stack(grids, axis=-1).reshape(-1, nu).astype(np.int64)
        self.size = self.indices.shape[0]
        self.norms_sq = np.sum(self.indices.astype(float) ** 2, axis=1)

    def __len__(self) -> int:
        return self.size


def lambda_weight(k, nu: int) -> float:
    """Low-frequency emphasis weight ``(1 + |k|^2)^(-(nu+1)/2)``."""
    k = np.asarray(k, dtype=float)
    return float((1.0 + np.sum(k**2)) ** (-(nu + 1) / 2.0))


def lambda_weights(idx: IndexSet) -> np.ndarray:
    return (1.0 + idx.norms_sq) ** (-(idx.nu + 1) / 2.0)


def normalizing_factor(domain: SearchDomain, k) -> float:
    """``h_k`` making the cosine basis orthonormal in L2 of the domain."""
    k = np.asarray(k)
    if k.shape != (domain.nu,):
        raise ValueError("index length must equal domain dimension")
    h = 1.0
    for ki, li in zip(k, domain.bounds):
        h *= li / 2.0 if ki != 0 else li
    return float(np.sqrt(h))


def _h_vector(domain: SearchDomain, idx: IndexSet) -> np.ndarray:
    h = np.ones(idx.size)
    for d in range(idx.nu):
        li = domain.bounds[d]
        h *= np.where(idx.indices[:, d] != 0, li / 2.0, li)
    return np.sqrt(h)


def basis_eval(domain: SearchDomain, k, s) -> float:
    """Evaluate one basis function at a point (valid outside the box too)."""
    k = np.asarray(k, dtype=float)
    s = np.asarray(s, dtype=float)
    if k.shape != (domain.nu,) or s.shape != (domain.nu,):
        raise ValueError("index and point must have the domain dimension")
    val = 1.0
    for ki, si, li in zip(k, s, domain.bounds):
        val *= np.cos(ki * np.pi * si / li)
    return float(val / normalizing_factor(domain, k.astype(int)))


def basis_grad(domain: SearchDomain, k, s) -> np.ndarray:
    """Analytic spatial gradient of :func:`basis_eval`."""
    k = np.asarray(k, dtype=float)
    s = np.asarray(s, dtype=float)
    if k.shape != (domain.nu,) or s.shape != (domain.nu,):
        raise ValueError("index and point must have the domain dimension")
    cos_terms = np.array([np.cos(ki * np.pi * si / li) for ki, si, li in zip(k, s, domain.bounds)])
    out = np.empty(domain.nu)
    for d in range(domain.nu):
        li = domain.bounds[d]
        grad_d = -(k[d] * np.pi / li) * np.sin(k[d] * np.pi * s[d] / li)
        others = np.prod(np.delete(cos_terms, d)) if domain.nu > 1 else 1.0
        out[d] = grad_d * others
    return out / normalizing_factor(domain, k.astype(int))


def basis_matrix(domain: SearchDomain, idx: IndexSet, points: np.ndarray) -> np.ndarray:
    """Evaluate all basis functions at many points, shape ``(P, size)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != domain.nu:
        raise ValueError("points must have the domain dimension")
    orders = np.arange(idx.order + 1)
    vals = None
    for d in range(idx.nu):
        tab = np.cos(np.outer(pts[:, d], orders * (np.pi / domain.bounds[d])))
        col = tab[:, idx.indices[:, d]]
        vals = col if vals is None else vals * col
    return vals / _h_vector(domain, idx)


def basis_grad_matrix(domain: SearchDomain, idx: IndexSet, points: np.ndarray) -> np.ndarray:
    """Gradients of all basis functions at many points, shape ``(P, size, nu)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != domain.nu:
        raise ValueError("points must have the domain dimension")
    orders = np.arange(idx.order + 1)
    cos_tabs, sin_tabs = [], []
    for d in range(idx.nu):
        args = np.outer(pts[:, d], orders * (np.pi / domain.bounds[d]))
        cos_tabs.append(np.cos(args))
        sin_tabs.append(np.sin(args))
    h = _h_vector(domain, idx)
    out = np.empty((pts.shape[0], idx.size, idx.nu))
    for d in range(idx.nu):
        scale = idx.indices[:, d] * (np.pi / domain.bounds[d])
        term = -sin_tabs[d][:, idx.indices[:, d]] * scale
        for j in range(idx.nu):
            if j != d:
                term = term * cos_tabs[j][:, idx.indices[:, j]]
        out[:, :, d] = term / h
    return out


class SpatialGrid:
    """Scalar field sampled on a regular cell grid over the domain.

    ``values`` has shape ``cells_per_dim`` (row-major).  Density grids
    (mass 1) are produced by :meth:`normalized`; synthesis traces may be
    signed and are stored as-is.
    """

    def __init__(self, domain: SearchDomain, cells_per_dim, values: np.ndarray):
        self.domain = domain
        self.cells_per_dim = tuple(int(c) for c in cells_per_dim)
        if len(self.cells_per_dim) != domain.nu:
            raise ValueError("cells_per_dim length must equal domain dimension")
        if any(c < 1 for c in self.cells_per_dim):
            raise ValueError("cells_per_dim entries must be >= 1")
        vals = np.asarray(values, dtype=float)
        if vals.shape != self.cells_per_dim:
            vals = vals.reshape(self.cells_per_dim)
        self.values = vals

    @property
    def cell_volume(self) -> float:
        return self.domain.volume / float(np.prod(self.cells_per_dim))

    def centers(self) -> np.ndarray:
        """Cell centers flattened row-major, shape ``(ncells, nu)``."""
        axes = [
            (np.arange(c) + 0.5) * (l / c)
            for c, l in zip(self.cells_per_dim, self.domain.bounds)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.domain.nu)

    def mass(self) -> float:
        return float(np.sum(self.values) * self.cell_volume)

    def is_normalized(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.values >= 0.0)) and abs(self.mass() - 1.0) <= tol

    def normalized(self) -> "SpatialGrid":
        """Return a unit-mass density.  An all-zero field becomes uniform."""
        vals = self.values
        if np.any(vals < 0.0):
            raise ValueError("density values must be nonnegative")
        total = np.sum(vals) * self.cell_volume
        if total <= 0.0:
            vals = np.ones_like(vals)
            total = np.sum(vals) * self.cell_volume
        return SpatialGrid(self.domain, self.cells_per_dim, vals / total)

    def to_bytes(self) -> bytes:
        head = struct.pack("<I", self.domain.nu)
        head += struct.pack(f"<{self.domain.nu}I", *self.cells_per_dim)
        head += struct.pack(f"<{self.domain.nu}d", *self.domain.bounds)
        body = self.values.astype("<f8").tobytes(order="C")
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SpatialGrid":
        (nu,) = struct.unpack_from("<I", blob, 0)
        off = 4
        dims = struct.unpack_from(f"<{nu}I", blob, off)
        off += 4 * nu
        bounds = struct.unpack_from(f"<{nu}d", blob, off)
        off += 8 * nu
        count = int(np.prod(dims))
        vals = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        return cls(SearchDomain(nu, bounds), dims, vals.reshape(dims))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SpatialGrid":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def uniform_grid(domain: SearchDomain, cells_per_dim) -> SpatialGrid:
    cells = tuple(int(c) for c in cells_per_dim)
    vals = np.full(cells, 1.0 / domain.volume)
    return SpatialGrid(domain, cells, vals)


@dataclass
class TrajectorySegment:
    """Sampled path of the ergodically explored coordinates."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.times.ndim != 1 or self.times.size != self.states.shape[0]:
            raise ValueError("times and states lengths must match")
        if self.times.size >= 2 and np.any(np.diff(self.times) <= 0.0):
            raise ValueError("times must be strictly increasing")


def _clip_to_window(times: np.ndarray, states: np.ndarray, a: float, b: float):
    """Samples covering ``[a, b]`` with linearly interpolated endpoints."""
    tol = 1e-9 * max(1.0, abs(a), abs(b))
    if times[0] > a + tol or times[-1] < b - tol:
        raise ValueError("segment does not cover the requested window")
    lo = int(np.searchsorted(times, a + tol))
    hi = int(np.searchsorted(times, b - tol))
    t_parts, x_parts = [], []
    if lo > 0 and times[lo] > a + tol:
        w = (a - times[lo - 1]) / (times[lo] - times[lo - 1])
        t_parts.append([a])
        x_parts.append((1 - w) * states[lo - 1] + w * states[lo])
    t_parts.append(times[lo:hi])
    x_parts.append(states[lo:hi])
    if hi == 0 or times[hi - 1] < b - tol:
        j = min(hi, times.size - 1)
        w = (b - times[j - 1]) / (times[j] - times[j - 1])
        t_parts.append([b])
        x_parts.append((1 - w) * states[j - 1] + w * states[j])
    t = np.concatenate([np.atleast_1d(p) for p in t_parts])
    x = np.vstack([np.atleast_2d(p) for p in x_parts])
    return t, x


def distribution_coeffs(grid: SpatialGrid, idx: IndexSet) -> np.ndarray:
    """Coefficients of a density by midpoint quadrature over the grid."""
    if not grid.is_normalized(1e-9):
        raise ValueError("grid must be a normalized density; call normalized() first")
    basis = basis_matrix(grid.domain, idx, grid.centers())
    weights = grid.values.reshape(-1) * grid.cell_volume
    return basis.T @ weights


def trajectory_coeffs(
    seg: TrajectorySegment,
    domain: SearchDomain,
    idx: IndexSet,
    t0erg: float,
    horizon_end: float,
) -> np.ndarray:
    """Time-averaged basis statistics of a path over ``[t0erg, horizon_end]``."""
    if horizon_end <= t0erg:
        raise ValueError("window must have positive length")
    t, x = _clip_to_window(seg.times, seg.states, t0erg, horizon_end)
    basis = basis_matrix(domain, idx, x)
    integral = np.trapezoid(basis, t, axis=0)
    return integral / (horizon_end - t0erg)


def recursive_coeff_update(
    prev_partial: np.ndarray,
    prev_window: tuple[float, float, float, float],
    new_segment: TrajectorySegment,
    domain: SearchDomain,
    idx: IndexSet,
) -> np.ndarray:
    """Fold one sampling interval into the stored history statistics.

    ``prev_window`` is ``(t_prev, t_now, horizon, t0erg)``.  The returned
    vector equals the direct quadrature over ``[t0erg, t_now]`` normalized
    by ``t_now + horizon - t0erg``, computed with constant storage.
    """
    t_prev, t_now, horizon, t0erg = prev_window
    w_prev = t_prev + horizon - t0erg
    w_now = t_now + horizon - t0erg
    if t_now <= t_prev or w_prev <= 0.0 or w_now <= 0.0:
        raise ValueError("inconsistent update window")
    tol = 1e-9 * max(1.0, abs(t_now))
    if new_segment.times[0] > t_prev + tol or new_segment.times[-1] < t_now - tol:
        raise ValueError("segment must span the update interval")
    prev_partial = np.asarray(prev_partial, dtype=float)
    if prev_partial.shape != (idx.size,):
        raise ValueError("coefficient length mismatch")
    t, x = _clip_to_window(new_segment.times, new_segment.states, t_prev, t_now)
    integral = np.trapezoid(basis_matrix(domain, idx, x), t, axis=0)
    return (w_prev / w_now) * prev_partial + integral / w_now


def ergodic_metric(c: np.ndarray, phi: np.ndarray, idx: IndexSet) -> float:
    """Weighted squared coefficient distance; zero iff ``c == phi``."""
    c = np.asarray(c, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if c.shape != (idx.size,) or phi.shape != (idx.size,):
        raise ValueError("coefficient length mismatch")
    diff = c - phi
    return float(np.sum(lambda_weights(idx) * diff * diff))


def reconstruct_statistics(
    c: np.ndarray,
    domain: SearchDomain,
    idx: IndexSet,
    grid_shape,
) -> SpatialGrid:
    """Weighted Fourier synthesis of a coefficient vector on a grid.

    Trace/visual output only: the synthesis is signed, no normalization
    is applied.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (idx.size,):
        raise ValueError("coefficient length mismatch")
    grid = uniform_grid(domain, grid_shape)
    vals = basis_matrix(domain, idx, grid.centers()) @ (lambda_weights(idx) * c)
    return SpatialGrid(domain, grid_shape, vals.reshape(grid.cells_per_dim))


def coeffs_to_bytes(c: np.ndarray) -> bytes:
    """Length-prefixed little-endian float64 array in index order."""
    c = np.asarray(c, dtype=float)
    return struct.pack("<I", c.size) + c.astype("<f8").tobytes()


def coeffs_from_bytes(blob: bytes) -> np.ndarray:
    (count,) = struct.unpack_from("<I", blob, 0)
    return np.frombuffer(blob, dtype="<f8", count=count, offset=4).copy()
