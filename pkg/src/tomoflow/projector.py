"""Matched matrix-free projection operators.

forward_project implements the line-integral operator A with Joseph's method:
for each ray the driving axis is the dominant component of the unit direction,
the ray is sampled once per voxel slice along that axis, and the remaining
axes are handled by linear interpolation.  back_project applies the exact
algebraic transpose: the same slices, the same interpolation weights, scattered
instead of gathered.  Both directions share one tap-computation routine, so
``<Ax, y> == <x, A^T y>`` holds to summation-order rounding, with no separate
"pixel-driven" code path that could break it.

Out-of-grid interpolation taps are dropped (zero padding), never clamped,
which keeps A linear.  All arithmetic is double precision; single precision
is a file-format concern only.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .geometry import (
    ConeGeometry,
    FanGeometry,
    Geometry,
    VolumeGrid,
    ray_bundle,
)

# Rays are processed in fixed-size chunks.  Chunking bounds the size of the
# intermediate tap arrays and is the unit of parallelism: chunks are disjoint
# and the reduction runs in chunk order, so results are bitwise identical for
# every thread count.
_RAY_CHUNK_2D = 32768
_RAY_CHUNK_3D = 8192

_default_threads = 1


def set_default_threads(n: int) -> None:
    """Set the worker-thread count used when an operation gets threads=None."""
    global _default_threads
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
        raise ValueError(f"thread count must be a positive integer, got {n!r}")
    _default_threads = int(n)


def get_default_threads() -> int:
    return _default_threads


def _resolve_threads(threads) -> int:
    if threads is None:
        return _default_threads
    if not isinstance(threads, (int, np.integer)) or isinstance(threads, bool) or threads < 1:
        raise ValueError(f"thread count must be a positive integer, got {threads!r}")
    return int(threads)


@dataclass
class Volume:
    """A 2D or 3D scalar attenuation field (mm^-1) on a regular grid.

    values has shape grid.shape and dtype float64; a flat array of matching
    length is accepted and reshaped.
    """

    grid: VolumeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != self.grid.shape:
            if vals.ndim == 1 and vals.size == self.grid.n_voxels:
                vals = vals.reshape(self.grid.shape)
            else:
                raise ShapeMismatchError(
                    f"volume values shape {vals.shape} does not match "
                    f"grid shape {self.grid.shape}"
                )
        self.values = vals

    @classmethod
    def zeros(cls, grid: VolumeGrid) -> "Volume":
        return cls(grid, np.zeros(grid.shape))

    def copy(self) -> "Volume":
        return Volume(self.grid, self.values.copy())


@dataclass
class Sinogram:
    """Projection data p: one detector reading per ray.

    values has shape (n_angles, n_detectors) for fan geometries and
    (n_angles, detector_rows, detector_cols) for cone geometries.
    """

    geom: Geometry
    values: np.ndarray

    def __post_init__(self):
        expected = (self.geom.n_angles,) + self.geom.detector_shape
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != expected:
            if vals.ndim == 1 and vals.size == int(np.prod(expected)):
                vals = vals.reshape(expected)
            else:
                raise ShapeMismatchError(
                    f"sinogram values shape {vals.shape} does not match "
                    f"geometry layout {expected}"
                )
        self.values = vals

    @classmethod
    def zeros(cls, geom: Geometry) -> "Sinogram":
        return cls(geom, np.zeros((geom.n_angles,) + geom.detector_shape))

    def copy(self) -> "Sinogram":
        return Sinogram(self.geom, self.values.copy())


def _taps_for_axis(grid: VolumeGrid, org: np.ndarray, dirs: np.ndarray, axis: int):
    """Interpolation taps for a group of rays sharing one driving axis.

    Returns (lins, ws, scale): lins is a list of (g, n_slices) int64 arrays of
    flat voxel indices, ws the matching weights (zero where the tap falls off
    the grid; those indices are clipped so gathers stay in bounds), and scale
    the per-ray step length voxel_size / |d_axis| in mm.
    """
    nd = grid.ndim
    shape = grid.shape
    strides = [int(np.prod(shape[a + 1:], dtype=np.int64)) for a in range(nd)]
    n_slices = shape[axis]

    d_axis = dirs[:, axis]
    centers = grid.axis_centers(axis)
    t = (centers[None, :] - org[:, axis:axis + 1]) / d_axis[:, None]
    scale = grid.voxel_size / np.abs(d_axis)

    base = np.arange(n_slices, dtype=np.int64)[None, :] * strides[axis]

    perp_taps = []
    for o in range(nd):
        if o == axis:
            continue
        n_o = shape[o]
        c0 = grid.origin[o] - (n_o - 1) / 2.0 * grid.voxel_size
        pos = org[:, o:o + 1] + t * dirs[:, o:o + 1]
        f = (pos - c0) / grid.voxel_size
        j = np.floor(f).astype(np.int64)
        w_hi = f - j
        valid_lo = (j >= 0) & (j < n_o)
        valid_hi = (j >= -1) & (j < n_o - 1)
        j_lo = np.clip(j, 0, n_o - 1) * strides[o]
        j_hi = np.clip(j + 1, 0, n_o - 1) * strides[o]
        w_lo = np.where(valid_lo, 1.0 - w_hi, 0.0)
        w_hi = np.where(valid_hi, w_hi, 0.0)
        perp_taps.append(((j_lo, w_lo), (j_hi, w_hi)))

    if nd == 2:
        (taps,) = perp_taps
        lins = [base + taps[0][0], base + taps[1][0]]
        ws = [taps[0][1], taps[1][1]]
    else:
        t1, t2 = perp_taps
        lins, ws = [], []
        for j1, w1 in t1:
            for j2, w2 in t2:
                lins.append(base + j1 + j2)
                ws.append(w1 * w2)
    return lins, ws, scale


def _project_chunk(vals_flat, grid, org, dirs):
    out = np.zeros(len(org))
    driving = np.argmax(np.abs(dirs), axis=1)
    for axis in range(grid.ndim):
        gsel = driving == axis
        if not gsel.any():
            continue
        lins, ws, scale = _taps_for_axis(grid, org[gsel], dirs[gsel], axis)
        acc = None
        for lin, w in zip(lins, ws):
            contrib = vals_flat[lin] * w
            acc = contrib if acc is None else acc + contrib
        out[gsel] = acc.sum(axis=1) * scale
    return out


def _backproject_chunk(p_chunk, grid, org, dirs):
    vol = np.zeros(grid.n_voxels)
    driving = np.argmax(np.abs(dirs), axis=1)
    for axis in range(grid.ndim):
        gsel = driving == axis
        if not gsel.any():
            continue
        lins, ws, scale = _taps_for_axis(grid, org[gsel], dirs[gsel], axis)
        coef = p_chunk[gsel] * scale
        idx = np.concatenate([lin.ravel() for lin in lins])
        wts = np.concatenate([(w * coef[:, None]).ravel() for w in ws])
        vol += np.bincount(idx, weights=wts, minlength=vol.size)
    return vol


def _chunk_bounds(n_rays: int, ndim: int):
    chunk = _RAY_CHUNK_2D if ndim == 2 else _RAY_CHUNK_3D
    return [(lo, min(lo + chunk, n_rays)) for lo in range(0, n_rays, chunk)]


def _map_chunks(fn, bounds, threads):
    if threads <= 1 or len(bounds) <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in bounds]
        return [f.result() for f in futures]


def forward_project_array(
    values: np.ndarray, grid: VolumeGrid, geom: Geometry, threads=None
) -> np.ndarray:
    """Array-level forward projection; returns flat ray integrals, length R."""
    threads = _resolve_threads(threads)
    vals_flat = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    org, dirs = ray_bundle(geom)
    bounds = _chunk_bounds(len(org), grid.ndim)
    parts = _map_chunks(
        lambda lo, hi: _project_chunk(vals_flat, grid, org[lo:hi], dirs[lo:hi]),
        bounds,
        threads,
    )
    out = np.empty(len(org))
    for (lo, hi), part in zip(bounds, parts):
        out[lo:hi] = part
    return out


def back_project_array(
    p_values: np.ndarray, grid: VolumeGrid, geom: Geometry, threads=None
) -> np.ndarray:
    """Array-level exact adjoint; returns a volume-shaped array."""
    threads = _resolve_threads(threads)
    p_flat = np.ascontiguousarray(p_values, dtype=np.float64).reshape(-1)
    org, dirs = ray_bundle(geom)
    if len(p_flat) != len(org):
        raise ShapeMismatchError(
            f"sinogram has {len(p_flat)} entries but geometry defines {len(org)} rays"
        )
    bounds = _chunk_bounds(len(org), grid.ndim)
    parts = _map_chunks(
        lambda lo, hi: _backproject_chunk(p_flat[lo:hi], grid, org[lo:hi], dirs[lo:hi]),
        bounds,
        threads,
    )
    vol = np.zeros(grid.n_voxels)
    for part in parts:
        vol += part
    return vol.reshape(grid.shape)


def _check_dims(geom: Geometry, grid: VolumeGrid):
    if geom.ndim != grid.ndim:
        raise ShapeMismatchError(
            f"{geom.ndim}D geometry cannot project a {grid.ndim}D grid"
        )


def forward_project(x: Volume, geom: Geometry, threads=None) -> Sinogram:
    """Apply the forward operator A: line integrals of x along every ray.

    Linear in x, deterministic, and matched exactly to back_project.
    """
    _check_dims(geom, x.grid)
    if not np.all(np.isfinite(x.values)):
        raise ValueError("volume contains non-finite values")
    flat = forward_project_array(x.values, x.grid, geom, threads)
    return Sinogram(geom, flat.reshape((geom.n_angles,) + geom.detector_shape))


def back_project(p: Sinogram, grid: VolumeGrid, threads=None) -> Volume:
    """Apply the exact adjoint A^T (backprojection) onto the given grid."""
    _check_dims(p.geom, grid)
    if not np.all(np.isfinite(p.values)):
        raise ValueError("sinogram contains non-finite values")
    return Volume(grid, back_project_array(p.values, grid, p.geom, threads))


def dense_matrix(geom: Geometry, grid: VolumeGrid, threads=None) -> np.ndarray:
    """Materialize A as a dense (N, M) matrix, one forward pass per voxel.

    Only sensible at toy scale; used to cross-check the matrix-free operators.
    """
    m = grid.n_voxels
    n = geom.n_rays
    mat = np.empty((n, m))
    basis = np.zeros(m)
    for j in range(m):
        basis[j] = 1.0
        mat[:, j] = forward_project_array(basis.reshape(grid.shape), grid, geom, threads)
        basis[j] = 0.0
    return mat


class BoundProjector:
    """A and A^T bound to one (geometry, grid) pair with precomputed taps.

    Repeated applications (iterative solvers, ODE dynamics, training) skip the
    per-call tap arithmetic.  Uses the same tap routine as forward_project /
    back_project, so the pair stays exactly adjoint.
    """

    def __init__(self, geom: Geometry, grid: VolumeGrid):
        _check_dims(geom, grid)
        self.geom = geom
        self.grid = grid
        org, dirs = ray_bundle(geom)
        self.n_rays = len(org)
        driving = np.argmax(np.abs(dirs), axis=1)
        self._groups = []
        for axis in range(grid.ndim):
            gsel = np.flatnonzero(driving == axis)
            if len(gsel) == 0:
                continue
            lins, ws, scale = _taps_for_axis(grid, org[gsel], dirs[gsel], axis)
            idx = np.concatenate([lin.ravel() for lin in lins])
            self._groups.append((gsel, lins, ws, scale, idx))

    def forward(self, values: np.ndarray) -> np.ndarray:
        """A applied to a grid-shaped (or flat) array; returns flat rays."""
        vals_flat = np.asarray(values, dtype=np.float64).reshape(-1)
        out = np.zeros(self.n_rays)
        for gsel, lins, ws, scale, _ in self._groups:
            acc = None
            for lin, w in zip(lins, ws):
                contrib = vals_flat[lin] * w
                acc = contrib if acc is None else acc + contrib
            out[gsel] = acc.sum(axis=1) * scale
        return out

    def adjoint(self, p: np.ndarray) -> np.ndarray:
        """A^T applied to flat (or detector-shaped) ray data; grid-shaped result."""
        p_flat = np.asarray(p, dtype=np.float64).reshape(-1)
        if len(p_flat) != self.n_rays:
            raise ShapeMismatchError(
                f"expected {self.n_rays} ray values, got {len(p_flat)}"
            )
        vol = np.zeros(self.grid.n_voxels)
        for gsel, lins, ws, scale, idx in self._groups:
            coef = p_flat[gsel] * scale
            wts = np.concatenate([(w * coef[:, None]).ravel() for w in ws])
            vol += np.bincount(idx, weights=wts, minlength=vol.size)
        return vol.reshape(self.grid.shape)


def bind(geom: Geometry, grid: VolumeGrid) -> BoundProjector:
    """Precompute projection taps for repeated application on one setup."""
    return BoundProjector(geom, grid)


def op_norm_estimate(
    geom: Geometry, grid: VolumeGrid, n_power_iters: int, threads=None
) -> float:
    """Power-iteration estimate of the spectral norm ||A||_2.

    One iteration applies A and A^T once.  The estimate is the Rayleigh
    quotient of A^T A, which is monotonically non-decreasing over iterations.
    Starts from the all-ones volume; A has non-negative entries, so the start
    overlaps the principal singular vector.
    """
    if not isinstance(n_power_iters, (int, np.integer)) or n_power_iters < 1:
        raise ValueError(f"n_power_iters must be >= 1, got {n_power_iters!r}")
    _check_dims(geom, grid)
    v = np.ones(grid.shape)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(int(n_power_iters)):
        w = forward_project_array(v, grid, geom, threads)
        sigma = float(np.linalg.norm(w))
        if sigma == 0.0:
            return 0.0
        z = back_project_array(w, grid, geom, threads)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return sigma
        v = z / nz
    return sigma
