"""Acquisition geometries for fan-beam (2D) and circular cone-beam (3D) scans.

Conventions used throughout the toolkit:

* The source starts on the +x axis at angle 0 and rotates counter-clockwise.
* Lengths are millimetres, angles are radians; files and the CLI use degrees.
* Projection angles are uniformly spaced on the half-open interval
  [start, end): angle i = start + i * (end - start) / n_angles.  For a full
  turn this avoids duplicating the 0 = 2*pi view; the same rule is applied to
  partial arcs so the angular increment is always span / n_angles.
* The flat detector is centred on and perpendicular to the source-isocenter
  axis, at distance detector_distance behind the rotation centre.  Its u axis
  points along the rotation direction; in 3D the v axis is +z and row index
  increases with z.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidGeometryError

FULL_TURN = 2.0 * math.pi


def _check_count(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvalidGeometryError(f"{name} must be an integer, got {value!r}")
    if value < 1:
        raise InvalidGeometryError(f"{name} must be >= 1, got {value}")
    return int(value)


def _check_range(value) -> tuple[float, float]:
    start, end = (float(value[0]), float(value[1]))
    if not (math.isfinite(start) and math.isfinite(end)):
        raise InvalidGeometryError(f"angular_range must be finite, got {value!r}")
    if end <= start:
        raise InvalidGeometryError(
            f"angular_range must satisfy end > start, got ({start}, {end})"
        )
    return (start, end)


@dataclass(frozen=True)
class VolumeGrid:
    """Regular voxel grid, centred on the rotation axis by default.

    Parameters
    ----------
    shape : tuple of int
        Voxel counts, (nx, ny) in 2D or (nx, ny, nz) in 3D.
    voxel_size : float
        Isotropic voxel edge length in mm.
    origin : tuple of float, optional
        World coordinates of the grid centre.  Defaults to the isocenter.
    """

    shape: tuple[int, ...]
    voxel_size: float
    origin: tuple[float, ...] = None

    def __post_init__(self):
        shape = tuple(_check_count("grid shape entry", n) for n in self.shape)
        if len(shape) not in (2, 3):
            raise InvalidGeometryError(
                f"grid must be 2D or 3D, got shape {shape}"
            )
        if not (self.voxel_size > 0 and math.isfinite(self.voxel_size)):
            raise InvalidGeometryError(
                f"voxel_size must be > 0, got {self.voxel_size}"
            )
        origin = self.origin
        if origin is None:
            origin = (0.0,) * len(shape)
        origin = tuple(float(c) for c in origin)
        if len(origin) != len(shape):
            raise InvalidGeometryError(
                f"origin has {len(origin)} coordinates for a {len(shape)}D grid"
            )
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", origin)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    def axis_centers(self, axis: int) -> np.ndarray:
        """Voxel centre coordinates along one axis, in mm."""
        n = self.shape[axis]
        return self.origin[axis] + (np.arange(n) - (n - 1) / 2.0) * self.voxel_size


@dataclass(frozen=True)
class FanGeometry:
    """2D fan-beam scan: point source, linear detector, circular trajectory."""

    n_angles: int
    n_detectors: int
    source_distance: float
    detector_distance: float
    detector_pixel_size: float = 1.0
    angular_range: tuple[float, float] = (0.0, FULL_TURN)

    def __post_init__(self):
        object.__setattr__(self, "n_angles", _check_count("n_angles", self.n_angles))
        object.__setattr__(
            self, "n_detectors", _check_count("n_detectors", self.n_detectors)
        )
        if not self.source_distance > 0:
            raise InvalidGeometryError(
                f"source_distance must be > 0, got {self.source_distance}"
            )
        if self.detector_distance < 0:
            raise InvalidGeometryError(
                f"detector_distance must be >= 0, got {self.detector_distance}"
            )
        if not self.detector_pixel_size > 0:
            raise InvalidGeometryError(
                f"detector_pixel_size must be > 0, got {self.detector_pixel_size}"
            )
        object.__setattr__(self, "source_distance", float(self.source_distance))
        object.__setattr__(self, "detector_distance", float(self.detector_distance))
        object.__setattr__(
            self, "detector_pixel_size", float(self.detector_pixel_size)
        )
        object.__setattr__(self, "angular_range", _check_range(self.angular_range))

    @property
    def ndim(self) -> int:
        return 2

    @property
    def angular_increment(self) -> float:
        start, end = self.angular_range
        return (end - start) / self.n_angles

    @property
    def angles(self) -> np.ndarray:
        start, _ = self.angular_range
        return start + np.arange(self.n_angles) * self.angular_increment

    @property
    def n_rays(self) -> int:
        return self.n_angles * self.n_detectors

    @property
    def detector_shape(self) -> tuple[int, ...]:
        return (self.n_detectors,)

    def detector_offsets(self) -> np.ndarray:
        """Signed u coordinates of detector pixel centres, in mm."""
        n = self.n_detectors
        return (np.arange(n) - (n - 1) / 2.0) * self.detector_pixel_size

    def source_position(self, angle: float) -> np.ndarray:
        return self.source_distance * np.array([math.cos(angle), math.sin(angle)])

    def detector_center(self, angle: float) -> np.ndarray:
        return -self.detector_distance * np.array([math.cos(angle), math.sin(angle)])

    def detector_u_axis(self, angle: float) -> np.ndarray:
        return np.array([-math.sin(angle), math.cos(angle)])


@dataclass(frozen=True)
class ConeGeometry:
    """3D circular cone-beam scan with a flat-panel detector."""

    n_angles: int
    detector_rows: int
    detector_cols: int
    source_distance: float
    detector_distance: float
    detector_pixel_size: float = 1.0
    angular_range: tuple[float, float] = (0.0, FULL_TURN)
    trajectory_height: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "n_angles", _check_count("n_angles", self.n_angles))
        object.__setattr__(
            self, "detector_rows", _check_count("detector_rows", self.detector_rows)
        )
        object.__setattr__(
            self, "detector_cols", _check_count("detector_cols", self.detector_cols)
        )
        if not self.source_distance > 0:
            raise InvalidGeometryError(
                f"source_distance must be > 0, got {self.source_distance}"
            )
        if self.detector_distance < 0:
            raise InvalidGeometryError(
                f"detector_distance must be >= 0, got {self.detector_distance}"
            )
        if not self.detector_pixel_size > 0:
            raise InvalidGeometryError(
                f"detector_pixel_size must be > 0, got {self.detector_pixel_size}"
            )
        object.__setattr__(self, "source_distance", float(self.source_distance))
        object.__setattr__(self, "detector_distance", float(self.detector_distance))
        object.__setattr__(
            self, "detector_pixel_size", float(self.detector_pixel_size)
        )
        object.__setattr__(self, "trajectory_height", float(self.trajectory_height))
        object.__setattr__(self, "angular_range", _check_range(self.angular_range))
        if self.cone_angle >= math.pi / 2.0:
            raise InvalidGeometryError(
                f"cone angle {math.degrees(self.cone_angle):.2f} deg must be < 90 deg"
            )

    @property
    def ndim(self) -> int:
        return 3

    @property
    def cone_angle(self) -> float:
        """Full vertical opening angle of the beam, in radians."""
        half_height = 0.5 * self.detector_rows * self.detector_pixel_size
        return 2.0 * math.atan2(
            half_height, self.source_distance + self.detector_distance
        )

    @property
    def angular_increment(self) -> float:
        start, end = self.angular_range
        return (end - start) / self.n_angles

    @property
    def angles(self) -> np.ndarray:
        start, _ = self.angular_range
        return start + np.arange(self.n_angles) * self.angular_increment

    @property
    def n_rays(self) -> int:
        return self.n_angles * self.detector_rows * self.detector_cols

    @property
    def detector_shape(self) -> tuple[int, ...]:
        return (self.detector_rows, self.detector_cols)

    def detector_u_offsets(self) -> np.ndarray:
        n = self.detector_cols
        return (np.arange(n) - (n - 1) / 2.0) * self.detector_pixel_size

    def detector_v_offsets(self) -> np.ndarray:
        n = self.detector_rows
        return (np.arange(n) - (n - 1) / 2.0) * self.detector_pixel_size

    def source_position(self, angle: float) -> np.ndarray:
        return np.array(
            [
                self.source_distance * math.cos(angle),
                self.source_distance * math.sin(angle),
                self.trajectory_height,
            ]
        )

    def detector_center(self, angle: float) -> np.ndarray:
        return np.array(
            [
                -self.detector_distance * math.cos(angle),
                -self.detector_distance * math.sin(angle),
                self.trajectory_height,
            ]
        )

    def detector_u_axis(self, angle: float) -> np.ndarray:
        return np.array([-math.sin(angle), math.cos(angle), 0.0])

    def detector_v_axis(self, angle: float) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])


Geometry = FanGeometry | ConeGeometry


@dataclass
class Ray:
    """A single source-to-detector-pixel ray."""

    origin: np.ndarray
    direction: np.ndarray
    angle_index: int
    detector_index: int | tuple[int, int]


def make_fan_geometry(
    n_angles: int,
    n_detectors: int,
    source_distance: float,
    detector_distance: float,
    angular_range: tuple[float, float] = (0.0, FULL_TURN),
    detector_pixel_size: float = 1.0,
) -> FanGeometry:
    """Build a fan-beam geometry with uniformly spaced angles."""
    return FanGeometry(
        n_angles=n_angles,
        n_detectors=n_detectors,
        source_distance=source_distance,
        detector_distance=detector_distance,
        detector_pixel_size=detector_pixel_size,
        angular_range=angular_range,
    )


def make_cone_geometry(
    n_angles: int,
    detector_rows: int,
    detector_cols: int,
    source_distance: float,
    detector_distance: float,
    detector_pixel_size: float,
    angular_range: tuple[float, float] = (0.0, FULL_TURN),
    trajectory_height: float = 0.0,
) -> ConeGeometry:
    """Build a circular cone-beam geometry with uniformly spaced angles."""
    return ConeGeometry(
        n_angles=n_angles,
        detector_rows=detector_rows,
        detector_cols=detector_cols,
        source_distance=source_distance,
        detector_distance=detector_distance,
        detector_pixel_size=detector_pixel_size,
        angular_range=angular_range,
        trajectory_height=trajectory_height,
    )


def ray_for(
    geom: Geometry, angle_index: int, detector_index: int | tuple[int, int]
) -> Ray:
    """Return the ray from the source at one angle to one detector pixel centre.

    The direction is the unit vector from the source towards the pixel.
    Raises IndexError for out-of-range indices.
    """
    if not 0 <= angle_index < geom.n_angles:
        raise IndexError(
            f"angle_index {angle_index} out of range [0, {geom.n_angles})"
        )
    angle = float(geom.angles[angle_index])
    origin = geom.source_position(angle)
    if isinstance(geom, FanGeometry):
        j = int(detector_index)
        if not 0 <= j < geom.n_detectors:
            raise IndexError(
                f"detector_index {j} out of range [0, {geom.n_detectors})"
            )
        u = geom.detector_offsets()[j]
        target = geom.detector_center(angle) + u * geom.detector_u_axis(angle)
        det_idx: int | tuple[int, int] = j
    else:
        row, col = detector_index
        if not 0 <= row < geom.detector_rows:
            raise IndexError(
                f"detector row {row} out of range [0, {geom.detector_rows})"
            )
        if not 0 <= col < geom.detector_cols:
            raise IndexError(
                f"detector col {col} out of range [0, {geom.detector_cols})"
            )
        u = geom.detector_u_offsets()[col]
        v = geom.detector_v_offsets()[row]
        target = (
            geom.detector_center(angle)
            + u * geom.detector_u_axis(angle)
            + v * geom.detector_v_axis(angle)
        )
        det_idx = (int(row), int(col))
    direction = target - origin
    direction = direction / np.linalg.norm(direction)
    return Ray(
        origin=origin,
        direction=direction,
        angle_index=int(angle_index),
        detector_index=det_idx,
    )


def ray_bundle(geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """All ray origins and unit directions, vectorised.

    Returns
    -------
    origins : ndarray, shape (R, ndim)
    directions : ndarray, shape (R, ndim)
        Rays are ordered angle-major, then detector row (3D), then column,
        matching ``Sinogram.values.reshape(-1)``.
    """
    angles = geom.angles
    cos_b = np.cos(angles)
    sin_b = np.sin(angles)
    if isinstance(geom, FanGeometry):
        src = geom.source_distance * np.stack([cos_b, sin_b], axis=1)
        det_c = -geom.detector_distance * np.stack([cos_b, sin_b], axis=1)
        e_u = np.stack([-sin_b, cos_b], axis=1)
        u = geom.detector_offsets()
        targets = det_c[:, None, :] + u[None, :, None] * e_u[:, None, :]
        origins = np.broadcast_to(src[:, None, :], targets.shape)
        d = targets - origins
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return origins.reshape(-1, 2).copy(), d.reshape(-1, 2)
    src = np.stack(
        [
            geom.source_distance * cos_b,
            geom.source_distance * sin_b,
            np.full_like(cos_b, geom.trajectory_height),
        ],
        axis=1,
    )
    det_c = np.stack(
        [
            -geom.detector_distance * cos_b,
            -geom.detector_distance * sin_b,
            np.full_like(cos_b, geom.trajectory_height),
        ],
        axis=1,
    )
    e_u = np.stack([-sin_b, cos_b, np.zeros_like(cos_b)], axis=1)
    u = geom.detector_u_offsets()
    v = geom.detector_v_offsets()
    # targets[a, r, c] = det_c[a] + u[c] * e_u[a] + v[r] * e_z
    targets = (
        det_c[:, None, None, :]
        + u[None, None, :, None] * e_u[:, None, None, :]
    )
    targets = targets + np.concatenate(
        [np.zeros((len(v), 2)), v[:, None]], axis=1
    )[None, :, None, :]
    origins = np.broadcast_to(src[:, None, None, :], targets.shape)
    d = targets - origins
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return origins.reshape(-1, 3).copy(), d.reshape(-1, 3)


def geometry_to_dict(geom: Geometry) -> dict:
    """JSON-ready description; angles in degrees."""
    start, end = geom.angular_range
    common = {
        "n_angles": geom.n_angles,
        "angular_range": [math.degrees(start), math.degrees(end)],
        "source_distance": geom.source_distance,
        "detector_distance": geom.detector_distance,
        "detector_pixel_size": geom.detector_pixel_size,
    }
    if isinstance(geom, FanGeometry):
        return {"kind": "fan", "n_detectors": geom.n_detectors, **common}
    return {
        "kind": "cone",
        "detector_rows": geom.detector_rows,
        "detector_cols": geom.detector_cols,
        "trajectory_height": geom.trajectory_height,
        **common,
    }


def geometry_from_dict(doc: dict) -> Geometry:
    """Inverse of geometry_to_dict."""
    try:
        kind = doc["kind"]
        rng = doc["angular_range"]
        angular_range = (math.radians(rng[0]), math.radians(rng[1]))
        if kind == "fan":
            return FanGeometry(
                n_angles=doc["n_angles"],
                n_detectors=doc["n_detectors"],
                source_distance=doc["source_distance"],
                detector_distance=doc["detector_distance"],
                detector_pixel_size=doc["detector_pixel_size"],
                angular_range=angular_range,
            )
        if kind == "cone":
            return ConeGeometry(
                n_angles=doc["n_angles"],
                detector_rows=doc["detector_rows"],
                detector_cols=doc["detector_cols"],
                source_distance=doc["source_distance"],
                detector_distance=doc["detector_distance"],
                detector_pixel_size=doc["detector_pixel_size"],
                angular_range=angular_range,
                trajectory_height=doc.get("trajectory_height", 0.0),
            )
    except KeyError as exc:
        raise InvalidGeometryError(f"geometry document missing field {exc}") from exc
    raise InvalidGeometryError(f"unknown geometry kind {doc.get('kind')!r}")


def save_geometry(path, geom: Geometry) -> None:
    Path(path).write_text(json.dumps(geometry_to_dict(geom), indent=2, sort_keys=True))


def load_geometry(path) -> Geometry:
    return geometry_from_dict(json.loads(Path(path).read_text()))
