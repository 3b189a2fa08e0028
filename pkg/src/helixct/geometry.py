"""Third-generation helical multi-slice fan-beam scanner geometry.

Conventions used throughout the package:

* The source orbits the z axis at radius ``focal_length_mm`` and the table
  moves in +z, so the source z grows linearly with the view index.
* Gantry angle ``beta`` of view ``v`` is ``2*pi*v/views_per_rotation``; the
  source sits at ``(-R*sin(beta), R*cos(beta), z)``.  With a curved
  (equiangular) detector and fan angle ``gamma`` measured from the central
  ray, a ray maps to the parallel pair ``theta = beta + gamma`` and
  ``d = R*sin(gamma)`` where ``x*cos(theta) + y*sin(theta) = d`` is the
  in-plane line equation.
* Detector row offsets are linearized at the isocenter plane: the ray of
  row ``r`` crosses the rotation axis at ``z_source + row_offset(r)``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = ["ScannerGeometry", "Ray", "source_position", "ray_for_channel",
           "rays_for_view", "fan_angles", "row_offsets"]


@dataclass(frozen=True)
class ScannerGeometry:
    """Immutable description of a helical multi-row fan-beam scanner.

    Attributes
    ----------
    focal_length_mm : float
        Source to isocenter distance R.
    detector_rows, detector_cols : int
        Detector grid size.
    channel_angle_step_rad : float
        Fan-angle increment between adjacent columns (equiangular detector).
    row_spacing_iso_mm : float
        Row pitch projected to the isocenter plane.
    views_per_rotation : int
        Views acquired per full gantry rotation.
    table_feed_mm : float
        Table advance per full rotation.
    slice_thickness_mm : float
        Reconstruction slice thickness D (support of the triangular
        z-weight).
    z_start_mm : float
        Table position of view 0.
    """

    focal_length_mm: float
    detector_rows: int
    detector_cols: int
    channel_angle_step_rad: float
    row_spacing_iso_mm: float
    views_per_rotation: int
    table_feed_mm: float
    slice_thickness_mm: float
    z_start_mm: float = 0.0

    def __post_init__(self):
        if self.detector_rows < 1 or self.detector_cols < 1:
            raise ConfigError("detector grid must have at least one row and column")
        if self.views_per_rotation < 1:
            raise ConfigError("views_per_rotation must be >= 1")
        for name in ("focal_length_mm", "channel_angle_step_rad",
                     "row_spacing_iso_mm", "table_feed_mm", "slice_thickness_mm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.full_fan_angle_rad >= math.pi:
            raise ConfigError("full fan angle must be below pi")
        if not math.isfinite(self.pitch):
            raise ConfigError("helical pitch is not finite")

    @property
    def full_fan_angle_rad(self):
        return self.detector_cols * self.channel_angle_step_rad

    @property
    def max_fan_angle_rad(self):
        """Largest |gamma| over detector columns."""
        return 0.5 * (self.detector_cols - 1) * self.channel_angle_step_rad

    @property
    def pitch(self):
        """Helical pitch: table feed per rotation over total collimation."""
        return self.table_feed_mm / (self.detector_rows * self.row_spacing_iso_mm)

    @property
    def views_per_half_turn(self):
        return self.views_per_rotation // 2

    def z_at_angle(self, beta_rad):
        """Source z for a (possibly fractional, unwrapped) gantry angle."""
        return self.z_start_mm + self.table_feed_mm * beta_rad / (2.0 * math.pi)

    def to_dict(self):
        return {
            "focal_length_mm": self.focal_length_mm,
            "detector_rows": self.detector_rows,
            "detector_cols": self.detector_cols,
            "channel_angle_step_rad": self.channel_angle_step_rad,
            "row_spacing_iso_mm": self.row_spacing_iso_mm,
            "views_per_rotation": self.views_per_rotation,
            "table_feed_mm": self.table_feed_mm,
            "slice_thickness_mm": self.slice_thickness_mm,
            "z_start_mm": self.z_start_mm,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad geometry block: {exc}") from None


@dataclass(frozen=True)
class Ray:
    """A 3D ray with unit direction."""

    origin_mm: np.ndarray
    direction: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "origin_mm", np.asarray(self.origin_mm, dtype=float))
        d = np.asarray(self.direction, dtype=float)
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > 1e-12:
            d = d / n
        object.__setattr__(self, "direction", d)


def fan_angles(geom):
    """Fan angle gamma for every detector column, centered on the midline."""
    cols = np.arange(geom.detector_cols, dtype=float)
    return (cols - 0.5 * (geom.detector_cols - 1)) * geom.channel_angle_step_rad


def row_offsets(geom):
    """z offset at the isocenter for every detector row."""
    rows = np.arange(geom.detector_rows, dtype=float)
    return (rows - 0.5 * (geom.detector_rows - 1)) * geom.row_spacing_iso_mm


def source_position(geom, view):
    """Unwrapped gantry angle and table position of a view.

    ``view`` may be fractional; the trajectory is the continuous helix
    sampled by integer views.
    """
    if view < 0:
        raise ConfigError("view index must be >= 0")
    angle = 2.0 * math.pi * view / geom.views_per_rotation
    z = geom.z_start_mm + geom.table_feed_mm * view / geom.views_per_rotation
    return angle, z


def source_point(geom, view):
    """World coordinates of the focal spot at a view."""
    beta, z = source_position(geom, view)
    r = geom.focal_length_mm
    return np.array([-r * math.sin(beta), r * math.cos(beta), z])


def ray_for_channel(geom, view, row, col):
    """Ray through one detector element.

    The ray starts at the focal spot and crosses the rotation axis region at
    in-plane distance ``d = R*sin(gamma)`` along the parallel normal
    ``theta = beta + gamma``, at height ``z_source + row_offset``.
    """
    if not (0 <= row < geom.detector_rows):
        raise IndexError(f"row {row} out of range")
    if not (0 <= col < geom.detector_cols):
        raise IndexError(f"col {col} out of range")
    beta, z = source_position(geom, view)
    r = geom.focal_length_mm
    gamma = (col - 0.5 * (geom.detector_cols - 1)) * geom.channel_angle_step_rad
    off = (row - 0.5 * (geom.detector_rows - 1)) * geom.row_spacing_iso_mm
    theta = beta + gamma
    d = r * math.sin(gamma)
    origin = np.array([-r * math.sin(beta), r * math.cos(beta), z])
    closest = np.array([d * math.cos(theta), d * math.sin(theta), z + off])
    return Ray(origin_mm=origin, direction=closest - origin)


def rays_for_view(geom, view):
    """Vectorized rays of a whole view.

    Returns
    -------
    origin : (3,) array
        Focal spot position (shared by all elements of the view).
    directions : (rows, cols, 3) array
        Unit directions, row/col ordered like a ProjectionFrame.
    """
    beta, z = source_position(geom, view)
    r = geom.focal_length_mm
    gamma = fan_angles(geom)
    off = row_offsets(geom)
    theta = beta + gamma
    d = r * np.sin(gamma)
    origin = np.array([-r * math.sin(beta), r * math.cos(beta), z])
    closest = np.empty((geom.detector_rows, geom.detector_cols, 3))
    closest[:, :, 0] = d * np.cos(theta)
    closest[:, :, 1] = d * np.sin(theta)
    closest[:, :, 2] = z + off[:, None]
    directions = closest - origin
    directions /= np.linalg.norm(directions, axis=2, keepdims=True)
    return origin, directions
