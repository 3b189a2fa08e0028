"""Analytic ellipsoid phantoms, exact forward projection, and rasterization.

Attenuation is additive over ellipsoids, so intersecting shapes superpose
(the usual Shepp-Logan convention).  The ambient background is a finite
cylinder of configurable diameter so that every line integral stays finite.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import rays_for_view

__all__ = ["Ellipsoid", "Phantom", "ProjectionFrame", "ProjectionStream",
           "line_integral", "forward_project", "rasterize_slice",
           "random_phantom", "iq_phantom", "save_phantom", "load_phantom"]

# background cylinder is radially bounded and, for regularity, axially bounded
_SUPPORT_Z_HALF_MM = 1.0e6


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid with in-plane rotation and additive attenuation."""

    center_mm: tuple
    semi_axes_mm: tuple
    z_rotation_rad: float
    delta_mu_per_mm: float

    def __post_init__(self):
        if min(self.semi_axes_mm) <= 0:
            raise ConfigError("ellipsoid semi-axes must be strictly positive")

    def to_dict(self):
        return {
            "center_mm": list(self.center_mm),
            "semi_axes_mm": list(self.semi_axes_mm),
            "z_rotation_rad": self.z_rotation_rad,
            "delta_mu_per_mm": self.delta_mu_per_mm,
        }


@dataclass(frozen=True)
class Phantom:
    """Ordered ellipsoid list over a cylindrical background support."""

    ellipsoids: tuple
    background_mu_per_mm: float = 0.0
    mu_water_per_mm: float = 0.02
    support_diameter_mm: float = 500.0

    def __post_init__(self):
        if self.mu_water_per_mm <= 0:
            raise ConfigError("mu_water_per_mm must be > 0")
        object.__setattr__(self, "ellipsoids", tuple(self.ellipsoids))

    def scaled(self, s):
        """Same shapes with all attenuation values scaled by ``s``."""
        es = tuple(Ellipsoid(e.center_mm, e.semi_axes_mm, e.z_rotation_rad,
                             e.delta_mu_per_mm * s) for e in self.ellipsoids)
        return Phantom(es, self.background_mu_per_mm * s, self.mu_water_per_mm,
                       self.support_diameter_mm)

    def to_dict(self):
        return {
            "background_mu_per_mm": self.background_mu_per_mm,
            "mu_water_per_mm": self.mu_water_per_mm,
            "support_diameter_mm": self.support_diameter_mm,
            "ellipsoids": [e.to_dict() for e in self.ellipsoids],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            es = tuple(Ellipsoid(center_mm=tuple(e["center_mm"]),
                                 semi_axes_mm=tuple(e["semi_axes_mm"]),
                                 z_rotation_rad=float(e["z_rotation_rad"]),
                                 delta_mu_per_mm=float(e["delta_mu_per_mm"]))
                       for e in d["ellipsoids"])
            return cls(es,
                       background_mu_per_mm=float(d.get("background_mu_per_mm", 0.0)),
                       mu_water_per_mm=float(d["mu_water_per_mm"]),
                       support_diameter_mm=float(d.get("support_diameter_mm", 500.0)))
        except KeyError as exc:
            raise ConfigError(f"phantom document missing field {exc}") from None


@dataclass
class ProjectionFrame:
    """One detector readout in line-integral units.

    ``n0`` (incident photon counts per element) stays ``None`` until the
    noise model assigns a dose.
    """

    data: np.ndarray
    view: int
    gantry_angle_rad: float
    z_mm: float
    n0: np.ndarray = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("projection frame contains non-finite values")
        if self.n0 is not None and not np.all(self.n0 > 0):
            raise ConfigError("n0 must be strictly positive where present")


@dataclass
class ProjectionStream:
    """Ordered view sequence sharing one geometry."""

    frames: list
    geometry: object

    def __post_init__(self):
        views = [f.view for f in self.frames]
        if views != list(range(views[0], views[0] + len(views))):
            raise ConfigError("frame views must increase by exactly 1")
        shapes = {f.data.shape for f in self.frames}
        if len(shapes) > 1:
            raise ConfigError("all frames must share one detector shape")

    def __len__(self):
        return len(self.frames)

    def stack(self):
        """(K, rows, cols) array of the line-integral data."""
        return np.stack([f.data for f in self.frames])

    def stack_n0(self):
        if any(f.n0 is None for f in self.frames):
            return None
        return np.stack([f.n0 for f in self.frames])


def _ellipsoid_chords(ellipsoid, origins, directions):
    """Chord lengths of rays through one ellipsoid, vectorized.

    ``origins``/``directions`` are (..., 3); directions must be unit length
    so the quadratic roots are world arc lengths.
    """
    c = np.asarray(ellipsoid.center_mm, dtype=float)
    a = np.asarray(ellipsoid.semi_axes_mm, dtype=float)
    phi = ellipsoid.z_rotation_rad
    cp, sp = math.cos(phi), math.sin(phi)
    # rotate world -> ellipsoid frame (inverse z-rotation), then scale to unit sphere
    o = origins - c
    ox = cp * o[..., 0] + sp * o[..., 1]
    oy = -sp * o[..., 0] + cp * o[..., 1]
    oz = o[..., 2]
    ux = cp * directions[..., 0] + sp * directions[..., 1]
    uy = -sp * directions[..., 0] + cp * directions[..., 1]
    uz = directions[..., 2]
    ox, oy, oz = ox / a[0], oy / a[1], oz / a[2]
    ux, uy, uz = ux / a[0], uy / a[1], uz / a[2]
    A = ux * ux + uy * uy + uz * uz
    B = ox * ux + oy * uy + oz * uz
    C = ox * ox + oy * oy + oz * oz - 1.0
    disc = B * B - A * C
    return 2.0 * np.sqrt(np.maximum(disc, 0.0)) / A


def _cylinder_chords(radius, z_half, origins, directions):
    """Chord lengths through the finite background cylinder (axis = z).

    Intersects the radial-hit interval with the z-slab interval; empty
    intervals are coded (+inf, -inf) so the overlap clamps to zero.
    """
    ox, oy, oz = origins[..., 0], origins[..., 1], origins[..., 2]
    ux, uy, uz = directions[..., 0], directions[..., 1], directions[..., 2]
    A = ux * ux + uy * uy
    B = ox * ux + oy * uy
    C = ox * ox + oy * oy - radius * radius
    disc = B * B - A * C
    a_safe = np.where(A > 0, A, 1.0)
    uz_safe = np.where(uz != 0, uz, 1.0)
    sq = np.sqrt(np.maximum(disc, 0.0))
    radial_hit = (A > 0) & (disc > 0)
    axial_inside = (A == 0) & (C < 0)
    r_lo = np.where(radial_hit, (-B - sq) / a_safe,
                    np.where(axial_inside, -np.inf, np.inf))
    r_hi = np.where(radial_hit, (-B + sq) / a_safe,
                    np.where(axial_inside, np.inf, -np.inf))
    in_slab = np.abs(oz) <= z_half
    za = (-z_half - oz) / uz_safe
    zb = (z_half - oz) / uz_safe
    z_lo = np.where(uz != 0, np.minimum(za, zb),
                    np.where(in_slab, -np.inf, np.inf))
    z_hi = np.where(uz != 0, np.maximum(za, zb),
                    np.where(in_slab, np.inf, -np.inf))
    lo = np.maximum(r_lo, z_lo)
    hi = np.minimum(r_hi, z_hi)
    return np.maximum(hi - lo, 0.0)


def line_integral(phantom, ray):
    """Exact attenuation-length along a single ray (dimensionless)."""
    o = ray.origin_mm[None, :]
    u = ray.direction[None, :]
    return float(_line_integrals(phantom, o, u)[0])


def _line_integrals(phantom, origins, directions):
    total = np.zeros(origins.shape[:-1], dtype=float)
    for e in phantom.ellipsoids:
        total += e.delta_mu_per_mm * _ellipsoid_chords(e, origins, directions)
    if phantom.background_mu_per_mm != 0.0:
        total += phantom.background_mu_per_mm * _cylinder_chords(
            0.5 * phantom.support_diameter_mm, _SUPPORT_Z_HALF_MM,
            origins, directions)
    return total


def forward_project(phantom, geom, views):
    """Clean line-integral stream over ``views`` consecutive views."""
    if views < 1:
        raise ConfigError("views must be >= 1")
    frames = []
    for v in range(views):
        origin, dirs = rays_for_view(geom, v)
        data = _line_integrals(phantom, np.broadcast_to(origin, dirs.shape), dirs)
        from .geometry import source_position
        beta, z = source_position(geom, v)
        frames.append(ProjectionFrame(data=data, view=v, gantry_angle_rad=beta, z_mm=z))
    return ProjectionStream(frames=frames, geometry=geom)


def mu_slice(phantom, z_mm, image_size, pixel_mm):
    """Attenuation map mu(x, y) at a table position, sampled at pixel centers."""
    half = 0.5 * (image_size - 1)
    x = (np.arange(image_size) - half) * pixel_mm
    xx, yy = np.meshgrid(x, x)  # data[iy, ix]; y grows with row index
    mu = np.zeros((image_size, image_size), dtype=float)
    if phantom.background_mu_per_mm != 0.0:
        inside = xx * xx + yy * yy <= (0.5 * phantom.support_diameter_mm) ** 2
        mu += phantom.background_mu_per_mm * inside
    for e in phantom.ellipsoids:
        cp, sp = math.cos(e.z_rotation_rad), math.sin(e.z_rotation_rad)
        dx, dy = xx - e.center_mm[0], yy - e.center_mm[1]
        ex = cp * dx + sp * dy
        ey = -sp * dx + cp * dy
        ez = z_mm - e.center_mm[2]
        a = e.semi_axes_mm
        inside = (ex / a[0]) ** 2 + (ey / a[1]) ** 2 + (ez / a[2]) ** 2 <= 1.0
        mu += e.delta_mu_per_mm * inside
    return mu


def rasterize_slice(phantom, z_mm, image_size, pixel_mm):
    """Ground-truth HU slice: 1000*(mu - mu_water)/mu_water at pixel centers."""
    if image_size < 1:
        raise ConfigError("image_size must be >= 1")
    from .recon import SliceImage
    mu = mu_slice(phantom, z_mm, image_size, pixel_mm)
    hu = 1000.0 * (mu - phantom.mu_water_per_mm) / phantom.mu_water_per_mm
    return SliceImage(data=hu, z_mm=z_mm, pixel_mm=pixel_mm, provenance="rasterized")


def random_phantom(rng, body_radius_mm=70.0, n_inserts=(2, 6),
                   insert_radius_mm=(4.0, 22.0), contrast_hu=(-1000.0, 1000.0),
                   mu_water_per_mm=0.02, z_extent_mm=400.0):
    """Seeded random test object: a water body plus a few contrast inserts.

    Stands in for clinical training data; bounded sizes/contrasts keep every
    insert inside the body cylinder.
    """
    body = Ellipsoid(center_mm=(0.0, 0.0, 0.0),
                     semi_axes_mm=(body_radius_mm, body_radius_mm, z_extent_mm),
                     z_rotation_rad=0.0, delta_mu_per_mm=mu_water_per_mm)
    ellipsoids = [body]
    n = int(rng.integers(n_inserts[0], n_inserts[1] + 1))
    for _ in range(n):
        r_hi = min(insert_radius_mm[1], body_radius_mm / 2.5)
        r = rng.uniform(min(insert_radius_mm[0], r_hi), r_hi)
        ry = r * rng.uniform(0.6, 1.4)
        rho = rng.uniform(0.0, max(body_radius_mm - max(r, ry) - 2.0, 1.0))
        ang = rng.uniform(0.0, 2.0 * math.pi)
        hu = rng.uniform(*contrast_hu)
        rz = rng.uniform(0.6, 1.8)
        ellipsoids.append(Ellipsoid(
            center_mm=(rho * math.cos(ang), rho * math.sin(ang),
                       rng.uniform(-20.0, 20.0)),
            semi_axes_mm=(r, ry, r * rz * 12.0),
            z_rotation_rad=rng.uniform(0.0, math.pi),
            delta_mu_per_mm=hu / 1000.0 * mu_water_per_mm))
    return Phantom(tuple(ellipsoids), background_mu_per_mm=0.0,
                   mu_water_per_mm=mu_water_per_mm)


# nominal HU of the standard insert set; the air insert punches through the body
IQ_INSERTS = (("bone", 955.0), ("acrylic", 120.0), ("air", -1000.0),
              ("polyethylene", -95.0))


def iq_phantom(body_radius_mm=60.0, insert_radius_mm=9.0, insert_ring_mm=32.0,
               mu_water_per_mm=0.02, z_extent_mm=400.0):
    """Water cylinder with four nominal-HU inserts on a ring.

    Layout and materials follow the usual accreditation-phantom module:
    bone-like 955 HU, acrylic 120 HU, air -1000 HU, polyethylene -95 HU.
    Insert positions (counter-clockwise from +x): bone, acrylic, air,
    polyethylene.
    """
    mu_w = mu_water_per_mm
    body = Ellipsoid((0.0, 0.0, 0.0), (body_radius_mm, body_radius_mm, z_extent_mm),
                     0.0, mu_w)
    ellipsoids = [body]
    for i, (_, hu) in enumerate(IQ_INSERTS):
        ang = 0.25 * math.pi + 0.5 * math.pi * i
        ellipsoids.append(Ellipsoid(
            (insert_ring_mm * math.cos(ang), insert_ring_mm * math.sin(ang), 0.0),
            (insert_radius_mm, insert_radius_mm, z_extent_mm),
            0.0, hu / 1000.0 * mu_w))
    return Phantom(tuple(ellipsoids), background_mu_per_mm=0.0,
                   mu_water_per_mm=mu_w)


def iq_insert_centers(insert_ring_mm=32.0):
    """(name, x_mm, y_mm) for each insert of :func:`iq_phantom`."""
    out = []
    for i, (name, hu) in enumerate(IQ_INSERTS):
        ang = 0.25 * math.pi + 0.5 * math.pi * i
        out.append((name, insert_ring_mm * math.cos(ang),
                    insert_ring_mm * math.sin(ang), hu))
    return out


def save_phantom(phantom, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(phantom.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_phantom(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not a valid phantom document: {exc}") from None
    return Phantom.from_dict(doc)
