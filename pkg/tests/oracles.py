"""Independent reference implementations used as test oracles.

These deliberately re-derive results through different formulations than
the library (matrix transforms instead of inline trigonometry, normalized
quadratics instead of world-frame ones, plain loops instead of vectorized
kernels) so agreement is meaningful.
"""

import math

import numpy as np


def rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def oracle_ray(geom, view, row, col):
    """Build the detector ray via explicit rotation matrices."""
    beta = 2.0 * math.pi * view / geom.views_per_rotation
    z = geom.z_start_mm + geom.table_feed_mm * view / geom.views_per_rotation
    gamma = (col - 0.5 * (geom.detector_cols - 1)) * geom.channel_angle_step_rad
    off = (row - 0.5 * (geom.detector_rows - 1)) * geom.row_spacing_iso_mm
    r = geom.focal_length_mm
    rot = rotation_z(beta)
    origin = rot @ np.array([0.0, r, 0.0]) + np.array([0.0, 0.0, z])
    # in the beta=0 frame the ray leaves (0, R) at fan angle gamma and gains
    # `off` in z while traveling the in-plane distance R*cos(gamma)
    d0 = np.array([math.sin(gamma), -math.cos(gamma),
                   off / (r * math.cos(gamma))])
    direction = rot @ d0
    return origin, direction / np.linalg.norm(direction)


def oracle_ellipsoid_chord(ellipsoid, origin, direction):
    """Chord length via a normalized quadratic in the unit-sphere frame."""
    t = np.diag(1.0 / np.asarray(ellipsoid.semi_axes_mm, dtype=float)) \
        @ rotation_z(-ellipsoid.z_rotation_rad)
    o = t @ (np.asarray(origin, dtype=float) - np.asarray(ellipsoid.center_mm))
    u = t @ np.asarray(direction, dtype=float)
    un = np.linalg.norm(u)
    uhat = u / un
    b = float(o @ uhat)
    c = float(o @ o) - 1.0
    disc = b * b - c
    if disc <= 0.0:
        return 0.0
    return 2.0 * math.sqrt(disc) / un


def oracle_cylinder_chord(radius, origin, direction):
    """Chord through an (effectively) infinite z-aligned cylinder."""
    ox, oy = origin[0], origin[1]
    ux, uy = direction[0], direction[1]
    a = ux * ux + uy * uy
    if a == 0.0:
        return 0.0 if ox * ox + oy * oy > radius * radius else 2.0e6
    b = (ox * ux + oy * uy) / a
    c = (ox * ox + oy * oy - radius * radius) / a
    disc = b * b - c
    if disc <= 0.0:
        return 0.0
    return 2.0 * math.sqrt(disc)


def oracle_line_integral(phantom, origin, direction):
    total = 0.0
    for e in phantom.ellipsoids:
        total += e.delta_mu_per_mm * oracle_ellipsoid_chord(e, origin, direction)
    if phantom.background_mu_per_mm != 0.0:
        total += phantom.background_mu_per_mm * oracle_cylinder_chord(
            0.5 * phantom.support_diameter_mm, origin, direction)
    return total


def oracle_ssim(x, y, k1=0.01, k2=0.03, win_size=11, sigma=1.5, drange=255.0):
    """Loop-based local SSIM over valid window positions."""
    k = np.arange(win_size) - (win_size - 1) / 2.0
    g = np.exp(-0.5 * (k / sigma) ** 2)
    w = np.outer(g, g)
    w /= w.sum()
    c1 = (k1 * drange) ** 2
    c2 = (k2 * drange) ** 2
    h, wd = x.shape
    vals = []
    for i in range(h - win_size + 1):
        for j in range(wd - win_size + 1):
            px = x[i:i + win_size, j:j + win_size]
            py = y[i:i + win_size, j:j + win_size]
            mx = (w * px).sum()
            my = (w * py).sum()
            sxx = (w * px * px).sum() - mx * mx
            syy = (w * py * py).sum() - my * my
            sxy = (w * px * py).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * sxy + c2))
                        / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return float(np.mean(vals))
