"""Photon-noise model for projection data.

All operations work on line-integral values ``p`` and incident photon counts
``n0`` (noise-equivalent quanta).  The measurement model is the Gaussian
approximation of compound-Poisson counting noise,

    p_n = p_c + x / sqrt(n0 * exp(-p_c)),   x ~ N(0, 1),

which makes low-dose simulation from full-dose data and the closed-form
noise prior exact algebra rather than resampling.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StageContractError
from .geometry import fan_angles

__all__ = ["DoseProfile", "NoisePriorMap", "counts_to_line_integral",
           "inject_noise", "simulate_low_dose", "noise_prior",
           "make_dose_profile", "frame_rng"]


@dataclass(frozen=True)
class DoseProfile:
    """Separable incident-count model: n0 = base * per_view * per_channel.

    ``per_view_scale`` carries tube-current (AEC) modulation over table
    position; ``per_channel_scale`` carries the bowtie shape across the
    detector.
    """

    per_view_scale: np.ndarray
    per_channel_scale: np.ndarray
    base_n0: float

    def __post_init__(self):
        object.__setattr__(self, "per_view_scale",
                           np.asarray(self.per_view_scale, dtype=float))
        object.__setattr__(self, "per_channel_scale",
                           np.asarray(self.per_channel_scale, dtype=float))
        if self.base_n0 <= 0 or np.any(self.per_view_scale <= 0) \
                or np.any(self.per_channel_scale <= 0):
            raise ConfigError("dose profile entries must be strictly positive")

    def n0_for_view(self, view):
        """(rows, cols) incident-count map of one view."""
        return self.base_n0 * self.per_view_scale[view] * self.per_channel_scale

    def n0_stack(self):
        """(K, rows, cols) incident-count maps for the whole profile."""
        return self.base_n0 * self.per_view_scale[:, None, None] \
            * self.per_channel_scale[None, :, :]

    def scaled(self, fraction):
        """Profile at a reduced dose level (fraction of the base counts)."""
        if not 0.0 < fraction <= 1.0:
            raise ConfigError("dose fraction must lie in (0, 1]")
        return DoseProfile(self.per_view_scale, self.per_channel_scale,
                           self.base_n0 * fraction)


@dataclass(frozen=True)
class NoisePriorMap:
    """Deterministic per-element noise amplitude (the extra denoiser input).

    The companion weight map (the unit-variance factor the denoiser
    implicitly estimates) is never computed; only its amplitude is.
    """

    phi: np.ndarray
    n_l0: np.ndarray
    n_f0: np.ndarray

    def __post_init__(self):
        if np.any(self.phi < 0):
            raise ConfigError("noise prior must be non-negative")


def counts_to_line_integral(counts, n0, floor=1.0, stats=None):
    """Log-transform detector counts to line integrals, p = -ln(N/N0).

    Counts at or below zero are photon-starved: they are clamped to
    ``floor`` and counted in ``stats['clamped']`` when a dict is passed.
    """
    counts = np.asarray(counts, dtype=float)
    n0 = np.asarray(n0, dtype=float)
    if np.any(n0 <= 0):
        raise StageContractError("incident counts n0 must be strictly positive")
    bad = counts <= 0
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + int(np.count_nonzero(bad))
    clamped = np.where(bad, floor, counts)
    return -np.log(clamped / n0)


def inject_noise(p_c, n0, rng):
    """Add dose-dependent Gaussian photon noise to clean line integrals."""
    p_c = np.asarray(p_c, dtype=float)
    n0 = np.asarray(n0, dtype=float)
    if np.any(n0 <= 0):
        raise StageContractError("n0 must be strictly positive")
    sigma = np.sqrt(np.exp(p_c) / n0)
    return p_c + sigma * rng.standard_normal(p_c.shape)


def simulate_low_dose(p_f, n_f0, n_l0, rng):
    """Simulate a low-dose measurement from full-dose data.

    Adds the variance difference between the two dose levels,
    sqrt((1/n_l0 - 1/n_f0) * exp(p_f)), so the result is distributed like a
    direct low-dose acquisition of the same object.
    """
    p_f = np.asarray(p_f, dtype=float)
    n_f0 = np.asarray(n_f0, dtype=float)
    n_l0 = np.asarray(n_l0, dtype=float)
    _check_dose_pair(n_l0, n_f0)
    sigma = np.sqrt((1.0 / n_l0 - 1.0 / n_f0) * np.exp(p_f))
    return p_f + sigma * rng.standard_normal(p_f.shape)


def noise_prior(p_l, n_l0, n_f0):
    """Per-element noise amplitude map for a (low, full) dose pair."""
    p_l = np.asarray(p_l, dtype=float)
    n_f0 = np.asarray(n_f0, dtype=float)
    n_l0 = np.asarray(n_l0, dtype=float)
    _check_dose_pair(n_l0, n_f0)
    phi = np.sqrt((1.0 / n_l0 - 1.0 / n_f0) * np.exp(p_l))
    return NoisePriorMap(phi=phi, n_l0=n_l0, n_f0=n_f0)


def _check_dose_pair(n_l0, n_f0):
    if np.any(n_l0 <= 0):
        raise StageContractError("low-dose counts must be strictly positive")
    if np.any(n_l0 > n_f0):
        raise StageContractError(
            "low-dose counts exceed full-dose counts; dose increase is not "
            "a simulation target")


def frame_rng(seed, view, label=0):
    """Independent per-frame generator so parallel order cannot matter."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(label, view)))


def make_dose_profile(geom, kind, num_views, base_n0=1.0e5, bowtie_exponent=2.0,
                      aec_min=0.5, aec_max=1.0, aec_period_mm=None):
    """Build a dose profile over ``num_views`` views.

    kind
        ``uniform``  constant counts everywhere;
        ``bowtie``   per-channel cosine-power falloff toward the fan edges;
        ``aec_sine`` sinusoidal per-view modulation between ``aec_min`` and
        ``aec_max`` with one period per ``aec_period_mm`` of table travel
        (defaults to one table feed).  ``bowtie`` and ``aec_sine`` compose
        with each other implicitly through the separable model, so build two
        profiles and multiply the scales if both are wanted.
    """
    if base_n0 <= 0:
        raise ConfigError("base_n0 must be > 0")
    shape = (geom.detector_rows, geom.detector_cols)
    per_view = np.ones(num_views, dtype=float)
    per_channel = np.ones(shape, dtype=float)
    if kind == "uniform":
        pass
    elif kind == "bowtie":
        gamma = fan_angles(geom)
        per_channel = per_channel * np.cos(gamma)[None, :] ** bowtie_exponent
    elif kind == "aec_sine":
        if not 0.0 < aec_min <= aec_max:
            raise ConfigError("aec scales must satisfy 0 < min <= max")
        period = aec_period_mm if aec_period_mm is not None else geom.table_feed_mm
        z = geom.table_feed_mm * np.arange(num_views) / geom.views_per_rotation
        mid = 0.5 * (aec_min + aec_max)
        amp = 0.5 * (aec_max - aec_min)
        per_view = mid + amp * np.sin(2.0 * math.pi * z / period)
    else:
        raise ConfigError(f"unknown dose profile kind: {kind!r}")
    return DoseProfile(per_view_scale=per_view, per_channel_scale=per_channel,
                       base_n0=base_n0)
