"""Pipeline configuration: defaults, file loading, dotted overrides, and
validation.

A config file only needs the keys it changes; everything else comes from
the defaults below.  ``--set a.b.c=value`` overrides win over the file.
The resolved document is hashed (canonical JSON) into every provenance
record, so identical configs are recognizable across runs.
"""

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .geometry import ScannerGeometry
from .io import canonical_json, sha256_of_obj

__all__ = ["default_config", "load_config", "resolve_config", "config_hash",
           "geometry_from_config", "parse_set_overrides"]


def default_config():
    return {
        "seed": 20260801,
        "geometry": {
            "focal_length_mm": 300.0,
            "detector_rows": 8,
            "detector_cols": 128,
            "channel_angle_step_rad": 0.0046,
            "row_spacing_iso_mm": 1.5,
            "views_per_rotation": 192,
            "table_feed_mm": 9.6,
            "slice_thickness_mm": 3.0,
        },
        "phantom": {
            "kind": "iq",            # iq | uniform | random | file
            "path": None,             # for kind=file
            "body_radius_mm": 52.0,
            "insert_radius_mm": 12.0,
            "insert_ring_mm": 30.0,
            "mu_water_per_mm": 0.02,
            "random_seed_offset": 0,  # for kind=random
        },
        "dose": {
            "base_n0": 2.0e4,
            "profile": "bowtie",      # uniform | bowtie | aec_sine
            "bowtie_exponent": 2.0,
            "aec_min": 0.5,
            "aec_max": 1.0,
            "aec_period_mm": None,
            "fractions": [0.17, 0.25, 0.5, 0.8],
        },
        "rebin": {},                  # default grid derives from the geometry
        "recon": {
            "kernel_length": 257,
            "image_size": 96,
            "pixel_mm": 1.25,
            "num_slices": 5,
            "slice_spacing_mm": 3.0,
            "z_center_mm": 0.0,
            "intermediate_factor": 1,
            "filter_method": "fft",
            "row_weighting": "uniform",   # uniform | cosine
        },
        "denoiser": {
            "mode": "mpd+mir",        # baseline | mpd | mpd+mir
            "decoupled": True,
            "window_half_width": 1,   # F for the projection stage
            "widths": [16, 32],
            "frame_scale": 1.0,
            "prior_scale": 32.0,
            "image_scale": 0.001,
            "priors_to_step2": False,
            "baseline_sigma": None,
            "mpd_checkpoint": None,
            "mir_checkpoint": None,
            "train": {
                "steps_mpd": 2600,
                "steps_mir": 2000,
                "batch_size": 8,
                "patch": 64,
                "patch_mir": 48,
                "num_phantoms": 5,
                "num_phantoms_mir": 4,
                "train_num_slices": 5,
                "dose_fractions": [0.17, 0.25, 0.4, 0.8],
                "lr": 1.0e-4,
                "val_every": 100,
                "patience": 5,
                "train_views": 320,
            },
        },
        "metrics": {
            "window": {"level_hu": 40.0, "width_hu": 300.0},
            "nps_roi_size_px": 16,
            "nps_region": {"cx_mm": 0.0, "cy_mm": 0.0, "radius_mm": 45.0},
            "ttf_insert": "bone",
            "ct_roi_shrink": 0.65,
        },
    }


def _deep_merge(base, extra, path=""):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_set_overrides(pairs):
    """Parse --set a.b.c=value items; values are JSON when they parse."""
    doc = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return doc


def load_config(path=None, overrides=None):
    """Resolve defaults <- file <- --set overrides and validate."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(p, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    merged = _deep_merge(default_config(), doc)
    if overrides:
        merged = _deep_merge(merged, parse_set_overrides(overrides))
    return resolve_config(merged, base_dir=Path(path).parent if path else Path.cwd())


def resolve_config(cfg, base_dir=None):
    geometry_from_config(cfg)  # validates the geometry block
    dose = cfg["dose"]
    for frac in dose["fractions"]:
        if not 0.0 < frac <= 1.0:
            raise ConfigError(f"dose fraction {frac} outside (0, 1]")
    if dose["base_n0"] <= 0:
        raise ConfigError("dose.base_n0 must be > 0")
    recon = cfg["recon"]
    if recon["intermediate_factor"] < 0:
        raise ConfigError("recon.intermediate_factor (F) must be >= 0")
    if recon["kernel_length"] % 2 != 1:
        raise ConfigError("recon.kernel_length must be odd")
    den = cfg["denoiser"]
    if den["mode"] not in ("baseline", "mpd", "mpd+mir"):
        raise ConfigError(f"unknown denoiser mode {den['mode']!r}")
    if den["window_half_width"] < 0:
        raise ConfigError("denoiser.window_half_width (F) must be >= 0")
    ph = cfg["phantom"]
    if ph["kind"] not in ("iq", "uniform", "random", "file"):
        raise ConfigError(f"unknown phantom kind {ph['kind']!r}")
    if ph["kind"] == "file":
        if not ph["path"]:
            raise ConfigError("phantom.kind=file needs phantom.path")
        path = Path(ph["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigError(f"phantom file not found: {path}")
        ph["path"] = str(path)
    for key in ("mpd_checkpoint", "mir_checkpoint"):
        if den[key]:
            base = Path(den[key])
            if base_dir is not None and not base.is_absolute():
                base = Path(base_dir) / base
            if not Path(str(base) + ".json").exists():
                raise ConfigError(f"checkpoint not found: {base}.json")
            den[key] = str(base)
    return cfg


def config_hash(cfg):
    return sha256_of_obj(cfg)


def geometry_from_config(cfg, z_start_mm=None):
    block = dict(cfg["geometry"])
    if z_start_mm is not None:
        block["z_start_mm"] = z_start_mm
    return ScannerGeometry.from_dict(block)


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(cfg))
