"""Artifact persistence: flat little-endian float32 binaries plus JSON
sidecars carrying shape, axis semantics, and the provenance chain.

A sidecar is canonical JSON (sorted keys, two-space indent, trailing
newline) so that parse -> dump round-trips bit-exactly and file hashes are
reproducible.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

__all__ = ["ArtifactHeader", "write_artifact", "read_artifact",
           "canonical_json", "sha256_of_obj", "file_sha256"]

MAGIC = "HELIXCT-ARTIFACT"
FORMAT_VERSION = 1


def canonical_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_of_obj(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ArtifactHeader:
    """Sidecar schema for one binary artifact."""

    shape: tuple
    axes: list
    kind: str
    meta: dict = field(default_factory=dict)
    provenance: list = field(default_factory=list)
    magic: str = MAGIC
    format_version: int = FORMAT_VERSION
    element_type: str = "float32-le"

    def to_dict(self):
        return {
            "magic": self.magic,
            "format_version": self.format_version,
            "element_type": self.element_type,
            "shape": list(self.shape),
            "axes": list(self.axes),
            "kind": self.kind,
            "meta": self.meta,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            hdr = cls(shape=tuple(d["shape"]), axes=list(d["axes"]),
                      kind=d["kind"], meta=d.get("meta", {}),
                      provenance=d.get("provenance", []),
                      magic=d["magic"], format_version=d["format_version"],
                      element_type=d["element_type"])
        except KeyError as exc:
            raise ConfigError(f"artifact sidecar missing field {exc}") from None
        if hdr.magic != MAGIC:
            raise ConfigError(f"bad artifact magic {hdr.magic!r}")
        if hdr.element_type != "float32-le":
            raise ConfigError(f"unsupported element type {hdr.element_type!r}")
        return hdr


def write_artifact(base_path, array, kind, axes, meta=None, provenance=None):
    """Write <base>.f32 and <base>.json; returns the header."""
    base = Path(base_path)
    array = np.asarray(array)
    if len(axes) != array.ndim:
        raise ConfigError(f"{len(axes)} axis names for a {array.ndim}-d array")
    header = ArtifactHeader(shape=array.shape, axes=list(axes), kind=kind,
                            meta=meta or {}, provenance=provenance or [])
    array.astype("<f4").tofile(str(base) + ".f32")
    with open(str(base) + ".json", "w", encoding="utf-8") as fh:
        fh.write(canonical_json(header.to_dict()))
    return header


def read_artifact(base_path, dtype=np.float64):
    """Read an artifact pair; returns (array, header)."""
    base = Path(base_path)
    json_path = Path(str(base) + ".json")
    bin_path = Path(str(base) + ".f32")
    if not json_path.exists() or not bin_path.exists():
        raise ConfigError(f"artifact {base} is missing its .f32/.json pair")
    with open(json_path, "r", encoding="utf-8") as fh:
        header = ArtifactHeader.from_dict(json.load(fh))
    flat = np.fromfile(bin_path, dtype="<f4")
    expected = int(np.prod(header.shape)) if header.shape else 1
    if flat.size != expected:
        raise ConfigError(
            f"artifact {base}: binary holds {flat.size} values, sidecar "
            f"declares {expected}")
    return flat.astype(dtype).reshape(header.shape), header
