"""Raw float32 volume files with JSON sidecars, plus dataset manifests.

Axis convention (repo-wide): arrays are indexed ``[x, y, z]`` and stored
x-fastest on disk, i.e. Fortran order.  ``x`` runs patient right to left,
``y`` anterior to posterior, ``z`` inferior to superior (axial slice index).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

VALUE_KINDS = ("hounsfield", "normalized", "mask", "heatmap")
LOBES = ("LUL", "LLL", "RUL", "RML", "RLL")
LESION_KINDS = ("ggo", "consolidation")
SPLITS = ("train", "val", "test")

PAYLOAD_SUFFIX = ".f32raw"
SIDECAR_SUFFIX = ".meta.json"


class FormatError(ValueError):
    """A stored file is corrupt or does not follow the on-disk format."""


@dataclass(frozen=True)
class VolumeMeta:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    value_kind: str = "hounsfield"
    case_id: str = ""
    label: Optional[int] = None

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        if len(shape) != 3 or any(s < 1 for s in shape):
            raise ValueError(f"shape must be three positive integers, got {self.shape}")
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if self.value_kind not in VALUE_KINDS:
            raise ValueError(f"unknown value_kind {self.value_kind!r}")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_voxels(self) -> int:
        return self.shape[0] * self.shape[1] * self.shape[2]

    def to_json(self) -> dict:
        return {
            "shape": list(self.shape),
            "spacing_mm": list(self.spacing),
            "value_kind": self.value_kind,
            "case_id": self.case_id,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VolumeMeta":
        try:
            return cls(
                shape=tuple(obj["shape"]),
                spacing=tuple(obj["spacing_mm"]),
                value_kind=obj["value_kind"],
                case_id=obj.get("case_id", ""),
                label=obj.get("label"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad volume header: {exc}") from exc


@dataclass(frozen=True)
class LesionAnnotation:
    lobe: str
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    kind: str = "ggo"

    def __post_init__(self):
        if self.lobe not in LOBES:
            raise ValueError(f"unknown lobe {self.lobe!r}")
        if self.kind not in LESION_KINDS:
            raise ValueError(f"unknown lesion kind {self.kind!r}")
        if len(self.center) != 3 or len(self.radii) != 3:
            raise ValueError("center and radii need three components")
        if any(not r > 0 for r in self.radii):
            raise ValueError(f"radii must be positive, got {self.radii}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))

    def check_bounds(self, shape: Sequence[int]) -> None:
        if any(not 0 <= c <= n - 1 for c, n in zip(self.center, shape)):
            raise ValueError(f"lesion center {self.center} outside volume {tuple(shape)}")

    def support(self, shape: Sequence[int]) -> np.ndarray:
        """Boolean ellipsoid support on a voxel grid of the given shape."""
        grids = np.ogrid[tuple(slice(0, n) for n in shape)]
        r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, self.center, self.radii))
        return r2 <= 1.0

    def to_json(self) -> dict:
        return {"lobe": self.lobe, "center": list(self.center), "radii": list(self.radii), "kind": self.kind}

    @classmethod
    def from_json(cls, obj: dict) -> "LesionAnnotation":
        return cls(obj["lobe"], tuple(obj["center"]), tuple(obj["radii"]), obj.get("kind", "ggo"))


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    volume: str
    mask: str
    label: int
    lesions: tuple[LesionAnnotation, ...] = ()

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "volume": self.volume,
            "mask": self.mask,
            "label": self.label,
            "lesions": [les.to_json() for les in self.lesions],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        return cls(
            case_id=obj["case_id"],
            volume=obj["volume"],
            mask=obj["mask"],
            label=int(obj["label"]),
            lesions=tuple(LesionAnnotation.from_json(o) for o in obj.get("lesions", [])),
        )


@dataclass
class DatasetManifest:
    split: str
    seed: int = 0
    entries: list[ManifestEntry] = field(default_factory=list)
    # directory that relative entry paths resolve against; not serialized
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.validate()

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.case_id in seen:
                raise ValueError(f"duplicate case_id {e.case_id!r}")
            seen.add(e.case_id)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def find(self, case_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise KeyError(case_id)


def _stem(path) -> str:
    """Strip a payload or sidecar suffix so either file name addresses the pair."""
    s = os.fspath(path)
    for suffix in (PAYLOAD_SUFFIX, SIDECAR_SUFFIX):
        if s.endswith(suffix):
            return s[: -len(suffix)]
    return s


def write_volume(data: np.ndarray, meta: VolumeMeta, path) -> None:
    data = np.asarray(data)
    if data.shape != meta.shape:
        raise ValueError(f"tensor shape {data.shape} does not match meta.shape {meta.shape}")
    stem = _stem(path)
    payload = np.asarray(data, dtype="<f4").tobytes(order="F")
    with open(stem + PAYLOAD_SUFFIX, "wb") as fh:
        fh.write(payload)
    with open(stem + SIDECAR_SUFFIX, "w") as fh:
        json.dump(meta.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_meta(path) -> VolumeMeta:
    stem = _stem(path)
    try:
        with open(stem + SIDECAR_SUFFIX) as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"missing sidecar {stem + SIDECAR_SUFFIX}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable sidecar {stem + SIDECAR_SUFFIX}: {exc}") from exc
    if not isinstance(obj, dict):
        raise FormatError("sidecar must hold a JSON object")
    return VolumeMeta.from_json(obj)


def read_volume(path) -> tuple[np.ndarray, VolumeMeta]:
    meta = read_meta(path)
    stem = _stem(path)
    try:
        raw = Path(stem + PAYLOAD_SUFFIX).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing payload {stem + PAYLOAD_SUFFIX}") from exc
    if len(raw) != 4 * meta.n_voxels:
        raise FormatError(f"payload holds {len(raw)} bytes, header implies {4 * meta.n_voxels}")
    data = np.frombuffer(raw, dtype="<f4").reshape(meta.shape, order="F")
    return data.astype(np.float32), meta


def write_manifest(manifest: DatasetManifest, path) -> None:
    manifest.validate()
    obj = {
        "split": manifest.split,
        "seed": manifest.seed,
        "entries": [e.to_json() for e in manifest.entries],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        obj = json.load(fh)
    try:
        entries = [ManifestEntry.from_json(e) for e in obj["entries"]]
        return DatasetManifest(split=obj["split"], seed=int(obj["seed"]), entries=entries, root=path.parent)
    except KeyError as exc:
        raise FormatError(f"manifest missing key {exc}") from exc
