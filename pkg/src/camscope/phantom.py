"""Synthetic annotated lung phantoms.

Typical cases carry ellipsoidal GGO-like or consolidation-like lesions planted
inside the lung mask; non-typical cases are clean.  Geometry follows the
repo axis convention: ``+x`` is patient left, ``+y`` posterior, ``+z``
superior.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume_store import (
    LOBES,
    DatasetManifest,
    LesionAnnotation,
    ManifestEntry,
    VolumeMeta,
    write_manifest,
    write_volume,
)

LOBE_CODES = {name: k for k, name in enumerate(LOBES, start=1)}
LOWER_LOBES = ("LLL", "RLL")


@dataclass(frozen=True)
class PhantomSpec:
    volume_shape: tuple[int, int, int] = (96, 96, 48)
    spacing_mm: tuple[float, float, float] = (3.5, 3.5, 7.0)
    n_typical: int = 10
    n_nontypical: int = 10
    lesion_count_range: tuple[int, int] = (1, 4)
    lesion_radius_range_mm: tuple[float, float] = (10.0, 24.0)
    noise_sigma: float = 20.0
    seed: int = 0
    split_fractions: tuple[float, float] = (0.64, 0.16)
    posterior_lower_bias: float = 0.7
    consolidation_fraction: float = 0.3
    hu_air: float = -1000.0
    hu_tissue: float = 40.0
    hu_parenchyma: float = -850.0
    # GGO peaks stay 2.5 noise sigma above -550 H.U., the lung-window centre, which maps to
    # the same value (0) as masked-out voxels; fainter peaks are indistinguishable from background.
    hu_ggo: tuple[float, float] = (-500.0, -300.0)
    hu_consolidation: tuple[float, float] = (-100.0, 50.0)

    def __post_init__(self):
        for name in ("volume_shape", "spacing_mm", "lesion_count_range", "lesion_radius_range_mm",
                     "split_fractions", "hu_ggo", "hu_consolidation"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_typical < 0 or self.n_nontypical < 0:
            raise ValueError("case counts must be non-negative")
        lo, hi = self.lesion_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad lesion_count_range {self.lesion_count_range}")
        rlo, rhi = self.lesion_radius_range_mm
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad lesion_radius_range_mm {self.lesion_radius_range_mm}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if any(s < 16 for s in self.volume_shape):
            raise ValueError("volume_shape components must be at least 16")
        ftrain, fval = self.split_fractions
        if ftrain < 0 or fval < 0 or ftrain + fval > 1:
            raise ValueError(f"bad split_fractions {self.split_fractions}")

    @property
    def n_cases(self) -> int:
        return self.n_typical + self.n_nontypical

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown PhantomSpec fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class PhantomCase:
    case_id: str
    volume: np.ndarray  # H.U., float32
    mask: np.ndarray  # {0, 1}, uint8
    label: int
    lesions: list[LesionAnnotation] = field(default_factory=list)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def lobe_partition(mask: np.ndarray) -> np.ndarray:
    """Geometric lobe proxy over a two-component lung mask.

    Returns an int array: 0 outside, otherwise ``LOBE_CODES[lobe]``.  The left
    lung (larger mean x) is cut at its centroid z into LUL/LLL; the right lung
    is cut into RLL/RML/RUL thirds of its voxel count, slice by slice from
    inferior to superior.
    """
    mask = np.asarray(mask) != 0
    if not mask.any():
        raise ValueError("empty lung mask")
    comps, n = ndimage.label(mask)
    if n != 2:
        raise ValueError(f"lung mask must have two connected components, found {n}")
    centroids = ndimage.center_of_mass(mask, comps, [1, 2])
    left_id = 1 if centroids[0][0] > centroids[1][0] else 2
    right_id = 3 - left_id
    out = np.zeros(mask.shape, dtype=np.uint8)
    z = np.arange(mask.shape[2])

    left = comps == left_id
    cz = centroids[left_id - 1][2]
    out[left & (z >= cz)] = LOBE_CODES["LUL"]
    out[left & (z < cz)] = LOBE_CODES["LLL"]

    right = comps == right_id
    per_slice = right.sum(axis=(0, 1))
    total = per_slice.sum()
    start = np.cumsum(per_slice) - per_slice
    third = np.minimum((3 * start) // total, 2)
    codes = np.array([LOBE_CODES["RLL"], LOBE_CODES["RML"], LOBE_CODES["RUL"]], dtype=np.uint8)
    out[right] = np.broadcast_to(codes[third], mask.shape)[right]
    return out


def case_rng(seed: int, case_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(case_index)])


def _ellipsoid_r(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    return np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)))


def _cosine_profile(r: np.ndarray, core: float = 0.5) -> np.ndarray:
    """1 inside ``core``, cosine ramp to 0 at r = 1, 0 beyond."""
    t = np.clip((r - core) / (1.0 - core), 0.0, 1.0)
    return np.where(r <= 1.0, 0.5 * (1.0 + np.cos(np.pi * t)), 0.0)


def _lung_geometry(spec: PhantomSpec, rng: np.random.Generator):
    X, Y, Z = spec.volume_shape
    jitter = lambda: rng.uniform(0.92, 1.08)  # noqa: E731
    lungs = []
    for side in (0.3, 0.7):  # right lung at small x, left at large x
        center = (side * X + rng.uniform(-0.01, 0.01) * X, 0.5 * Y, 0.5 * Z)
        radii = (0.17 * X * jitter(), 0.3 * Y * jitter(), 0.42 * Z * jitter())
        lungs.append((center, radii))
    return lungs


def _place_lesion(spec, rng, mask, lobes, posterior_y, vox_spacing) -> Optional[LesionAnnotation]:
    biased = rng.random() < spec.posterior_lower_bias
    lobe = LOWER_LOBES[rng.integers(2)] if biased else LOBES[rng.integers(5)]
    region = lobes == LOBE_CODES[lobe]
    if biased:
        yy = np.arange(mask.shape[1])[None, :, None]
        posterior = region & (yy >= posterior_y)
        if posterior.any():
            region = posterior
    candidates = np.argwhere(region)
    if len(candidates) == 0:
        return None
    rlo, rhi = spec.lesion_radius_range_mm
    for attempt in range(200):
        radius_mm = rng.uniform(rlo, rhi) * (0.98 ** (attempt // 10))
        radii = tuple(max(radius_mm * rng.uniform(0.85, 1.15) / s, 1.0) for s in vox_spacing)
        center = candidates[rng.integers(len(candidates))]
        les = LesionAnnotation(lobe, tuple(float(c) for c in center), radii,
                               "consolidation" if rng.random() < spec.consolidation_fraction else "ggo")
        if np.all(mask[les.support(mask.shape)]):
            return les
    return None


def generate_case(spec: PhantomSpec, case_index: int, label: int) -> PhantomCase:
    if not 0 <= case_index < spec.n_cases:
        raise ValueError(f"case_index {case_index} outside [0, {spec.n_cases})")
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    rng = case_rng(spec.seed, case_index)
    shape = spec.volume_shape
    X, Y, Z = shape

    vol = np.full(shape, spec.hu_air, dtype=np.float64)
    body = _ellipsoid_r(shape[:2] + (1,), (0.5 * X, 0.5 * Y, 0.0), (0.46 * X, 0.45 * Y, 1.0)) <= 1.0
    vol[np.broadcast_to(body, shape)] = spec.hu_tissue

    mask = np.zeros(shape, dtype=bool)
    for center, radii in _lung_geometry(spec, rng):
        mask |= _ellipsoid_r(shape, center, radii) <= 1.0
    vol[mask] = spec.hu_parenchyma
    lobes = lobe_partition(mask)
    posterior_y = ndimage.center_of_mass(mask)[1]

    lesions: list[LesionAnnotation] = []
    if label == 1:
        lo, hi = spec.lesion_count_range
        n_lesions = int(rng.integers(lo, hi + 1))
        for _ in range(50 * n_lesions):
            if len(lesions) == n_lesions:
                break
            les = _place_lesion(spec, rng, mask, lobes, posterior_y, spec.spacing_mm)
            if les is None:
                continue
            lesions.append(les)
            hu_range = spec.hu_consolidation if les.kind == "consolidation" else spec.hu_ggo
            target = rng.uniform(*hu_range)
            profile = _cosine_profile(_ellipsoid_r(shape, les.center, les.radii))
            vol = np.where(mask, vol + profile * (target - vol), vol)

        if len(lesions) < n_lesions:
            raise RuntimeError(f"could not fit {n_lesions} lesions inside the lung mask")

    if spec.noise_sigma > 0:
        vol = vol + rng.normal(0.0, spec.noise_sigma, size=shape)
    return PhantomCase(
        case_id=f"case{case_index:04d}",
        volume=vol.astype(np.float32),
        mask=mask.astype(np.uint8),
        label=label,
        lesions=lesions,
        spacing=tuple(spec.spacing_mm),
    )


def split_sizes(n: int, fractions=(0.64, 0.16)) -> tuple[int, int, int]:
    """Floor the train and val sizes; the remainder goes to test."""
    n_train = math.floor(n * fractions[0])
    n_val = math.floor(n * fractions[1])
    return n_train, n_val, n - n_train - n_val


def case_labels(spec: PhantomSpec) -> list[int]:
    return [1] * spec.n_typical + [0] * spec.n_nontypical


def assign_splits(spec: PhantomSpec) -> dict[str, list[int]]:
    order = np.random.default_rng(spec.seed).permutation(spec.n_cases).tolist()
    n_train, n_val, _ = split_sizes(spec.n_cases, spec.split_fractions)
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


def write_case(case: PhantomCase, directory: Path) -> ManifestEntry:
    directory.mkdir(parents=True, exist_ok=True)
    meta = VolumeMeta(case.volume.shape, case.spacing, "hounsfield", case.case_id, case.label)
    write_volume(case.volume, meta, directory / f"{case.case_id}_ct")
    mask_meta = VolumeMeta(case.mask.shape, case.spacing, "mask", case.case_id, None)
    write_volume(case.mask, mask_meta, directory / f"{case.case_id}_mask")
    # paths are relative to the split directory holding manifest.json
    return ManifestEntry(
        case_id=case.case_id,
        volume=f"{case.case_id}_ct",
        mask=f"{case.case_id}_mask",
        label=case.label,
        lesions=tuple(case.lesions),
    )


def generate_dataset(spec: PhantomSpec, out_dir, jobs: int = 1) -> dict[str, DatasetManifest]:
    """Write every case plus ``<split>/manifest.json`` files and a top-level index.

    Per-case RNG streams depend only on ``(seed, case_index)``, so ``jobs``
    cannot change the output.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = case_labels(spec)
    splits = assign_splits(spec)

    def build(split, idx):
        case = generate_case(spec, idx, labels[idx])
        entry = write_case(case, out / split)
        return entry

    manifests = {}
    for split, indices in splits.items():
        tasks = [(split, i) for i in indices]
        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(jobs) as pool:
                entries = list(pool.map(lambda t: build(*t), tasks))
        else:
            entries = [build(*t) for t in tasks]
        manifest = DatasetManifest(split=split, seed=spec.seed, entries=entries, root=out / split)
        (out / split).mkdir(parents=True, exist_ok=True)
        write_manifest(manifest, out / split / "manifest.json")
        manifests[split] = manifest

    index = {
        "seed": spec.seed,
        "spec": spec.to_json(),
        "splits": {s: f"{s}/manifest.json" for s in splits},
        "counts": {s: len(m) for s, m in manifests.items()},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(index, fh, indent=1)
        fh.write("\n")
    return manifests


def dataset_digest(out_dir) -> str:
    """SHA-256 over every file under ``out_dir`` in sorted path order."""
    root = Path(out_dir)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
