"""CT windowing, lung-mask gating and trilinear resampling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .volume_store import VolumeMeta


@dataclass(frozen=True)
class WindowSetting:
    level: float = -550.0
    width: float = 1500.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")


LUNG_WINDOW = WindowSetting()


@dataclass
class LungVolume:
    data: np.ndarray
    meta: VolumeMeta


def apply_lung_window(ct: np.ndarray, w: WindowSetting = LUNG_WINDOW) -> np.ndarray:
    """Clamp to ``[level - width/2, level + width/2]`` and map affinely onto [-1, 1]."""
    ct = np.asarray(ct, dtype=np.float64)
    if not np.all(np.isfinite(ct)):
        raise ValueError("CT volume contains non-finite voxels")
    return np.clip((ct - w.level) * (2.0 / w.width), -1.0, 1.0)


def apply_mask(v_hat: np.ndarray, mask: np.ndarray, meta: Optional[VolumeMeta] = None) -> LungVolume:
    v_hat = np.asarray(v_hat)
    mask = np.asarray(mask)
    if v_hat.shape != mask.shape:
        raise ValueError(f"volume {v_hat.shape} and mask {mask.shape} differ in shape")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask values must be 0 or 1")
    data = np.where(mask == 1, v_hat, 0.0).astype(v_hat.dtype, copy=False)
    if meta is None:
        meta = VolumeMeta(shape=data.shape, value_kind="normalized")
    else:
        meta = replace(meta, value_kind="normalized")
    return LungVolume(data, meta)


def _linear_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    # voxel-center alignment; sample positions outside the grid clamp to the edge voxel
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a + (b - a) * frac


def resize_trilinear(data: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """Separable trilinear resize aligned to voxel centers, clamped at the edges.

    Each output voxel is a convex combination of input voxels, so the output
    range never leaves ``[data.min(), data.max()]``.
    """
    data = np.asarray(data)
    target = tuple(int(t) for t in target_shape)
    if data.size == 0:
        raise ValueError("cannot resample an empty volume")
    if len(target) != data.ndim or any(t < 1 for t in target):
        raise ValueError(f"bad target shape {target_shape}")
    out = data
    for axis, n in enumerate(target):
        out = _linear_axis(out, axis, n)
    return out


def resize_nearest(data: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    out = np.asarray(data)
    for axis, n in enumerate(target_shape):
        n_in = out.shape[axis]
        idx = np.minimum(((np.arange(n) + 0.5) * (n_in / n)).astype(np.intp), n_in - 1)
        out = np.take(out, idx, axis=axis)
    return out


def resample(v: LungVolume, target_shape: Sequence[int]) -> LungVolume:
    data = resize_trilinear(v.data, target_shape)
    old = v.meta
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(old.spacing, old.shape, data.shape))
    return LungVolume(data, replace(old, shape=data.shape, spacing=spacing))


def preprocess_case(
    ct: np.ndarray,
    mask: np.ndarray,
    target_shape: Sequence[int],
    meta: Optional[VolumeMeta] = None,
    window: WindowSetting = LUNG_WINDOW,
) -> LungVolume:
    """window -> mask -> resample. The mask is applied at native resolution."""
    lung = apply_mask(apply_lung_window(ct, window), mask, meta)
    return resample(lung, target_shape)
