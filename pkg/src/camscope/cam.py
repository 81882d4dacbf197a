"""Positive-gradient 3D activation mapping.

Channel weights are spatial means of the *positive* part of the class-logit
gradient at one 3D conv layer; the map is the ReLU of the weighted channel
sum, max-normalized, thresholded, and upsampled to CT resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .model import CovidNet25D, forward, score_gradient, select_layer
from .preprocess import resize_nearest, resize_trilinear

DEFAULT_TAU = 0.1


@dataclass
class Heatmap:
    raw: np.ndarray
    normalized: np.ndarray
    thresholded: np.ndarray
    volume_scale: np.ndarray
    tau: float = DEFAULT_TAU
    class_index: int = 1
    layer_name: str = ""

    @property
    def argmax_voxel(self) -> Optional[tuple[int, int, int]]:
        if not np.any(self.volume_scale > 0):
            return None
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.volume_scale), self.volume_scale.shape))


def _np(t) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.float64)


def neuron_importance(grads) -> np.ndarray:
    """alpha_c = mean over voxels of ReLU(grad); grads is ``C x I x J x K``."""
    g = _np(grads)
    if g.ndim != 4:
        raise ValueError(f"expected C x I x J x K gradients, got shape {g.shape}")
    return np.maximum(g, 0.0).reshape(g.shape[0], -1).mean(axis=1)


def activation_map(alpha, features) -> np.ndarray:
    """ReLU(sum_c alpha_c * v_c) at feature resolution."""
    a = _np(alpha)
    v = _np(features)
    if v.ndim != 4 or a.shape != (v.shape[0],):
        raise ValueError(f"alpha {a.shape} does not match features {v.shape}")
    return np.maximum(np.tensordot(a, v, axes=1), 0.0)


def threshold(x: np.ndarray, tau: float) -> np.ndarray:
    return np.where(x > tau, x, 0.0)


def finalize(raw, tau: float = DEFAULT_TAU, target_shape: Optional[Sequence[int]] = None,
             interpolation: str = "trilinear", class_index: int = 1, layer_name: str = "") -> Heatmap:
    """Max-normalize, cut at ``tau``, upsample, and cut again at volume scale."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    raw = _np(raw)
    if np.any(raw < 0):
        raise ValueError("raw heatmap must be non-negative")
    peak = raw.max()
    normalized = raw / peak if peak > 0 else np.zeros_like(raw)
    cut = threshold(normalized, tau)
    if target_shape is None:
        target_shape = raw.shape
    if interpolation == "trilinear":
        up = resize_trilinear(cut, target_shape)
    elif interpolation == "nearest":
        up = resize_nearest(cut, target_shape)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return Heatmap(raw, normalized, cut, threshold(up, tau), tau, class_index, layer_name)


def explain(model: CovidNet25D, v_hat, class_index: int = 1, layer_name: Optional[str] = None,
            tau: float = DEFAULT_TAU, target_shape: Optional[Sequence[int]] = None,
            interpolation: str = "trilinear") -> tuple[Heatmap, np.ndarray]:
    """Heatmap for a single volume plus the model's class likelihoods.

    The default layer precedes the final pooling, so its activations are
    pre-gate while its gradients pass through every attention block.
    """
    layer_name = layer_name or select_layer(model.config)
    stack, _ = forward(v_hat, model)
    grads = score_gradient(stack, class_index, layer_name)[0]
    feats = stack[layer_name][0]
    raw = activation_map(neuron_importance(grads), feats)
    if target_shape is None:
        target_shape = np.shape(v_hat)[-3:]
    heat = finalize(raw, tau, target_shape, interpolation, class_index, layer_name)
    return heat, stack.likelihoods[0].detach().cpu().numpy().astype(np.float64)


def _warm(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps["hot"](np.clip(values, 0.0, 1.0))[..., :3]


def blend_slice(ct_slice: np.ndarray, heat_slice: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """RGB uint8 image; rows are y, columns are x."""
    gray = np.clip((np.asarray(ct_slice, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    support = heat_slice > 0
    if alpha > 0 and support.any():
        color = _warm(heat_slice)
        rgb[support] = (1 - alpha) * rgb[support] + alpha * color[support]
    return np.round(rgb.transpose(1, 0, 2) * 255).astype(np.uint8)


def overlay_slices(heatmap: Heatmap) -> list[int]:
    heat = heatmap.volume_scale
    support = np.flatnonzero(heat.reshape(-1, heat.shape[2]).max(axis=0) > 0).tolist()
    peak = heatmap.argmax_voxel
    anchor = peak[2] if peak is not None else heat.shape[2] // 2
    return sorted(set(support) | {anchor})


def overlay_export(volume: np.ndarray, heatmap: Heatmap, out_dir, case_id: str, alpha: float = 0.5) -> list[Path]:
    """Write ``<case_id>_z<index>.png`` for every axial slice touching the heatmap support."""
    from PIL import Image

    volume = np.asarray(volume)
    if volume.shape != heatmap.volume_scale.shape:
        raise ValueError(f"volume {volume.shape} and heatmap {heatmap.volume_scale.shape} differ")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in overlay_slices(heatmap):
        img = blend_slice(volume[:, :, z], heatmap.volume_scale[:, :, z], alpha)
        path = out / f"{case_id}_z{z:03d}.png"
        Image.fromarray(img).save(path)
        paths.append(path)
    return paths
