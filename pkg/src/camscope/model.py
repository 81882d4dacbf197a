"""2.5D classifier: axis-wise 2D encoders fused into a 3D encoder with 3D attention.

Tensors are laid out ``N x C x X x Y x Z`` following the repo's ``[x, y, z]``
volume convention.  Axial slices fix ``z``, coronal slices fix ``y`` and
sagittal slices fix ``x``.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ORIENTATIONS = ("axial", "coronal", "sagittal")
# tensor dim holding the slice index for each orientation
_SLICE_DIM = {"axial": 4, "coronal": 3, "sagittal": 2}
_SHORT = {"axial": "F_ax", "coronal": "F_cor", "sagittal": "F_sag"}


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (192, 192, 64)
    enc2d_channels: int = 32
    fused_channels: int = 96
    enc3d_mid_channels: int = 128
    enc3d_channels: int = 256
    enc3d_stages: int = 2
    mlp_reduction: int = 8
    attention_blocks: int = 1
    dilation_rate: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3:
            raise ValueError("input_shape needs three components")
        if self.enc3d_stages < 1:
            raise ValueError("the 3D encoder needs at least one stage")
        factor = self.downsampling
        if any(s % factor for s in self.input_shape):
            raise ValueError(f"input dims {self.input_shape} must be divisible by {factor}")
        if self.fused_channels != 3 * self.enc2d_channels:
            raise ValueError("fused_channels must equal 3 * enc2d_channels")
        if self.enc2d_channels % 2:
            raise ValueError("enc2d_channels must be even")
        if not 0 <= self.attention_blocks <= len(self.gating_sites):
            raise ValueError(f"attention_blocks must lie in [0, {len(self.gating_sites)}]")
        if self.dilation_rate < 1 or self.mlp_reduction < 1:
            raise ValueError("dilation_rate and mlp_reduction must be >= 1")

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Desk-scale widths; same topology as the paper config."""
        base = dict(
            input_shape=(96, 96, 48),
            enc2d_channels=8,
            fused_channels=24,
            enc3d_mid_channels=32,
            enc3d_channels=64,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def downsampling(self) -> int:
        return 4 * 2**self.enc3d_stages

    @property
    def stage_channels(self) -> tuple[int, ...]:
        if self.enc3d_stages == 1:
            return (self.enc3d_channels,)
        return (self.enc3d_mid_channels,) * (self.enc3d_stages - 1) + (self.enc3d_channels,)

    @property
    def gating_sites(self) -> tuple[str, ...]:
        """Tensors an attention block may gate, deepest first."""
        deep = tuple(f"enc3d.{k}" for k in range(self.enc3d_stages, 0, -1))
        return deep + ("F_con", "F_ax", "F_cor", "F_sag")

    @property
    def active_sites(self) -> tuple[str, ...]:
        return self.gating_sites[: self.attention_blocks]

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class AttentionState:
    site: str
    m: torch.Tensor  # N x C
    M: torch.Tensor  # N x X x Y x Z


@dataclass
class FeatureStack:
    """Named intermediates of one forward pass, kept attached to the autograd graph."""

    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise ValueError(f"layer {name!r} was not cached by forward") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    @property
    def logits(self) -> torch.Tensor:
        return self.tensors["logits"]

    @property
    def likelihoods(self) -> torch.Tensor:
        return self.tensors["likelihoods"]

    @property
    def predicted(self) -> torch.Tensor:
        return predict_class(self.logits)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}


# per-tap tensor rewrites, used by finite-difference checks
Edits = Optional[dict[str, Callable[[torch.Tensor], torch.Tensor]]]


class Encoder2D(nn.Module):
    """Four 3x3 conv layers applied slice by slice; the first two have stride 2.

    The slice axis is average-pooled by 4 afterwards so every orientation
    lands on the common ``X/4 x Y/4 x Z/4`` grid.
    """

    def __init__(self, orientation: str, channels: int):
        super().__init__()
        if orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {orientation!r}")
        self.orientation = orientation
        half = channels // 2
        self.convs = nn.ModuleList([
            nn.Conv2d(1, half, 3, stride=2, padding=1),
            nn.Conv2d(half, channels, 3, stride=2, padding=1),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.Conv2d(channels, channels, 3, padding=1),
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = _SLICE_DIM[self.orientation]
        n, c = x.shape[:2]
        if any(s % 4 for s in x.shape[2:]):
            raise ValueError(f"volume dims {tuple(x.shape[2:])} must be divisible by 4")
        # fold slices into the batch: N x S x C x P x Q -> (N*S) x C x P x Q
        order = [0, d] + [k for k in (1, 2, 3, 4) if k != d]
        y = x.permute(*order)
        n_slices = y.shape[1]
        y = y.reshape(n * n_slices, c, *y.shape[3:])
        for conv in self.convs:
            y = F.relu(conv(y))
        y = y.reshape(n, n_slices, *y.shape[1:])
        y = y.permute(*np.argsort(order).tolist())
        kernel = [1, 1, 1]
        kernel[d - 2] = 4
        return F.avg_pool3d(y, kernel)


def fuse_concat(f_ax: torch.Tensor, f_cor: torch.Tensor, f_sag: torch.Tensor) -> torch.Tensor:
    if not f_ax.shape[2:] == f_cor.shape[2:] == f_sag.shape[2:]:
        raise ValueError("2D encoder outputs disagree in spatial shape")
    return torch.cat([f_ax, f_cor, f_sag], dim=1)


def mixed_pool(x: torch.Tensor, mix_logit: torch.Tensor) -> torch.Tensor:
    """lambda * maxpool + (1 - lambda) * avgpool over 2x2x2 blocks, lambda = sigmoid(mix_logit)."""
    if any(s % 2 for s in x.shape[2:]):
        raise ValueError(f"spatial dims {tuple(x.shape[2:])} not divisible by 2 at a pooling site")
    lam = torch.sigmoid(mix_logit)
    return lam * F.max_pool3d(x, 2) + (1 - lam) * F.avg_pool3d(x, 2)


class Stage3D(nn.Module):
    """Dilated 3x3x3 conv -> 1x1x1 conv -> ReLU -> mixed pooling."""

    def __init__(self, c_in: int, c_out: int, dilation: int):
        super().__init__()
        self.dilated = nn.Conv3d(c_in, c_out, 3, padding=dilation, dilation=dilation)
        self.pointwise = nn.Conv3d(c_out, c_out, 1)
        self.mix_logit = nn.Parameter(torch.zeros(()))

    def conv(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.pointwise(self.dilated(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mixed_pool(self.conv(x), self.mix_logit)


class ChannelAttention(nn.Module):
    """m = sigmoid(W1^T relu(W0^T a) + W1^T relu(W0^T b)) with W0, W1 shared by both pooled vectors."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"channel count {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.w0 = nn.Parameter(torch.empty(channels, hidden))
        self.w1 = nn.Parameter(torch.empty(hidden, channels))
        with torch.no_grad():
            self.w0.uniform_(-math.sqrt(6.0 / channels), math.sqrt(6.0 / channels))
            self.w1.uniform_(-math.sqrt(6.0 / hidden), math.sqrt(6.0 / hidden))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        flat = f.flatten(2)
        a = flat.mean(dim=2)
        b = flat.amax(dim=2)
        return torch.sigmoid(F.relu(a @ self.w0) @ self.w1 + F.relu(b @ self.w0) @ self.w1)


class SpatialAttention(nn.Module):
    """M = sigmoid(K * [mean_c F', max_c F']) with one zero-padded 3x3x3 kernel."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, 3, padding=1)

    def forward(self, f_prime: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([f_prime.mean(dim=1, keepdim=True), f_prime.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))[:, 0]


def apply_attention(f: torch.Tensor, m: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """F''_c = M * (m_c * F_c)."""
    return M.unsqueeze(1) * (m[:, :, None, None, None] * f)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def forward(self, f: torch.Tensor):
        m = self.channel(f)
        f_prime = m[:, :, None, None, None] * f
        M = self.spatial(f_prime)
        return f_prime, M.unsqueeze(1) * f_prime, m, M


def predict_class(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over two logits; ties go to class 0 (non-typical)."""
    return (logits[..., 1] > logits[..., 0]).long()


class Head(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Linear(channels, 2)

    def forward(self, f: torch.Tensor):
        logits = self.fc(f.flatten(2).mean(dim=2))
        return logits, torch.softmax(logits, dim=1), predict_class(logits)


class CovidNet25D(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.enc2d = nn.ModuleDict({o: Encoder2D(o, config.enc2d_channels) for o in ORIENTATIONS})
        chans = (config.fused_channels,) + config.stage_channels
        self.enc3d = nn.ModuleList(
            [Stage3D(chans[k], chans[k + 1], config.dilation_rate) for k in range(config.enc3d_stages)]
        )
        self.attention = nn.ModuleDict(
            {_key(s): AttentionBlock(self._site_channels(s), config.mlp_reduction) for s in config.active_sites}
        )
        self.head = Head(config.enc3d_channels)
        reset_parameters(self, config.seed)

    def _site_channels(self, site: str) -> int:
        cfg = self.config
        if site in ("F_ax", "F_cor", "F_sag"):
            return cfg.enc2d_channels
        if site == "F_con":
            return cfg.fused_channels
        return cfg.stage_channels[int(site.split(".")[1]) - 1]

    def _gate(self, site, x, stack, states, edits):
        x = _tap(site, x, stack, edits)
        key = _key(site)
        if key not in self.attention:
            return x
        f_prime, gated, m, M = self.attention[key](x)
        states.append(AttentionState(site, m, M))
        _tap(site + ".prime", f_prime, stack, None)
        return _tap(site + ".gated", gated, stack, edits)

    def forward(self, x: torch.Tensor, edits: Edits = None):
        """Return ``(FeatureStack, [AttentionState, ...])`` with every intermediate cached."""
        cfg = self.config
        if tuple(x.shape[2:]) != cfg.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[2:])} != configured {cfg.input_shape}")
        stack = FeatureStack()
        states: list[AttentionState] = []
        x = _tap("input", x, stack, edits)
        feats = []
        for o in ORIENTATIONS:
            feats.append(self._gate(_SHORT[o], self.enc2d[o](x), stack, states, edits))
        h = self._gate("F_con", fuse_concat(*feats), stack, states, edits)
        n_stages = len(self.enc3d)
        for k, stage in enumerate(self.enc3d, start=1):
            conv = _tap(f"enc3d.{k}.conv", stage.conv(h), stack, edits)
            h = self._gate(f"enc3d.{k}", mixed_pool(conv, stage.mix_logit), stack, states, edits)
        last = f"enc3d.{n_stages}"
        stack.tensors["F"] = stack[last]
        if last + ".gated" in stack:
            stack.tensors["F_prime"] = stack[last + ".prime"]
        stack.tensors["F_gated"] = h
        logits, likelihoods, _ = self.head(h)
        logits = _tap("logits", logits, stack, edits)
        stack.tensors["likelihoods"] = torch.softmax(logits, dim=1)
        # deepest block first, matching config.gating_sites order
        states.sort(key=lambda s: cfg.gating_sites.index(s.site))
        return stack, states

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0].logits


def _key(site: str) -> str:
    return site.replace(".", "_")


def _tap(name, x, stack, edits):
    if edits and name in edits:
        x = edits[name](x)
    stack.tensors[name] = x
    return x


@torch.no_grad()
def reset_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights (He bound), zero biases, mixing logits at 0."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in model.named_parameters():
        if name.endswith("bias") or name.endswith("mix_logit"):
            p.zero_()
            continue
        if name.endswith(".w0") or name.endswith(".w1"):
            fan_in = p.shape[0]
        else:
            fan_in = p[0].numel()
        bound = math.sqrt(6.0 / fan_in)
        p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * (2 * bound) - bound)


def as_batch(v_hat, dtype=torch.float32) -> torch.Tensor:
    """Accept an ``X x Y x Z`` array or an ``N x 1 x X x Y x Z`` tensor."""
    t = torch.as_tensor(np.asarray(v_hat) if not torch.is_tensor(v_hat) else v_hat, dtype=dtype)
    if t.ndim == 3:
        t = t[None, None]
    elif t.ndim == 4:
        t = t[:, None]
    if t.ndim != 5 or t.shape[1] != 1:
        raise ValueError(f"expected a single-channel volume batch, got shape {tuple(t.shape)}")
    return t


def forward(v_hat, model: CovidNet25D, edits: Edits = None):
    dtype = next(model.parameters()).dtype
    return model(as_batch(v_hat, dtype), edits)


def score_gradient(stack: FeatureStack, class_index: int, layer_name: str) -> torch.Tensor:
    """Exact d logit[class_index] / d layer, one gradient per batch item."""
    if class_index not in (0, 1):
        raise ValueError("class_index must be 0 or 1")
    target = stack[layer_name]
    if not target.requires_grad:
        raise ValueError(f"layer {layer_name!r} is detached from the graph")
    (grad,) = torch.autograd.grad(stack.logits[:, class_index].sum(), target, retain_graph=True)
    return grad


def select_layer(config: ModelConfig) -> str:
    """Last conv output before the final downsampling of the 3D encoder."""
    return f"enc3d.{config.enc3d_stages}.conv"


def feature_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape arithmetic for the cached layers, without running the network."""
    q = tuple(s // 4 for s in config.input_shape)
    shapes = {n: (config.enc2d_channels,) + q for n in ("F_ax", "F_cor", "F_sag")}
    shapes["F_con"] = (config.fused_channels,) + q
    grid = q
    for k, c in enumerate(config.stage_channels, start=1):
        shapes[f"enc3d.{k}.conv"] = (c,) + grid
        grid = tuple(s // 2 for s in grid)
        shapes[f"enc3d.{k}"] = (c,) + grid
    return shapes


# ---------------------------------------------------------------------------
# checkpoints: a zip archive of raw little-endian tensors plus a JSON index
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, model: CovidNet25D, metadata: Optional[dict] = None) -> None:
    index = {"config": model.config.to_json(), "metadata": metadata or {}, "tensors": []}
    blobs = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        index["tensors"].append({"name": name, "shape": list(arr.shape), "dtype": "float32", "file": name + ".f32raw"})
        blobs.append((name + ".f32raw", arr.tobytes(order="C")))
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        _write_member(zf, "index.json", json.dumps(index, indent=1, sort_keys=True).encode())
        for fname, blob in blobs:
            _write_member(zf, fname, blob)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def load_checkpoint(path) -> tuple[CovidNet25D, dict]:
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read("index.json"))
        config = ModelConfig.from_json(index["config"])
        model = CovidNet25D(config)
        state = {}
        for rec in index["tensors"]:
            raw = zf.read(rec["file"])
            arr = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"])
            state[rec["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, index["metadata"]


def read_checkpoint_config(path) -> ModelConfig:
    with zipfile.ZipFile(path) as zf:
        return ModelConfig.from_json(json.loads(zf.read("index.json"))["config"])
