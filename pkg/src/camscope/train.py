"""Training loop, best-by-validation selection, and the evaluation protocol."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import cam, metrics
from .model import CovidNet25D, ModelConfig, load_checkpoint, save_checkpoint
from .preprocess import preprocess_case
from .volume_store import DatasetManifest, ManifestEntry, VolumeMeta, read_volume, write_volume

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
LOG_NAME = "train_log.csv"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr0: float = 1.0e-4
    decay: float = 0.85
    decay_every: int = 10
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.decay_every < 1 or not 0 < self.decay <= 1:
            raise ValueError("bad decay schedule")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 30, "batch_size": 8, "lr0": 1.0e-3, **overrides})

    def lr_at(self, epoch: int) -> float:
        """Step schedule; ``epoch`` counts from 1, so epochs 11-20 run at lr0 * decay."""
        return self.lr0 * self.decay ** ((epoch - 1) // self.decay_every)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class LoadedSplit:
    entries: list[ManifestEntry]
    volumes: np.ndarray  # N x X x Y x Z, model resolution
    labels: np.ndarray
    ct_shapes: list[tuple[int, int, int]]


def load_entry(manifest: DatasetManifest, entry: ManifestEntry, input_shape: Sequence[int]):
    ct, meta = read_volume(manifest.resolve(entry.volume))
    mask, _ = read_volume(manifest.resolve(entry.mask))
    lung = preprocess_case(ct, mask, input_shape, meta)
    return lung, meta


def load_split(manifest: DatasetManifest, input_shape: Sequence[int]) -> LoadedSplit:
    if len(manifest) == 0:
        raise ValueError(f"{manifest.split} manifest is empty")
    vols, shapes = [], []
    for e in manifest.entries:
        lung, meta = load_entry(manifest, e, input_shape)
        vols.append(lung.data.astype(np.float32))
        shapes.append(meta.shape)
    labels = np.array([e.label for e in manifest.entries], dtype=np.int64)
    return LoadedSplit(list(manifest.entries), np.stack(vols), labels, shapes)


@torch.no_grad()
def predict(model: CovidNet25D, volumes: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Class-1 likelihoods for a stack of preprocessed volumes."""
    model.eval()
    out = []
    for i in range(0, len(volumes), batch_size):
        x = torch.from_numpy(volumes[i:i + batch_size]).unsqueeze(1)
        out.append(torch.softmax(model.logits(x), dim=1)[:, 1].double().numpy())
    return np.concatenate(out)


def accuracy(model: CovidNet25D, split: LoadedSplit, batch_size: int = 8) -> float:
    p1 = predict(model, split.volumes, batch_size)
    # argmax with ties toward class 0
    return float(np.mean((p1 > 0.5).astype(np.int64) == split.labels))


@dataclass
class TrainResult:
    model: CovidNet25D
    best_epoch: int
    best_val_accuracy: float
    log: list[dict] = field(default_factory=list)


def train(
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_dir=None,
    train_data: Optional[LoadedSplit] = None,
    val_data: Optional[LoadedSplit] = None,
) -> TrainResult:
    """Adam on mean cross-entropy; keeps the epoch with the best validation accuracy (ties: earlier)."""
    torch.manual_seed(train_config.seed)
    if train_data is None:
        train_data = load_split(train_manifest, model_config.input_shape)
    if val_data is None:
        val_data = load_split(val_manifest, model_config.input_shape)
    model = CovidNet25D(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr0)
    rng = np.random.default_rng(train_config.seed)
    n = len(train_data.labels)
    bs = train_config.batch_size

    best_acc, best_epoch, best_state = -1.0, 0, None
    rows = []
    for epoch in range(1, train_config.epochs + 1):
        lr = train_config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            x = torch.from_numpy(train_data.volumes[idx]).unsqueeze(1)
            y = torch.from_numpy(train_data.labels[idx])
            loss = F.cross_entropy(model.logits(x), y)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {i // bs}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        val_acc = accuracy(model, val_data)
        rows.append({"epoch": epoch, "lr": lr, "train_loss": total / n, "val_accuracy": val_acc})
        log.info("epoch %d lr %.3g loss %.4f val_acc %.4f", epoch, lr, total / n, val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(model, best_epoch, best_acc, rows)
    if run_dir is not None:
        run = Path(run_dir)
        run.mkdir(parents=True, exist_ok=True)
        meta = {"best_epoch": best_epoch, "best_val_accuracy": best_acc, "train_config": train_config.to_json()}
        save_checkpoint(run / CHECKPOINT_NAME, model, meta)
        write_train_log(rows, run / LOG_NAME)
    return result


def write_train_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "val_accuracy"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_train_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "lr": float(r["lr"]), "train_loss": float(r["train_loss"]),
             "val_accuracy": float(r["val_accuracy"])}
            for r in csv.DictReader(fh)
        ]


@dataclass
class EvalReport:
    auc: float
    roc_points: list[tuple[float, float, float]]
    op_point: str
    sensitivity: float
    specificity: float
    threshold: float
    operating_points: dict
    identification: metrics.IdentificationReport
    cases: list[dict]
    tau: float = cam.DEFAULT_TAU

    @property
    def case_level_ir(self) -> Optional[float]:
        return self.identification.case_level.rate

    def to_json(self) -> dict:
        return {
            "auc": self.auc,
            "op_point": self.op_point,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "threshold": self.threshold,
            "operating_points": self.operating_points,
            "tau": self.tau,
            "lesion_rule": "identified iff max volume-scale heat inside the lesion ellipsoid > tau",
            "identification": self.identification.to_json(),
            "roc_points": [list(p) if math.isfinite(p[2]) else [p[0], p[1], None] for p in self.roc_points],
            "cases": self.cases,
        }


def evaluate(
    test_manifest: DatasetManifest,
    model: CovidNet25D,
    op_point: str = "fixed_0.5",
    tau: float = cam.DEFAULT_TAU,
    out_dir=None,
    heatmap_dir=None,
) -> EvalReport:
    """Preprocess, classify and explain every case, then score classification and localization."""
    if op_point not in metrics.POLICIES:
        raise ValueError(f"unknown operating point {op_point!r}")
    model.eval()
    cfg = model.config
    scores, labels, records = [], [], []
    heat_by_case, lesions_by_case = {}, {}
    for entry in test_manifest.entries:
        lung, meta = load_entry(test_manifest, entry, cfg.input_shape)
        heat, lik = cam.explain(model, lung.data, class_index=1, tau=tau, target_shape=meta.shape)
        score = float(lik[1])
        scores.append(score)
        labels.append(entry.label)
        records.append({"case_id": entry.case_id, "label": entry.label, "score": score,
                        "predicted": int(lik[1] > lik[0]), "n_lesions": len(entry.lesions)})
        if entry.lesions:
            heat_by_case[entry.case_id] = heat.volume_scale
            lesions_by_case[entry.case_id] = list(entry.lesions)
        if heatmap_dir is not None:
            hdir = Path(heatmap_dir)
            hdir.mkdir(parents=True, exist_ok=True)
            hmeta = VolumeMeta(meta.shape, meta.spacing, "heatmap", entry.case_id, None)
            write_volume(heat.volume_scale, hmeta, hdir / f"{entry.case_id}_heat")

    roc, auc = metrics.roc_auc(scores, labels)
    ops = {}
    for policy in metrics.POLICIES:
        sens, spec, thr = metrics.sens_spec(scores, labels, policy)
        ops[policy] = {"sensitivity": sens, "specificity": spec, "threshold": thr}
    ident = metrics.identification_rate(heat_by_case, lesions_by_case, tau)
    for rec in records:
        if rec["case_id"] in ident.lesion_peaks:
            rec["lesion_peaks"] = ident.lesion_peaks[rec["case_id"]]
    chosen = ops[op_point]
    report = EvalReport(auc, roc, op_point, chosen["sensitivity"], chosen["specificity"], chosen["threshold"],
                        ops, ident, records, tau)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=1)
        fh.write("\n")
    with open(out / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in report.roc_points:
            w.writerow([repr(float(fpr)), repr(float(tpr)), repr(thr)])


def evaluate_checkpoint(test_manifest: DatasetManifest, checkpoint, **kwargs) -> EvalReport:
    model, _ = load_checkpoint(checkpoint)
    return evaluate(test_manifest, model, **kwargs)
