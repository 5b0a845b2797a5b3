"""Supervised training of one specialist, plus the epoch loop shared with downstream adaptation."""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .heads import attach_head, task_loss, to_prediction
from .synthetic import SceneDataset, TaskSpec


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-3
    patience: int = 5
    seed: int = 0
    tile_size: int | None = None

    def __post_init__(self):
        for name in ("max_epochs", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.tile_size is not None and (self.tile_size <= 0 or self.tile_size % 32):
            raise ValueError("tile_size must be a positive multiple of 32")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("nan")

    def __len__(self):
        return len(self.train_loss)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_metric"])
            for e, (loss, val) in enumerate(zip(self.train_loss, self.val_metric), start=1):
                w.writerow([e, f"{loss:.8g}", f"{val:.8g}"])


# --- tiling ----------------------------------------------------------------


def tile_anchors(length: int, patch: int) -> list[int]:
    if patch > length:
        raise ValueError(f"patch {patch} larger than image side {length}")
    anchors = list(range(0, length - patch + 1, patch))
    if anchors[-1] + patch < length:
        anchors.append(length - patch)
    return anchors


def tile(image, patch: int):
    """Row-major non-overlapping patches; the last row/column is re-anchored at the border.

    Returns ``(tiles, anchors)`` with ``anchors[i] = (row, col)`` of tile ``i``.
    """
    if patch <= 0 or patch % 32:
        raise ValueError(f"patch must be a positive multiple of 32, got {patch}")
    h, w = image.shape[-2:]
    anchors = [(r, c) for r in tile_anchors(h, patch) for c in tile_anchors(w, patch)]
    return [image[..., r : r + patch, c : c + patch] for r, c in anchors], anchors


def untile(tiles, anchors, shape):
    out = np.zeros(shape, dtype=np.asarray(tiles[0]).dtype) if isinstance(tiles[0], np.ndarray) else None
    if out is None:
        out = torch.zeros(shape, dtype=tiles[0].dtype)
    for t, (r, c) in zip(tiles, anchors):
        p = t.shape[-1]
        out[..., r : r + p, c : c + p] = t
    return out


def tile_dataset(ds: SceneDataset, patch: int) -> SceneDataset:
    if ds.images.shape[-1] <= patch and ds.images.shape[-2] <= patch:
        return ds
    parts = {"images": [], "seg": [], "reg": [], "cls": [], "seeds": []}
    for i in range(len(ds)):
        imgs, anchors = tile(ds.images[i], patch)
        segs, _ = tile(ds.seg_masks[i], patch)
        regs, _ = tile(ds.reg_targets[i], patch)
        parts["images"] += imgs
        parts["seg"] += segs
        parts["reg"] += regs
        parts["cls"] += [ds.scene_classes[i]] * len(anchors)
        parts["seeds"] += [ds.scene_seeds[i]] * len(anchors)
    return SceneDataset(
        torch.stack(parts["images"]),
        torch.stack(parts["cls"]),
        torch.stack(parts["seg"]),
        torch.stack(parts["reg"]),
        parts["seeds"],
        ds.modality,
        ds.task,
        ds.name,
    )


# --- shared loop -----------------------------------------------------------


@torch.no_grad()
def predict(forward, ds: SceneDataset, task: TaskSpec, batch_size=64):
    preds = []
    for i in range(0, len(ds), batch_size):
        x = ds.images[i : i + batch_size]
        preds.append(to_prediction(forward(x), task))
    return torch.cat(preds)


def score(pred, target, task: TaskSpec) -> float:
    if task.kind == "segmentation":
        return metrics.miou(pred, target, task.num_classes)
    if task.kind == "classification":
        return metrics.accuracy(pred, target)
    return metrics.rmse(pred, target)


def fit(model: nn.Module, params, forward, train: SceneDataset, val: SceneDataset, task: TaskSpec, *,
        epochs, batch_size, lr, seed, patience=None, eval_forward=None, on_epoch_end=None,
        param_groups=None, after_step=None):
    """Train ``params`` and leave ``model`` holding the best-validation state.

    ``forward(x)`` runs in training mode and ``eval_forward(x)`` in inference mode
    (defaults to ``forward``). Early-stops after ``patience`` epochs without
    improvement when ``patience`` is given. ``after_step()`` runs after every
    optimizer step.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("empty dataset split")
    eval_forward = eval_forward or forward
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(param_groups or params, lr=lr, weight_decay=0.0)
    hist = TrainHistory()
    best_state, since_best = None, 0
    for epoch in range(1, epochs + 1):
        model.train()
        total, seen = 0.0, 0
        for x, y in train.batches(batch_size, gen):
            loss = task_loss(forward(x), y, task)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if after_step is not None:
                after_step()
            total += loss.item() * len(x)
            seen += len(x)
        model.eval()
        val_score = score(predict(eval_forward, val, task), val.targets, task)
        hist.train_loss.append(total / seen)
        hist.val_metric.append(val_score)
        if best_state is None or task.better(val_score, hist.best_val):
            hist.best_val, hist.best_epoch = val_score, epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
        if patience is not None and since_best >= patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return hist


# --- specialists -----------------------------------------------------------


class SpecialistModel(nn.Module):
    def __init__(self, encoder, head):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x):
        return self.head(self.encoder(x), x.shape[-2:])


def train_specialist(encoder, dataset, task: TaskSpec, cfg: TrainConfig):
    """Fit ``encoder`` plus a throwaway head on ``dataset`` (train/val splits).

    Returns a trained copy of the encoder and its history; the input encoder is
    left untouched.
    """
    if encoder.frozen:
        raise ValueError(f"encoder {encoder.encoder_id} is frozen")
    if dataset.train.spec != encoder.required_spec:
        raise ValueError(
            f"dataset modality {dataset.train.modality!r} does not match encoder {encoder.encoder_id} bands"
        )
    train, val = dataset.train, dataset.val
    if len(train) == 0 or len(val) == 0:
        raise ValueError("empty dataset split")
    if cfg.tile_size:
        train, val = tile_dataset(train, cfg.tile_size), tile_dataset(val, cfg.tile_size)
    torch.manual_seed(cfg.seed)
    enc = copy.deepcopy(encoder)
    model = SpecialistModel(enc, attach_head(task, enc.config.dims))
    hist = fit(
        model, model.parameters(), model, train, val, task,
        epochs=cfg.max_epochs, batch_size=cfg.batch_size, lr=cfg.learning_rate,
        seed=cfg.seed, patience=cfg.patience,
    )
    enc.provenance.dataset_name = train.name
    enc.provenance.task_kind = task.kind
    enc.provenance.modality = train.modality
    enc.provenance.n_train_samples = len(dataset.train)
    enc.provenance.final_val_metric = float(hist.best_val)
    return enc, hist


def load_encoder_config(path):
    import json

    from .zoo import EncoderConfig

    return EncoderConfig.from_dict(json.loads(Path(path).read_text()))
