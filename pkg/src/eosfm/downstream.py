"""Frozen-ensemble adaptation to a downstream task."""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .ensemble import EnsembleModel, UnsupportedInputError
from .synthetic import SceneDataset, TaskSpec
from .training import fit, predict, score


@dataclass(frozen=True)
class DownstreamConfig:
    epochs: int = 80
    batch_size: int = 8
    label_fraction: float = 1.0
    seed: int = 0
    k: int | None = None
    warmup_epochs: int = 3
    learning_rate: float = 1e-3
    selection_lr: float = 1e-2

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")


def strata(ds: SceneDataset) -> np.ndarray:
    kind = ds.task.kind
    if kind == "classification":
        return ds.scene_classes.numpy()
    if kind == "segmentation":
        k = max(ds.task.num_classes, int(ds.seg_masks.max()) + 1)
        return np.array([np.bincount(m.ravel(), minlength=k).argmax() for m in ds.seg_masks.numpy()])
    means = ds.reg_targets.flatten(1).mean(1).numpy()
    edges = np.quantile(means, [0.25, 0.5, 0.75])
    return np.searchsorted(edges, means, side="right")


def stratum_counts(labels, fraction) -> dict:
    values, sizes = np.unique(labels, return_counts=True)
    return {int(v): max(1, math.floor(fraction * n + 0.5)) for v, n in zip(values, sizes)}


def subsample_stratified(ds: SceneDataset, fraction: float, seed: int) -> SceneDataset:
    """Keep round-half-up(fraction * size) samples of every stratum (at least one), indices sorted."""
    if len(ds) == 0:
        raise ValueError("cannot subsample an empty dataset")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return ds
    labels = strata(ds)
    rng = np.random.default_rng(seed)
    keep = []
    for value, count in sorted(stratum_counts(labels, fraction).items()):
        members = np.flatnonzero(labels == value)
        keep.extend(rng.permutation(members)[:count].tolist())
    return ds.subset(sorted(keep))


def evaluate(model: EnsembleModel, split: SceneDataset, task: TaskSpec | None = None) -> float:
    task = task or split.task
    if task != model.task:
        raise ValueError(f"model was adapted for {model.task}, asked to evaluate {task}")
    was_training = model.training
    model.eval()
    try:
        return score(predict(model, split, task), split.targets, task)
    finally:
        model.train(was_training)


def finetune(model: EnsembleModel, dataset, task: TaskSpec, cfg: DownstreamConfig, on_epoch_end=None):
    """Train selection, fusion and decoder with every encoder frozen.

    Returns an adapted copy holding the best-validation checkpoint and its
    history. During the first ``cfg.warmup_epochs`` epochs no encoder is masked
    so that the selection weights can separate before top-k takes effect;
    afterwards the weights of masked encoders are held fixed. Validation always
    uses the masked model.
    """
    if task != model.task:
        raise ValueError(f"ensemble decoder was built for {model.task}, got {task}")
    if dataset.train.spec != model.input_spec:
        raise UnsupportedInputError(f"model expects {model.input_spec}, dataset provides {dataset.train.spec}")
    m = copy.deepcopy(model)
    for enc in m.encoders.values():
        enc.freeze()
    if cfg.k is not None:
        m.selection.k = min(cfg.k, m.selection.n)
    m.selection.warmup_epochs = cfg.warmup_epochs
    train = subsample_stratified(dataset.train, cfg.label_fraction, cfg.seed)
    torch.manual_seed(cfg.seed)

    epoch = [0]
    held = {}

    def forward(x):
        sel = m.selection
        sel.force_all = epoch[0] <= cfg.warmup_epochs and sel.k < sel.n
        # masked weights get zero gradient, but Adam momentum would still move them
        masked = [i for i, eid in enumerate(sel.encoder_ids) if eid not in sel.active()]
        held["idx"], held["w"] = masked, sel.w.detach()[masked].clone()
        return m(x)

    def restore_masked():
        if held.get("idx"):
            with torch.no_grad():
                m.selection.w[held["idx"]] = held["w"]

    def eval_forward(x):
        m.selection.force_all = False
        return m(x)

    def hook(e, module):
        epoch[0] = e + 1
        if on_epoch_end is not None:
            on_epoch_end(e, module)

    epoch[0] = 1
    groups = [
        {"params": [m.selection.w], "lr": cfg.selection_lr},
        {"params": [*m.fusion.parameters(), *m.decoder.parameters()], "lr": cfg.learning_rate},
    ]
    hist = fit(
        m, None, forward, train, dataset.val, task,
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.learning_rate, seed=cfg.seed,
        eval_forward=eval_forward, on_epoch_end=hook, param_groups=groups, after_step=restore_masked,
    )
    m.selection.force_all = False
    m.meta["n_train"] = len(train)
    return m, hist


def write_result_row(path, model_name, dataset_name, task: TaskSpec, value, seed):
    """Append a ``model,dataset,metric,direction,score,seed`` row; accuracy and mIoU in percent."""
    pct = value * 100 if task.kind != "regression" else value
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["model", "dataset", "metric", "direction", "score", "seed"])
        w.writerow([model_name, dataset_name, task.metric, task.direction, f"{pct:.4f}", seed])
