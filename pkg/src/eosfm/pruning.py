"""Physically removing unselected encoders, and the ensemble-size sweep."""
from __future__ import annotations

import copy
import csv
import statistics
import warnings
from pathlib import Path

import torch
import torch.nn as nn

from .downstream import DownstreamConfig, finetune
from .ensemble import EnsembleModel, FusionLayer, build_ensemble


def prune(model: EnsembleModel, k: int) -> EnsembleModel:
    """Keep the top-k encoders by selection weight and drop everything that belonged to the rest.

    The result computes the same function as ``model`` with top-k masking, up
    to float summation order in the fusion layer.
    """
    sel = model.selection
    if not 1 <= k <= sel.n:
        raise ValueError(f"k must be in [1, {sel.n}], got {k}")
    m = copy.deepcopy(model)
    if k == sel.n:
        return m
    untrained = bool(torch.all(sel.w.detach() == 1.0))
    if untrained:
        warnings.warn("selection weights are all ones: pruning keeps the first k registered encoders", stacklevel=2)
    keep_idx = sel.topk_indices(k)
    keep = [sel.encoder_ids[i] for i in keep_idx]

    # fusion input columns of each kept branch, per level
    cols = [[] for _ in range(4)]
    offsets = [0, 0, 0, 0]
    for b in model.branches:
        dims = model.encoders[b.encoder_id].config.dims
        for j in range(4):
            if b.encoder_id in keep:
                cols[j].extend(range(offsets[j], offsets[j] + dims[j]))
            offsets[j] += dims[j]
    kept_branches = [b for b in model.branches if b.encoder_id in keep]

    fusion = FusionLayer([len(c) for c in cols], model.fusion.target_dims)
    with torch.no_grad():
        for j, (new, old) in enumerate(zip(fusion.levels, model.fusion.levels)):
            new.weight.copy_(old.weight[:, cols[j]])
            new.bias.copy_(old.bias)
    for b in model.branches:
        if b.encoder_id not in keep:
            m.normalizers.drop_slots(b.key)
    for eid in list(m.encoders):
        if eid not in keep:
            del m.encoders[eid]
    m.branches = kept_branches
    m.fusion = fusion
    m.selection.encoder_ids = keep
    m.selection.w = nn.Parameter(sel.w.detach()[keep_idx].clone())
    m.selection.k = None
    m.selection.force_all = False
    m.meta = {**m.meta, "pruned_from": sel.n, "pruned_k": k, "pruned_untrained": untrained}
    return m


def scaling_sweep(registry, rules, dataset, task, ks, seeds, cfg: DownstreamConfig, out_dir=None, **build_kw):
    """Finetune a fresh ensemble for every (k, seed) and record the best validation metric."""
    encoders = list(registry)
    for k in ks:
        if not 1 <= k <= len(encoders):
            raise ValueError(f"k={k} outside [1, {len(encoders)}]")
    rows = []
    for k in ks:
        for seed in seeds:
            model = build_ensemble(encoders, rules, dataset.train.spec, task, seed=seed, **build_kw)
            run_cfg = DownstreamConfig(**{**cfg.__dict__, "k": k, "seed": seed})
            _, hist = finetune(model, dataset, task, run_cfg)
            rows.append((k, seed, hist.best_val))
    if out_dir is not None:
        write_sweep(rows, out_dir, task)
    return rows


def sweep_medians(rows) -> dict[int, float]:
    by_k: dict[int, list] = {}
    for k, _, v in rows:
        by_k.setdefault(k, []).append(v)
    return {k: statistics.median(v) for k, v in sorted(by_k.items())}


def write_sweep(rows, out_dir, task):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "seed", "metric"])
        for k, seed, v in rows:
            w.writerow([k, seed, f"{v:.8g}"])
    from .plotting import line_plot

    med = sweep_medians(rows)
    line_plot(list(med), list(med.values()), "number of encoders k", f"median best val {task.metric}",
              out_dir / "sweep.svg", scatter=([r[0] for r in rows], [r[2] for r in rows]))
