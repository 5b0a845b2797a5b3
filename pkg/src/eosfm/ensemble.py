"""The ensemble forward path: adapt bands, encode, normalize, select, fuse."""
from __future__ import annotations

import copy
import csv
from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bands import BandSpec, Branch, RuleRegistry, apply_rule
from .heads import attach_head
from .synthetic import TaskSpec
from .tensorio import (
    ManifestError,
    load_state_into,
    load_tensors,
    read_manifest,
    save_tensors,
    write_manifest,
)
from .zoo import SpecialistEncoder, load_checkpoint, save_checkpoint

NORM_MODES = ("none", "layer", "batch")


class UnsupportedInputError(ValueError):
    pass


class UninitializedStatsError(RuntimeError):
    pass


# --- normalization -----------------------------------------------------------


class NormalizerBank(nn.Module):
    """Non-parametric feature normalization, one statistics slot per (encoder, rule, level).

    Slots are created on the first training-mode call for a branch; inference on
    a branch that has never been seen in training raises.
    """

    def __init__(self, mode="batch", eps=1e-5, momentum=0.1):
        super().__init__()
        if mode not in NORM_MODES:
            raise ValueError(f"unknown normalization mode {mode!r}")
        self.mode, self.eps, self.momentum = mode, eps, momentum

    @staticmethod
    def slot(branch_key: str, level: int) -> str:
        return f"{branch_key}|L{level}"

    def slots(self) -> list[str]:
        return sorted({name.rsplit("|", 1)[0] for name, _ in self.named_buffers()})

    def has_slot(self, branch_key, level):
        return hasattr(self, self.slot(branch_key, level) + "|mean")

    def init_slot(self, branch_key, level, mean, var):
        name = self.slot(branch_key, level)
        self.register_buffer(name + "|mean", mean.detach().clone())
        self.register_buffer(name + "|var", var.detach().clone())

    def drop_slots(self, branch_key):
        for name in [n for n, _ in self.named_buffers() if n.startswith(branch_key + "|")]:
            delattr(self, name)

    def normalize_level(self, x, branch_key, level, training):
        if self.mode == "none":
            return x
        if self.mode == "layer":
            return F.layer_norm(x.permute(0, 2, 3, 1), x.shape[1:2], eps=self.eps).permute(0, 3, 1, 2)
        name = self.slot(branch_key, level)
        if training:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                n = x.numel() / x.shape[1]
                unbiased = var * (n / max(n - 1, 1))
                if not self.has_slot(branch_key, level):
                    self.init_slot(branch_key, level, mean, unbiased)
                else:
                    rm, rv = getattr(self, name + "|mean"), getattr(self, name + "|var")
                    rm.mul_(1 - self.momentum).add_(self.momentum * mean)
                    rv.mul_(1 - self.momentum).add_(self.momentum * unbiased)
        else:
            if not self.has_slot(branch_key, level):
                raise UninitializedStatsError(f"no running statistics for {name}; run a training-mode pass first")
            mean, var = getattr(self, name + "|mean"), getattr(self, name + "|var")
        return (x - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + self.eps)


def normalize(features, bank: NormalizerBank, branch_key: str, training: bool):
    return [bank.normalize_level(f, branch_key, j, training) for j, f in enumerate(features)]


# --- selection ---------------------------------------------------------------


class SelectionWeights(nn.Module):
    """One learnable scalar per encoder (init 1) and top-k masking.

    ``k=None`` means "every encoder". While ``force_all`` is set (the warmup
    epochs of a finetune) no encoder is masked.
    """

    def __init__(self, encoder_ids, k=None, warmup_epochs=3):
        super().__init__()
        self.encoder_ids = list(encoder_ids)
        self.w = nn.Parameter(torch.ones(len(self.encoder_ids)))
        self.warmup_epochs = warmup_epochs
        self.force_all = False
        self._k = None
        self.k = k

    @property
    def n(self):
        return len(self.encoder_ids)

    @property
    def k(self) -> int:
        return self.n if self._k is None else self._k

    @k.setter
    def k(self, value):
        if value is not None and not 1 <= value <= self.n:
            raise ValueError(f"k must be in [1, {self.n}], got {value}")
        self._k = value

    @property
    def k_is_default(self):
        return self._k is None

    def topk_indices(self, k=None) -> list[int]:
        """Indices of the k largest weights; ties go to the earlier-registered encoder."""
        k = self.k if k is None else k
        if not 1 <= k <= self.n:
            raise ValueError(f"k must be in [1, {self.n}], got {k}")
        w = self.w.detach().tolist()
        order = sorted(range(self.n), key=lambda i: (-w[i], i))
        return sorted(order[:k])

    def active(self) -> set[str]:
        if self.force_all or self.k == self.n:
            return set(self.encoder_ids)
        return {self.encoder_ids[i] for i in self.topk_indices()}

    def weight_of(self, encoder_id):
        return self.w[self.encoder_ids.index(encoder_id)]


def select(branch_pyramids: dict, sel: SelectionWeights, encoder_order=None) -> dict:
    """Scale each branch by its encoder's weight; zero the branches of masked encoders."""
    if encoder_order is not None and list(encoder_order) != sel.encoder_ids:
        raise ValueError("encoder order disagrees with the selection weights")
    active = sel.active()
    out = {}
    for branch, pyr in branch_pyramids.items():
        if branch.encoder_id not in sel.encoder_ids:
            raise KeyError(f"no selection weight for encoder {branch.encoder_id!r}")
        if branch.encoder_id in active:
            w = sel.weight_of(branch.encoder_id)
            out[branch] = [w * f for f in pyr]
        else:
            out[branch] = [torch.zeros_like(f) for f in pyr]
    return out


# --- fusion ------------------------------------------------------------------


class FusionLayer(nn.Module):
    """Per-level 1x1 convolution from the concatenated branch channels to ``target_dims``."""

    def __init__(self, in_dims, target_dims):
        super().__init__()
        self.in_dims = [int(d) for d in in_dims]
        self.target_dims = [int(d) for d in target_dims]
        self.levels = nn.ModuleList(nn.Conv2d(i, t, 1) for i, t in zip(self.in_dims, self.target_dims))

    def forward(self, pyramids):
        # Same map as one conv over the channel concatenation, but summed branch by
        # branch in branch order with the bias last: appending a zero-weight branch
        # then adds an exact 0.0, so extension and pruning are bit-stable.
        out = []
        for j, conv in enumerate(self.levels):
            widths = [p[j].shape[1] for p in pyramids]
            if sum(widths) != conv.in_channels:
                raise ValueError(f"level {j}: fusion expects {conv.in_channels} channels, got {sum(widths)}")
            acc, start = None, 0
            for p, width in zip(pyramids, widths):
                y = F.conv2d(p[j], conv.weight[:, start : start + width])
                acc = y if acc is None else acc + y
                start += width
            out.append(acc + conv.bias[None, :, None, None])
        return out


def fuse(selected, fusion: FusionLayer):
    pyramids = list(selected.values()) if isinstance(selected, dict) else list(selected)
    return fusion(pyramids)


# --- the model ---------------------------------------------------------------


class EnsembleModel(nn.Module):
    def __init__(self, encoders, rules: RuleRegistry, input_spec: BandSpec, task: TaskSpec, *,
                 norm_mode="batch", k=None, warmup_epochs=3, target_dims=None, decoder_width=32):
        super().__init__()
        encoders = list(encoders)
        if not encoders:
            raise ValueError("an ensemble needs at least one encoder")
        for enc in encoders:
            if "." in enc.encoder_id or "|" in enc.encoder_id:
                raise ValueError(f"encoder id {enc.encoder_id!r} may not contain '.' or '|'")
        self.encoders = nn.ModuleDict((e.encoder_id, e.freeze()) for e in encoders)
        self.rules = rules
        self.input_spec = input_spec
        self.task = task
        self.branches = rules.enumerate_branches(input_spec, self.encoders.values())
        if not self.branches:
            raise UnsupportedInputError(f"unsupported input spec: no encoder accepts {input_spec}")
        self.target_dims = list(target_dims or encoders[0].config.dims)
        self.decoder_width = decoder_width
        self.normalizers = NormalizerBank(norm_mode)
        self.selection = SelectionWeights(self.encoders.keys(), k=k, warmup_epochs=warmup_epochs)
        self.fusion = FusionLayer(self._fusion_in_dims(self.branches), self.target_dims)
        self.decoder = attach_head(task, self.target_dims, refine=True, width=decoder_width)
        self.meta = {}

    def _fusion_in_dims(self, branches):
        return [sum(self.encoders[b.encoder_id].config.dims[j] for b in branches) for j in range(4)]

    def rule_for(self, branch: Branch):
        return self.rules.get(branch.rule_id, self.input_spec)

    def trainable_parameters(self):
        return [self.selection.w, *self.fusion.parameters(), *self.decoder.parameters()]

    def branch_pyramids(self, image, training, skip=()):
        """Normalized (unscaled) pyramid per branch; branches of encoders in ``skip`` are zeros."""
        out = {}
        n, _, h, w = image.shape
        for b in self.branches:
            enc = self.encoders[b.encoder_id]
            if b.encoder_id in skip:
                out[b] = [
                    image.new_zeros(n, d, h // s, w // s) for d, s in zip(enc.config.dims, enc.config.strides)
                ]
                continue
            x = apply_rule(image, self.rule_for(b))
            with torch.set_grad_enabled(torch.is_grad_enabled() and not enc.frozen):
                feats = enc(x)
            out[b] = normalize(feats, self.normalizers, b.key, training)
        return out

    def features(self, image, training=None):
        if image.ndim != 4 or image.shape[1] != self.input_spec.count:
            raise ValueError(f"ensemble expects {self.input_spec.count} input channels, got shape {tuple(image.shape)}")
        training = self.training if training is None else training
        masked = set(self.selection.encoder_ids) - self.selection.active()
        pyrs = self.branch_pyramids(image, training, skip=masked)
        return fuse(select(pyrs, self.selection), self.fusion)

    def forward(self, image):
        return self.decoder(self.features(image), image.shape[-2:])


def ensemble_forward(model: EnsembleModel, image, input_spec: BandSpec, training: bool):
    if not model.rules.enumerate_branches(input_spec, model.encoders.values()):
        raise UnsupportedInputError(f"unsupported input spec: no encoder accepts {input_spec}")
    if input_spec != model.input_spec:
        raise UnsupportedInputError(f"model was built for {model.input_spec}, got {input_spec}")
    return model.features(image, training=training)


def build_ensemble(encoders, rules: RuleRegistry, input_spec: BandSpec, task: TaskSpec, seed=0, **kw) -> EnsembleModel:
    """Seeded construction of selection/fusion/decoder around deep copies of ``encoders``."""
    encoders = [copy.deepcopy(e) for e in encoders]
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return EnsembleModel(encoders, rules, input_spec, task, **kw)
    finally:
        torch.random.set_rng_state(state)


@torch.no_grad()
def calibrate(model: EnsembleModel, images, batch_size=16):
    """Populate batch-norm running statistics without touching any parameter."""
    for i in range(0, len(images), batch_size):
        model.branch_pyramids(images[i : i + batch_size], training=True)
    return model


def extend_ensemble(model: EnsembleModel, new_encoder: SpecialistEncoder, calibration_images=None) -> EnsembleModel:
    """Add an encoder without changing the model's output.

    The new selection weight starts at 1 and the fusion columns for the new
    branches start at zero. New batch-norm slots get statistics from
    ``calibration_images`` when given, otherwise a zero-mean unit-variance prior.
    """
    if new_encoder.encoder_id in model.encoders:
        raise KeyError(f"encoder id {new_encoder.encoder_id!r} already in the ensemble")
    m = copy.deepcopy(model)
    enc = copy.deepcopy(new_encoder).freeze()
    m.encoders[enc.encoder_id] = enc
    new_branches = m.rules.enumerate_branches(m.input_spec, [enc])

    with torch.no_grad():
        w = torch.cat([m.selection.w.detach(), torch.ones(1)])
        m.selection.w = nn.Parameter(w)
        m.selection.encoder_ids.append(enc.encoder_id)
        if new_branches:
            old = m.fusion
            fusion = FusionLayer(m._fusion_in_dims(m.branches + new_branches), old.target_dims)
            for j, (conv_new, conv_old) in enumerate(zip(fusion.levels, old.levels)):
                conv_new.weight.zero_()
                conv_new.weight[:, : conv_old.in_channels] = conv_old.weight
                conv_new.bias.copy_(conv_old.bias)
            m.fusion = fusion
            m.branches = m.branches + new_branches
            if m.normalizers.mode == "batch":
                stats = None
                if calibration_images is not None:
                    stats = _branch_stats(m, calibration_images, new_branches)
                for b in new_branches:
                    for j, d in enumerate(enc.config.dims):
                        mean, var = stats[b.key, j] if stats else (torch.zeros(d), torch.ones(d))
                        m.normalizers.init_slot(b.key, j, mean, var)
    return m


def _branch_stats(model, images, branches):
    stats = {}
    for b in branches:
        feats = model.encoders[b.encoder_id](apply_rule(images, model.rule_for(b)))
        for j, f in enumerate(feats):
            stats[b.key, j] = (f.mean(dim=(0, 2, 3)), f.var(dim=(0, 2, 3), unbiased=True))
    return stats


# --- feature variance report -------------------------------------------------


@torch.no_grad()
def feature_variance_report(model: EnsembleModel, dataset, n_batches: int, batch_size=8, out_dir=None):
    """Variance of each encoder's raw stage-4 features, pooled over all its branches and batches.

    Accumulated with the pairwise (Chan) update in float64. Returns
    ``{encoder_id: variance}`` in registration order; encoders with no branch
    for this input get NaN.
    """
    acc = {eid: (0, 0.0, 0.0) for eid in model.encoders}  # count, mean, M2
    for i, (x, _) in enumerate(dataset.batches(batch_size)):
        if i >= n_batches:
            break
        for b in model.branches:
            f = model.encoders[b.encoder_id](apply_rule(x, model.rule_for(b)))[-1].double()
            nb, mb = f.numel(), f.mean().item()
            m2b = ((f - mb) ** 2).sum().item()
            na, ma, m2a = acc[b.encoder_id]
            n = na + nb
            delta = mb - ma
            acc[b.encoder_id] = (n, ma + delta * nb / n, m2a + m2b + delta**2 * na * nb / n)
    report = {eid: (m2 / n if n else float("nan")) for eid, (n, _, m2) in acc.items()}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "variance.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["encoder_id", "variance"])
            for eid, v in report.items():
                w.writerow([eid, f"{v:.8g}"])
        from .plotting import bar_plot

        bar_plot(list(report), list(report.values()), "stage-4 feature variance", out_dir / "variance.svg")
    return report


# --- checkpoints -------------------------------------------------------------

_ENSEMBLE_KEYS = ("encoders", "rules_file", "normalization", "k", "warmup_epochs", "target_dims",
                  "input_spec", "task", "branches", "blobs")


def save_ensemble(model: EnsembleModel, path):
    path = Path(path)
    (path / "encoders").mkdir(parents=True, exist_ok=True)
    for eid, enc in model.encoders.items():
        save_checkpoint(enc, path / "encoders" / eid)
    model.rules.save(path / "rules.txt")
    blobs = {}
    for name, module in (("fusion", model.fusion), ("selection", model.selection),
                         ("decoder", model.decoder), ("normalizers", model.normalizers)):
        blobs[name] = save_tensors(path / f"{name}.bin", module.state_dict())
    write_manifest(path / "ensemble.manifest", {
        "format_version": 1,
        "encoders": list(model.encoders),
        "rules_file": "rules.txt",
        "normalization": model.normalizers.mode,
        "k": None if model.selection.k_is_default else model.selection.k,
        "warmup_epochs": model.selection.warmup_epochs,
        "target_dims": model.target_dims,
        "fusion_in_dims": model.fusion.in_dims,
        "decoder_width": model.decoder_width,
        "input_spec": list(model.input_spec.bands),
        "task": asdict(model.task),
        "branches": [[b.encoder_id, b.rule_id] for b in model.branches],
        "blobs": blobs,
        "meta": model.meta,
    })
    return path


def load_ensemble(path) -> EnsembleModel:
    path = Path(path)
    man = read_manifest(path / "ensemble.manifest", _ENSEMBLE_KEYS)
    encoders = [load_checkpoint(path / "encoders" / eid) for eid in man["encoders"]]
    rules = RuleRegistry.load(path / man["rules_file"])
    try:
        task = TaskSpec(**man["task"])
        spec = BandSpec(tuple(man["input_spec"]))
    except (TypeError, ValueError) as e:
        raise ManifestError(f"corrupt manifest {path / 'ensemble.manifest'}: {e}") from None
    model = EnsembleModel(encoders, rules, spec, task, norm_mode=man["normalization"], k=man["k"],
                          warmup_epochs=man["warmup_epochs"], target_dims=man["target_dims"],
                          decoder_width=man.get("decoder_width", 32))
    stored = [Branch(e, r) for e, r in man["branches"]]
    if stored != model.branches:
        # a pruned or extended model may carry a branch subset; keep the stored one
        model.branches = stored
        model.fusion = FusionLayer(man.get("fusion_in_dims") or model._fusion_in_dims(stored), model.target_dims)
    norm_table = man["blobs"]["normalizers"]
    for entry in norm_table:
        if entry["name"].endswith("|mean"):
            key, level = entry["name"][: -len("|mean")].rsplit("|L", 1)
            d = entry["shape"][0]
            model.normalizers.init_slot(key, int(level), torch.zeros(d), torch.ones(d))
    for name in ("fusion", "selection", "decoder", "normalizers"):
        tensors = load_tensors(path / f"{name}.bin", man["blobs"][name])
        load_state_into(getattr(model, name), tensors, where=f"{path}/{name}")
    model.meta = man.get("meta", {})
    return model.eval()


def encoder_hashes(model: EnsembleModel) -> dict[str, str]:
    return {eid: enc.weight_hash() for eid, enc in model.encoders.items()}

