"""Paired multi-modal synthetic scenes and the datasets built from them.

Every scene starts from a smooth random class field. Each class has a 13-band
spectrum and a two-channel SAR backscatter level; the RGB and IR-R-G views are
gathers of the multispectral bands (B4,B3,B2 and B8,B4,B3). Class "twins" make
some information exclusive to one modality:

* an MS twin pair shares its RGB/IR-R-G bands and its SAR level, so only the
  remaining multispectral bands tell the two classes apart;
* a SAR twin pair shares all 13 bands and differs only in SAR.

Twins occupy the lowest class indices: MS pairs first, then SAR pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .bands import spec_for_modality
from .tensorio import read_manifest, write_manifest

MAX_CLASSES = 16
MODALITIES = ("rgb", "ms", "sar", "irrg")
RGB_IDX = (3, 2, 1)
IRRG_IDX = (7, 3, 2)
OPTICAL_SHARED = sorted(set(RGB_IDX + IRRG_IDX))
MS_NOISE = 0.02
SAR_LOOKS = 4
PALETTE_SEED = 20_240_611

KINDS = {
    "classification": ("accuracy", "higher_better"),
    "segmentation": ("mIoU", "higher_better"),
    "regression": ("RMSE", "lower_better"),
}


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    num_classes: int = 0
    metric: str = ""
    direction: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        metric, direction = KINDS[self.kind]
        object.__setattr__(self, "metric", self.metric or metric)
        object.__setattr__(self, "direction", self.direction or direction)
        if (self.metric, self.direction) != (metric, direction):
            raise ValueError(f"{self.kind} uses {metric} ({direction}), got {self.metric} ({self.direction})")
        if self.kind == "regression" and self.num_classes != 0:
            raise ValueError("regression tasks have num_classes=0")
        if self.kind != "regression" and self.num_classes < 2:
            raise ValueError(f"{self.kind} needs at least 2 classes")

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.kind != "regression" else 1

    def better(self, a: float, b: float) -> bool:
        return a > b if self.direction == "higher_better" else a < b


@dataclass
class SyntheticScene:
    seed: int
    latent: np.ndarray
    renderings: dict
    scene_class: int
    reg_target: np.ndarray

    @property
    def seg_mask(self):
        return self.latent


def class_palette(num_classes: int, ms_twins: int = 0, sar_twins: int = 0):
    """Per-class MS spectra (K x 13) and SAR mean intensities (K x 2)."""
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [2, {MAX_CLASSES}], got {num_classes}")
    if ms_twins < 0 or sar_twins < 0 or 2 * (ms_twins + sar_twins) > num_classes:
        raise ValueError("not enough classes for the requested twin pairs")
    rng = np.random.default_rng(PALETTE_SEED)
    ms = _separated_spectra(rng)
    # SAR levels on a 4x4 grid, shuffled, so every pair of classes is well separated
    grid = np.array([(0.25 + 0.25 * i, 0.1 + 0.12 * j) for i in range(4) for j in range(4)])
    sar = grid[rng.permutation(MAX_CLASSES)]
    for m in range(ms_twins):
        a, b = 2 * m, 2 * m + 1
        ms[b, OPTICAL_SHARED] = ms[a, OPTICAL_SHARED]
        sar[b] = sar[a]
    for m in range(sar_twins):
        a, b = 2 * (ms_twins + m), 2 * (ms_twins + m) + 1
        ms[b] = ms[a]
    return ms[:num_classes].astype(np.float32), sar[:num_classes].astype(np.float32)


def _separated_spectra(rng, min_dist=0.25):
    # greedy rejection sampling: every class pair differs by >= min_dist both on
    # the optical bands shared with RGB/IR-R-G and on the MS-exclusive bands
    exclusive = [b for b in range(13) if b not in OPTICAL_SHARED]
    rows = []
    while len(rows) < MAX_CLASSES:
        cand = rng.uniform(0.1, 0.9, size=13)
        if all(
            np.linalg.norm(cand[OPTICAL_SHARED] - r[OPTICAL_SHARED]) >= min_dist
            and np.linalg.norm(cand[exclusive] - r[exclusive]) >= min_dist
            for r in rows
        ):
            rows.append(cand)
    return np.stack(rows)


def _latent_field(rng, size, num_classes, scene_class, margin=0.15):
    noise = rng.standard_normal((num_classes, size, size))
    fields = np.stack([ndimage.gaussian_filter(f, sigma=size / 6, mode="wrap") for f in noise])
    fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
    # start near the expected maximum of num_classes unit normals, then raise the
    # favoured class until it leads the runner-up by `margin` of the pixels
    bias = np.sqrt(2 * np.log(num_classes))
    while True:
        boosted = fields.copy()
        boosted[scene_class] += bias
        latent = boosted.argmax(axis=0)
        cover = np.bincount(latent.ravel(), minlength=num_classes) / latent.size
        others = np.delete(cover, scene_class)
        if cover[scene_class] - others.max() >= margin:
            return latent.astype(np.int64)
        bias += 0.25


def generate_scene(seed: int, size: int = 32, num_classes: int = 4, ms_twins: int = 0, sar_twins: int = 0):
    if size <= 0 or size % 32:
        raise ValueError(f"size must be a positive multiple of 32, got {size}")
    ms_table, sar_table = class_palette(num_classes, ms_twins, sar_twins)
    rng = np.random.default_rng(seed)
    scene_class = int(rng.integers(num_classes))
    latent = _latent_field(rng, size, num_classes, scene_class)

    ms = ms_table[latent].transpose(2, 0, 1) + MS_NOISE * rng.standard_normal((13, size, size))
    ms = ms.astype(np.float32)
    speckle = rng.gamma(SAR_LOOKS, 1.0 / SAR_LOOKS, size=(2, size, size))
    sar = (sar_table[latent].transpose(2, 0, 1) * speckle).astype(np.float32)
    renderings = {
        "ms": ms,
        "rgb": ms[list(RGB_IDX)],
        "irrg": ms[list(IRRG_IDX)],
        "sar": sar,
    }
    reg = ndimage.distance_transform_edt(latent == 0).astype(np.float32) / (size / 8)
    return SyntheticScene(seed, latent, renderings, scene_class, reg)


def render(scene: SyntheticScene, modality: str) -> np.ndarray:
    if modality == "ms+sar":
        return np.concatenate([scene.renderings["ms"], scene.renderings["sar"]])
    return scene.renderings[modality]


def scene_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


@dataclass
class SceneDataset:
    """One split: images N x C x H x W plus every label kind, ready for any task."""

    images: torch.Tensor
    scene_classes: torch.Tensor
    seg_masks: torch.Tensor
    reg_targets: torch.Tensor
    scene_seeds: list
    modality: str
    task: TaskSpec
    name: str = "synthetic"

    def __len__(self):
        return self.images.shape[0]

    @property
    def spec(self):
        return spec_for_modality(self.modality)

    @property
    def targets(self) -> torch.Tensor:
        if self.task.kind == "classification":
            return self.scene_classes
        if self.task.kind == "segmentation":
            return self.seg_masks
        return self.reg_targets

    def subset(self, indices) -> "SceneDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return SceneDataset(
            self.images[idx],
            self.scene_classes[idx],
            self.seg_masks[idx],
            self.reg_targets[idx],
            [self.scene_seeds[i] for i in idx.tolist()],
            self.modality,
            self.task,
            self.name,
        )

    def batches(self, batch_size, generator=None):
        order = torch.randperm(len(self), generator=generator) if generator is not None else torch.arange(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i : i + batch_size]
            yield self.images[idx], self.targets[idx]


@dataclass
class DatasetSplits:
    train: SceneDataset
    val: SceneDataset
    test: SceneDataset
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((("train", self.train), ("val", self.val), ("test", self.test)))


def split_sizes(n, ratios):
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    sizes = (n_train, n_val, n - n_train - n_val)
    if n < 10 or min(sizes) < 1:
        raise ValueError(f"n={n} is too small to populate splits {ratios}")
    return sizes


def _stack(scenes, modality, task, name, seeds):
    return SceneDataset(
        images=torch.from_numpy(np.stack([render(s, modality) for s in scenes])),
        scene_classes=torch.tensor([s.scene_class for s in scenes], dtype=torch.long),
        seg_masks=torch.from_numpy(np.stack([s.latent for s in scenes])),
        reg_targets=torch.from_numpy(np.stack([s.reg_target for s in scenes]))[:, None],
        scene_seeds=list(seeds),
        modality=modality,
        task=task,
        name=name,
    )


def make_dataset(
    task: TaskSpec,
    modality: str,
    n: int,
    seed: int,
    split_ratios=(0.8, 0.1, 0.1),
    size: int = 32,
    num_classes: int | None = None,
    ms_twins: int = 0,
    sar_twins: int = 0,
    name: str | None = None,
) -> DatasetSplits:
    """Render ``n`` scenes under one modality and split them train/val/test by index.

    Datasets built with the same ``seed`` share scene seeds index by index, so
    two modalities of the same seed are two views of the same scenes.
    ``num_classes`` defaults to the task's class count (4 for regression).
    """
    spec_for_modality(modality)
    sizes = split_sizes(n, split_ratios)
    k = num_classes or task.num_classes or 4
    if task.kind != "regression" and k != task.num_classes:
        raise ValueError(f"scene class count {k} differs from task class count {task.num_classes}")
    name = name or f"synth-{task.kind}-{modality}-s{seed}"
    seeds = [scene_seed(seed, i) for i in range(n)]
    scenes = [generate_scene(s, size, k, ms_twins, sar_twins) for s in seeds]
    bounds = np.cumsum((0,) + sizes)
    parts = [
        _stack(scenes[a:b], modality, task, name, seeds[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
    ]
    meta = {
        "name": name,
        "task": {"kind": task.kind, "num_classes": task.num_classes},
        "modality": modality,
        "n": n,
        "seed": seed,
        "size": size,
        "num_classes": k,
        "ms_twins": ms_twins,
        "sar_twins": sar_twins,
        "split_sizes": dict(zip(("train", "val", "test"), sizes)),
    }
    return DatasetSplits(*parts, meta=meta)


def save_dataset(splits: DatasetSplits, root):
    """``root/dataset.manifest`` plus one ``.npz`` container per sample under ``root/<split>/``."""
    root = Path(root)
    for split, ds in splits:
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(len(ds)):
            np.savez(
                d / f"{i:06d}.npz",
                image=ds.images[i].numpy(),
                scene_class=ds.scene_classes[i].numpy(),
                seg_mask=ds.seg_masks[i].numpy(),
                reg_target=ds.reg_targets[i].numpy(),
                scene_seed=np.uint64(ds.scene_seeds[i]),
            )
    write_manifest(root / "dataset.manifest", {"format_version": 1, **splits.meta})
    return root


def load_dataset(root) -> DatasetSplits:
    root = Path(root)
    meta = read_manifest(root / "dataset.manifest", ("task", "modality", "split_sizes"))
    meta.pop("format_version")
    task = TaskSpec(meta["task"]["kind"], meta["task"]["num_classes"])
    parts = []
    for split in ("train", "val", "test"):
        files = sorted((root / split).glob("*.npz"))
        if len(files) != meta["split_sizes"][split]:
            raise ValueError(f"{root / split}: {len(files)} samples, manifest says {meta['split_sizes'][split]}")
        arrays = [np.load(f) for f in files]
        parts.append(
            SceneDataset(
                images=torch.from_numpy(np.stack([a["image"] for a in arrays])),
                scene_classes=torch.from_numpy(np.stack([a["scene_class"] for a in arrays])).long(),
                seg_masks=torch.from_numpy(np.stack([a["seg_mask"] for a in arrays])).long(),
                reg_targets=torch.from_numpy(np.stack([a["reg_target"] for a in arrays])),
                scene_seeds=[int(a["scene_seed"]) for a in arrays],
                modality=meta["modality"],
                task=task,
                name=meta.get("name", root.name),
            )
        )
    return DatasetSplits(*parts, meta=meta)
