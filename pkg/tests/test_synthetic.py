import numpy as np
import pytest
import torch
from scipy import stats

from eosfm.synthetic import (
    IRRG_IDX, MS_NOISE, RGB_IDX, SAR_LOOKS, TaskSpec, class_palette, generate_scene, load_dataset,
    make_dataset, render, save_dataset, split_sizes,
)

SEG4 = TaskSpec("segmentation", 4)


def test_task_spec_consistency():
    assert TaskSpec("regression").direction == "lower_better"
    assert TaskSpec("classification", 3).metric == "accuracy"
    with pytest.raises(ValueError):
        TaskSpec("segmentation", 4, metric="RMSE")
    with pytest.raises(ValueError):
        TaskSpec("detection", 2)


def test_scene_determinism():
    a, b = generate_scene(11, 64, 5), generate_scene(11, 64, 5)
    assert np.array_equal(a.latent, b.latent)
    for m in a.renderings:
        assert np.array_equal(a.renderings[m], b.renderings[m])


def test_band_counts_and_gathers():
    s = generate_scene(3)
    assert {m: r.shape[0] for m, r in s.renderings.items()} == {"ms": 13, "rgb": 3, "irrg": 3, "sar": 2}
    assert np.array_equal(s.renderings["rgb"], s.renderings["ms"][list(RGB_IDX)])
    assert np.array_equal(s.renderings["irrg"], s.renderings["ms"][list(IRRG_IDX)])
    assert render(s, "ms+sar").shape[0] == 15
    assert np.array_equal(s.seg_mask, s.latent)


def test_bad_size():
    with pytest.raises(ValueError):
        generate_scene(0, size=48)


def test_scene_class_leads_the_mask():
    for seed in range(20):
        s = generate_scene(seed, 32, 4)
        cover = np.bincount(s.latent.ravel(), minlength=4) / s.latent.size
        assert cover.argmax() == s.scene_class


def test_sar_class_means_match_table():
    # Monte-Carlo: per-class SAR mean vs the generator's lookup table, within 3 sigma / sqrt(n)
    _, sar_table = class_palette(4)
    sums = np.zeros((4, 2))
    counts = np.zeros(4)
    for seed in range(10):
        s = generate_scene(seed, 64, 4)
        for c in range(4):
            px = s.renderings["sar"][:, s.latent == c]
            sums[c] += px.sum(axis=1)
            counts[c] += px.shape[1]
    for c in range(4):
        if counts[c] < 100:
            continue
        mean = sums[c] / counts[c]
        sigma = sar_table[c] / np.sqrt(SAR_LOOKS)
        # pixels are correlated through the latent field but speckle is i.i.d.
        assert np.all(np.abs(mean - sar_table[c]) <= 3 * sigma / np.sqrt(counts[c]))


def test_twins_share_what_they_should():
    ms, sar = class_palette(6, ms_twins=1, sar_twins=1)
    shared = sorted(set(RGB_IDX + IRRG_IDX))
    assert np.array_equal(ms[0, shared], ms[1, shared]) and np.array_equal(sar[0], sar[1])
    assert np.abs(ms[0] - ms[1]).max() > 0.1
    assert np.array_equal(ms[2], ms[3]) and np.abs(sar[2] - sar[3]).max() > 0.1
    with pytest.raises(ValueError):
        class_palette(3, ms_twins=1, sar_twins=1)


def test_palette_separation():
    ms, sar = class_palette(16)
    d = np.linalg.norm(ms[:, None] - ms[None], axis=-1) + np.eye(16)
    assert d.min() > 0.25
    ds = np.linalg.norm(sar[:, None] - sar[None], axis=-1) + np.eye(16)
    assert ds.min() >= 0.1 - 1e-6
    assert MS_NOISE < 0.1


def test_split_sizes():
    assert split_sizes(1000, (0.8, 0.1, 0.1)) == (800, 100, 100)
    with pytest.raises(ValueError):
        split_sizes(5, (0.8, 0.1, 0.1))
    with pytest.raises(ValueError):
        split_sizes(100, (0.5, 0.1, 0.1))


def test_paired_modalities_share_latents():
    a = make_dataset(SEG4, "rgb", 20, 9)
    b = make_dataset(SEG4, "sar", 20, 9)
    for (_, sa), (_, sb) in zip(a, b):
        assert torch.equal(sa.seg_masks, sb.seg_masks)
        assert sa.scene_seeds == sb.scene_seeds


def test_splits_disjoint():
    ds = make_dataset(SEG4, "ms", 40, 2)
    seeds = [set(s.scene_seeds) for _, s in ds]
    assert not (seeds[0] & seeds[1] or seeds[0] & seeds[2] or seeds[1] & seeds[2])
    assert [len(s) for _, s in ds] == [32, 4, 4]


def test_class_histogram_uniform():
    # chi-square against uniform on the scene classes of 10 train splits
    pvals = []
    for seed in range(10):
        ds = make_dataset(TaskSpec("classification", 4), "rgb", 100, seed)
        counts = np.bincount(ds.train.scene_classes.numpy(), minlength=4)
        pvals.append(stats.chisquare(counts).pvalue)
    assert min(pvals) > 0.01


def test_dataset_roundtrip(tmp_path):
    ds = make_dataset(TaskSpec("regression"), "irrg", 12, 4)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.meta == {k: v for k, v in ds.meta.items()}
    for (_, a), (_, b) in zip(ds, back):
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.reg_targets, b.reg_targets)
        assert a.scene_seeds == b.scene_seeds and a.task == b.task


def test_regression_target_is_height_inside_class0():
    # "canopy height": distance to the nearest non-class-0 pixel, zero elsewhere
    s = generate_scene(5, 32, 4)
    assert np.all(s.reg_target[s.latent != 0] == 0)
    assert np.all(s.reg_target[s.latent == 0] > 0)
