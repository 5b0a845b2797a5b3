import numpy as np
import pytest
import torch

from eosfm import metrics
from eosfm.bands import RGB, S1
from eosfm.heads import attach_head, task_loss
from eosfm.synthetic import DatasetSplits, SceneDataset, TaskSpec, make_dataset
from eosfm.training import (
    SpecialistModel, TrainConfig, TrainHistory, fit, tile, tile_anchors, tile_dataset, train_specialist, untile,
)
from eosfm.zoo import EncoderConfig, build_encoder
from tests.conftest import TINY

DIMS = (8, 16, 32, 64)


def test_head_shapes():
    pyr = [torch.randn(2, d, 64 // s, 64 // s) for d, s in zip(DIMS, (4, 8, 16, 32))]
    assert attach_head(TaskSpec("classification", 10), DIMS)(pyr).shape == (2, 10)
    assert attach_head(TaskSpec("segmentation", 5), DIMS)(pyr, (64, 64)).shape == (2, 5, 64, 64)
    assert attach_head(TaskSpec("regression"), DIMS)(pyr, (64, 64)).shape == (2, 1, 64, 64)
    with pytest.raises(TypeError):
        attach_head("segmentation", DIMS)


@pytest.mark.parametrize("kw", [dict(max_epochs=0), dict(patience=0), dict(patience=40), dict(learning_rate=0.0),
                                dict(tile_size=50)])
def test_train_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_tile_examples():
    img = torch.arange(1024 * 1024, dtype=torch.float32).reshape(1, 1024, 1024)
    tiles, anchors = tile(img, 512)
    assert len(tiles) == 4 and anchors == [(0, 0), (0, 512), (512, 0), (512, 512)]
    tiles, anchors = tile(img[:, :512, :512], 512)
    assert len(tiles) == 1 and torch.equal(tiles[0], img[:, :512, :512])
    assert tile_anchors(600, 512) == [0, 88]
    tiles, anchors = tile(torch.zeros(3, 600, 512), 512)
    assert anchors == [(0, 0), (88, 0)]
    # rows 88..511 are covered twice: 424 rows of overlap
    assert 512 - 88 == 424


def test_tile_errors():
    with pytest.raises(ValueError):
        tile(torch.zeros(1, 64, 64), 96)
    with pytest.raises(ValueError):
        tile(torch.zeros(1, 64, 64), 48)


def test_untile_is_exact():
    img = torch.randn(2, 160, 96)
    tiles, anchors = tile(img, 64)
    assert torch.equal(untile(tiles, anchors, img.shape), img)
    arr = img.numpy()
    tiles, anchors = tile(arr, 32)
    np.testing.assert_array_equal(untile(tiles, anchors, arr.shape), arr)


def test_tile_dataset_counts():
    ds = make_dataset(TaskSpec("segmentation", 3), "rgb", 10, 0, size=64).train
    tiled = tile_dataset(ds, 32)
    assert len(tiled) == 4 * len(ds)
    assert torch.equal(tiled.images[1], ds.images[0, :, :32, 32:])


def test_specialist_determinism_and_provenance():
    task = TaskSpec("segmentation", 3)
    ds = make_dataset(task, "sar", 40, 1, num_classes=3)
    enc = build_encoder(TINY, S1, 0, "sar")
    cfg = TrainConfig(max_epochs=3, batch_size=8, patience=3, seed=4)
    a, ha = train_specialist(enc, ds, task, cfg)
    b, hb = train_specialist(enc, ds, task, cfg)
    assert ha == hb and a.weight_hash() == b.weight_hash()
    assert enc.weight_hash() != a.weight_hash()  # the input encoder is not modified in place
    assert a.provenance.dataset_name == ds.train.name and a.provenance.n_train_samples == 32
    assert a.provenance.final_val_metric == ha.best_val == max(ha.val_metric)
    assert len(ha) <= 3


def test_best_val_matches_independent_evaluation():
    task = TaskSpec("segmentation", 3)
    ds = make_dataset(task, "rgb", 40, 2, num_classes=3)
    enc = build_encoder(TINY, RGB, 0)
    model = SpecialistModel(enc, attach_head(task, TINY.dims))
    hist = fit(model, model.parameters(), model, ds.train, ds.val, task, epochs=4, batch_size=8, lr=2e-3, seed=0)
    assert hist.val_metric[hist.best_epoch - 1] == hist.best_val == max(hist.val_metric)
    with torch.no_grad():
        pred = model(ds.val.images).argmax(1)
    assert metrics.miou(pred, ds.val.seg_masks, 3) == pytest.approx(hist.best_val, abs=1e-12)


def test_errors():
    task = TaskSpec("segmentation", 3)
    ds = make_dataset(task, "rgb", 20, 0, num_classes=3)
    with pytest.raises(ValueError):
        train_specialist(build_encoder(TINY, S1, 0), ds, task, TrainConfig(1, 4, patience=1))
    with pytest.raises(ValueError):
        train_specialist(build_encoder(TINY, RGB, 0).freeze(), ds, task, TrainConfig(1, 4, patience=1))
    empty = ds.train.subset([])
    with pytest.raises(ValueError):
        train_specialist(build_encoder(TINY, RGB, 0), DatasetSplits(empty, ds.val, ds.test), task,
                         TrainConfig(1, 4, patience=1))


def test_early_stop_on_constant_labels():
    task = TaskSpec("segmentation", 2)
    ds = make_dataset(task, "rgb", 30, 0, num_classes=2)
    for _, split in ds:
        split.seg_masks.zero_()
    _, hist = train_specialist(build_encoder(TINY, RGB, 0), ds, task, TrainConfig(10, 8, patience=1))
    assert len(hist) <= 2


def test_first_epoch_lowers_loss():
    task = TaskSpec("segmentation", 4)
    drops = []
    for seed in range(3):
        ds = make_dataset(task, "rgb", 60, seed)
        enc = build_encoder(TINY, RGB, seed)
        torch.manual_seed(seed)
        head = attach_head(task, TINY.dims)
        with torch.no_grad():
            before = float(task_loss(head(enc(ds.train.images), (32, 32)), ds.train.targets, task))
        _, hist = train_specialist(enc, ds, task, TrainConfig(1, 8, patience=1, seed=seed))
        drops.append(before - hist.train_loss[0])
    assert np.median(drops) > 0


def test_history_csv(tmp_path):
    h = TrainHistory([1.5, 0.25], [0.5, 0.75], 2, 0.75)
    h.save_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "epoch,train_loss,val_metric\n1,1.5,0.5\n2,0.25,0.75\n"


def test_rgb_classification_reaches_090():
    # 10-class RGB scene classification, 2000 samples, at most 30 epochs
    task = TaskSpec("classification", 10)
    ds = make_dataset(task, "rgb", 2000, 0)
    _, hist = train_specialist(build_encoder(EncoderConfig(), RGB, 0), ds, task,
                               TrainConfig(max_epochs=30, batch_size=32, patience=5))
    assert hist.best_val >= 0.90
