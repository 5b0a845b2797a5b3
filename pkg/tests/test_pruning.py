import warnings

import pytest
import torch

from eosfm.bands import RGB, S1, S2, default_rules
from eosfm.downstream import DownstreamConfig, finetune
from eosfm.ensemble import build_ensemble, calibrate, load_ensemble, save_ensemble
from eosfm.pruning import prune, scaling_sweep, sweep_medians, write_sweep
from eosfm.synthetic import TaskSpec, make_dataset
from eosfm.zoo import SpecialistRegistry, param_count
from tests.conftest import SEG, toy_encoders


def trained_like(n, seed=0, k=None):
    """An ensemble with calibrated stats and distinct random selection weights."""
    m = build_ensemble(toy_encoders(n, specs=(S2, RGB)), default_rules(), S2, SEG, seed=seed, k=k).train()
    g = torch.Generator().manual_seed(seed)
    calibrate(m, torch.randn(8, 13, 32, 32, generator=g))
    with torch.no_grad():
        m.selection.w.copy_(torch.rand(n, generator=g) * 2)
    return m.eval()


def masked_vs_pruned(m, k, inputs):
    m.selection.k = k
    p = prune(m, k)
    return max((m(x) - p(x)).abs().max().item() for x in inputs), p


@pytest.mark.parametrize("n", [3, 5])
def test_prune_matches_mask(n):
    m = trained_like(n)
    inputs = [torch.randn(2, 13, 32, 32) for _ in range(3)]
    full = param_count(m)
    for k in range(1, n + 1):
        dev, p = masked_vs_pruned(m, k, inputs)
        assert dev <= 1e-5
        if k < n:
            assert param_count(p) < full
            assert len(p.encoders) == k


def test_prune_identity_at_n():
    m = trained_like(3)
    x = torch.randn(2, 13, 32, 32)
    assert torch.equal(prune(m, 3)(x), m(x))


def test_prune_param_count_shape_walk():
    m = trained_like(5)
    p = prune(m, 2)
    kept = sum(param_count(e) for e in p.encoders.values())
    fusion = sum(c.weight.numel() + c.bias.numel() for c in p.fusion.levels)
    assert param_count(p) == kept + fusion + 2 + param_count(p.decoder)
    widths = [sum(p.encoders[b.encoder_id].config.dims[j] for b in p.branches) for j in range(4)]
    assert [c.in_channels for c in p.fusion.levels] == widths


def test_prune_keeps_topk_and_scale_invariance():
    m = trained_like(5, seed=3)
    order = sorted(range(5), key=lambda i: (-m.selection.w[i].item(), i))[:2]
    p = prune(m, 2)
    assert list(p.encoders) == [m.selection.encoder_ids[i] for i in sorted(order)]
    with torch.no_grad():
        m.selection.w.mul_(7.5)
    assert list(prune(m, 2).encoders) == list(p.encoders)


def test_prune_idempotent():
    m = trained_like(5)
    p = prune(m, 2)
    pp = prune(p, 2)
    x = torch.randn(2, 13, 32, 32)
    assert list(pp.encoders) == list(p.encoders) and torch.equal(pp(x), p(x))


def test_prune_range_and_untrained_flag():
    m = build_ensemble(toy_encoders(3, specs=(S2, RGB)), default_rules(), S2, SEG)
    with pytest.raises(ValueError):
        prune(m, 0)
    with pytest.raises(ValueError):
        prune(m, 4)
    with pytest.warns(UserWarning):
        p = prune(m, 2)
    assert p.meta["pruned_untrained"] and list(p.encoders) == ["enc0", "enc1"]


def test_pruned_checkpoint_roundtrip_and_refinetune(tmp_path):
    task = TaskSpec("segmentation", 3)
    ds = make_dataset(task, "ms", 30, 0, num_classes=3)
    m = build_ensemble(toy_encoders(4, specs=(S2, RGB, S1)), default_rules(), S2, task)
    adapted, _ = finetune(m, ds, task, DownstreamConfig(epochs=2, batch_size=8))
    p = prune(adapted, 2)
    save_ensemble(p, tmp_path / "small")
    back = load_ensemble(tmp_path / "small")
    x = ds.val.images
    assert torch.equal(back(x), p.eval()(x))
    again, hist = finetune(back, ds, task, DownstreamConfig(epochs=1, batch_size=8))
    assert len(hist) == 1 and len(again.encoders) == 2


def test_scaling_sweep_rows_and_outputs(tmp_path):
    task = TaskSpec("segmentation", 3)
    ds = make_dataset(task, "ms", 20, 0, num_classes=3)
    reg = SpecialistRegistry()
    for e in toy_encoders(3, specs=(S2, RGB)):
        reg.register_specialist(e)
    rows = scaling_sweep(reg, default_rules(), ds, task, [1, 2, 3], [0, 1], DownstreamConfig(epochs=1, batch_size=8),
                         out_dir=tmp_path)
    assert [(k, s) for k, s, _ in rows] == [(k, s) for k in (1, 2, 3) for s in (0, 1)]
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 7
    assert (tmp_path / "sweep.svg").exists()
    with pytest.raises(ValueError):
        scaling_sweep(reg, default_rules(), ds, task, [4], [0], DownstreamConfig(epochs=1))


def test_sweep_medians():
    rows = [(1, 0, 0.1), (1, 1, 0.3), (1, 2, 0.2), (2, 0, 0.5)]
    assert sweep_medians(rows) == {1: 0.2, 2: 0.5}
