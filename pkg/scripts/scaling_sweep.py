"""Ensemble-size sweep: finetune with k = 1..N for several seeds and plot the per-k median.

Builds a registry of specialists from several upstream tasks and modalities,
then adapts to a combined MS+SAR downstream segmentation task.
"""
import argparse
import time
from dataclasses import dataclass
from pathlib import Path

from eosfm.bands import IRRG, RGB, S1, S2, S2S1, default_rules
from eosfm.downstream import DownstreamConfig
from eosfm.pruning import scaling_sweep, sweep_medians
from eosfm.synthetic import TaskSpec, make_dataset
from eosfm.training import TrainConfig, train_specialist
from eosfm.zoo import EncoderConfig, SpecialistRegistry, build_encoder

SPECS = {"ms": S2, "sar": S1, "rgb": RGB, "irrg": IRRG}


@dataclass
class SweepConfig:
    # (modality, task kind, num_classes, upstream seed) per specialist
    specialists: tuple = (
        ("ms", "segmentation", 4, 100), ("sar", "segmentation", 4, 101), ("rgb", "segmentation", 4, 102),
        ("irrg", "segmentation", 4, 103), ("ms", "classification", 6, 104), ("rgb", "classification", 6, 105),
    )
    upstream_n: int = 300
    downstream_n: int = 200
    epochs: int = 10
    seeds: tuple = (0, 1, 2)


def build_registry(cfg: SweepConfig) -> SpecialistRegistry:
    reg = SpecialistRegistry()
    for i, (mod, kind, k, seed) in enumerate(cfg.specialists):
        task = TaskSpec(kind, k)
        ds = make_dataset(task, mod, cfg.upstream_n, seed, ms_twins=1, sar_twins=1)
        enc, hist = train_specialist(build_encoder(EncoderConfig(), SPECS[mod], i, f"{mod}-{kind[:3]}-{i}"), ds, task,
                                     TrainConfig(max_epochs=12, patience=4, seed=i))
        print(f"{enc.encoder_id}: best val {hist.best_val:.3f}")
        reg.register_specialist(enc.freeze())
    return reg


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/sweep"))
    args = ap.parse_args()
    cfg = SweepConfig()
    t0 = time.perf_counter()
    reg = build_registry(cfg)
    task = TaskSpec("segmentation", 4)
    ds = make_dataset(task, "ms+sar", cfg.downstream_n, 7, ms_twins=1, sar_twins=1)
    rows = scaling_sweep(reg, default_rules(), ds, task, list(range(1, len(reg) + 1)), list(cfg.seeds),
                         DownstreamConfig(epochs=cfg.epochs), out_dir=args.out)
    for k, med in sweep_medians(rows).items():
        print(f"k={k}: median best val mIoU {med:.3f}")
    print(f"total {time.perf_counter() - t0:.0f}s; wrote {args.out / 'sweep.csv'} and sweep.svg")


if __name__ == "__main__":
    main()
