"""``eosfm`` command line: one subcommand per pipeline stage.

Exit status: 0 on success, 2 on usage errors (unknown flag, missing input
path, bad config key), 1 on runtime errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import torch

SUBCOMMANDS = (
    "gen-data", "train-specialist", "build-ensemble", "finetune", "prune",
    "scaling-sweep", "variance-report", "bench-dtb", "aggregate-runs",
)


def existing_path(text):
    p = Path(text)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"path does not exist: {text}")
    return p


def int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def float_triple(text):
    vals = [float(t) for t in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    return tuple(vals)


def parse_ks(text, n):
    """``1..N``, ``2..5`` or ``1,3,5``; the literal ``N`` is the registry size."""
    text = text.replace("N", str(n))
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return int_list(text)


def build_parser():
    parser = argparse.ArgumentParser(prog="eosfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    subs = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--config", type=existing_path, help="JSON file of flag defaults; flags override it")
        p.add_argument("--json-summary", type=Path, help="write a JSON run manifest here")
        subs[name] = p
        return p

    p = add("gen-data", "render a synthetic dataset to disk")
    p.add_argument("--task", required=True, choices=["classification", "segmentation", "regression"])
    p.add_argument("--modality", required=True, choices=["rgb", "ms", "sar", "irrg", "ms+sar"])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--ms-twins", type=int, default=0)
    p.add_argument("--sar-twins", type=int, default=0)
    p.add_argument("--split", type=float_triple, default=(0.8, 0.1, 0.1))
    p.add_argument("--name")
    p.add_argument("--out", type=Path, required=True)

    p = add("train-specialist", "train one specialist encoder and write its checkpoint")
    p.add_argument("--encoder-config", type=existing_path, help="JSON EncoderConfig (default: toy config)")
    p.add_argument("--dataset", type=existing_path, required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--encoder-id")
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--tile-size", type=int)
    p.add_argument("--register-into", type=Path, help="also add the encoder to this registry directory")
    p.add_argument("--out", type=Path, required=True)

    p = add("build-ensemble", "assemble frozen specialists into an ensemble checkpoint")
    p.add_argument("--registry", type=existing_path, required=True)
    p.add_argument("--dataset", type=existing_path, required=True, help="defines the input bands and the task")
    p.add_argument("--rules", type=existing_path, help="rule file (default: shipped rules)")
    p.add_argument("--norm", choices=["none", "layer", "batch"], default="batch")
    p.add_argument("--k", type=int)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--target-dims", type=int_list)
    p.add_argument("--out", type=Path, required=True)

    p = add("finetune", "adapt a frozen ensemble to a downstream dataset")
    p.add_argument("--ensemble", type=existing_path, required=True)
    p.add_argument("--dataset", type=existing_path, required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--k", type=int)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--selection-lr", type=float, default=1e-2)
    p.add_argument("--model-name", default="EoS")
    p.add_argument("--out", type=Path, required=True)

    p = add("prune", "keep only the top-k encoders of an adapted ensemble")
    p.add_argument("--model", type=existing_path, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--refinetune", action="store_true", help="finetune the pruned model again on --dataset")
    p.add_argument("--dataset", type=existing_path)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", type=Path, required=True)

    p = add("scaling-sweep", "finetune with every k in --ks for every seed")
    p.add_argument("--registry", type=existing_path, required=True)
    p.add_argument("--dataset", type=existing_path, required=True)
    p.add_argument("--ks", default="1..N")
    p.add_argument("--seeds", type=int_list, default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--norm", choices=["none", "layer", "batch"], default="batch")
    p.add_argument("--out", type=Path, required=True)

    p = add("variance-report", "per-encoder variance of raw stage-4 features")
    p.add_argument("--ensemble", type=existing_path, required=True)
    p.add_argument("--dataset", type=existing_path, required=True)
    p.add_argument("--n-batches", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)

    p = add("bench-dtb", "rank a long-format result table by Avg DTB")
    p.add_argument("--in", dest="inp", type=existing_path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("aggregate-runs", "mean and sample std of repeated runs per dataset")
    p.add_argument("--in", dest="inp", type=existing_path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser, subs


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def apply_config(parser, subs, argv):
    """Load ``--config`` before parsing so its keys count as defaults (flags still win)."""
    command = next((t for t in argv if t in subs), None)
    cfg_path = _config_path(argv)
    if command is None or cfg_path is None:
        return parser.parse_args(argv)
    sp = subs[command]
    try:
        cfg = json.loads(existing_path(cfg_path).read_text())
    except argparse.ArgumentTypeError as e:
        sp.error(f"argument --config: {e}")
    except json.JSONDecodeError as e:
        sp.error(f"argument --config: not valid JSON ({e})")
    if not isinstance(cfg, dict):
        sp.error("argument --config: expected a JSON object")
    # keys may be written as the flag name (``in``, ``max-epochs``) or the dest
    by_key = {}
    for a in sp._actions:
        by_key[a.dest] = a
        for opt in a.option_strings:
            by_key[opt.lstrip("-")] = a
            by_key[opt.lstrip("-").replace("-", "_")] = a
    defaults = {}
    for key, value in cfg.items():
        a = by_key.get(key)
        if a is None or a.dest in ("help", "config"):
            sp.error(f"argument --config: unknown key {key!r}")
        if a.type is not None and isinstance(value, str):
            try:
                value = a.type(value)
            except (argparse.ArgumentTypeError, ValueError) as e:
                sp.error(f"argument --config: key {key!r}: {e}")
        defaults[a.dest] = value
        a.required = False
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _task_for(dataset, name):
    if name != dataset.train.task.kind:
        raise ValueError(f"--task {name} does not match the dataset task {dataset.train.task.kind}")
    return dataset.train.task


# --- subcommands -------------------------------------------------------------


def cmd_gen_data(a):
    from .synthetic import TaskSpec, make_dataset, save_dataset

    k = 0 if a.task == "regression" else a.num_classes
    splits = make_dataset(TaskSpec(a.task, k), a.modality, a.n, a.seed, a.split, size=a.size,
                          num_classes=a.num_classes, ms_twins=a.ms_twins, sar_twins=a.sar_twins, name=a.name)
    save_dataset(splits, a.out)
    return [a.out / "dataset.manifest"]


def cmd_train_specialist(a):
    from .synthetic import load_dataset
    from .training import TrainConfig, load_encoder_config, train_specialist
    from .zoo import EncoderConfig, SpecialistRegistry, build_encoder, save_checkpoint

    ds = load_dataset(a.dataset)
    task = _task_for(ds, a.task)
    cfg = load_encoder_config(a.encoder_config) if a.encoder_config else EncoderConfig()
    eid = a.encoder_id or f"{ds.meta.get('name', 'specialist')}-{ds.train.modality}"
    enc = build_encoder(cfg, ds.train.spec, a.seed, eid)
    tcfg = TrainConfig(a.max_epochs, a.batch_size, a.lr, a.patience, a.seed, a.tile_size)
    enc, hist = train_specialist(enc, ds, task, tcfg)
    enc.freeze()
    save_checkpoint(enc, a.out)
    hist.save_csv(a.out / "history.csv")
    outputs = [a.out / "manifest", a.out / "weights.bin", a.out / "history.csv"]
    if a.register_into:
        reg = SpecialistRegistry.load(a.register_into) if (a.register_into / "registry.manifest").exists() \
            else SpecialistRegistry()
        reg.register_specialist(enc)
        reg.save(a.register_into)
        outputs.append(a.register_into / "registry.manifest")
    return outputs


def cmd_build_ensemble(a):
    from .bands import RuleRegistry, default_rules
    from .ensemble import build_ensemble, save_ensemble
    from .synthetic import load_dataset
    from .zoo import SpecialistRegistry

    reg = SpecialistRegistry.load(a.registry)
    ds = load_dataset(a.dataset)
    rules = RuleRegistry.load(a.rules) if a.rules else default_rules()
    model = build_ensemble(reg, rules, ds.train.spec, ds.train.task, seed=a.seed, norm_mode=a.norm,
                           k=a.k, warmup_epochs=a.warmup, target_dims=a.target_dims)
    save_ensemble(model, a.out)
    return [a.out / "ensemble.manifest"]


def cmd_finetune(a):
    from .downstream import DownstreamConfig, evaluate, finetune, write_result_row
    from .ensemble import load_ensemble, save_ensemble
    from .synthetic import load_dataset

    model = load_ensemble(a.ensemble)
    ds = load_dataset(a.dataset)
    task = _task_for(ds, a.task)
    cfg = DownstreamConfig(a.epochs, a.batch, a.label_fraction, a.seed, a.k, a.warmup, a.lr, a.selection_lr)
    adapted, hist = finetune(model, ds, task, cfg)
    a.out.mkdir(parents=True, exist_ok=True)
    save_ensemble(adapted, a.out / "model")
    hist.save_csv(a.out / "history.csv")
    result = a.out / "result.csv"
    if result.exists():
        result.unlink()
    write_result_row(result, a.model_name, ds.meta.get("name", a.dataset.name), task,
                     evaluate(adapted, ds.test, task), a.seed)
    return [a.out / "model" / "ensemble.manifest", a.out / "history.csv", result]


def cmd_prune(a):
    from .downstream import DownstreamConfig, finetune
    from .ensemble import load_ensemble, save_ensemble
    from .pruning import prune
    from .zoo import param_count

    model = load_ensemble(a.model)
    pruned = prune(model, a.k)
    if a.refinetune:
        from .synthetic import load_dataset

        if a.dataset is None:
            raise ValueError("--refinetune needs --dataset")
        pruned, _ = finetune(pruned, load_dataset(a.dataset), pruned.task,
                             DownstreamConfig(epochs=a.epochs, batch_size=a.batch, seed=a.seed))
    save_ensemble(pruned, a.out)
    print(f"params: {param_count(model)} -> {param_count(pruned)}; kept {list(pruned.encoders)}")
    return [a.out / "ensemble.manifest"]


def cmd_scaling_sweep(a):
    from .bands import default_rules
    from .downstream import DownstreamConfig
    from .pruning import scaling_sweep
    from .synthetic import load_dataset
    from .zoo import SpecialistRegistry

    reg = SpecialistRegistry.load(a.registry)
    ds = load_dataset(a.dataset)
    ks = parse_ks(a.ks, len(reg))
    cfg = DownstreamConfig(epochs=a.epochs, batch_size=a.batch, warmup_epochs=a.warmup)
    scaling_sweep(reg, default_rules(), ds, ds.train.task, ks, a.seeds, cfg, out_dir=a.out, norm_mode=a.norm)
    return [a.out / "sweep.csv", a.out / "sweep.svg"]


def cmd_variance_report(a):
    from .ensemble import feature_variance_report, load_ensemble
    from .synthetic import load_dataset

    model = load_ensemble(a.ensemble)
    ds = load_dataset(a.dataset)
    feature_variance_report(model, ds.train, a.n_batches, out_dir=a.out)
    return [a.out / "variance.csv", a.out / "variance.svg"]


def cmd_bench_dtb(a):
    from .metrics import dtb, load_result_table, report

    table = load_result_table(a.inp)
    paths = report(table, a.out)
    for model, v in sorted(dtb(table), key=lambda r: r[1]):
        print(f"{v:7.2f}  {model}")
    return [paths["csv"], paths["svg"]]


def cmd_aggregate_runs(a):
    import csv

    from .metrics import aggregate_runs, load_runs

    a.out.mkdir(parents=True, exist_ok=True)
    path = a.out / "aggregate.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "n", "mean", "std"])
        for name, values in load_runs(a.inp).items():
            st = aggregate_runs(values)
            w.writerow([name, len(values), f"{st.mean:.2f}", f"{st.std:.2f}"])
            print(f"{name}: {st}")
    return [path]


COMMANDS = {name: globals()["cmd_" + name.replace("-", "_")] for name in SUBCOMMANDS}


def main(argv=None) -> int:
    parser, subs = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = apply_config(parser, subs, argv)
    except SystemExit as e:
        return int(e.code or 0)
    torch.manual_seed(args.seed)
    start = time.perf_counter()
    try:
        outputs = COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - report and exit non-zero
        print(f"eosfm {args.command}: error: {e}", file=sys.stderr)
        return 1
    if args.json_summary:
        inputs = {k: str(v) for k, v in vars(args).items()
                  if k in ("dataset", "registry", "ensemble", "model", "inp", "encoder_config", "config") and v}
        summary = {
            "command": args.command,
            "argv": argv,
            "seed": args.seed,
            "inputs": inputs,
            "outputs": [str(p) for p in outputs],
            "wall_time_s": round(time.perf_counter() - start, 3),
        }
        args.json_summary.parent.mkdir(parents=True, exist_ok=True)
        args.json_summary.write_text(json.dumps(summary, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
