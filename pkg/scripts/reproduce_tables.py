"""Recompute Avg DTB for the transcribed benchmark tables and the multi-run aggregates.

Prints recomputed vs printed values and writes the ranked reports under --out.
"""
import argparse
import csv
from importlib import resources
from pathlib import Path

from eosfm.metrics import aggregate_runs, dtb, load_result_table, load_runs, report

DATA = resources.files("eosfm") / "data"
TOLERANCE = 0.05


def printed(name):
    with open(DATA / f"{name}_printed_dtb.csv", newline="") as fh:
        return {r["model"]: float(r["avg_dtb"]) for r in csv.DictReader(fh)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/tables"))
    args = ap.parse_args()

    off = 0
    for name in ("table2", "table3", "suppl_table2"):
        table = load_result_table(DATA / f"{name}.csv")
        report(table, args.out / name)
        ref = printed(name)
        print(f"\n{name}: {len(table.rows)} models x {len(table.datasets)} datasets")
        for model, value in sorted(dtb(table), key=lambda r: r[1]):
            delta = value - ref[model]
            flag = "" if abs(delta) <= TOLERANCE else "  <-- outside rounding tolerance"
            off += bool(flag)
            print(f"  {model:<28} {value:7.3f}  printed {ref[model]:6.2f}  delta {delta:+.3f}{flag}")

    print("\nrepeated runs (mean ± sample std)")
    with open(DATA / "suppl_table1_printed.csv", newline="") as fh:
        ref = {r["dataset"]: (r["mean"], r["std"]) for r in csv.DictReader(fh)}
    for name, values in load_runs(DATA / "suppl_table1_runs.csv").items():
        st = aggregate_runs(values)
        ok = (f"{st.mean:.2f}", f"{st.std:.2f}") == ref[name]
        off += not ok
        print(f"  {name:<20} {st}  printed {ref[name][0]} ± {ref[name][1]}  {'ok' if ok else 'MISMATCH'}")
    print(f"\n{off} value(s) outside tolerance")


if __name__ == "__main__":
    main()
