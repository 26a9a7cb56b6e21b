#!/usr/bin/env python3
"""Full Speech Commands run: TF-CRNN and its CRNN ablation, then reports.

Multi-hour on a CPU. Expects a Speech Commands v0.02 tree (35 keywords) at
--data-root or $TFCRNN_DATA_ROOT. Prints the TF-CRNN test accuracy against
the expected band [0.94, 0.965] and the block-1 excitation/energy Pearson r
for the showcase keywords (r < 0 expected for at least 3 of 4).
"""
import argparse
import csv
import sys
from pathlib import Path

from tfcrnn.cli import main as cli

BAND = (0.94, 0.965)


def run(*argv):
    code = cli([str(a) for a in argv])
    if code:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data-root")
    parser.add_argument("--out", default="long_run")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out)
    root = ["--data-root", args.data_root] if args.data_root else []

    run("prepare", *root)
    for name, feedback in (("tfcrnn", "on"), ("crnn", "off")):
        run("train", *root, "--out", out / name, "--feedback", feedback, "--seed", args.seed,
            "--step-ms", 50, "--io-mode", "many_to_many")
        run("eval", *root, "--ckpt", out / name / "checkpoint.tfc", "--out", out / name / "reports")
    run("compare", *root, "--ckpt-a", out / "tfcrnn" / "checkpoint.tfc", "--ckpt-b", out / "crnn" / "checkpoint.tfc",
        "--out", out / "compare")
    run("excite", *root, "--ckpt", out / "tfcrnn" / "checkpoint.tfc", "--out", out / "excitations")

    with open(out / "tfcrnn" / "reports" / "test" / "summary.csv") as fh:
        accuracy = float(dict(csv.reader(fh))["accuracy"])
    inside = BAND[0] <= accuracy <= BAND[1]
    print(f"TF-CRNN test accuracy {accuracy:.4f}; expected band {BAND}: {'inside' if inside else 'OUTSIDE'}")
    with open(out / "excitations" / "excitation_energy_pearson.csv") as fh:
        rows = list(csv.DictReader(fh))
    negative = sum(float(r["pearson_block_1"]) < 0 for r in rows)
    for r in rows:
        print(f"  {r['label']:>10s}  block-1 Pearson r {float(r['pearson_block_1']):+.3f}")
    print(f"negative correlation for {negative} of {len(rows)} classes (expected >= 3 of 4)")


if __name__ == "__main__":
    main()
