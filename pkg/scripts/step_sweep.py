#!/usr/bin/env python3
"""Train TF-CRNN at several step sizes and tabulate test accuracy.

Step sizes whose hop is not a whole number of samples at 16 kHz are
rejected by the model config. Each run is a full training job.
"""
import argparse
import csv
import sys
from pathlib import Path

from tfcrnn.cli import main as cli
from tfcrnn.model import ModelConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data-root")
    parser.add_argument("--out", default="step_sweep")
    parser.add_argument("--steps", default="25,50,100,250", help="comma-separated step sizes in ms")
    parser.add_argument("--io-mode", default="many_to_many")
    parser.add_argument("--max-epochs", type=int)
    args = parser.parse_args()
    root = ["--data-root", args.data_root] if args.data_root else []
    extra = ["--max-epochs", str(args.max_epochs)] if args.max_epochs else []
    out = Path(args.out)
    rows = []
    for step in (float(s) for s in args.steps.split(",")):
        cfg = ModelConfig(step_ms=step)
        run_dir = out / f"step_{step:g}ms"
        for argv in (["train", *root, "--out", str(run_dir), "--step-ms", str(step), "--io-mode", args.io_mode,
                      *extra],
                     ["eval", *root, "--ckpt", str(run_dir / "checkpoint.tfc"), "--out", str(run_dir / "reports")]):
            code = cli(argv)
            if code:
                sys.exit(code)
        with open(run_dir / "reports" / "test" / "summary.csv") as fh:
            accuracy = float(dict(csv.reader(fh))["accuracy"])
        rows.append((step, cfg.num_blocks, cfg.num_steps, accuracy))
        print(f"step {step:g} ms: {cfg.num_blocks} blocks, {cfg.num_steps} steps, test accuracy {accuracy:.4f}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step_ms", "num_blocks", "time_steps", "test_accuracy"])
        writer.writerows(rows)


if __name__ == "__main__":
    main()
