#!/usr/bin/env python3
"""Train and evaluate the full detector on the default synthetic benchmark.

Lays out <workdir>/data, <workdir>/run-seed<N> and <workdir>/eval-seed<N>;
the dataset is generated once and reused on re-runs. Exit code follows the
underlying commands.
"""

import argparse
import sys
from pathlib import Path

from otal.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/benchmark")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scoring", help="ranking rule for the exported detections")
    ap.add_argument("--config", help="detector config TOML forwarded to train/eval")
    ap.add_argument("--spec", help="dataset spec TOML (default benchmark otherwise)")
    ap.add_argument("--curves", action="store_true", help="also export CSV curves")
    args = ap.parse_args(argv)

    work = Path(args.workdir)
    data = work / "data"
    if not (data / "sequences.bin").exists():
        gen = ["generate", "--out", str(data)]
        if args.spec:
            gen += ["--spec", args.spec]
        if (rc := main(gen)) != 0:
            return rc

    passthrough = []
    if args.config:
        passthrough += ["--config", args.config]

    run_dir = work / f"run-seed{args.seed}"
    rc = main(["train", "--data", str(data), "--out", str(run_dir),
               "--seeds", f"{args.seed},"] + passthrough)
    if rc != 0:
        return rc

    eval_dir = work / f"eval-seed{args.seed}"
    eval_args = ["--weights", str(run_dir / "weights.bin"),
                 "--data", str(data), "--out", str(eval_dir)] + passthrough
    if args.scoring:
        eval_args += ["--scoring", args.scoring]
    rc = main(["eval"] + eval_args)
    if rc == 0 and args.curves:
        rc = main(["curves"] + eval_args)
    return rc


if __name__ == "__main__":
    sys.exit(run())
