#!/usr/bin/env python3
"""Run the component ablation sweep on the default synthetic benchmark.

Trains every variant (full, wo-MIB, wo-ACT, wo-IoUC, vanilla-EDL, softmax)
across the requested seeds and writes the summary table plus per-run rows
under <workdir>. Re-uses an existing dataset directory when present.
"""

import argparse
import sys
from pathlib import Path

from otal.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/ablation")
    ap.add_argument("--seeds", default="3", help="count N or comma list, as in the CLI")
    ap.add_argument("--config", help="detector config TOML applied to every variant")
    ap.add_argument("--spec", help="dataset spec TOML (default benchmark otherwise)")
    args = ap.parse_args(argv)

    work = Path(args.workdir)
    data = work / "data"
    if not (data / "sequences.bin").exists():
        gen = ["generate", "--out", str(data)]
        if args.spec:
            gen += ["--spec", args.spec]
        if (rc := main(gen)) != 0:
            return rc

    ablate = ["ablate", "--data", str(data), "--out", str(work),
              "--seeds", args.seeds]
    if args.config:
        ablate += ["--config", args.config]
    return main(ablate)


if __name__ == "__main__":
    sys.exit(run())
