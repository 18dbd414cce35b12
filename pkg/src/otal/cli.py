"""Command-line front end: generate, train, eval, ablate, curves.

Exit codes: 0 success, 2 bad input, 3 malformed artifact file, 4 training
divergence. Every command is fully determined by its config and seed.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .errors import DivergenceError, FormatError
from .inference import (
    SCORING_FUNCTIONS,
    run_inference,
    select_tau,
    training_uncertainties,
    write_detections,
)
from .metrics import (
    T0_GRID,
    build_eval_sets,
    cdr_fpr_curve,
    evaluate,
    roc_curve,
    write_curve_csv,
    write_report_json,
)
from .model import (
    DetectorConfig,
    load_weights,
    save_weights,
    train,
    write_training_log,
)
from .synthdata import SplitSpec, generate, load_dataset, read_spec_toml, save_dataset

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

ABLATION_VARIANTS = (
    ("full", {}),
    ("wo-MIB", {"use_mib": False}),
    ("wo-ACT", {"use_actionness": False}),
    ("wo-IoUC", {"use_iouc": False}),
    ("vanilla-EDL", {"mode": "vanilla_edl"}),
    ("softmax", {"mode": "softmax_ce"}),
)

_DETECTOR_KEYS = {f.name for f in dataclasses.fields(DetectorConfig)}
_EXTRA_KEYS = {"scoring", "tau_quantile", "seeds", "t0"}


def read_config_toml(path) -> dict:
    """Flat key-value experiment config; detector fields plus a few extras."""
    try:
        raw = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"unparseable config file {path}: {exc}") from exc
    unknown = set(raw) - _DETECTOR_KEYS - _EXTRA_KEYS
    if unknown:
        raise FormatError(f"unknown config keys: {sorted(unknown)}")
    return raw


def parse_seeds(text: str):
    """A bare count N means seeds 0..N-1; otherwise a comma-separated list."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty seed list")
    values = [int(p) for p in parts]
    if len(values) == 1 and "," not in text:
        n = values[0]
        if n <= 0:
            raise ValueError("seed count must be positive")
        return list(range(n))
    return values


def _detector_config(args, spec: SplitSpec, **overrides) -> DetectorConfig:
    settings = {"k_known": spec.k_known, "feat_dim": spec.d}
    if getattr(args, "config", None):
        file_conf = read_config_toml(args.config)
        settings.update({k: v for k, v in file_conf.items()
                         if k in _DETECTOR_KEYS})
    for flag, field in (("epsilon", "epsilon"), ("bins", "num_bins"),
                        ("gamma", "gamma"), ("mu", "mu"),
                        ("tiou_train", "tiou_train")):
        value = getattr(args, flag, None)
        if value is not None:
            settings[field] = value
    settings.update(overrides)
    return DetectorConfig(**settings)


def _experiment_extras(args) -> dict:
    extras = {"scoring": "two_level", "tau_quantile": 0.95, "t0": None}
    if getattr(args, "config", None):
        file_conf = read_config_toml(args.config)
        extras.update({k: v for k, v in file_conf.items() if k in _EXTRA_KEYS})
    if getattr(args, "scoring", None) is not None:
        extras["scoring"] = args.scoring
    if getattr(args, "tau_quantile", None) is not None:
        extras["tau_quantile"] = args.tau_quantile
    if getattr(args, "t0", None) is not None:
        extras["t0"] = args.t0
    return extras


def _run_eval(params, config, train_seqs, test_seqs, scoring, tau_quantile):
    calibration = training_uncertainties(params, train_seqs, config)
    tau = select_tau(calibration, tau_quantile)
    detections = run_inference(params, test_seqs, config, tau, scoring)
    return tau, detections


def cmd_generate(args) -> int:
    spec = read_spec_toml(args.spec) if args.spec else SplitSpec()
    train_seqs, test_seqs = generate(spec)
    out = Path(args.out)
    save_dataset(out, spec, train_seqs, test_seqs)
    print(f"wrote {len(train_seqs)} train / {len(test_seqs)} test sequences to {out}")
    return 0


def cmd_train(args) -> int:
    spec, train_seqs, _ = load_dataset(args.data)
    overrides = {}
    if args.seeds:
        overrides["seed"] = parse_seeds(args.seeds)[0]
    config = _detector_config(args, spec, **overrides)
    params, log = train(config, train_seqs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(out / "weights.bin", params)
    write_training_log(out / "training_log.csv", log)
    print(f"trained {config.mode} for {config.epochs} epochs; "
          f"final loss {log[-1]['total']:.4f}; weights in {out}")
    return 0


def cmd_eval(args) -> int:
    spec, train_seqs, test_seqs = load_dataset(args.data)
    config = _detector_config(args, spec)
    params = load_weights(args.weights)
    extras = _experiment_extras(args)
    tau, detections = _run_eval(params, config, train_seqs, test_seqs,
                                extras["scoring"], extras["tau_quantile"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.jsonl", detections)
    report = evaluate(detections, test_seqs, spec.k_known)
    write_report_json(out / "report.json", report)
    headline = f"{extras['t0'] if extras['t0'] is not None else 0.3:.1f}"
    entry = report.get(headline, {})
    print(f"tau={tau:.4f} scoring={extras['scoring']} t0={headline} "
          + " ".join(f"{k}={entry.get(k)}" for k in ("far95", "auroc", "aupr", "osdr")))
    return 0


def cmd_curves(args) -> int:
    spec, train_seqs, test_seqs = load_dataset(args.data)
    config = _detector_config(args, spec)
    params = load_weights(args.weights)
    extras = _experiment_extras(args)
    tau, detections = _run_eval(params, config, train_seqs, test_seqs,
                                extras["scoring"], extras["tau_quantile"])
    gt = {s.seq_id: s.annotations for s in test_seqs}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = [extras["t0"]] if extras["t0"] is not None else list(T0_GRID)
    written = []
    for t0 in grid:
        f_known, f_unknown = build_eval_sets(detections, gt, spec.k_known, t0)
        if not f_known or not f_unknown:
            print(f"t0={t0:.1f}: no matched instances on one side, skipped")
            continue
        instances = f_known + f_unknown
        scores = [i.score for i in instances]
        labels = [int(i.is_unknown) for i in instances]
        tag = f"{t0:.1f}".replace(".", "")
        write_curve_csv(out / f"cdr_fpr_t{tag}.csv",
                        cdr_fpr_curve(f_known, f_unknown))
        write_curve_csv(out / f"roc_t{tag}.csv", roc_curve(scores, labels))
        written.append(t0)
    print(f"curve bundle for t0 in {written} written to {out}")
    return 0


def cmd_ablate(args) -> int:
    spec, train_seqs, test_seqs = load_dataset(args.data)
    extras = _experiment_extras(args)
    if args.seeds:
        seeds = parse_seeds(args.seeds)
    elif extras.get("seeds") is not None:
        raw = extras["seeds"]
        seeds = list(range(raw)) if isinstance(raw, int) else list(raw)
    else:
        seeds = [0]
    headline = f"{extras['t0'] if extras['t0'] is not None else 0.3:.1f}"
    metric_keys = ("far95", "auroc", "aupr", "osdr")
    per_run = []  # (variant, seed, dict)
    for name, overrides in ABLATION_VARIANTS:
        for seed in seeds:
            config = _detector_config(args, spec, seed=seed, **overrides)
            params, _ = train(config, train_seqs)
            _, detections = _run_eval(params, config, train_seqs, test_seqs,
                                      extras["scoring"], extras["tau_quantile"])
            report = evaluate(detections, test_seqs, spec.k_known)
            entry = report[headline]
            per_run.append((name, seed, {k: entry[k] for k in metric_keys}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_runs.csv", "w") as fh:
        fh.write("variant,seed," + ",".join(metric_keys) + "\n")
        for name, seed, vals in per_run:
            cells = ",".join("" if vals[k] is None else repr(vals[k])
                             for k in metric_keys)
            fh.write(f"{name},{seed},{cells}\n")
    header = f"{'variant':<12}" + "".join(f"{k:>16}" for k in metric_keys)
    lines = [header]
    summary_rows = []
    for name, _ in ABLATION_VARIANTS:
        vals = {k: [] for k in metric_keys}
        for v_name, _, run in per_run:
            if v_name == name:
                for k in metric_keys:
                    if run[k] is not None:
                        vals[k].append(run[k])
        cells, row = [], {"variant": name}
        for k in metric_keys:
            if vals[k]:
                arr = np.asarray(vals[k])
                mean = float(arr.mean())
                std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
                cells.append(f"{100 * mean:7.2f} ± {100 * std:5.2f}")
                row[f"{k}_mean"], row[f"{k}_std"] = mean, std
            else:
                cells.append(f"{'n/a':>15}")
                row[f"{k}_mean"] = row[f"{k}_std"] = None
        lines.append(f"{name:<12}" + "".join(f"{c:>16}" for c in cells))
        summary_rows.append(row)
    table = "\n".join(lines)
    print(table)
    (out / "ablation_table.txt").write_text(table + "\n")
    with open(out / "ablation.csv", "w") as fh:
        cols = ["variant"] + [f"{k}_{s}" for k in metric_keys for s in ("mean", "std")]
        fh.write(",".join(cols) + "\n")
        for row in summary_rows:
            fh.write(",".join("" if row[c] is None else
                              (row[c] if c == "variant" else repr(row[c]))
                              for c in cols) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otal",
        description="open-set temporal action detection on synthetic benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *names):
        if "spec" in names:
            p.add_argument("--spec", help="dataset spec TOML")
        if "config" in names:
            p.add_argument("--config", help="experiment config TOML")
        if "weights" in names:
            p.add_argument("--weights", required=True, help="weights file")
        if "data" in names:
            p.add_argument("--data", required=True, help="dataset directory")
        if "out" in names:
            p.add_argument("--out", required=True, help="output directory")
        if "seeds" in names:
            p.add_argument("--seeds", help="count N (seeds 0..N-1) or comma list")
        if "eval" in names:
            p.add_argument("--scoring", choices=SCORING_FUNCTIONS)
            p.add_argument("--tau-quantile", dest="tau_quantile", type=float)
            p.add_argument("--t0", type=float)
        if "knobs" in names:
            p.add_argument("--epsilon", type=float)
            p.add_argument("--bins", type=int)
            p.add_argument("--gamma", type=float)
            p.add_argument("--mu", type=float)
            p.add_argument("--tiou-train", dest="tiou_train", type=float)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    add_common(p, "spec", "out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    add_common(p, "config", "data", "out", "seeds", "knobs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained weights")
    add_common(p, "config", "weights", "data", "out", "eval", "knobs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variant sweep with per-metric summary")
    add_common(p, "config", "data", "out", "seeds", "eval", "knobs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("curves", help="export metric curves as CSV")
    add_common(p, "config", "weights", "data", "out", "eval", "knobs")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
