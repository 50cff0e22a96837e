"""Command-line entry points.

    triforecaster train     --config cfg.json --data DIR --out DIR
                            [--model triforecaster|mtl|stl]
                            [--ablate none|regionmixer|contextmoe|timemoe]
                            [--seed N]
    triforecaster evaluate  --run DIR [--split val|test]
    triforecaster forecast  --run DIR --region ID --at TIMESTAMP
    triforecaster synth     --out DIR --regions T --days D --seed N [...]
    triforecaster gradcheck [--tiny]

A training run populates its output directory with the effective
config.json, an inputs.json recording the data directory and file digests,
history.csv, checkpoints/ (best-epoch manifest + parameter blob),
metrics.json, and forecasts/ with denormalized test-span predictions per
region. Every command is deterministic given its inputs and seed.

The RUN_THREADS environment variable caps internal parallelism; the
current implementation is single-threaded, so only the default of 1 is
meaningful.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .config import ABLATIONS, MODELS, TrainConfig
from .data import load_dataset, sample_at, write_synth_dataset
from .exceptions import ContractError, DimensionError, IngestionError
from .models import build_checkpoint_model, load_checkpoint, save_checkpoint
from .training import evaluate, predict, run_training, write_history_csv

USER_ERRORS = (ContractError, DimensionError, IngestionError, OSError,
               json.JSONDecodeError, KeyError, ValueError)


def _read_threads_cap():
    raw = os.environ.get("RUN_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ContractError(f"RUN_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ContractError(f"RUN_THREADS must be >= 1, got {cap}")
    return cap


def _file_digest(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args):
    _read_threads_cap()
    with open(args.config, encoding="utf-8") as fh:
        config = TrainConfig.from_json(fh.read())
    if args.model is not None:
        config.model = args.model
    if args.ablate is not None:
        config.ablate = args.ablate
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    if not os.path.isdir(args.data):
        raise IngestionError(f"data directory does not exist: {args.data}")
    bundle = load_dataset(args.data, stride=config.stride)
    log = None if args.quiet else print
    model, result = run_training(config, bundle, log=log)

    out = args.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(config.to_json())
        fh.write("\n")
    files = {
        entry["file"]: _file_digest(os.path.join(args.data, entry["file"]))
        for entry in bundle.manifest["regions"]
    }
    _write_json(os.path.join(out, "inputs.json"), {
        "data_dir": os.path.abspath(args.data),
        "stride": config.stride,
        "manifest": bundle.manifest,
        "files": files,
    })
    write_history_csv(os.path.join(out, "history.csv"), result.history)
    save_checkpoint(os.path.join(out, "checkpoints"), "best", model,
                    config.hash(), config.seed)
    _write_json(os.path.join(out, "metrics.json"), {
        "best_epoch": result.best_epoch,
        **{split: result.metrics[split] for split in result.metrics},
    })
    _write_forecasts(out, model, bundle, config)
    for split, metrics in result.metrics.items():
        print(f"{split}: mse {metrics['mean']['mse']:.6f} "
              f"mae {metrics['mean']['mae']:.6f}")
    print(f"run written to {out}")
    return 0


def _write_forecasts(out, model, bundle, config):
    """Denormalized non-overlapping predictions over the preferred split."""
    split = next((s for s in ("test", "val", "train")
                  if all(bundle.split(s)[r] for r in bundle.region_ids)), None)
    if split is None:
        return
    forecasts_dir = os.path.join(out, "forecasts")
    os.makedirs(forecasts_dir, exist_ok=True)
    import csv

    hop = max(1, bundle.horizon // max(1, config.stride))
    for index, rid in enumerate(bundle.region_ids):
        samples = bundle.split(split)[rid][::hop]
        preds = predict(model, samples, index,
                        pool_mode=config.eval_pool_mode, seed=config.seed)
        load = bundle.stats.denormalize_load(rid, preds)
        actual = bundle.stats.denormalize_load(
            rid, np.stack([s.target[:, 0] for s in samples])
        )
        series = bundle.series[rid]
        path = os.path.join(forecasts_dir, f"{rid}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "load_forecast", "load_actual"])
            for si, sample in enumerate(samples):
                base = sample.anchor_index + bundle.lookback
                for h in range(bundle.horizon):
                    stamp = np.datetime_as_string(series.timestamps[base + h], unit="s")
                    writer.writerow([stamp, repr(float(load[si, h])),
                                     repr(float(actual[si, h]))])


def _load_run(run_dir):
    config_path = os.path.join(run_dir, "config.json")
    inputs_path = os.path.join(run_dir, "inputs.json")
    if not os.path.isfile(config_path):
        raise ContractError(f"not a run directory (missing config.json): {run_dir}")
    with open(config_path, encoding="utf-8") as fh:
        config = TrainConfig.from_json(fh.read())
    with open(inputs_path, encoding="utf-8") as fh:
        inputs = json.load(fh)
    bundle = load_dataset(inputs["data_dir"], stride=inputs.get("stride", 1))
    model = build_checkpoint_model(config, bundle)
    load_checkpoint(os.path.join(run_dir, "checkpoints"), "best", model)
    return config, bundle, model


def cmd_evaluate(args):
    _read_threads_cap()
    config, bundle, model = _load_run(args.run)
    metrics = evaluate(model, bundle, args.split,
                       pool_mode=config.eval_pool_mode, seed=config.seed)
    for rid in bundle.region_ids:
        entry = metrics["regions"][rid]
        print(f"{args.split} {rid}: mse {entry['mse']:.6f} mae {entry['mae']:.6f}")
    print(f"{args.split} mean: mse {metrics['mean']['mse']:.6f} "
          f"mae {metrics['mean']['mae']:.6f}")
    metrics_path = os.path.join(args.run, "metrics.json")
    existing = {}
    if os.path.isfile(metrics_path):
        with open(metrics_path, encoding="utf-8") as fh:
            existing = json.load(fh)
    existing[args.split] = metrics
    _write_json(metrics_path, existing)
    return 0


def cmd_forecast(args):
    _read_threads_cap()
    config, bundle, model = _load_run(args.run)
    if args.region not in bundle.region_ids:
        raise ContractError(
            f"unknown region {args.region!r}; dataset has {bundle.region_ids}"
        )
    index = bundle.region_index(args.region)
    sample = sample_at(bundle.series[args.region], bundle.stats,
                       bundle.manifest, index, args.at)
    preds = predict(model, [sample], index,
                    pool_mode=config.eval_pool_mode, seed=config.seed)
    load = bundle.stats.denormalize_load(args.region, preds)[0]
    series = bundle.series[args.region]
    base = sample.anchor_index + bundle.lookback
    forecasts_dir = os.path.join(args.run, "forecasts")
    os.makedirs(forecasts_dir, exist_ok=True)
    stamp_tag = args.at.replace(":", "").replace("-", "")
    path = os.path.join(forecasts_dir, f"{args.region}_{stamp_tag}.csv")
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "load_forecast"])
        for h in range(bundle.horizon):
            stamp = np.datetime_as_string(series.timestamps[base + h], unit="s")
            writer.writerow([stamp, repr(float(load[h]))])
    print(path)
    return 0


def cmd_synth(args):
    _read_threads_cap()
    write_synth_dataset(
        args.out, args.regions, args.days, interval_minutes=args.interval_minutes,
        seed=args.seed, lookback=args.lookback, horizon=args.horizon,
        val_span_days=args.val_span_days, test_span_days=args.test_span_days,
        noise_sigma=args.noise_sigma,
    )
    print(os.path.join(args.out, "manifest.json"))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    ok = run_suite(out=print)
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="triforecaster",
        description="Multi-region short-term load forecasting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write a run directory")
    p_train.add_argument("--config", required=True, help="TrainConfig JSON file")
    p_train.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p_train.add_argument("--out", required=True, help="run directory to create")
    p_train.add_argument("--model", choices=MODELS, default=None)
    p_train.add_argument("--ablate", choices=ABLATIONS, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--quiet", action="store_true", help="suppress per-epoch logging")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="recompute metrics for a finished run")
    p_eval.add_argument("--run", required=True)
    p_eval.add_argument("--split", choices=("val", "test"), default="test")
    p_eval.set_defaults(func=cmd_evaluate)

    p_fc = sub.add_parser("forecast", help="emit one denormalized forecast window")
    p_fc.add_argument("--run", required=True)
    p_fc.add_argument("--region", required=True)
    p_fc.add_argument("--at", required=True,
                      help="ISO-8601 timestamp where the horizon starts")
    p_fc.set_defaults(func=cmd_forecast)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--regions", type=int, required=True)
    p_synth.add_argument("--days", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--interval-minutes", type=int, default=15)
    p_synth.add_argument("--lookback", type=int, default=96)
    p_synth.add_argument("--horizon", type=int, default=48)
    p_synth.add_argument("--val-span-days", type=int, default=30)
    p_synth.add_argument("--test-span-days", type=int, default=30)
    p_synth.add_argument("--noise-sigma", type=float, default=0.5)
    p_synth.set_defaults(func=cmd_synth)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_gc.add_argument("--tiny", action="store_true",
                      help="run the tiny-configuration suite (the default)")
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
