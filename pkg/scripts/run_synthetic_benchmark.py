#!/usr/bin/env python3
"""Train a mask-CNN on a synthetic route and compare it with the baselines.

Prints the one-step and trip-start table, then the MAPE of the middle segment
predicted with and without the first half of the trip observed.

    python3 scripts/run_synthetic_benchmark.py --epochs 30 --report bench.csv
"""

import argparse
import logging
from datetime import timedelta

import numpy as np

from etacnn.dataio import Quantizer, SyntheticRoute, generate_synthetic, ingest_events, make_windows, split_train_test
from etacnn.evalbench import ARBaseline, HistoricalMeanBaseline, format_table, run_benchmark, write_benchmark_report
from etacnn.inference import rollout_predictions
from etacnn.model import ModelConfig
from etacnn.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--segments", type=int, default=20)
    ap.add_argument("--trips-per-day", type=int, default=40)
    ap.add_argument("--train-days", type=int, default=60)
    ap.add_argument("--test-days", type=int, default=30)
    ap.add_argument("--persistence", type=float, default=0.8)
    ap.add_argument("--classes", type=int, default=128)
    ap.add_argument("--filter", type=int, default=5)
    ap.add_argument("--mask", type=int, default=2)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--report", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    route = SyntheticRoute(segments=args.segments, trips_per_day=args.trips_per_day,
                           days=args.train_days + args.test_days, trip_persistence=args.persistence, seed=args.seed)
    days = ingest_events(generate_synthetic(route))
    train_days, test_days = split_train_test(days, route.start_date + timedelta(days=args.train_days))

    cfg = ModelConfig(first_filter=args.filter, inner_filter=args.filter, first_filters=args.channels,
                      inner_filters=args.channels, inner_depth=args.depth, classes=args.classes,
                      mask_variant=args.mask, window=10, segments=args.segments)
    q = Quantizer.from_classes(cfg.classes)
    windows = [w for d in train_days for w in make_windows(d, cfg.window, q)]
    cp = train(windows, cfg, TrainConfig(max_epochs=args.epochs, early_stop_patience=5, seed=args.seed), quantizer=q)

    baselines = [HistoricalMeanBaseline(train_days), ARBaseline(train_days, p=1), ARBaseline(train_days, p=2)]
    rows = run_benchmark(cp, baselines, test_days)
    print(format_table(rows))
    if args.report:
        write_benchmark_report(rows, args.report)

    col = cfg.segments // 2
    actual = np.concatenate([d.travel_times[:, col] for d in test_days])
    ok = np.isfinite(actual) & (actual > 0)
    for prefix in (0, col):
        pred = np.concatenate([rollout_predictions(cp, d, prefix=prefix, until=col + 1)[:, col] for d in test_days])
        mape = np.mean(np.abs(pred[ok] - actual[ok]) / actual[ok]) * 100
        print(f"segment {col + 1}, {prefix:2d} segments observed: MAPE {mape:.2f}% over {ok.sum()} trips")


if __name__ == "__main__":
    main()
