#!/usr/bin/env python3
"""Grid search over filter size, mask variant and class count on a synthetic route.

The full grid is {3,5,7} x {1,2,3} x {128,256,512}; ``--quick`` runs a
2x2x2 corner of it with fewer epochs.

    python3 scripts/tune_grid.py --quick --report tune.csv
"""

import argparse
import logging

from etacnn.dataio import SyntheticRoute, generate_synthetic, ingest_events
from etacnn.model import ModelConfig
from etacnn.trainer import FULL_GRID, TrainConfig, tune_grid, write_tune_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--days", type=int, default=30)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--report", default="tune_report.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    grid = dict(FULL_GRID)
    epochs = args.epochs
    if args.quick:
        grid = {"filters": (3, 5), "masks": (1, 2), "classes": (128, 256)}
        epochs = min(epochs, 3)
    days = ingest_events(generate_synthetic(SyntheticRoute(segments=20, trips_per_day=40, days=args.days,
                                                           seed=args.seed)))
    n_val = max(1, len(days) // 3)
    base = ModelConfig(first_filters=args.channels, inner_filters=args.channels, inner_depth=3, segments=20)
    result = tune_grid(grid, days[:-n_val], days[-n_val:], base,
                       TrainConfig(max_epochs=epochs, early_stop_patience=3, seed=args.seed))
    write_tune_report(result, args.report)
    for row in sorted(result.table, key=lambda r: r["val_MAPE"]):
        print(f"F={row['F']} mask={row['mask']} C={row['C']:4d}  val MAPE {row['val_MAPE']:.3f}%")
    b = result.best
    print(f"best: F={b.first_filter} mask={b.mask_variant} C={b.classes}")


if __name__ == "__main__":
    main()
