from datetime import date

import numpy as np
import pytest

from etacnn.dataio import (
    DayMatrix,
    Quantizer,
    SyntheticRoute,
    generate_synthetic,
    ingest_events,
    make_windows,
)
from etacnn.model import ModelConfig
from etacnn.trainer import TrainConfig, train

SMALL = ModelConfig(first_filter=3, inner_filter=3, first_filters=8, inner_filters=8,
                    inner_depth=2, classes=64, mask_variant=1, window=4, segments=6)


@pytest.fixture(scope="session")
def small_days():
    cfg = SyntheticRoute(segments=6, trips_per_day=12, days=6, seed=11, noise_sd=3.0)
    return ingest_events(generate_synthetic(cfg))


@pytest.fixture(scope="session")
def small_checkpoint(small_days):
    q = Quantizer.from_classes(SMALL.classes)
    windows = [w for d in small_days[:4] for w in make_windows(d, SMALL.window, q)]
    return train(windows, SMALL, TrainConfig(max_epochs=3, seed=5), quantizer=q)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def constant_days(n_days=3, trips=12, segments=6, seconds=120.0):
    return [
        DayMatrix(np.full((trips, segments), seconds), route_id="C", service_date=date(2020, 1, 1 + d))
        for d in range(n_days)
    ]
