"""End-to-end acceptance criteria A1-A8.

Each test prints one ``A<n> PASS|FAIL`` line to the terminal, even under
output capture, so a plain ``pytest`` run shows the criterion summary.
"""

import contextlib
import io
import math
import time
from datetime import date

import numpy as np
import pytest

from etacnn import cli, nncore, trainer
from etacnn.checkpoint import from_bytes, to_bytes
from etacnn.dataio import (
    Quantizer,
    SyntheticRoute,
    dequantize,
    generate_synthetic,
    ingest_events,
    make_windows,
    quantize,
    split_train_test,
)
from etacnn.evalbench import HistoricalMeanBaseline, compute_metrics, run_benchmark
from etacnn.inference import rollout_predictions
from etacnn.model import ModelConfig, build_model
from etacnn.trainer import TrainConfig, train, tune_grid


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(name, what):
        start = time.perf_counter()
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            with capsys.disabled():
                print(f"\n{name} FAIL  {what}: {exc!s:.200} ({time.perf_counter() - start:.1f} s)")
            raise
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        with capsys.disabled():
            print(f"\n{name} PASS  {what}: {extra} ({time.perf_counter() - start:.1f} s)")

    return run


def _randomize_biases(model, rng):
    for layer in model.layers:
        layer.bias[:] = rng.normal(0, 0.3, layer.bias.shape)


def test_a1_causality(criterion):
    cfg = ModelConfig(first_filter=5, inner_filter=5, classes=128, mask_variant=2, window=10, segments=20)
    H, K, C = cfg.window, cfg.segments, cfg.classes
    with criterion("A1", "causality under random inputs and weights") as d:
        start = time.perf_counter()
        checks = 0
        for trial in range(100):
            rng = np.random.default_rng(trial)
            model = build_model(cfg, seed=trial)
            _randomize_biases(model, rng)
            x = rng.integers(0, C, H * K)
            positions = rng.choice(H * K, size=4, replace=False)
            batch = [x]
            for p in positions:
                y = x.copy()
                y[p:] = (y[p:] + rng.integers(1, C, H * K - p)) % C  # every later cell changes
                batch.append(y)
            logits = model.forward(np.stack(batch).reshape(-1, H, K)).reshape(C, len(batch), -1)
            for i, p in enumerate(positions, start=1):
                assert np.array_equal(logits[:, 0, : p + 1], logits[:, i, : p + 1]), (trial, p)
                checks += 1
        d["checks"] = checks
        assert time.perf_counter() - start < 60


def test_a2_gradient_check(criterion):
    cfg = ModelConfig(first_filter=3, inner_filter=3, first_filters=8, inner_filters=8, inner_depth=3,
                      classes=16, mask_variant=2, window=6, segments=8)
    with criterion("A2", "analytic vs central-difference gradients") as d:
        rng = np.random.default_rng(0)
        model = build_model(cfg, seed=0)
        _randomize_biases(model, rng)  # keeps pre-activations off the ReLU kink
        x = rng.integers(0, cfg.classes, (2, cfg.window, cfg.segments))
        valid = rng.random(x.shape) > 0.1
        params = model.parameters()
        n = sum(p.size for p in params.values())
        err = nncore.grad_check(lambda p: model.loss_and_grad(x, x, valid), params, step=1e-5, n_samples=None)
        d["parameters"] = n
        d["max_rel_err"] = f"{err:.2e}"
        assert n >= 500
        assert err <= 1e-4


@pytest.mark.parametrize("level", [2.0, 4.0, 8.0])
def test_a3_quantizer_round_trip(criterion, level):
    with criterion("A3", f"quantizer round trip, level {level:g}") as d:
        q = Quantizer(level=level)
        t = np.random.default_rng(int(level)).uniform(0.0, 1024.0, 10_000)
        err = np.abs(dequantize(quantize(t, q), q) - t)
        d["classes"] = q.classes
        d["max_err"] = float(err.max())
        assert q.classes == 1024 / level
        assert (err <= level / 2).all()


def test_a4_overfit_one_window(criterion):
    cfg = ModelConfig(first_filter=3, inner_filter=3, first_filters=32, inner_filters=32, inner_depth=3,
                      classes=128, mask_variant=1, window=10, segments=20)
    with criterion("A4", "overfit 10 copies of one window") as d:
        day = ingest_events(generate_synthetic(SyntheticRoute(segments=20, trips_per_day=10, days=1, seed=1)))[0]
        q = Quantizer.from_classes(cfg.classes)
        w = make_windows(day, cfg.window, q)[0]
        X = np.repeat(w.classes[None], 10, axis=0)
        V = np.repeat(w.validity[None], 10, axis=0)
        model = build_model(cfg, seed=0)
        state = nncore.OptimizerState(learning_rate=0.01)
        loss = acc = math.nan
        for it in range(1, 501):
            loss, grads = model.loss_and_grad(X, X, V)
            nncore.rmsprop_step(model.parameters(), grads, state)
            if it % 25 == 0:
                loss, _ = model.loss_and_grad(X, X, V)
                pred = model.forward(X[:1])[:, 0].argmax(axis=0)
                acc = float((pred == X[0])[V[0]].mean())
                if loss <= 0.1 and acc >= 0.99:
                    break
        d["iterations"] = it
        d["nats_per_cell"] = f"{loss:.4f}"
        d["accuracy"] = f"{acc:.3f}"
        assert loss <= 0.1
        assert acc >= 0.99


def test_a5_metric_oracle(criterion):
    with criterion("A5", "metric formulas") as d:
        m = compute_metrics([110.0, 190.0], [100.0, 200.0])
        assert m.mae == pytest.approx(10.0) and m.mape == pytest.approx(7.5) and m.rmse == pytest.approx(10.0)
        actual = np.full((2, 2), 100.0)
        two = compute_metrics(actual + [[10.0, -10.0], [20.0, -20.0]], actual)
        d["per_trip_rmse"] = two.rmse
        d["pooled_rmse"] = f"{two.rmse_pooled:.4f}"
        assert two.rmse == pytest.approx(15.0)
        assert two.rmse_pooled == pytest.approx(math.sqrt(250.0))


@pytest.mark.slow
def test_a6_synthetic_benchmark(criterion):
    with criterion("A6", "synthetic benchmark") as d:
        route = SyntheticRoute(segments=20, trips_per_day=40, days=90, trip_persistence=0.8, seed=7)
        days = ingest_events(generate_synthetic(route))
        train_days, test_days = split_train_test(days, date(2019, 3, 2))
        assert (len(train_days), len(test_days)) == (60, 30)
        cfg = ModelConfig(first_filter=5, inner_filter=5, first_filters=32, inner_filters=32, inner_depth=3,
                          classes=128, mask_variant=2, window=10, segments=20)
        q = Quantizer.from_classes(cfg.classes)
        windows = [w for day in train_days for w in make_windows(day, cfg.window, q)]
        cp = train(windows, cfg, TrainConfig(max_epochs=30, early_stop_patience=5, seed=0), quantizer=q)

        rows = run_benchmark(cp, [HistoricalMeanBaseline(train_days)], test_days, trip_start=False)
        mape = {r.predictor: r.report.mape for r in rows}
        d["epochs"] = len(cp.history)
        d["cnn_MAPE"] = f"{mape['mask-CNN']:.2f}"
        d["hist_MAPE"] = f"{mape['historical-mean']:.2f}"
        assert mape["mask-CNN"] <= mape["historical-mean"]

        col = cfg.segments // 2  # segment K/2 + 1, 0-based
        half, start, actual = [], [], []
        for day in test_days:
            half.append(rollout_predictions(cp, day, prefix=col, until=col + 1)[:, col])
            start.append(rollout_predictions(cp, day, prefix=0, until=col + 1)[:, col])
            actual.append(day.travel_times[:, col])
        half, start, actual = map(np.concatenate, (half, start, actual))
        ok = np.isfinite(actual) & (actual != 0)
        mape_half = float(np.mean(np.abs(half[ok] - actual[ok]) / actual[ok]) * 100)
        mape_start = float(np.mean(np.abs(start[ok] - actual[ok]) / actual[ok]) * 100)
        d["predictions"] = int(ok.sum())
        d["half_prefix_MAPE"] = f"{mape_half:.2f}"
        d["trip_start_MAPE"] = f"{mape_start:.2f}"
        assert ok.sum() >= 500
        assert mape_half <= mape_start


SMALL = ModelConfig(first_filter=3, inner_filter=3, first_filters=8, inner_filters=8, inner_depth=2, classes=64,
                    mask_variant=2, window=4, segments=6)


@pytest.fixture(scope="module")
def small_route():
    return ingest_events(generate_synthetic(SyntheticRoute(segments=6, trips_per_day=12, days=6, seed=21)))


def test_a7_determinism_and_persistence(criterion, small_route):
    with criterion("A7", "determinism, persistence, serve replay") as d:
        q = Quantizer.from_classes(SMALL.classes)
        windows = [w for day in small_route[:4] for w in make_windows(day, SMALL.window, q)]
        tc = TrainConfig(max_epochs=3, batch_size=8, seed=17)
        a, b = train(windows, SMALL, tc, quantizer=q), train(windows, SMALL, tc, quantizer=q)
        blob = to_bytes(a)
        assert blob == to_bytes(b)
        d["checkpoint_bytes"] = len(blob)

        back = from_bytes(blob)
        x = np.random.default_rng(0).integers(0, SMALL.classes, (5, SMALL.window, SMALL.segments))
        assert np.array_equal(a.model.forward(x), back.model.forward(x))

        log = ['{"cmd":"start","trip":"A"}', '{"cmd":"obs","trip":"A","segment":1,"seconds":140}',
               '{"cmd":"start","trip":"B"}', '{"cmd":"obs","trip":"A","segment":3,"seconds":1}',
               '{"cmd":"obs","trip":"A","segment":2,"seconds":88}', '{"cmd":"end","trip":"A"}',
               '{"cmd":"start","trip":"C"}', '{"cmd":"obs","trip":"B","segment":1,"seconds":99}']
        replies = []
        for cp in (a, from_bytes(blob)):
            for mode in ("argmax", "sample"):
                out = io.StringIO()
                cli.ServeState(cp, mode=mode, seed=3).serve_stream(log, out)
                replies.append((mode, out.getvalue()))
        assert replies[0] == replies[2] and replies[1] == replies[3]
        d["replayed_lines"] = len(log)


@pytest.mark.parametrize("tied", [False, True])
def test_a8_tuner_contract(criterion, small_route, monkeypatch, tied):
    grid = {"filters": [3, 5], "masks": [1, 2], "classes": [128, 256]}
    tc = TrainConfig(max_epochs=2, batch_size=8, seed=4)
    label = "tuner on a 2x2x2 grid" + (", all tied" if tied else "")
    with criterion("A8", label) as d:
        if tied:
            monkeypatch.setattr(trainer, "day_mape", lambda cp, days: 20.0)
        runs = [tune_grid(grid, small_route[:4], small_route[4:], base_config=SMALL, train_config=tc)
                for _ in range(2)]
        assert runs[0].table == runs[1].table
        assert runs[0].best == runs[1].best
        table = runs[0].table
        assert len(table) == 8 and not runs[0].failures
        best = min(table, key=lambda r: (r["val_MAPE"], r["C"], r["F"], r["mask"]))
        got = runs[0].best
        assert (got.first_filter, got.mask_variant, got.classes) == (best["F"], best["mask"], best["C"])
        assert got.classes == min(r["C"] for r in table if r["val_MAPE"] == best["val_MAPE"])
        if tied:
            assert (got.first_filter, got.mask_variant, got.classes) == (3, 1, 128)
        d["best"] = f"F={got.first_filter} mask={got.mask_variant} C={got.classes}"
        d["val_MAPE"] = f"{best['val_MAPE']:.3f}"
