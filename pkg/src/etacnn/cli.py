"""Command-line entry point: ingest, synth, train, tune, eval, predict, serve.

Exit codes: 0 success, 2 input or configuration error, 3 runtime or numeric
error.

Every subcommand accepts ``--config FILE``, a text file of ``key = value``
lines (``#`` starts a comment). Keys are long option names with dashes or
underscores; flags given on the command line override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import socketserver
import sys
import threading
import zlib
from pathlib import Path

import numpy as np

from etacnn import checkpoint as ckpt
from etacnn import dataio, evalbench, inference, trainer
from etacnn.errors import (
    ConfigurationError,
    DomainError,
    NumericError,
    SequencingError,
    TrainingDiverged,
)
from etacnn.maskgen import load_mask
from etacnn.model import ModelConfig, build_model

log = logging.getLogger("etacnn")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def read_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


# -- subcommands ----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    events = dataio.read_events_csv(args.events)
    rejected = []
    days = dataio.ingest_events(events, rejected=rejected)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for day in days:
        dataio.write_day_matrix(day, out / dataio.day_matrix_filename(day))
    print(f"ingested {len(events)} events into {len(days)} day matrices in {out} ({len(rejected)} rejected)")
    return EXIT_OK


def cmd_synth(args) -> int:
    rush = None
    if args.no_rush:
        rush = [1.0] * args.trips_per_day
    cfg = dataio.SyntheticRoute(
        segments=args.segments,
        trips_per_day=args.trips_per_day,
        days=args.days,
        base_profile=_floats(args.base_profile) if args.base_profile else None,
        rush_multiplier=rush,
        trip_persistence=args.persistence,
        noise_sd=args.noise_sd,
        missing_rate=args.missing_rate,
        congestion_sd=args.congestion_sd,
        segment_correlation=args.segment_correlation,
        route_id=args.route,
        seed=args.seed,
    )
    events = dataio.generate_synthetic(cfg)
    dataio.write_events_csv(events, args.out)
    print(f"wrote {len(events)} stop events for {cfg.days} days to {args.out}")
    return EXIT_OK


def _model_config(args, segments) -> ModelConfig:
    return ModelConfig(
        first_filter=args.filter,
        inner_filter=args.inner_filter or args.filter,
        first_filters=args.filters,
        inner_filters=args.inner_filters,
        inner_depth=args.depth,
        classes=args.classes,
        mask_variant=args.mask,
        window=args.window,
        segments=segments,
    )


def _train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        max_epochs=args.max_epochs,
        early_stop_patience=args.patience if args.patience > 0 else None,
        validation_fraction=args.val_fraction,
        seed=args.seed,
    )


def _print_epoch(entry):
    print(f"epoch {entry['epoch']:4d}  loss {entry['train_loss']:.4f}  val MAPE {entry['val_mape']:.3f}%",
          flush=True)


def cmd_train(args) -> int:
    days = dataio.read_day_matrices(args.matrices)
    mc = _model_config(args, days[0].n_segments)
    q = dataio.Quantizer.from_classes(mc.classes, args.t_max)
    windows = [w for d in days for w in dataio.make_windows(d, mc.window, q)]
    init = None
    if args.mask_file_a or args.mask_file_b:
        if not (args.mask_file_a and args.mask_file_b):
            raise ConfigurationError("--mask-file-a and --mask-file-b go together")
        init = build_model(mc, seed=args.seed, masks=(load_mask(args.mask_file_a), load_mask(args.mask_file_b)))
    try:
        cp = trainer.train(windows, mc, _train_config(args), quantizer=q, init=init, on_epoch=_print_epoch)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            path = Path(str(args.model) + ".lastgood")
            ckpt.save_checkpoint(exc.checkpoint, path)
            print(f"error: {exc}; last good checkpoint written to {path}", file=sys.stderr)
        raise
    ckpt.save_checkpoint(cp, args.model)
    final = cp.history[-1]["val_mape"] if cp.history else float("nan")
    best = min((h["val_mape"] for h in cp.history), default=final)
    print(f"final validation MAPE {final:.3f}% (best {best:.3f}%); checkpoint written to {args.model}")
    return EXIT_OK


def cmd_tune(args) -> int:
    days = dataio.read_day_matrices(args.matrices)
    if args.val_matrices:
        train_days, val_days = days, dataio.read_day_matrices(args.val_matrices)
    else:
        if len(days) < 2:
            raise ConfigurationError("tuning needs at least two days or --val-matrices")
        n_val = max(1, round(len(days) * args.val_days_fraction))
        train_days, val_days = days[:-n_val], days[-n_val:]
    grid = {"filters": _ints(args.grid_filters), "masks": _ints(args.grid_masks),
            "classes": _ints(args.grid_classes)}
    base = _model_config(args, days[0].n_segments)
    result = trainer.tune_grid(grid, train_days, val_days, base, _train_config(args),
                               t_max=args.t_max, keep_checkpoints=bool(args.model))
    trainer.write_tune_report(result, args.report)
    for row in result.table:
        print(f"filter {row['F']}, mask {row['mask']}, classes {row['C']}: val MAPE {row['val_MAPE']:.3f}%")
    for cfg, msg in result.failures:
        print(f"failed {cfg}: {msg}", file=sys.stderr)
    if result.best is None:
        print("error: every configuration failed", file=sys.stderr)
        return EXIT_RUNTIME
    b = result.best
    print(f"best: filter {b.first_filter}, mask {b.mask_variant}, classes {b.classes}; report {args.report}")
    if args.model:
        ckpt.save_checkpoint(result.checkpoints[(b.first_filter, b.mask_variant, b.classes)], args.model)
    return EXIT_OK


def cmd_eval(args) -> int:
    cp = ckpt.load_checkpoint(args.model)
    test_days = dataio.read_day_matrices(args.test)
    baselines = []
    if args.hist_mean or args.ar:
        if not args.train:
            raise ConfigurationError("--hist-mean and --ar need --train matrices")
        train_days = dataio.read_day_matrices(args.train)
        if args.hist_mean:
            baselines.append(evalbench.HistoricalMeanBaseline(train_days))
        for p in args.ar or []:
            baselines.append(evalbench.ARBaseline(train_days, p))
    for path in args.external or []:
        baselines.append(evalbench.ExternalPredictions.from_csv(path, name=Path(path).stem))
    rows = evalbench.run_benchmark(cp, baselines, test_days, trip_start=not args.no_trip_start)
    evalbench.write_benchmark_report(rows, args.report)
    print(evalbench.format_table(rows))
    return EXIT_OK


def cmd_predict(args) -> int:
    cp = ckpt.load_checkpoint(args.model)
    context = None
    if args.context:
        context = dataio.read_day_matrix(args.context).travel_times
        if args.trips is not None:
            context = context[: args.trips]
    session = inference.start_session(cp, context, mode=args.mode, seed=args.seed)
    for k, seconds in enumerate(_floats(args.observed) if args.observed else [], start=1):
        inference.observe(session, k, seconds)
    print(json.dumps({"trip": args.trip, "eta": session.eta()}))
    return EXIT_OK


# -- serve ------------------------------------------------------------------------------


class ServeState:
    """Sessions of one server keyed by trip id, plus the day's rolling context.

    Ending a trip appends its observed row to the context of trips started
    afterwards. All requests are handled under one lock, which serializes
    observations per trip.
    """

    def __init__(self, checkpoint, context=None, mode="argmax", seed=0):
        self.checkpoint = checkpoint
        self.mode = mode
        self.seed = seed
        self.sessions = {}
        self.context = [] if context is None else [np.asarray(r, dtype=float) for r in context]
        self.lock = threading.Lock()

    def _session_seed(self, trip):
        return [self.seed, zlib.crc32(str(trip).encode("utf-8"))]

    def handle(self, line: str) -> dict:
        try:
            req = json.loads(line)
            if not isinstance(req, dict):
                raise ValueError("request must be a JSON object")
            cmd, trip = req.get("cmd"), req.get("trip")
            if cmd not in ("start", "obs", "end") or trip is None:
                raise ValueError("need 'cmd' in start|obs|end and a 'trip'")
        except ValueError as exc:
            return {"error": f"malformed request: {exc}"}
        with self.lock:
            return self._dispatch(cmd, trip, req)

    def _dispatch(self, cmd, trip, req):
        K = self.checkpoint.config.segments
        if cmd == "start":
            if trip in self.sessions:
                return {"error": f"trip {trip} already started"}
            ctx = np.vstack(self.context) if self.context else None
            s = inference.start_session(self.checkpoint, ctx, mode=self.mode, seed=self._session_seed(trip))
            self.sessions[trip] = s
            return {"trip": trip, "eta": s.eta()}
        s = self.sessions.get(trip)
        if s is None:
            return {"error": f"unknown trip {trip}"}
        if cmd == "obs":
            segment, seconds = req.get("segment"), req.get("seconds")
            if not isinstance(segment, int) or not isinstance(seconds, (int, float)) or isinstance(seconds, bool):
                return {"error": "malformed request: obs needs integer 'segment' and numeric 'seconds'"}
            try:
                inference.observe(s, segment, seconds)
            except SequencingError:
                return {"error": "sequencing"}
            except DomainError as exc:
                return {"error": f"domain: {exc}"}
            return {"trip": trip, "eta": s.eta()}
        row = np.full(K, np.nan)
        row[: len(s.observed_seconds)] = s.observed_seconds
        self.context.append(row)
        del self.sessions[trip]
        return {"trip": trip, "eta": []}

    def serve_stream(self, lines, out) -> None:
        for line in lines:
            if not line.strip():
                continue
            out.write(json.dumps(self.handle(line)) + "\n")
            out.flush()


def _tcp_server(state: ServeState, host: str, port: int):
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            for raw in self.rfile:
                line = raw.decode("utf-8", errors="replace")
                if not line.strip():
                    continue
                self.wfile.write((json.dumps(state.handle(line)) + "\n").encode("utf-8"))
                self.wfile.flush()

    socketserver.ThreadingTCPServer.allow_reuse_address = True
    return socketserver.ThreadingTCPServer((host, port), Handler)


def cmd_serve(args) -> int:
    cp = ckpt.load_checkpoint(args.model)
    context = dataio.read_day_matrix(args.context).travel_times if args.context else None
    state = ServeState(cp, context, mode=args.mode, seed=args.seed)
    if args.port is None:
        state.serve_stream(sys.stdin, sys.stdout)
        return EXIT_OK
    server = _tcp_server(state, args.host, args.port)
    log.info("serving on %s:%d", args.host, server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--filter", type=int, default=5, help="first (mask A) filter size F")
    g.add_argument("--inner-filter", type=int, default=None, help="mask B filter size L (default F)")
    g.add_argument("--filters", type=int, default=64, help="mask A channel count N")
    g.add_argument("--inner-filters", type=int, default=64, help="mask B channel count n")
    g.add_argument("--depth", type=int, default=6, help="number of mask B layers")
    g.add_argument("--classes", type=int, default=512, help="softmax classes C = t_max / level")
    g.add_argument("--mask", type=int, default=2, choices=(1, 2, 3), help="mask variant")
    g.add_argument("--window", type=int, default=10, help="trips per window H")
    g.add_argument("--t-max", type=float, default=1024.0, help="largest representable travel time (s)")
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--max-epochs", type=int, default=200)
    g.add_argument("--patience", type=int, default=10, help="early-stopping patience, 0 disables")
    g.add_argument("--val-fraction", type=float, default=0.1)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="etacnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("ingest", parents=[common], help="stop events CSV -> day-matrix CSVs")
    p.add_argument("events")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)
    subs["ingest"] = p

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic route")
    p.add_argument("--out", required=True, help="events CSV to write")
    p.add_argument("--segments", type=int, default=20)
    p.add_argument("--trips-per-day", type=int, default=40)
    p.add_argument("--days", type=int, default=90)
    p.add_argument("--base-profile", default=None, help="comma-separated seconds per segment")
    p.add_argument("--no-rush", action="store_true", help="flat rush multiplier")
    p.add_argument("--persistence", type=float, default=0.8, help="trip persistence rho in [0, 1)")
    p.add_argument("--noise-sd", type=float, default=5.0)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--congestion-sd", type=float, default=0.25)
    p.add_argument("--segment-correlation", type=float, default=0.7)
    p.add_argument("--route", default="R1")
    p.set_defaults(func=cmd_synth)
    subs["synth"] = p

    p = sub.add_parser("train", parents=[common], help="train a mask-CNN checkpoint")
    p.add_argument("matrices", help="day-matrix CSV or directory")
    p.add_argument("--model", required=True, help="checkpoint path to write")
    p.add_argument("--mask-file-a", default=None)
    p.add_argument("--mask-file-b", default=None)
    _add_model_args(p)
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("tune", parents=[common], help="grid search over filter, mask and classes")
    p.add_argument("matrices")
    p.add_argument("--val-matrices", default=None)
    p.add_argument("--val-days-fraction", type=float, default=1 / 3)
    p.add_argument("--grid-filters", default="3,5,7")
    p.add_argument("--grid-masks", default="1,2,3")
    p.add_argument("--grid-classes", default="128,256,512")
    p.add_argument("--report", default="tune_report.csv")
    p.add_argument("--model", default=None, help="also save the winning checkpoint here")
    _add_model_args(p)
    p.set_defaults(func=cmd_tune)
    subs["tune"] = p

    p = sub.add_parser("eval", parents=[common], help="benchmark against baselines")
    p.add_argument("model")
    p.add_argument("test", help="test day-matrix CSV or directory")
    p.add_argument("--train", default=None, help="training matrices for the baselines")
    p.add_argument("--hist-mean", action="store_true")
    p.add_argument("--ar", type=int, action="append", help="add an AR(p) baseline; repeatable")
    p.add_argument("--external", action="append", help="external prediction CSV; repeatable")
    p.add_argument("--no-trip-start", action="store_true")
    p.add_argument("--report", default="benchmark.csv")
    p.set_defaults(func=cmd_eval)
    subs["eval"] = p

    p = sub.add_parser("predict", parents=[common], help="ETAs for one trip")
    p.add_argument("model")
    p.add_argument("--context", default=None, help="day-matrix CSV of completed trips")
    p.add_argument("--trips", type=int, default=None, help="use only the first N context rows")
    p.add_argument("--observed", default="", help="comma-separated observed seconds, segment 1 first")
    p.add_argument("--trip", default="trip")
    p.add_argument("--mode", choices=("argmax", "sample"), default="argmax")
    p.set_defaults(func=cmd_predict)
    subs["predict"] = p

    p = sub.add_parser("serve", parents=[common], help="JSON-lines ETA server")
    p.add_argument("model")
    p.add_argument("--port", type=int, default=None, help="TCP port; standard streams when omitted")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--context", default=None, help="day-matrix CSV of completed trips")
    p.add_argument("--mode", choices=("argmax", "sample"), default="argmax")
    p.set_defaults(func=cmd_serve)
    subs["serve"] = p
    return parser, subs


def parse_args(argv=None):
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre, _ = parser.parse_known_args(argv)
    if getattr(pre, "config", None):
        values = read_config_file(pre.config)
        sp = subs[pre.command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        for action in sp._actions:
            if action.dest in values and isinstance(action, argparse._StoreTrueAction):
                values[action.dest] = values[action.dest].lower() in ("1", "true", "yes", "on")
        sp.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None:
        args.seed = secrets.randbits(32)
        log.warning("no --seed given; using generated seed %d", args.seed)
    try:
        return args.func(args)
    except (TrainingDiverged, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, SequencingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
