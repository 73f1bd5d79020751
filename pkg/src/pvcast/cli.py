"""Command-line entry point: ``pvcast {synth,train,eval,search,seasons}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.

Config files are flat JSON objects whose keys are model fields
(``d_i``, ``l_i``, ``h``, ...) or training fields (``batch_size``, ``lr``,
``max_epochs``, ...) plus an optional ``seed``. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DataError,
    SEASONS,
    build_datasets,
    generate_synthetic,
    ingest_csv,
    invert_norm,
    resolve_season,
    write_csv,
)
from .evaluation import EvalPair, ReportRow, compute_metrics, evaluate_model, render_report
from .models import DISPLAY_NAMES, ModelConfig, build_model
from .search import SearchError, SearchSpace, run_search, write_trial_log
from .tensor import ShapeError
from .training import (
    Checkpoint,
    CheckpointError,
    ConfigMismatchError,
    NumericError,
    TrainConfig,
    atomic_write,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TRAINED_KINDS = ("proposed", "itransformer", "lstm")

log = logging.getLogger("pvcast")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config and seeds ---------------------------------------------------------------
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    seed: int
    digest: str | None = None


def parse_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(obj) - _MODEL_KEYS - _TRAIN_KEYS - {"seed"})
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        model = ModelConfig(**{k: v for k, v in obj.items() if k in _MODEL_KEYS})
        tcfg = TrainConfig(**{k: v for k, v in obj.items() if k in _TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return RunConfig(model, tcfg, int(obj.get("seed", 0)))


def load_config(path, seed: int | None = None) -> RunConfig:
    if path is None:
        cfg = parse_config({})
    else:
        blob = Path(path).read_bytes()
        try:
            obj = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc})") from None
        cfg = parse_config(obj)
        cfg.digest = hashlib.sha256(blob).hexdigest()
    if seed is not None:
        cfg.seed = seed
    return cfg


def derive_seed(master: int, *tags: int) -> int:
    """Independent per-stage seed from the master seed and integer tags."""
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


def _stage_seeds(master: int, season: str, kind: str) -> tuple[int, int]:
    tags = (SEASONS.index(season), TRAINED_KINDS.index(kind))
    return derive_seed(master, 0, *tags), derive_seed(master, 1, *tags)


# -- manifest ---------------------------------------------------------------------
def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    def __init__(self, command: str, seed: int, config_digest: str | None):
        self.data = {
            "tool": "pvcast",
            "version": __version__,
            "command": command,
            "seed": seed,
            "config_digest": config_digest,
            "inputs": {},
            "artifacts": {},
            "timings_s": {},
        }
        self._t = {}

    def input(self, path) -> None:
        self.data["inputs"][str(path)] = file_digest(path)

    def artifact(self, path) -> None:
        self.data["artifacts"][str(path)] = file_digest(path)

    def start(self, stage: str) -> None:
        self._t[stage] = time.perf_counter()

    def stop(self, stage: str) -> None:
        self.data["timings_s"][stage] = round(time.perf_counter() - self._t.pop(stage), 3)

    def write(self, path) -> None:
        atomic_write(path, (json.dumps(self.data, indent=2, sort_keys=True) + "\n").encode())


def _text(path, text: str) -> Path:
    atomic_write(path, text.encode())
    return Path(path)


# -- shared steps -------------------------------------------------------------------
def _datasets(path, seasons=SEASONS, lookback: int = 24, horizon: int = 1):
    from .data import WindowSpec

    return build_datasets(ingest_csv(path), WindowSpec(lookback, horizon), seasons)


def _fit(kind: str, season: str, ds, run: RunConfig, on_epoch=None):
    init_seed, shuffle_seed = _stage_seeds(run.seed, season, kind)
    model = build_model(kind, run.model, seed=init_seed)
    tcfg = dataclasses.replace(run.train, seed=shuffle_seed)
    model, hist, opt = train(model, ds.train_windows, ds.val_windows, tcfg, on_epoch=on_epoch)
    ckpt = Checkpoint.from_model(model, stats=ds.stats, history=hist, optimizer=opt, seed=run.seed, season=season)
    return model, hist, ckpt


def _epoch_logger(label: str):
    def cb(epoch, h):
        log.info("%s epoch %d train %.5f val %.5f lr %.2e", label, epoch, h.train_loss[-1], h.val_loss[-1], h.lr[-1])

    return cb


def _persistence_pair(ds) -> EvalPair:
    w = ds.test_windows
    pred = invert_norm(w.X[:, 0, -1], ds.stats, 0)
    return EvalPair(w.y_raw, pred)


# -- commands -----------------------------------------------------------------------
def cmd_synth(args) -> int:
    if args.years < 1:
        raise UsageError("--years must be at least 1")
    series = generate_synthetic(args.years, seed=args.seed)
    write_csv(series, args.out)
    print(f"wrote {len(series)} hourly rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config, args.seed)
    season = resolve_season(args.season)
    man = Manifest("train", run.seed, run.digest)
    man.input(args.data)
    man.start("data")
    ds = _datasets(args.data, (season,), run.model.lookback, run.model.horizon)[season]
    man.stop("data")
    man.start("train")
    model, hist, ckpt = _fit(args.model, season, ds, run, _epoch_logger(f"{season}/{args.model}"))
    man.stop("train")
    out = Path(args.out)
    save_checkpoint(out, ckpt)
    hist_path = out.with_suffix(".history.csv")
    hist.write_csv(hist_path)
    from .plotting import plot_losses

    fig = plot_losses({DISPLAY_NAMES[args.model]: hist}, out.with_suffix(".loss.png"), f"{season} {DISPLAY_NAMES[args.model]}")
    for p in (out, hist_path, fig):
        man.artifact(p)
    man.write(out.with_suffix(".manifest.json"))
    print(f"{season} {args.model}: best val loss {hist.best_val:.6f} at epoch {hist.best_epoch} of {len(hist)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    season = ckpt.season or "Spring"
    man = Manifest("eval", ckpt.seed, None)
    man.input(args.ckpt)
    man.input(args.data)
    cfg = ckpt.config
    ds = _datasets(args.data, (season,), cfg.lookback, cfg.horizon)[season]
    if ds.test_windows.X.shape[1] != cfg.channels:
        raise ConfigMismatchError(f"data has {ds.test_windows.X.shape[1]} channels, checkpoint expects {cfg.channels}")
    stats = ckpt.stats or ds.stats
    model = ckpt.build()
    pair = evaluate_model(model, ds.test_windows, stats)
    rows = [
        ReportRow(season, DISPLAY_NAMES[ckpt.kind], compute_metrics(pair)),
        ReportRow(season, DISPLAY_NAMES["persistence"], compute_metrics(_persistence_pair(ds))),
    ]
    table, csv_text = render_report(rows)
    out = Path(args.out)
    csv_path = out.with_suffix(".csv")
    _text(out, table)
    _text(csv_path, csv_text)
    from .plotting import plot_forecast

    fig = plot_forecast(ds.test_windows.target_time, pair.y, {DISPLAY_NAMES[ckpt.kind]: pair.y_hat},
                        out.with_suffix(".forecast.png"), f"{season} test set")
    for p in (out, csv_path, fig):
        man.artifact(p)
    man.write(out.with_suffix(".manifest.json"))
    print(table, end="")
    return EXIT_OK


def cmd_search(args) -> int:
    if args.budget < 1:
        raise UsageError("--budget must be at least 1")
    run = load_config(args.config, args.seed)
    season = resolve_season(args.season)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("search", run.seed, run.digest)
    man.input(args.data)
    ds = _datasets(args.data, (season,), run.model.lookback, run.model.horizon)[season]
    man.start("search")
    best, trials = run_search(SearchSpace(), args.budget, ds, run.train, seed=run.seed, base=run.model)
    man.stop("search")
    log_path = out / "trials.csv"
    write_trial_log(log_path, trials, best)
    ckpt_path = out / "best.ckpt"
    save_checkpoint(ckpt_path, Checkpoint.from_model(best.model, stats=ds.stats, history=best.history, seed=best.seed, season=season))
    for p in (log_path, ckpt_path):
        man.artifact(p)
    man.write(out / "manifest.json")
    c = best.config
    print(f"best trial {best.trial_id}: d_i={c.d_i} l_i={c.l_i} h={c.h} d_l={c.d_l} l_l={c.l_l} val_loss={best.val_loss:.6f}")
    skipped = args.budget - len(trials)
    if skipped:
        print(f"{skipped} duplicate configuration(s) skipped")
    return EXIT_OK


def cmd_seasons(args) -> int:
    run = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("seasons", run.seed, run.digest)
    man.input(args.data)
    man.start("data")
    datasets = _datasets(args.data, SEASONS, run.model.lookback, run.model.horizon)
    man.stop("data")
    from .plotting import plot_forecast, plot_losses

    rows, baseline = [], []
    for season, ds in datasets.items():
        hists, preds, observed = {}, {}, None
        for kind in TRAINED_KINDS:
            stage = f"{season.lower()}/{kind}"
            man.start(stage)
            model, hist, ckpt = _fit(kind, season, ds, run, _epoch_logger(stage))
            pair = evaluate_model(model, ds.test_windows, ds.stats)
            man.stop(stage)
            name = DISPLAY_NAMES[kind]
            rows.append(ReportRow(season, name, compute_metrics(pair)))
            hists[name], preds[name], observed = hist, pair.y_hat, pair.y
            ckpt_path = out / f"{season.lower()}_{kind}.ckpt"
            hist_path = out / f"{season.lower()}_{kind}.history.csv"
            save_checkpoint(ckpt_path, ckpt)
            hist.write_csv(hist_path)
            man.artifact(ckpt_path)
            man.artifact(hist_path)
            m = rows[-1].metrics
            log.info("%s %s: rmse %.4f r2 %.4f (%d epochs)", season, name, m.rmse, m.r2, len(hist))
        baseline.append(ReportRow(season, DISPLAY_NAMES["persistence"], compute_metrics(_persistence_pair(ds))))
        man.artifact(plot_losses(hists, out / f"{season.lower()}_loss.png", f"{season} training"))
        man.artifact(plot_forecast(ds.test_windows.target_time, observed, preds, out / f"{season.lower()}_forecast.png",
                                   f"{season} test set"))
    table, csv_text = render_report(rows)
    base_table, base_csv = render_report(baseline)
    for name, text in (("report.txt", table), ("report.csv", csv_text),
                       ("persistence.txt", base_table), ("persistence.csv", base_csv)):
        man.artifact(_text(out / name, text))
    man.write(out / "manifest.json")
    print(table, end="")
    print("\nPersistence reference")
    print(base_table, end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pvcast", description="Seasonal PV power forecasting experiments.")
    p.add_argument("--version", action="version", version=f"pvcast {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic hourly PV/weather CSV")
    s.add_argument("--years", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    seasons = [x.lower() for x in SEASONS]
    t = sub.add_parser("train", help="train one model on one season")
    t.add_argument("--data", required=True)
    t.add_argument("--season", required=True, choices=seasons, type=str.lower)
    t.add_argument("--model", required=True, choices=TRAINED_KINDS)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its season's test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="text report path; CSV is written alongside")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("search", help="random hyperparameter search for the fusion model")
    r.add_argument("--data", required=True)
    r.add_argument("--season", required=True, choices=seasons, type=str.lower)
    r.add_argument("--budget", type=int, required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--config")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_search)

    a = sub.add_parser("seasons", help="train and evaluate all models on all seasons")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_seasons)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pvcast: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, ConfigMismatchError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"pvcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, SearchError, FloatingPointError) as exc:
        print(f"pvcast: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"pvcast: cannot write output: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
