"""Seeded random search over the fusion model's discrete hyperparameters."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SeasonalDataset
from .models import ModelConfig, build_model
from .training import TrainConfig, TrainHistory, atomic_write, train

log = logging.getLogger(__name__)

TRIAL_HEADER = ("trial_id", "seed", "d_i", "l_i", "h", "d_l", "l_l", "val_loss", "epochs", "status", "best")
SEARCH_FIELDS = ("d_i", "l_i", "h", "d_l", "l_l")


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    d_i: tuple[int, ...] = (16, 32, 64, 128, 256)
    l_i: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    h: tuple[int, ...] = (2, 4, 6, 8, 12, 16)
    d_l: tuple[int, ...] = (16, 32, 64, 128, 256)
    l_l: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        if not self.valid_pairs():
            raise ValueError("no (d_i, h) pair satisfies h | d_i")
        if not (self.l_i and self.d_l and self.l_l):
            raise ValueError("search space has an empty dimension")

    def valid_pairs(self) -> list[tuple[int, int]]:
        return [(d, h) for d in self.d_i for h in self.h if d % h == 0]

    def size(self) -> int:
        return len(self.valid_pairs()) * len(self.l_i) * len(self.d_l) * len(self.l_l)

    def contains(self, cfg: ModelConfig) -> bool:
        return all(getattr(cfg, f) in getattr(self, f) for f in SEARCH_FIELDS) and cfg.d_i % cfg.h == 0


def sample_config(space: SearchSpace, rng: np.random.Generator, base: ModelConfig = ModelConfig()) -> ModelConfig:
    """Uniform draw over valid combinations; (d_i, h) pairs with h not dividing
    d_i are rejected and redrawn."""
    while True:
        d_i = int(rng.choice(space.d_i))
        h = int(rng.choice(space.h))
        if d_i % h == 0:
            break
    return replace(
        base,
        d_i=d_i,
        h=h,
        l_i=int(rng.choice(space.l_i)),
        d_l=int(rng.choice(space.d_l)),
        l_l=int(rng.choice(space.l_l)),
    )


@dataclass
class Trial:
    trial_id: int
    config: ModelConfig
    seed: int
    val_loss: float = math.nan
    epochs: int = 0
    status: str = "failed"
    error: str = ""
    history: TrainHistory | None = field(default=None, repr=False)
    model: object = field(default=None, repr=False)


def _key(cfg: ModelConfig) -> tuple:
    return tuple(sorted(cfg.to_dict().items()))


def run_search(
    space: SearchSpace,
    budget: int,
    data: SeasonalDataset,
    train_cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    base: ModelConfig = ModelConfig(),
    candidates: list[ModelConfig] | None = None,
    kind: str = "proposed",
) -> tuple[Trial, list[Trial]]:
    """Train ``budget`` sampled configs and return the lowest-validation trial.

    ``candidates`` replaces random sampling with an explicit list. Duplicate
    configurations are skipped. Trials that raise are recorded as failed.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    ss = np.random.SeedSequence(seed)
    sample_ss, trial_ss = ss.spawn(2)
    rng = np.random.default_rng(sample_ss)
    if candidates is None:
        configs = [sample_config(space, rng, base) for _ in range(budget)]
    else:
        configs = list(candidates)[:budget]
    trial_seeds = [int(s.generate_state(1)[0]) for s in trial_ss.spawn(len(configs))]
    trials: list[Trial] = []
    seen = set()
    for cfg, tseed in zip(configs, trial_seeds):
        if _key(cfg) in seen:
            log.info("skipping duplicate configuration %s", {f: getattr(cfg, f) for f in SEARCH_FIELDS})
            continue
        seen.add(_key(cfg))
        trial = Trial(len(trials), cfg, tseed)
        try:
            model = build_model(kind, cfg, seed=tseed)
            model, hist, _ = train(model, data.train_windows, data.val_windows, replace(train_cfg, seed=tseed, use_early_stop=True))
            trial.history, trial.model = hist, model
            trial.epochs = len(hist)
            trial.val_loss = hist.best_val
            if not math.isfinite(trial.val_loss):
                raise ArithmeticError("validation loss is not finite")
            trial.status = "early-stopped" if hist.stopped_early else "completed"
        except Exception as exc:  # a failing trial must not end the search
            trial.status = "failed"
            trial.error = f"{type(exc).__name__}: {exc}"
            trial.model = None
            log.warning("trial %d failed: %s", trial.trial_id, trial.error)
        trials.append(trial)
    ok = [t for t in trials if t.status != "failed"]
    if not ok:
        causes = "; ".join(f"trial {t.trial_id}: {t.error}" for t in trials)
        raise SearchError(f"all {len(trials)} trials failed ({causes})")
    best = min(ok, key=lambda t: (t.val_loss, t.trial_id))
    return best, trials


def trial_log_csv(trials: list[Trial], best: Trial | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_HEADER)
    for t in trials:
        c = t.config
        w.writerow([t.trial_id, t.seed, c.d_i, c.l_i, c.h, c.d_l, c.l_l, repr(float(t.val_loss)), t.epochs, t.status,
                    int(best is not None and t.trial_id == best.trial_id)])
    return buf.getvalue()


def write_trial_log(path, trials: list[Trial], best: Trial | None = None) -> None:
    atomic_write(path, trial_log_csv(trials, best).encode())
