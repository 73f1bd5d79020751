import dataclasses

import numpy as np
import pytest

from pvcast.data import build_datasets, generate_synthetic
from pvcast.models import ModelConfig
from pvcast.search import SearchError, SearchSpace, run_search, sample_config, trial_log_csv
from pvcast.training import TrainConfig


@pytest.fixture(scope="module")
def winter():
    ds = build_datasets(generate_synthetic(1, seed=11), seasons=("Winter",))["Winter"]
    # a shortened season keeps trials quick
    for name in ("train", "val"):
        w = ds.windows[name]
        keep = slice(0, 384) if name == "train" else slice(0, 96)
        ds.windows[name] = dataclasses.replace(w, X=w.X[keep], y=w.y[keep], target_time=w.target_time[keep], y_raw=w.y_raw[keep])
    return ds


def test_space_size_and_pairs():
    s = SearchSpace()
    assert all(d % h == 0 for d, h in s.valid_pairs())
    assert (16, 6) not in s.valid_pairs() and (128, 6) not in s.valid_pairs()
    assert s.size() == len(s.valid_pairs()) * 6 * 5 * 4


def test_samples_in_domain_and_deterministic():
    space = SearchSpace()
    rng = np.random.default_rng(0)
    samples = [sample_config(space, rng) for _ in range(10_000)]
    for c in samples:
        assert space.contains(c)
        assert c.d_i % c.h == 0
    seen_h = {c.h for c in samples}
    assert seen_h == {2, 4, 8, 16}
    again = [sample_config(space, np.random.default_rng(0)) for _ in range(1)]
    assert again[0] == samples[0]


def test_rejection_keeps_valid_pairs_uniform():
    space = SearchSpace()
    rng = np.random.default_rng(1)
    pairs = [(c.d_i, c.h) for c in (sample_config(space, rng) for _ in range(20_000))]
    counts = {p: pairs.count(p) for p in space.valid_pairs()}
    expected = len(pairs) / len(counts)
    assert max(abs(v - expected) for v in counts.values()) < 0.15 * expected


def test_budget_one_is_best(winter):
    cfg = ModelConfig(d_i=16, l_i=1, h=2, d_l=16, l_l=1)
    best, trials = run_search(SearchSpace(), 1, winter, TrainConfig(max_epochs=1), candidates=[cfg])
    assert len(trials) == 1 and best is trials[0]
    assert best.status in ("completed", "early-stopped")


def test_duplicates_skipped_and_failures_recorded(winter):
    good = ModelConfig(d_i=16, l_i=1, h=2, d_l=16, l_l=1)
    bad = dataclasses.replace(good, lookback=12)  # windows are 24 long, so the forward pass fails
    best, trials = run_search(SearchSpace(), 3, winter, TrainConfig(max_epochs=1), candidates=[good, good, bad])
    assert [t.status for t in trials][1] == "failed" and len(trials) == 2
    assert "ShapeError" in trials[1].error
    assert best.trial_id == 0
    log = trial_log_csv(trials, best).splitlines()
    assert log[0] == "trial_id,seed,d_i,l_i,h,d_l,l_l,val_loss,epochs,status,best"
    assert log[1].endswith(",1") and log[2].endswith("failed,0")


def test_all_failed_raises(winter):
    bad = ModelConfig(d_i=16, l_i=1, h=2, d_l=16, l_l=1, lookback=12)
    with pytest.raises(SearchError, match="trial 0"):
        run_search(SearchSpace(), 1, winter, TrainConfig(max_epochs=1), candidates=[bad])


def test_planted_adequate_config_wins(winter):
    tiny = ModelConfig(d_i=16, l_i=1, h=16, d_l=16, l_l=1)
    adequate = ModelConfig(d_i=32, l_i=1, h=2, d_l=32, l_l=1)
    cfg = TrainConfig(max_epochs=6, lr=1e-3, batch_size=64)
    best, trials = run_search(SearchSpace(), 2, winter, cfg, candidates=[tiny, adequate], seed=3)
    assert best.val_loss == min(t.val_loss for t in trials)
    assert all(t.epochs <= cfg.max_epochs for t in trials)


def test_budget_validated(winter):
    with pytest.raises(ValueError):
        run_search(SearchSpace(), 0, winter)
