import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from pvcast.data import NormStats, SEASONS, Windows
from pvcast.evaluation import (
    EvalPair,
    Metrics,
    ReportRow,
    compute_metrics,
    evaluate_model,
    parse_report_csv,
    render_report,
)
from pvcast.models import ModelConfig, build_model


def naive_metrics(y, yh):
    n = len(y)
    abs_sum = sq_sum = bias = 0.0
    for a, b in zip(y, yh):
        abs_sum += abs(b - a)
        sq_sum += (b - a) ** 2
        bias += b - a
    mean = sum(y) / n
    tot = sum((a - mean) ** 2 for a in y)
    return abs_sum / n, math.sqrt(sq_sum / n), 1 - sq_sum / tot, bias / n


def test_perfect_forecast_exact(rng):
    y = rng.normal(size=50)
    assert compute_metrics(EvalPair(y, y.copy())).as_tuple() == (0.0, 0.0, 1.0, 0.0)


def test_hand_example():
    m = compute_metrics(EvalPair([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]))
    assert m.mae == pytest.approx(2 / 3, abs=1e-15)
    assert m.rmse == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert m.r2 == 0.0 and m.mbe == 0.0


def test_constant_observations_r2_undefined():
    m = compute_metrics(EvalPair([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]))
    assert math.isnan(m.r2)
    assert m.mae == pytest.approx(2 / 3)


def test_bias_sign_is_forecast_minus_observed():
    assert compute_metrics(EvalPair([1.0, 2.0], [2.0, 3.0])).mbe == 1.0


def test_pair_validation():
    with pytest.raises(ValueError):
        EvalPair([1.0], [1.0])
    with pytest.raises(ValueError):
        EvalPair([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        EvalPair([1.0, math.nan], [1.0, 2.0])


@pytest.mark.parametrize("n", [2, 17, 1000, 10_000])
def test_matches_naive_oracle(n, rng):
    y = rng.normal(3, 2, n)
    yh = y + rng.normal(0.1, 0.5, n)
    got = compute_metrics(EvalPair(y, yh)).as_tuple()
    ref = naive_metrics(y.tolist(), yh.tolist())
    assert max(abs(a - b) for a, b in zip(got, ref)) < 1e-12


@given(st.integers(2, 300).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, n, elements=st.floats(-100, 100)),
    hnp.arrays(np.float64, n, elements=st.floats(-100, 100)))))
def test_metric_inequalities(arrays):
    y, yh = arrays
    m = compute_metrics(EvalPair(y, yh))
    assert m.mae >= abs(m.mbe) - 1e-12
    assert m.rmse**2 >= m.mbe**2 - 1e-9
    assert m.rmse >= 0
    assert math.isnan(m.r2) or m.r2 <= 1.0


@given(st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_r2_affine_invariant(a, b, seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=40)
    yh = y + rng.normal(0, 0.3, 40)
    r = compute_metrics(EvalPair(y, yh)).r2
    r2 = compute_metrics(EvalPair(a * y + b, a * yh + b)).r2
    assert abs(r - r2) < 1e-10


def _windows(X, y_norm, stats):
    raw = y_norm * stats.scale[0] + stats.mu[0]
    return Windows(X, y_norm, np.arange(len(y_norm)).astype("datetime64[h]"), raw)


def test_evaluate_model_denormalizes(rng):
    cfg = ModelConfig(d_i=8, h=2, d_l=8, l_i=1, l_l=1)
    stats = NormStats((2.0, 0, 0, 0, 0), (3.0, 1, 1, 1, 1))
    X = rng.normal(size=(30, 5, 24))
    y = rng.normal(size=30)
    w = _windows(X, y, stats)
    m = build_model("proposed", cfg, seed=0)
    pair = evaluate_model(m, w, stats)
    pred = m.predict(X)[:, 0]
    np.testing.assert_allclose(pair.y_hat, pred * 3 + 2, atol=1e-12)
    norm = compute_metrics(EvalPair(y, pred))
    phys = compute_metrics(pair)
    assert abs(norm.r2 - phys.r2) < 1e-10
    assert abs(phys.mae / norm.mae - 3.0) < 1e-10
    with pytest.raises(ValueError):
        evaluate_model(m, Windows(X[:0], y[:0], w.target_time[:0]), stats)


def test_persistence_on_constant_series_is_exact():
    stats = NormStats((1.0,) * 5, (2.0,) * 5)
    X = np.full((10, 5, 24), 0.25)
    w = _windows(X, np.full(10, 0.25), stats)
    pair = evaluate_model(build_model("persistence", ModelConfig()), w, stats)
    assert compute_metrics(pair).mae == 0.0


def test_report_layout_and_round_trip(rng):
    rows = [ReportRow(s, m, Metrics(*rng.uniform(0, 1, 4))) for s in reversed(SEASONS) for m in ("LSTM", "Proposed", "iTransformer")]
    table, csv_text = render_report(rows)
    lines = table.strip().splitlines()
    assert len(lines) == 2 + 12
    assert lines[0].split() == ["Season", "Model", "MAE", "RMSE", "R2", "MBE"]
    assert [ln.split()[0] for ln in lines[2:]] == [s for s in SEASONS for _ in range(3)]
    assert [ln.split()[1] for ln in lines[2:5]] == ["Proposed", "iTransformer", "LSTM"]
    parsed = parse_report_csv(csv_text)
    by_key = {(r.season, r.model): r.metrics for r in rows}
    for r in parsed:
        assert r.metrics == by_key[(r.season, r.model)]
    for ln, r in zip(lines[2:], parsed):
        assert ln.split()[2:] == [f"{v:.4f}" for v in r.metrics.as_tuple()]


def test_report_single_cell_and_empty():
    table, csv_text = render_report([ReportRow("Winter", "Proposed", Metrics(0.1, 0.2, math.nan, -0.01))])
    assert len(table.strip().splitlines()) == 3
    assert "n/a" in table
    assert csv_text.splitlines()[0] == "season,model,mae,rmse,r2,mbe"
    with pytest.raises(ValueError):
        render_report([])
