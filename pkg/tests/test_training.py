import dataclasses
import hashlib
import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pvcast.data import Windows
from pvcast.models import ModelConfig, build_model
from pvcast.tensor import Tensor, backward, grad_check
from pvcast.training import (
    AdamState,
    Checkpoint,
    CheckpointError,
    ConfigMismatchError,
    NumericError,
    ReduceOnPlateau,
    TrainConfig,
    TrainHistory,
    adam_step,
    clip_grad_norm,
    early_stop,
    encode_checkpoint,
    evaluate_loss,
    load_checkpoint,
    mse_loss,
    plateau_schedule,
    save_checkpoint,
    train,
)

TINY = ModelConfig(d_i=8, l_i=1, h=2, d_l=8, l_l=1, lookback=6)


def toy_windows(rng, n, cfg=TINY):
    X = rng.normal(size=(n, cfg.channels, cfg.lookback))
    y = 0.6 * X[:, 0, -1] + 0.3 * X[:, 3, -1]
    return Windows(X, y, np.arange(n).astype("datetime64[h]"))


# -- loss and optimizer ----------------------------------------------------------
def test_mse_examples(rng):
    p = rng.normal(size=(4, 1))
    assert mse_loss(p, p).item() == 0.0
    assert mse_loss([[0.0], [0.0]], [[1.0], [3.0]]).item() == 5.0
    with pytest.raises(ValueError):
        mse_loss(np.ones((2, 1)), np.ones((3, 1)))


def test_mse_gradient(rng):
    t = rng.normal(size=(5, 1))
    x = rng.normal(size=(5, 1))
    pred = Tensor(x, requires_grad=True)
    g = backward(mse_loss(pred, t))[pred]
    np.testing.assert_allclose(g, 2 * (x - t) / 5, rtol=1e-14)
    assert grad_check(lambda p: mse_loss(p, t), x).max_relative_error < 1e-8


def test_adam_zero_grad_unchanged(rng):
    p = {"w": Tensor(rng.normal(size=3), requires_grad=True)}
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(3)}, AdamState(), lr=0.1)
    assert np.array_equal(p["w"].data, before)


def test_adam_first_step_hand_value():
    p = {"w": Tensor([1.0], requires_grad=True)}
    state = adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert state.t == 1
    assert abs((1.0 - p["w"].data[0]) - 0.1 / (1 + 1e-8)) < 1e-15


def test_adam_matches_scalar_reference():
    w, m, v = 0.5, 0.0, 0.0
    p = {"w": Tensor([w], requires_grad=True)}
    state = AdamState()
    for t, g in enumerate([0.3, -1.2], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(p, {"w": np.array([g])}, state, lr=0.01)
        assert abs(p["w"].data[0] - w) < 1e-12


def test_adam_lr_zero_and_nonfinite(rng):
    p = {"w": Tensor(rng.normal(size=2), requires_grad=True)}
    before = p["w"].data.copy()
    adam_step(p, {"w": rng.normal(size=2)}, AdamState(), lr=0.0)
    assert np.array_equal(p["w"].data, before)
    state = AdamState()
    with pytest.raises(NumericError, match="w"):
        adam_step(p, {"w": np.array([1.0, math.nan])}, state, lr=0.1)
    assert state.t == 0 and np.array_equal(p["w"].data, before)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert abs(math.hypot(g["a"][0], g["b"][0]) - 1.0) < 1e-15
    g = {"a": np.array([0.3])}
    clip_grad_norm(g, 1.0)
    assert g["a"][0] == 0.3


# -- schedule and stopping -------------------------------------------------------
def test_plateau_examples():
    assert plateau_schedule(1e-4, [5.0, 4.0, 3.0, 2.0, 1.0, 0.5]) == 1e-4
    assert plateau_schedule(1e-4, [1.0] * 6) == 5e-5
    assert plateau_schedule(1e-4, [1.0] * 5) == 1e-4
    assert plateau_schedule(1e-6, [1.0] * 6) == 1e-6
    # counter resets after a reduction
    assert plateau_schedule(1e-4, [1.0] * 7) == 1e-4
    assert plateau_schedule(1e-4, [1.0] * 11) == 5e-5
    # relative threshold: tiny improvements count as flat
    assert plateau_schedule(1e-4, [1.0 - 1e-6 * i for i in range(6)]) == 5e-5
    with pytest.raises(ValueError):
        plateau_schedule(1e-4, [])


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=60))
def test_plateau_lr_bounded_non_increasing(history):
    sched = ReduceOnPlateau(1e-4, 0.5, 3, 1e-6)
    rates = [sched.step(v) for v in history]
    assert all(a >= b for a, b in zip([1e-4] + rates, rates))
    assert min(rates) >= 1e-6
    # the functional form replays the same counter
    lr = 1e-4
    for i in range(len(history)):
        lr = plateau_schedule(lr, history[: i + 1], 0.5, 3, 1e-6)
        assert lr == rates[i]


def test_early_stop_examples():
    assert not any(early_stop(list(np.linspace(5, 1, n)), 15) for n in range(1, 40))
    hist = [5.0, 4.0, 3.0] + [3.0] * 30
    fired = [e for e in range(1, len(hist) + 1) if early_stop(hist[:e], 15)]
    assert fired[0] == 18
    assert not early_stop([1.0, 1.0], 15)
    assert not early_stop([], 5)


# -- training loop ---------------------------------------------------------------
def test_zero_epochs_returns_initial_model(rng):
    m = build_model("lstm", TINY, seed=0)
    before = {k: p.data.copy() for k, p in m.parameters().items()}
    m2, hist, _ = train(m, toy_windows(rng, 20), toy_windows(rng, 10), TrainConfig(max_epochs=0))
    assert m2 is m and len(hist) == 0
    assert all(np.array_equal(before[k], p.data) for k, p in m.parameters().items())


def test_training_reduces_loss_and_restores_best(rng):
    tr, va = toy_windows(rng, 96), toy_windows(rng, 32)
    m = build_model("proposed", TINY, seed=1)
    cfg = TrainConfig(batch_size=32, max_epochs=12, lr=3e-3, seed=3)
    m, hist, state = train(m, tr, va, cfg)
    assert len(hist) == 12 and state.t == 12 * 3
    assert hist.val_loss[-1] < hist.val_loss[0]
    assert evaluate_loss(m, va) == pytest.approx(min(hist.val_loss), rel=1e-12)
    assert all(a >= b for a, b in zip(hist.lr, hist.lr[1:]))


def test_training_deterministic(rng):
    tr, va = toy_windows(rng, 64), toy_windows(rng, 16)
    cfg = TrainConfig(batch_size=16, max_epochs=4, lr=1e-3, seed=7)
    runs = [train(build_model("itransformer", TINY, seed=2), tr, va, cfg)[1].to_csv() for _ in range(2)]
    assert runs[0] == runs[1]
    other = train(build_model("itransformer", TINY, seed=2), tr, va, dataclasses.replace(cfg, seed=8))[1].to_csv()
    assert other != runs[0]


def test_nonfinite_loss_names_batch(rng):
    tr = toy_windows(rng, 40)
    tr.y[35] = math.nan
    cfg = TrainConfig(batch_size=10, max_epochs=1, shuffle=False)
    with pytest.raises(NumericError, match="batch 3"):
        train(build_model("lstm", TINY, seed=0), tr, toy_windows(rng, 8), cfg)


def test_early_stop_bounds_epochs(rng):
    tr, va = toy_windows(rng, 32), toy_windows(rng, 16)
    cfg = TrainConfig(batch_size=32, max_epochs=200, lr=0.0, early_stop_patience=3, seed=0)
    _, hist, _ = train(build_model("lstm", TINY, seed=0), tr, va, cfg)
    assert hist.stopped_early and len(hist) == 4


def test_history_csv_round_trip():
    h = TrainHistory()
    for i in range(5):
        h.append(1.0 / (i + 1), 2.0 / (i + 2), 1e-4)
    back = TrainHistory.from_csv(h.to_csv())
    assert back.train_loss == h.train_loss and back.val_loss == h.val_loss and back.lr == h.lr
    assert h.best_epoch == 5


def test_train_config_validated():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(plateau_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.5)


# -- checkpoints -----------------------------------------------------------------
def _trained(rng):
    tr, va = toy_windows(rng, 32), toy_windows(rng, 8)
    m = build_model("proposed", TINY, seed=4)
    m, hist, opt = train(m, tr, va, TrainConfig(batch_size=16, max_epochs=2, lr=1e-3))
    return m, Checkpoint.from_model(m, history=hist, optimizer=opt, seed=4, season="Winter")


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    m, ckpt = _trained(rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    x = rng.normal(size=(5, 5, TINY.lookback))
    assert np.array_equal(back.build()(x).data, m(x).data)
    for k, v in ckpt.params.items():
        assert np.array_equal(back.params[k], v)
    assert back.optimizer.t == ckpt.optimizer.t
    assert all(np.array_equal(back.optimizer.m[k], ckpt.optimizer.m[k]) for k in ckpt.optimizer.m)
    assert back.history.val_loss == ckpt.history.val_loss
    assert back.season == "Winter" and back.seed == 4
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_truncated_and_corrupt(tmp_path, rng):
    _, ckpt = _trained(rng)
    blob = encode_checkpoint(ckpt)
    path = tmp_path / "bad.ckpt"
    for bad in (blob[: len(blob) // 2], blob[:20], blob[:-1]):
        path.write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path, rng):
    _, ckpt = _trained(rng)
    body = bytearray(encode_checkpoint(ckpt)[:-32])
    struct.pack_into("<I", body, 4, 99)
    path = tmp_path / "v.ckpt"
    path.write_bytes(bytes(body) + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path, rng):
    _, ckpt = _trained(rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    other = dataclasses.replace(TINY, d_l=16)
    with pytest.raises(ConfigMismatchError, match="d_l"):
        load_checkpoint(path, expected=other)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path).build(expected=other)
    from pvcast.training import load_into

    with pytest.raises(ConfigMismatchError):
        load_into(build_model("proposed", other), load_checkpoint(path))
