"""Minibatch training: MSE loss, Adam, reduce-on-plateau, early stopping,
and a versioned binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"PVCK"
    4       4     u32 format version
    8       32    sha256 of the canonical model-config JSON
    40      8     u64 header length H
    48      H     UTF-8 JSON header (kind, config, seed, stats, history,
                  optimizer step, tensor index of name/shape/offset)
    48+H    ...   payload: little-endian float64 tensors, C order, in index order
    end-32  32    sha256 of every preceding byte
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import NormStats, Windows
from .models import Forecaster, ModelConfig, build_model
from .tensor import Tensor, as_tensor, backward, no_grad


class NumericError(ArithmeticError):
    """Non-finite loss or gradient encountered during training."""


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupt or from another format version."""


class ConfigMismatchError(ValueError):
    """Checkpoint was produced for a different model configuration."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 150
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    early_stop_patience: int = 15
    grad_clip: float | None = 5.0
    use_scheduler: bool = True
    use_early_stop: bool = True
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")
        if self.lr < 0 or self.min_lr < 0 or self.eps <= 0:
            raise ValueError("learning rates must be non-negative and eps positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience must be at least 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


# -- loss and optimizer -------------------------------------------------------------
def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes differ {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update in place; parameters without a gradient
    are treated as having a zero gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``;
    returns the norm before clipping."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# -- schedule and stopping ----------------------------------------------------------
def _improved(loss: float, best: float, threshold: float) -> bool:
    if math.isinf(best):
        return loss < best
    return loss < best - threshold * abs(best)


class ReduceOnPlateau:
    """Halve (by ``factor``) the rate once ``patience`` consecutive epochs
    fail to beat the best loss by a relative ``threshold``."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-6, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad = 0

    def step(self, loss: float) -> float:
        if _improved(loss, self.best, self.threshold):
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.lr


def plateau_schedule(lr: float, history, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-6, threshold: float = 1e-4) -> float:
    """Rate to use after the last epoch of ``history``, given ``lr`` before it.

    The counter is replayed over the whole history (with resets after each
    reduction) and a reduction applies only if it fires on the final epoch.
    """
    if len(history) == 0:
        raise ValueError("plateau_schedule needs a non-empty history")
    best, bad, fired = math.inf, 0, False
    for loss in history:
        fired = False
        if _improved(loss, best, threshold):
            best, bad = loss, 0
        else:
            bad += 1
            if bad >= patience:
                bad, fired = 0, True
    return max(lr * factor, min_lr) if fired else lr


def early_stop(history, patience: int) -> bool:
    """True once ``patience`` epochs have passed since the (first) best loss."""
    if len(history) == 0:
        return False
    best = int(np.argmin(np.asarray(history, dtype=np.float64)))
    return len(history) - 1 - best >= patience


# -- history ------------------------------------------------------------------------
@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.val_loss)

    @property
    def best_epoch(self) -> int | None:
        """1-based epoch of the lowest validation loss."""
        return int(np.argmin(self.val_loss)) + 1 if self.val_loss else None

    @property
    def best_val(self) -> float:
        return min(self.val_loss) if self.val_loss else math.nan

    def append(self, train_loss: float, val_loss: float, lr: float) -> None:
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.lr.append(float(lr))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "best"])
        best = self.best_epoch
        for i, (a, b, c) in enumerate(zip(self.train_loss, self.val_loss, self.lr), start=1):
            w.writerow([i, repr(a), repr(b), repr(c), int(i == best)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write(path, self.to_csv().encode())

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        h = cls()
        for r in rows:
            h.append(float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]))
        return h

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "lr": self.lr, "stopped_early": self.stopped_early}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(list(d["train_loss"]), list(d["val_loss"]), list(d["lr"]), bool(d.get("stopped_early", False)))


# -- training loop ------------------------------------------------------------------
def evaluate_loss(model: Forecaster, windows: Windows, batch_size: int = 1024) -> float:
    pred = model.predict(windows.X, batch_size=batch_size)[:, 0]
    diff = pred - windows.y
    return float(np.mean(diff * diff))


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()


def train(
    model: Forecaster,
    train_set: Windows,
    val_set: Windows,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, TrainHistory], None] | None = None,
) -> tuple[Forecaster, TrainHistory, AdamState]:
    """Fit ``model`` in place and return it restored to its best validation epoch."""
    history = TrainHistory()
    state = AdamState()
    if not model.trainable or cfg.max_epochs == 0:
        return model, history, state
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    sched = ReduceOnPlateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr, cfg.plateau_threshold)
    lr = cfg.lr
    best_val, best_params = math.inf, _snapshot(params)
    n = len(train_set)
    X_all, y_all = train_set.X, train_set.y
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            pred = model(X_all[idx])
            loss = mse_loss(pred, y_all[idx][:, None])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            g = backward(loss)
            grads = {k: g[p] for k, p in params.items() if p in g}
            if cfg.grad_clip is not None:
                clip_grad_norm(grads, cfg.grad_clip)
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += value * len(idx)
        val = evaluate_loss(model, val_set)
        if not math.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.append(total / n, val, lr)
        if val < best_val:
            best_val, best_params = val, _snapshot(params)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if cfg.use_early_stop and early_stop(history.val_loss, cfg.early_stop_patience):
            history.stopped_early = True
            break
        if cfg.use_scheduler:
            lr = sched.step(val)
    _restore(params, best_params)
    return model, history, state


# -- checkpoints --------------------------------------------------------------------
MAGIC = b"PVCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sI32sQ")


def config_digest(kind: str, config: ModelConfig) -> bytes:
    text = json.dumps({"kind": kind, "config": config.to_dict()}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).digest()


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    params: dict[str, np.ndarray]
    stats: NormStats | None = None
    history: TrainHistory | None = None
    optimizer: AdamState | None = None
    seed: int = 0
    season: str | None = None
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Forecaster, **kw) -> "Checkpoint":
        return cls(model.kind, model.config, {k: p.data.copy() for k, p in model.parameters().items()}, **kw)

    def build(self, expected: ModelConfig | None = None) -> Forecaster:
        """Fresh model carrying the stored parameters."""
        if expected is not None and expected != self.config:
            raise ConfigMismatchError(_config_diff(self.config, expected))
        model = build_model(self.kind, self.config, seed=0)
        load_into(model, self)
        return model


def _config_diff(a: ModelConfig, b: ModelConfig) -> str:
    da, db = a.to_dict(), b.to_dict()
    diffs = [f"{k}: checkpoint {da[k]!r} vs requested {db[k]!r}" for k in da if da[k] != db[k]]
    return "checkpoint built for a different model config (" + "; ".join(diffs) + ")"


def load_into(model: Forecaster, ckpt: Checkpoint) -> None:
    if model.kind != ckpt.kind:
        raise ConfigMismatchError(f"checkpoint holds a {ckpt.kind} model, not {model.kind}")
    if model.config != ckpt.config:
        raise ConfigMismatchError(_config_diff(ckpt.config, model.config))
    params = model.parameters()
    if set(params) != set(ckpt.params):
        raise ConfigMismatchError("checkpoint parameter names do not match the model")
    for k, p in params.items():
        if p.data.shape != ckpt.params[k].shape:
            raise ConfigMismatchError(f"parameter {k} has shape {ckpt.params[k].shape}, model expects {p.data.shape}")
        p.data = ckpt.params[k].copy()


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    opt = ckpt.optimizer
    if opt is not None:
        tensors += [(f"adam_m/{k}", v) for k, v in opt.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in opt.v.items()]
    index, offset = [], 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "seed": ckpt.seed,
        "season": ckpt.season,
        "stats": None if ckpt.stats is None else ckpt.stats.to_dict(),
        "history": None if ckpt.history is None else ckpt.history.to_dict(),
        "adam_t": None if opt is None else opt.t,
        "tensors": index,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray(_PREFIX.pack(MAGIC, ckpt.version, config_digest(ckpt.kind, ckpt.config), len(hbytes)))
    body += hbytes
    for _, arr in tensors:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += hashlib.sha256(body).digest()
    return bytes(body)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError("checkpoint is truncated")
    body, checksum = blob[:-32], blob[-32:]
    magic, version, digest, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size + hlen
    header = json.loads(body[_PREFIX.size : start].decode())
    config = ModelConfig.from_dict(header["config"])
    if config_digest(header["kind"], config) != digest:
        raise CheckpointError("config digest does not match the stored config")
    payload = body[start:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("checkpoint payload length mismatch")
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    opt = None
    if header["adam_t"] is not None:
        opt = AdamState(
            {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
            {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
            int(header["adam_t"]),
        )
    return Checkpoint(
        kind=header["kind"],
        config=config,
        params=params,
        stats=None if header["stats"] is None else NormStats.from_dict(header["stats"]),
        history=None if header["history"] is None else TrainHistory.from_dict(header["history"]),
        optimizer=opt,
        seed=int(header["seed"]),
        season=header.get("season"),
        version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected is not None and expected != ckpt.config:
        raise ConfigMismatchError(_config_diff(ckpt.config, expected))
    return ckpt
