"""LSTM cell and stacked LSTM encoder.

Weights act on the concatenation ``[h_prev, x_t]`` (row-vector convention),
so the first ``d_h`` rows of every gate matrix multiply the previous hidden
state and the remaining ``d_in`` rows multiply the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import glorot_uniform, zeros
from .tensor import ShapeError, Tensor, as_tensor, concat, custom_op


@dataclass
class LstmParams:
    Wi: Tensor
    Wf: Tensor
    Wo: Tensor
    Wc: Tensor
    bi: Tensor
    bf: Tensor
    bo: Tensor
    bc: Tensor

    @property
    def hidden(self) -> int:
        return self.Wi.shape[1]

    @property
    def input_width(self) -> int:
        return self.Wi.shape[0] - self.hidden

    def __post_init__(self):
        shape = self.Wi.shape
        for name in ("Wf", "Wo", "Wc"):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"LSTM gate {name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("bi", "bf", "bo", "bc"):
            if getattr(self, name).shape != (shape[1],):
                raise ShapeError(f"LSTM bias {name} must have shape {(shape[1],)}")
        if shape[0] <= shape[1]:
            raise ShapeError(f"LSTM weight rows {shape[0]} must exceed hidden width {shape[1]}")


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass(frozen=True)
class LstmStackConfig:
    layers: int
    hidden: int
    input_width: int

    def __post_init__(self):
        if min(self.layers, self.hidden, self.input_width) < 1:
            raise ValueError("LSTM stack dimensions must be positive")


def init_lstm(rng: np.random.Generator, d_in: int, d_h: int, forget_bias: float = 1.0) -> LstmParams:
    rows = d_h + d_in
    W = [glorot_uniform(rng, rows, d_h) for _ in range(4)]
    bf = Tensor(np.full(d_h, float(forget_bias)), requires_grad=True)
    return LstmParams(W[0], W[1], W[2], W[3], zeros(d_h), bf, zeros(d_h), zeros(d_h))


def init_lstm_stack(rng: np.random.Generator, cfg: LstmStackConfig) -> list[LstmParams]:
    widths = [cfg.input_width] + [cfg.hidden] * (cfg.layers - 1)
    return [init_lstm(rng, w, cfg.hidden) for w in widths]


def zero_state(d_h: int, batch: tuple[int, ...] = ()) -> LstmState:
    z = np.zeros(batch + (d_h,))
    return LstmState(as_tensor(z), as_tensor(z.copy()))


def _fused(p: LstmParams) -> tuple[Tensor, Tensor]:
    return concat([p.Wi, p.Wf, p.Wo, p.Wc], axis=1), concat([p.bi, p.bf, p.bo, p.bc], axis=0)


def _sig(x: np.ndarray) -> np.ndarray:
    y = np.multiply(x, 0.5)
    np.tanh(y, out=y)
    y += 1.0
    y *= 0.5
    return y


def _cell_update(z: Tensor, c_prev: Tensor, d: int) -> Tensor:
    """c_t = f * c_prev + i * tanh(g) from pre-activations z = [i | f | o | g]."""
    zd, cp = z.data, c_prev.data
    si = _sig(zd[..., :d])
    sf = _sig(zd[..., d : 2 * d])
    tg = np.tanh(zd[..., 3 * d :])
    c = sf * cp + si * tg

    def bw(gc):
        dz = np.zeros_like(zd)
        dz[..., :d] = gc * tg * si * (1.0 - si)
        dz[..., d : 2 * d] = gc * cp * sf * (1.0 - sf)
        dz[..., 3 * d :] = gc * si * (1.0 - tg * tg)
        return dz, gc * sf

    return custom_op(c, (z, c_prev), bw, "lstm_cell_state")


def _hidden_update(z: Tensor, c: Tensor, d: int) -> Tensor:
    """h_t = o * tanh(c_t)."""
    zd = z.data
    so = _sig(zd[..., 2 * d : 3 * d])
    tc = np.tanh(c.data)

    def bw(gh):
        dz = np.zeros_like(zd)
        dz[..., 2 * d : 3 * d] = gh * tc * so * (1.0 - so)
        return dz, gh * so * (1.0 - tc * tc)

    return custom_op(so * tc, (z, c), bw, "lstm_hidden")


def _update(z: Tensor, c_prev: Tensor, d: int, return_gates: bool = False):
    c = _cell_update(z, c_prev, d)
    h = _hidden_update(z, c, d)
    state = LstmState(h, c)
    if return_gates:
        zd = z.data
        return state, (_sig(zd[..., :d]), _sig(zd[..., d : 2 * d]), _sig(zd[..., 2 * d : 3 * d]))
    return state


def lstm_cell(x_t, prev: LstmState, p: LstmParams, return_gates: bool = False):
    """One step: gates from ``[h_prev, x_t]``, then the cell and hidden update."""
    x_t = as_tensor(x_t)
    d = p.hidden
    if x_t.shape[-1] != p.input_width:
        raise ShapeError(f"lstm_cell: input width {x_t.shape[-1]} but weights expect {p.input_width}")
    if prev.h.shape[-1] != d or prev.c.shape[-1] != d:
        raise ShapeError(f"lstm_cell: state width must be {d}")
    W, b = _fused(p)
    z = concat([prev.h, x_t], axis=-1) @ W + b
    return _update(z, prev.c, d, return_gates)


def _layer_sequence(X: Tensor, W: Tensor, b: Tensor, d: int) -> Tensor:
    """All hidden states of one layer over ``X`` ``[N, l, d_in]`` with BPTT backward."""
    x = X.data
    N, steps, _ = x.shape
    Wh, Wx = W.data[:d], W.data[d:]
    xp = x @ Wx + b.data
    H = np.empty((N, steps, d))
    cache = []
    h = np.zeros((N, d))
    c = np.zeros((N, d))
    for t in range(steps):
        z = xp[:, t] + h @ Wh
        s = _sig(z[:, : 3 * d])
        si, sf, so = s[:, :d], s[:, d : 2 * d], s[:, 2 * d :]
        tg = np.tanh(z[:, 3 * d :])
        c_prev, h_prev = c, h
        c = sf * c_prev + si * tg
        tc = np.tanh(c)
        h = so * tc
        H[:, t] = h
        cache.append((si, sf, so, tg, c_prev, tc, h_prev))

    def bw(gH):
        dz_all = np.empty((N, steps, 4 * d))
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((N, d))
        dc_next = np.zeros((N, d))
        for t in range(steps - 1, -1, -1):
            si, sf, so, tg, c_prev, tc, h_prev = cache[t]
            dh = gH[:, t] + dh_next
            dc = dh * so * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :d] = dc * tg * si * (1.0 - si)
            dz[:, d : 2 * d] = dc * c_prev * sf * (1.0 - sf)
            dz[:, 2 * d : 3 * d] = dh * tc * so * (1.0 - so)
            dz[:, 3 * d :] = dc * si * (1.0 - tg * tg)
            if t > 0:
                dWh += h_prev.T @ dz
            dh_next = dz @ Wh.T
            dc_next = dc * sf
        flat = dz_all.reshape(N * steps, 4 * d)
        dX = (flat @ Wx.T).reshape(x.shape) if X.requires_grad else None
        dWx = x.reshape(N * steps, -1).T @ flat
        return dX, np.concatenate([dWh, dWx], axis=0), flat.sum(axis=0)

    return custom_op(H, (X, W, b), bw, "lstm_layer")


def lstm_forward(X, params: list[LstmParams], cfg: LstmStackConfig | None = None) -> Tensor:
    """Full hidden-state sequence of the top layer, ``[..., l, d_in] -> [..., l, d_h]``.

    Initial states are zero; each layer feeds its hidden sequence to the next.
    """
    X = as_tensor(X)
    if X.ndim < 2:
        raise ShapeError(f"LSTM input must be at least [l, d_in], got {X.shape}")
    if not params:
        raise ValueError("LSTM stack needs at least one layer")
    if cfg is not None:
        if len(params) != cfg.layers or params[0].input_width != cfg.input_width or params[-1].hidden != cfg.hidden:
            raise ShapeError("LSTM parameters do not match the stack configuration")
    lead = X.shape[:-2]
    steps = X.shape[-2]
    H = X.reshape(-1, steps, X.shape[-1])
    for p in params:
        if H.shape[-1] != p.input_width:
            raise ShapeError(f"LSTM layer expects input width {p.input_width}, got {H.shape[-1]}")
        W, b = _fused(p)
        H = _layer_sequence(H, W, b, p.hidden)
    return H.reshape(*lead, steps, params[-1].hidden)
