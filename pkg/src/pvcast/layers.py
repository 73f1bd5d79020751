"""Linear maps, layer normalization, feed-forward blocks and attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, custom_op, einsum, softmax


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class LinearParams:
    W: Tensor
    b: Tensor

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> LinearParams:
    return LinearParams(glorot_uniform(rng, n_in, n_out), zeros(n_out))


def linear(x, p: LinearParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != p.n_in:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight shape {p.W.shape}")
    return x @ p.W + p.b


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("layer norm eps must be positive")


def init_layer_norm(d: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(ones(d), zeros(d), eps)


def layer_norm(x, p: LayerNormParams) -> Tensor:
    """Normalize over the last axis with the population variance."""
    x = as_tensor(x)
    d = x.shape[-1]
    if p.gamma.shape != (d,):
        raise ShapeError(f"layer_norm: width {d} does not match gamma {p.gamma.shape}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + p.eps)
    xhat = xc * inv
    gamma = p.gamma.data
    out = xhat * gamma + p.beta.data

    def bw(g):
        dxhat = g * gamma
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return custom_op(out, (x, p.gamma, p.beta), bw, "layer_norm")


# -- attention ---------------------------------------------------------------------
@dataclass
class AttentionParams:
    """Projections for ``heads`` parallel attention heads.

    ``Wq``/``Wk`` map into ``heads * dk`` columns, ``Wv`` into ``heads * dv``
    and ``Wo`` maps the concatenated heads back to the query width.
    """

    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    heads: int

    def __post_init__(self):
        h = self.heads
        if h < 1:
            raise ValueError("heads must be positive")
        if self.Wq.shape[1] != self.Wk.shape[1]:
            raise ShapeError(f"query/key projections disagree: {self.Wq.shape} vs {self.Wk.shape}")
        if self.Wk.shape[0] != self.Wv.shape[0]:
            raise ShapeError(f"key/value projections disagree: {self.Wk.shape} vs {self.Wv.shape}")
        if self.Wq.shape[1] % h or self.Wv.shape[1] % h:
            raise ShapeError(f"{h} heads do not divide projection widths {self.Wq.shape[1]}, {self.Wv.shape[1]}")
        if self.Wo.shape != (self.Wv.shape[1], self.Wq.shape[0]):
            raise ShapeError(f"output projection {self.Wo.shape} must be {(self.Wv.shape[1], self.Wq.shape[0])}")

    @property
    def dk(self) -> int:
        return self.Wq.shape[1] // self.heads

    @property
    def dv(self) -> int:
        return self.Wv.shape[1] // self.heads


def init_attention(rng: np.random.Generator, d_query: int, d_kv: int, heads: int, width: int | None = None) -> AttentionParams:
    width = d_query if width is None else width
    if width % heads:
        raise ValueError(f"{heads} heads do not divide attention width {width}")
    return AttentionParams(
        Wq=glorot_uniform(rng, d_query, width),
        Wk=glorot_uniform(rng, d_kv, width),
        Wv=glorot_uniform(rng, d_kv, width),
        Wo=glorot_uniform(rng, width, d_query),
        heads=heads,
    )


def cross_attention(V1, V2, p: AttentionParams, return_weights: bool = False):
    """Queries from ``V1`` attend over keys/values from ``V2``.

    Accepts ``[s, d]`` inputs or batched ``[B, s, d]`` inputs. With
    ``return_weights`` the per-head attention matrices ``[B, h, s1, s2]``
    are returned alongside the output.
    """
    V1, V2 = as_tensor(V1), as_tensor(V2)
    if V1.ndim not in (2, 3) or V2.ndim != V1.ndim:
        raise ShapeError(f"attention inputs must both be 2-d or 3-d, got {V1.shape} and {V2.shape}")
    unbatched = V1.ndim == 2
    if unbatched:
        V1 = V1.reshape(1, *V1.shape)
        V2 = V2.reshape(1, *V2.shape)
    B, s1, d1 = V1.shape
    B2, s2, d2 = V2.shape
    if B != B2:
        raise ShapeError(f"attention batch sizes differ: {B} vs {B2}")
    if d1 != p.Wq.shape[0] or d2 != p.Wk.shape[0]:
        raise ShapeError(f"attention widths ({d1}, {d2}) do not match projections {p.Wq.shape}, {p.Wk.shape}")
    h, dk, dv = p.heads, p.dk, p.dv
    q = (V1 @ p.Wq).reshape(B, s1, h, dk)
    k = (V2 @ p.Wk).reshape(B, s2, h, dk)
    v = (V2 @ p.Wv).reshape(B, s2, h, dv)
    scores = einsum("bshd,bthd->bhst", q, k) * (1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    ctx = einsum("bhst,bthd->bshd", weights, v).reshape(B, s1, h * dv)
    out = ctx @ p.Wo
    if unbatched:
        out = out.reshape(s1, d1)
    if return_weights:
        w = weights.data[0] if unbatched else weights.data
        return out, w.copy()
    return out


def self_attention(V, p: AttentionParams, return_weights: bool = False):
    return cross_attention(V, V, p, return_weights=return_weights)


# -- feed-forward ------------------------------------------------------------------
@dataclass
class FfnParams:
    inner: LinearParams
    outer: LinearParams
    activation: str = "gelu"

    def __post_init__(self):
        if self.inner.n_out != self.outer.n_in or self.inner.n_in != self.outer.n_out:
            raise ShapeError("feed-forward layers do not compose back to the input width")


_ACTIVATIONS = {
    "gelu": Tensor.gelu,
    "relu": Tensor.relu,
    "silu": Tensor.silu,
    "tanh": Tensor.tanh,
}


def init_ffn(rng: np.random.Generator, d: int, d_ff: int, activation: str = "gelu") -> FfnParams:
    return FfnParams(init_linear(rng, d, d_ff), init_linear(rng, d_ff, d), activation)


def ffn(x, p: FfnParams) -> Tensor:
    act = _ACTIVATIONS[p.activation]
    return linear(act(linear(x, p.inner)), p.outer)
