"""Forecasting models: the fusion model, its two neural baselines, persistence.

All models take windows ``X`` shaped ``[B, channels, lookback]`` (or a
single ``[channels, lookback]`` window) in normalized units. Row 0 is the
target (active power); the remaining rows are covariates.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .kan import KanConfig, KanLayerParams, SplineGrid, init_kan, kan_forward
from .layers import (
    AttentionParams,
    FfnParams,
    LayerNormParams,
    LinearParams,
    cross_attention,
    ffn,
    init_attention,
    init_ffn,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    self_attention,
)
from .recurrent import LstmParams, LstmStackConfig, init_lstm_stack, lstm_forward
from .tensor import ShapeError, Tensor, as_tensor, named_tensors, no_grad

MODEL_KINDS = ("proposed", "itransformer", "lstm", "persistence")
DISPLAY_NAMES = {
    "proposed": "Proposed",
    "itransformer": "iTransformer",
    "lstm": "LSTM",
    "persistence": "Persistence",
}


@dataclass(frozen=True)
class ModelConfig:
    d_i: int = 32
    l_i: int = 2
    h: int = 4
    d_ff: int | None = None  # defaults to 4 * d_i
    d_l: int = 32
    l_l: int = 2
    lookback: int = 24
    horizon: int = 1
    n_targets: int = 1
    n_covariates: int = 4
    kan_order: int = 3
    kan_intervals: int = 5
    kan_lo: float = -2.0
    kan_hi: float = 2.0
    kan_base: bool = True
    lstm_all_states: bool = True
    ffn_activation: str = "gelu"

    def __post_init__(self):
        for name in ("d_i", "h", "d_l", "l_l", "lookback", "horizon", "n_targets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.l_i < 0 or self.n_covariates < 0:
            raise ValueError("l_i and n_covariates must be non-negative")
        if self.d_i % self.h:
            raise ValueError(f"attention heads h={self.h} must divide d_i={self.d_i}")
        if self.d_ff is not None and self.d_ff < 1:
            raise ValueError("d_ff must be positive")

    @property
    def ffn_width(self) -> int:
        return 4 * self.d_i if self.d_ff is None else self.d_ff

    @property
    def channels(self) -> int:
        return self.n_targets + self.n_covariates

    @property
    def grid(self) -> SplineGrid:
        return SplineGrid(self.kan_order, self.kan_intervals, self.kan_lo, self.kan_hi)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


# -- parameter containers --------------------------------------------------------
@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ffn: FfnParams
    norm_attn: LayerNormParams
    norm_ffn: LayerNormParams


@dataclass
class ITransformerParams:
    embed: LinearParams
    layers: list[EncoderLayerParams]
    project: LinearParams | None = None


@dataclass
class ProposedModelParams:
    encoder: ITransformerParams
    lstm: list[LstmParams]
    fusion: AttentionParams
    fusion_norm: LayerNormParams
    head: list[KanLayerParams]


@dataclass
class LstmModelParams:
    lstm: list[LstmParams]
    head: LinearParams


def init_itransformer(rng: np.random.Generator, cfg: ModelConfig, with_projection: bool) -> ITransformerParams:
    embed = init_linear(rng, cfg.lookback, cfg.d_i)
    layers = [
        EncoderLayerParams(
            attn=init_attention(rng, cfg.d_i, cfg.d_i, cfg.h),
            ffn=init_ffn(rng, cfg.d_i, cfg.ffn_width, cfg.ffn_activation),
            norm_attn=init_layer_norm(cfg.d_i),
            norm_ffn=init_layer_norm(cfg.d_i),
        )
        for _ in range(cfg.l_i)
    ]
    project = init_linear(rng, cfg.d_i, cfg.horizon) if with_projection else None
    return ITransformerParams(embed, layers, project)


def itransformer_encode(X_t, params: ITransformerParams) -> Tensor:
    """Variate tokens ``[B, m, l]`` -> encoded tokens ``[B, m, d_i]``."""
    X_t = as_tensor(X_t)
    if X_t.shape[-1] != params.embed.n_in:
        raise ShapeError(f"encoder expects lookback {params.embed.n_in}, got {X_t.shape[-1]}")
    h = linear(X_t, params.embed)
    for layer in params.layers:
        h_hat = layer_norm(h + self_attention(h, layer.attn), layer.norm_attn)
        h = layer_norm(ffn(h_hat, layer.ffn) + h_hat, layer.norm_ffn)
    return h


def itransformer_forecast(X, params: ITransformerParams) -> Tensor:
    """Per-token projection: ``[B, m, l] -> [B, m, p]``."""
    if params.project is None:
        raise ValueError("encoder was built without a projection head")
    return linear(itransformer_encode(X, params), params.project)


def proposed_forward(X, cfg: ModelConfig, params: ProposedModelParams) -> Tensor:
    """Targets through the encoder, covariates through the LSTM, fused by attention."""
    X = _check_window(X, cfg)
    targets = X[:, : cfg.n_targets, :]
    covariates = X[:, cfg.n_targets :, :].swap_last()  # [B, l, n_c]
    H_tgt = itransformer_encode(targets, params.encoder)
    if cfg.lstm_all_states:
        H_cov = lstm_forward(covariates, params.lstm)
    else:
        H_cov = lstm_forward(covariates, params.lstm)[:, -1:, :]
    fused = layer_norm(H_tgt + cross_attention(H_tgt, H_cov, params.fusion), params.fusion_norm)
    out = kan_forward(fused, params.head)  # [B, n_t, p]
    return out.reshape(X.shape[0], cfg.n_targets * cfg.horizon)


def lstm_forecast(X, cfg: ModelConfig, params: LstmModelParams) -> Tensor:
    X = _check_window(X, cfg)
    last = lstm_forward(X.swap_last(), params.lstm)[:, -1, :]
    return linear(last, params.head)


def persistence_forecast(X) -> np.ndarray:
    """Last observed target value of each window."""
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if X.ndim == 2:
        return X[0:1, -1:].copy()
    return X[:, 0, -1:].copy()


def _check_window(X, cfg: ModelConfig) -> Tensor:
    X = as_tensor(X)
    if X.ndim == 2:
        X = X.reshape(1, *X.shape)
    if X.ndim != 3:
        raise ShapeError(f"expected windows [B, channels, lookback], got {X.shape}")
    if X.shape[1] != cfg.channels:
        raise ShapeError(f"expected {cfg.channels} channels, got {X.shape[1]}")
    if X.shape[2] != cfg.lookback:
        raise ShapeError(f"expected lookback {cfg.lookback}, got {X.shape[2]}")
    return X


# -- model wrappers ----------------------------------------------------------------
@dataclass
class Forecaster:
    """A model kind bound to its configuration and parameters."""

    kind: str
    config: ModelConfig
    params: object = field(default=None, repr=False)

    def __call__(self, X) -> Tensor:
        cfg = self.config
        if self.kind == "proposed":
            return proposed_forward(X, cfg, self.params)
        if self.kind == "itransformer":
            X = _check_window(X, cfg)
            return itransformer_forecast(X, self.params)[:, 0, :]
        if self.kind == "lstm":
            return lstm_forecast(X, cfg, self.params)
        if self.kind == "persistence":
            return as_tensor(persistence_forecast(_check_window(X, cfg)))
        raise ValueError(f"unknown model kind {self.kind!r}")

    def predict(self, X, batch_size: int = 512) -> np.ndarray:
        """Forecasts ``[B, 1]`` without recording a graph."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        out = []
        with no_grad():
            for start in range(0, len(X), batch_size):
                out.append(self(X[start : start + batch_size]).data)
        return np.concatenate(out, axis=0)

    def parameters(self) -> dict[str, Tensor]:
        return dict(named_tensors(self.params)) if self.params is not None else {}

    @property
    def trainable(self) -> bool:
        return self.kind != "persistence"


def parameter_count(model: Forecaster) -> int:
    return int(sum(t.size for t in model.parameters().values()))


def build_model(kind: str, config: ModelConfig, seed: int = 0) -> Forecaster:
    """Initialize a model deterministically from ``seed``."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    rng = np.random.default_rng(seed)
    cfg = config
    if kind == "proposed":
        if cfg.n_covariates < 1:
            raise ValueError("the fusion model needs at least one covariate")
        params = ProposedModelParams(
            encoder=init_itransformer(rng, cfg, with_projection=False),
            lstm=init_lstm_stack(rng, LstmStackConfig(cfg.l_l, cfg.d_l, cfg.n_covariates)),
            fusion=init_attention(rng, cfg.d_i, cfg.d_l, cfg.h),
            fusion_norm=init_layer_norm(cfg.d_i),
            head=init_kan(rng, KanConfig((cfg.d_i, cfg.horizon)), cfg.grid, cfg.kan_base),
        )
    elif kind == "itransformer":
        params = init_itransformer(rng, cfg, with_projection=True)
    elif kind == "lstm":
        params = LstmModelParams(
            lstm=init_lstm_stack(rng, LstmStackConfig(cfg.l_l, cfg.d_l, cfg.channels)),
            head=init_linear(rng, cfg.d_l, cfg.horizon),
        )
    else:
        params = None
    return Forecaster(kind, cfg, params)
