"""B-spline bases and Kolmogorov-Arnold layers.

Each edge ``(q, p)`` of a layer carries its own univariate function

    phi_qp(t) = w_b[q, p] * silu(t) + w_s[q, p] * sum_j coef[q, p, j] * B_j(t)

and output ``q`` sums ``phi_qp(x[p])`` over inputs ``p``.  Stacking layers
composes these function matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, custom_op, einsum


@dataclass(frozen=True)
class SplineGrid:
    """Uniform knots on ``[lo, hi]`` extended by ``order`` intervals per side."""

    order: int = 3
    intervals: int = 5
    lo: float = -2.0
    hi: float = 2.0

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("spline order must be non-negative")
        if self.intervals < 1:
            raise ValueError("spline grid needs at least one interval")
        if not self.hi > self.lo:
            raise ValueError(f"degenerate spline domain [{self.lo}, {self.hi}]")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.intervals

    @property
    def knots(self) -> np.ndarray:
        k = self.order
        return self.lo + np.arange(-k, self.intervals + k + 1) * self.spacing

    @property
    def n_basis(self) -> int:
        return self.intervals + self.order


def _basis_arrays(x: np.ndarray, grid: SplineGrid):
    """Cox-de Boor recursion; returns degree-k values and degree-(k-1) values."""
    t = grid.knots
    x = x[..., None]
    B = ((x >= t[:-1]) & (x < t[1:])).astype(np.float64)
    # close the last interval so the right end of the knot vector is covered
    B[..., -1] += x[..., 0] == t[-1]
    lower = None
    for d in range(1, grid.order + 1):
        lower = B
        left = (x - t[: -(d + 1)]) / (t[d:-1] - t[: -(d + 1)]) * B[..., :-1]
        right = (t[d + 1 :] - x) / (t[d + 1 :] - t[1:-d]) * B[..., 1:]
        B = left + right
    return B, lower


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Basis values ``B_0 .. B_{G+k-1}`` at ``x`` (trailing axis added)."""
    return _basis_arrays(np.asarray(x, dtype=np.float64), grid)[0]


def bspline_basis_derivative(x, grid: SplineGrid) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    B, lower = _basis_arrays(x, grid)
    k = grid.order
    if k == 0:
        return np.zeros_like(B)
    t = grid.knots
    left = k / (t[k:-1] - t[: -(k + 1)])
    right = k / (t[k + 1 :] - t[1:-k])
    return lower[..., :-1] * left - lower[..., 1:] * right


def spline_basis(x, grid: SplineGrid) -> Tensor:
    """Differentiable basis expansion ``[...] -> [..., n_basis]``."""
    x = as_tensor(x)
    values = bspline_basis(x.data, grid)

    def bw(g):
        return ((g * bspline_basis_derivative(x.data, grid)).sum(axis=-1),)

    return custom_op(values, (x,), bw, "bspline_basis")


def fit_spline_coefficients(xs, ys, grid: SplineGrid) -> np.ndarray:
    """Least-squares coefficients so that ``sum_j c_j B_j(xs) ~= ys``."""
    A = bspline_basis(np.asarray(xs, dtype=np.float64), grid)
    coef, *_ = np.linalg.lstsq(A, np.asarray(ys, dtype=np.float64), rcond=None)
    return coef


@dataclass
class KanLayerParams:
    coef: Tensor  # [n_out, n_in, n_basis]
    w_b: Tensor  # [n_out, n_in]
    w_s: Tensor  # [n_out, n_in]
    grid: SplineGrid
    use_base: bool = True

    def __post_init__(self):
        n_out, n_in, nb = self.coef.shape
        if nb != self.grid.n_basis:
            raise ShapeError(f"{nb} coefficients per edge, grid has {self.grid.n_basis} basis functions")
        if self.w_b.shape != (n_out, n_in) or self.w_s.shape != (n_out, n_in):
            raise ShapeError("KAN base/spline weights must be [n_out, n_in]")

    @property
    def n_in(self) -> int:
        return self.coef.shape[1]

    @property
    def n_out(self) -> int:
        return self.coef.shape[0]


@dataclass(frozen=True)
class KanConfig:
    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("a KAN needs at least one layer (two widths)")
        if min(self.widths) < 1:
            raise ValueError("KAN widths must be positive")


def init_kan_layer(
    rng: np.random.Generator,
    n_in: int,
    n_out: int,
    grid: SplineGrid | None = None,
    use_base: bool = True,
    coef_std: float = 0.1,
) -> KanLayerParams:
    grid = SplineGrid() if grid is None else grid
    coef = rng.normal(0.0, coef_std, size=(n_out, n_in, grid.n_basis))
    return KanLayerParams(
        coef=Tensor(coef, requires_grad=True),
        w_b=Tensor(np.ones((n_out, n_in)), requires_grad=True),
        w_s=Tensor(np.ones((n_out, n_in)), requires_grad=True),
        grid=grid,
        use_base=use_base,
    )


def init_kan(rng: np.random.Generator, cfg: KanConfig, grid: SplineGrid | None = None, use_base: bool = True) -> list[KanLayerParams]:
    return [init_kan_layer(rng, a, b, grid, use_base) for a, b in zip(cfg.widths[:-1], cfg.widths[1:])]


def kolmogorov_arnold_pair(rng: np.random.Generator, n: int, grid: SplineGrid | None = None) -> list[KanLayerParams]:
    """The ``n -> 2n+1 -> 1`` network of the Kolmogorov-Arnold representation."""
    return init_kan(rng, KanConfig((n, 2 * n + 1, 1)), grid)


def kan_layer_forward(x, p: KanLayerParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != p.n_in:
        raise ShapeError(f"KAN layer expects width {p.n_in}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, p.n_in)
    out = einsum("bpj,qpj,qp->bq", spline_basis(flat, p.grid), p.coef, p.w_s)
    if p.use_base:
        out = out + einsum("bp,qp->bq", flat.silu(), p.w_b)
    return out.reshape(*lead, p.n_out)


def kan_forward(x, layers: list[KanLayerParams], cfg: KanConfig | None = None) -> Tensor:
    if cfg is not None and tuple([layers[0].n_in] + [p.n_out for p in layers]) != tuple(cfg.widths):
        raise ShapeError("KAN layers do not match the configured widths")
    for a, b in zip(layers[:-1], layers[1:]):
        if a.n_out != b.n_in:
            raise ShapeError(f"KAN layer widths do not chain: {a.n_out} -> {b.n_in}")
    for p in layers:
        x = kan_layer_forward(x, p)
    return x
