"""Sliding-window alignment adapter.

The adapter maps each token embedding of a compressed encoder onto the
embedding space of a larger encoder. Row i of the input is replaced by the
concatenation of rows i-k .. i+k (k = window//2, zero vectors beyond the
sequence ends) and pushed through a single-hidden-layer feed-forward network
with GeLU activation; the same transform is applied at every position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, add, gelu, matmul, record, accumulate_grad
from .errors import ConfigError, ShapeError

INIT_STD = 0.02


@dataclass(frozen=True)
class AdapterConfig:
    window_n: int
    d_c: int
    d_l: int
    hidden: int = 64

    def __post_init__(self):
        if self.window_n < 1 or self.window_n % 2 == 0:
            raise ConfigError(f"window_n must be odd and >= 1, got {self.window_n}")
        if min(self.d_c, self.d_l, self.hidden) < 1:
            raise ConfigError("adapter dimensions must be positive")


def assemble_windows(rc: Tensor, window_n: int) -> Tensor:
    """Concatenate each row with its window_n-1 neighbours, zero-padded.

    Output row i is [rc[i-k] | ... | rc[i] | ... | rc[i+k]] with k = window//2;
    out-of-range rows contribute zero vectors. Differentiable: gradients route
    back to the contributing rows only.
    """
    if window_n < 1 or window_n % 2 == 0:
        raise ConfigError(f"window_n must be odd and >= 1, got {window_n}")
    if rc.data.ndim != 2 or rc.data.shape[0] < 1:
        raise ShapeError(f"assemble_windows expects a non-empty matrix, got {rc.data.shape}")
    if window_n == 1:
        return rc

    m, d = rc.data.shape
    half = window_n // 2
    out_data = np.zeros((m, window_n * d), dtype=rc.data.dtype)
    spans = []  # (block column offset, out row range, in row range)
    for k in range(window_n):
        off = k - half
        lo = max(0, -off)
        hi = min(m, m - off)
        if lo < hi:
            spans.append((k * d, lo, hi, off))
            out_data[lo:hi, k * d : (k + 1) * d] = rc.data[lo + off : hi + off]
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None

    def bwd(g):
        grc = np.zeros_like(rc.data)
        for col, lo, hi, off in spans:
            grc[lo + off : hi + off] += g[lo:hi, col : col + d]
        accumulate_grad(rc, grc)

    record(out, bwd)
    return out


class AlignmentAdapter:
    """Windowed feed-forward map from d_c-dim rows to d_l-dim rows.

    ``linear_bypass`` replaces the hidden layer with a single linear map
    (ablation hook for degenerate-case tests; not a supported mode).
    """

    def __init__(self, config: AdapterConfig, seed: int = 0, dtype=np.float32,
                 linear_bypass: bool = False):
        self.config = config
        self.linear_bypass = linear_bypass
        rng = np.random.default_rng(seed)
        n_in = config.window_n * config.d_c

        def normal(shape, name):
            return Parameter((INIT_STD * rng.standard_normal(shape)).astype(dtype),
                             name=name)

        if linear_bypass:
            self.w1 = normal((n_in, config.d_l), "adapter.w1")
            self.b1 = Parameter(np.zeros(config.d_l, dtype=dtype), name="adapter.b1")
            self.w2 = None
            self.b2 = None
        else:
            self.w1 = normal((n_in, config.hidden), "adapter.w1")
            self.b1 = Parameter(np.zeros(config.hidden, dtype=dtype), name="adapter.b1")
            self.w2 = normal((config.hidden, config.d_l), "adapter.w2")
            self.b2 = Parameter(np.zeros(config.d_l, dtype=dtype), name="adapter.b2")

    @classmethod
    def identity(cls, dim: int, dtype=np.float32) -> "AlignmentAdapter":
        """Window-1 linear adapter initialized to the exact identity map."""
        ad = cls(AdapterConfig(1, dim, dim), linear_bypass=True, dtype=dtype)
        ad.w1.data = np.eye(dim, dtype=dtype)
        return ad

    def named_parameters(self):
        yield "adapter.w1", self.w1
        yield "adapter.b1", self.b1
        if self.w2 is not None:
            yield "adapter.w2", self.w2
            yield "adapter.b2", self.b2

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def forward(self, rc: Tensor) -> Tensor:
        if rc.data.ndim != 2 or rc.data.shape[1] != self.config.d_c:
            raise ShapeError(
                f"adapter expects [m x {self.config.d_c}] input, got {rc.data.shape}"
            )
        win = assemble_windows(rc, self.config.window_n)
        h = add(matmul(win, self.w1), self.b1)
        if self.linear_bypass:
            return h
        return add(matmul(gelu(h), self.w2), self.b2)


def adapter_forward(adapter: AlignmentAdapter, rc: Tensor) -> Tensor:
    return adapter.forward(rc)


def adapter_param_count(cfg: AdapterConfig) -> int:
    """Closed-form scalar count: n*d_c*hidden + hidden + hidden*d_l + d_l."""
    return cfg.window_n * cfg.d_c * cfg.hidden + cfg.hidden + cfg.hidden * cfg.d_l + cfg.d_l


def size_percentage(component_counts, reference_count: int) -> float:
    """Combined size of the given components as a percentage of a reference."""
    if reference_count <= 0:
        raise ConfigError("reference_count must be positive")
    if isinstance(component_counts, int):
        total = component_counts
    else:
        total = sum(component_counts)
    return 100.0 * total / reference_count
