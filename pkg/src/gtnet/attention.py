"""Local (neighbourhood cross-attention) and global (offset self-attention)
halves of the graph transformer block."""
from __future__ import annotations

import math
from typing import Literal, Optional

import numpy as np

from . import graph as G
from .numerics import LBR, Linear, Module, Tensor, concat, matmul, relu, softmax, swapaxes, unsqueeze

Aggregation = Literal["max", "avg", "add", "concat"]
AGGREGATIONS: tuple[str, ...] = ("max", "avg", "add", "concat")


class LocalBlock(Module):
    """Neighbourhood attention with subtraction-based, per-channel weights.

    ``encoding`` selects the edge encoding feeding the deep feature term
    (``"relative"``, ``"absolute"`` or ``None`` to drop it altogether).
    """

    def __init__(self, c: int, d: int, rng: np.random.Generator, aggregation: str = "max",
                 encoding: Optional[str] = "relative", dtype=np.float64):
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        if encoding not in ("relative", "absolute", None):
            raise ValueError(f"unknown edge encoding {encoding!r}")
        self.c, self.d = c, d
        self.aggregation = aggregation
        self.encoding = encoding
        self.w_ql = Linear(c, d, rng, bias=False, dtype=dtype)
        self.w_kl = Linear(c, d, rng, bias=False, dtype=dtype)
        self.w_vl = Linear(c, d, rng, bias=False, dtype=dtype)
        if encoding is not None:
            self.edge = Linear(2 * c if encoding == "relative" else c, d, rng, dtype=dtype)
            self.mu = Linear(d, d, rng, dtype=dtype)
            self.tau = Linear(d, d, rng, dtype=dtype)
        if aggregation == "concat":
            self.fuse = Linear(2 * d, d, rng, dtype=dtype)
        self.scale = math.sqrt(d)

    def deep_features(self, f_in: Tensor, f_neighbor: Tensor) -> Optional[Tensor]:
        if self.encoding is None:
            return None
        if self.encoding == "relative":
            e = G.edge_encode_relative(f_in, f_neighbor, self.edge)
        else:
            e = G.edge_encode_absolute(f_neighbor, self.edge)
        return self.tau(relu(self.mu(e.values)))

    def forward(self, f_in: Tensor, index: np.ndarray, return_weights: bool = False):
        if f_in.shape[-1] != self.c:
            raise ValueError(f"local block expects {self.c} channels, got {f_in.shape[-1]}")
        if index.shape[-1] < 1:
            raise ValueError("K must be at least 1")
        f_nb = G.gather_neighbors(f_in, index)
        query = unsqueeze(self.w_ql(f_in), -2)
        # the maps are per-point, so projecting before the gather gives the same
        # rows as projecting the gathered neighbourhood, at 1/K of the cost
        key = G.gather_neighbors(self.w_kl(f_in), index)
        value = G.gather_neighbors(self.w_vl(f_in), index)
        fp = self.deep_features(f_in, f_nb)
        w = query - key
        if fp is not None:
            w = w + fp
            value = value + fp
        weights = softmax(w / self.scale, axis=-2)
        out = self._aggregate(weights * value)
        return (out, weights) if return_weights else out

    def _aggregate(self, x: Tensor) -> Tensor:
        # the weights are normalised over K, so their sum is already the
        # attention-weighted neighbour average
        if self.aggregation == "max":
            return x.max(axis=-2)
        if self.aggregation == "avg":
            return x.sum(axis=-2)
        if self.aggregation == "add":
            return x.max(axis=-2) + x.sum(axis=-2)
        return self.fuse(concat([x.max(axis=-2), x.sum(axis=-2)], axis=-1))


class GlobalBlock(Module):
    """Self-attention over all points with the offset residual
    ``x + xi(x - attn(x))``; ``residual=False`` keeps only ``xi(x - attn(x))``."""

    def __init__(self, d: int, rng: np.random.Generator, residual: bool = True,
                 scaled: bool = True, dtype=np.float64):
        if d % 4:
            raise ValueError(f"global block width {d} is not divisible by 4")
        self.d = d
        self.d_qk = d // 4
        self.residual = residual
        self.w_qg = Linear(d, self.d_qk, rng, bias=False, dtype=dtype)
        self.w_kg = Linear(d, self.d_qk, rng, bias=False, dtype=dtype)
        self.w_vg = Linear(d, d, rng, bias=False, dtype=dtype)
        self.xi = LBR(d, d, rng, dtype=dtype)
        self.scale = math.sqrt(self.d_qk) if scaled else 1.0

    def zero_offset(self) -> None:
        self.xi.linear.zero_()

    def forward(self, x: Tensor, return_attention: bool = False):
        q = self.w_qg(x)
        k = self.w_kg(x)
        v = self.w_vg(x)
        attn = softmax(matmul(q, swapaxes(k, -1, -2)) / self.scale, axis=-1)
        f_g = matmul(attn, v)
        offset = self.xi(x - f_g)
        out = x + offset if self.residual else offset
        return (out, attn) if return_attention else out


class GraphTransformerBlock(Module):
    def __init__(self, c: int, d: int, k: int, rng: np.random.Generator, *,
                 aggregation: str = "max", encoding: Optional[str] = "relative",
                 use_local: bool = True, use_global: bool = True, residual: bool = True,
                 scaled_global: bool = True, dtype=np.float64):
        if not (use_local or use_global):
            raise ValueError("a block needs the local or the global transformer")
        self.c, self.d, self.k = c, d, k
        self.local = LocalBlock(c, d, rng, aggregation, encoding, dtype) if use_local else None
        self.proj = Linear(c, d, rng, dtype=dtype) if (c != d or not use_local) else None
        self.glob = GlobalBlock(d, rng, residual, scaled_global, dtype) if use_global else None

    def forward(self, f_in: Tensor, index: np.ndarray) -> Tensor:
        x = self.proj(f_in) if self.proj is not None else f_in
        if self.local is not None:
            x = x + self.local(f_in, index)
        if self.glob is not None:
            x = self.glob(x)
        return x


def _as_batch(f: Tensor) -> tuple[Tensor, bool]:
    if f.ndim == 2:
        return unsqueeze(f, 0), True
    return f, False


def _index(graph, n: int) -> np.ndarray:
    idx = graph.indices if isinstance(graph, G.NeighborGraph) else np.asarray(graph)
    if idx.ndim == 2:
        idx = idx[None]
    if idx.shape[1] != n:
        raise ValueError(f"graph has {idx.shape[1]} rows but features have {n} points")
    return idx


def local_forward(f_in: Tensor, graph, block: LocalBlock) -> Tensor:
    """F_l for an (N, C) or (B, N, C) input."""
    x, squeeze = _as_batch(f_in)
    out = block(x, _index(graph, x.shape[1]))
    return out.reshape(out.shape[1:]) if squeeze else out


def global_forward(f_l: Tensor, block: GlobalBlock) -> Tensor:
    x, squeeze = _as_batch(f_l)
    out = block(x)
    return out.reshape(out.shape[1:]) if squeeze else out


def block_forward(f_in: Tensor, graph, block: GraphTransformerBlock) -> Tensor:
    x, squeeze = _as_batch(f_in)
    out = block(x, _index(graph, x.shape[1]))
    return out.reshape(out.shape[1:]) if squeeze else out
