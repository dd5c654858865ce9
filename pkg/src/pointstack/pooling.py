"""Learnable pooling: multi-head attention with trained queries.

Keys and values are linear projections of the same point-feature matrix and
the queries are parameters, so the pooled output has as many rows as there
are queries no matter how many points come in, and it does not depend on
their order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    broadcast_to,
    default_dtype,
    linear,
    matmul,
    max_,
    mul,
    reshape,
    softmax_rows,
    transpose,
)

QUERY_INIT_STD = 0.02


class LearnablePooling(Module):
    """Parameters of one learnable pooling layer.

    ``queries`` is ``(n_queries, d_model)``; ``w_q`` maps queries to
    ``d_model``; ``w_k``/``w_v`` project ``in_dim`` point features to
    ``d_model``.  No biases.
    """

    def __init__(
        self,
        in_dim: int,
        d_model: int,
        n_queries: int,
        heads: int,
        rng: np.random.Generator,
        dtype=None,
    ):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by {heads} heads")
        if n_queries < 1:
            raise ValueError("need at least one query")
        dtype = dtype or default_dtype()
        self.in_dim = in_dim
        self.d_model = d_model
        self.heads = heads
        self.queries = Parameter(rng.normal(0.0, QUERY_INIT_STD, (n_queries, d_model)), dtype=dtype)
        self.w_q = Parameter(_uniform(rng, d_model, d_model), dtype=dtype)
        self.w_k = Parameter(_uniform(rng, in_dim, d_model), dtype=dtype)
        self.w_v = Parameter(_uniform(rng, in_dim, d_model), dtype=dtype)

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def __call__(self, f: Tensor, return_weights: bool = False):
        return learnable_pool(f, self, return_weights=return_weights)


LearnablePoolingParams = LearnablePooling


def _uniform(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, d_k: int, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d_k)) v`` with the softmax over the key axis.

    Leading axes broadcast, so per-head and per-sample attention run in one
    call.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key rows {k.shape} do not match value rows {v.shape}")
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(d_k))
    weights = softmax_rows(scores)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, d) -> (..., heads, n, d/heads)
    *lead, n, d = x.shape
    x = reshape(x, tuple(lead) + (n, heads, d // heads))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return reshape(transpose(x, axes), tuple(lead) + (n, h * dk))


def learnable_pool(f: Tensor, params: LearnablePooling, return_weights: bool = False):
    """Pool ``(N, C)`` or ``(B, N, C)`` point features to ``n_queries`` rows.

    Returns ``(n_queries, d_model)`` (or ``(B, n_queries, d_model)``), plus the
    ``(..., heads, n_queries, N)`` attention weights when asked.
    """
    if f.shape[-1] != params.in_dim:
        raise ShapeError(f"features have {f.shape[-1]} channels, pooling expects {params.in_dim}")
    if f.shape[-2] < 1:
        raise ShapeError("cannot pool an empty feature matrix")
    h = params.heads
    q = _split_heads(linear(params.queries, params.w_q), h)
    k = _split_heads(linear(f, params.w_k), h)
    v = _split_heads(linear(f, params.w_v), h)
    out, weights = scaled_dot_product_attention(q, k, v, params.d_k, return_weights=True)
    out = _merge_heads(out)
    return (out, weights.data) if return_weights else out


def max_pool(f: Tensor, out_rows: int = 1) -> Tensor:
    """Column-wise maximum over the point axis, repeated to ``out_rows`` rows."""
    if f.ndim < 2 or f.shape[-2] == 0:
        raise ShapeError("max_pool needs at least one row")
    m = max_(f, axis=-2, keepdims=True)
    if out_rows == 1:
        return m
    return broadcast_to(m, m.shape[:-2] + (out_rows, m.shape[-1]))


@dataclass
class InvarianceReport:
    """Residuals of the permutation-invariance argument, all max-abs values."""

    softmax_commutes: float  # |softmax(S P^T) - softmax(S) P^T|
    expanded_product: float  # both sides after expanding (P F W_k)^T
    orthogonality: float  # softmax(S) P^T P F W_v vs softmax(S) F W_v
    pooled: float  # |Psi(Q, F) - Psi(Q, P F)|
    ptp_is_identity: bool

    def max_residual(self) -> float:
        return max(self.softmax_commutes, self.expanded_product, self.orthogonality, self.pooled)


def _np_softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def verify_invariance_proof(f, params: LearnablePooling, p) -> InvarianceReport:
    """Evaluate both sides of each step of the invariance argument densely.

    ``f`` is a single ``(N, C)`` feature matrix, ``p`` a Permutation; the
    permutation acts as an explicit dense matrix ``P`` so that ``P F`` is a
    real matrix product.
    """
    fd = np.asarray(f.data if isinstance(f, Tensor) else f)
    pm = p.matrix(dtype=fd.dtype)
    if pm.shape[0] != fd.shape[0]:
        raise ShapeError(f"permutation of size {pm.shape[0]} does not match {fd.shape[0]} rows")
    pf = pm @ fd
    qw = params.queries.data @ params.w_q.data
    wk, wv = params.w_k.data, params.w_v.data
    h, dk = params.heads, params.d_k
    scale = 1.0 / np.sqrt(dk)

    commute = expanded = ortho = 0.0
    for head in range(h):
        cols = slice(head * dk, (head + 1) * dk)
        qh, wkh, wvh = qw[:, cols], wk[:, cols], wv[:, cols]
        s = qh @ (fd @ wkh).T * scale
        s_perm = qh @ (pf @ wkh).T * scale
        commute = max(commute, np.abs(_np_softmax(s_perm) - _np_softmax(s) @ pm.T).max())
        lhs = _np_softmax(s_perm) @ (pf @ wvh)
        s_expanded = qh @ wkh.T @ fd.T * scale
        rhs = _np_softmax(s_expanded) @ pm.T @ pm @ fd @ wvh
        expanded = max(expanded, np.abs(lhs - rhs).max())
        final = _np_softmax(s) @ (fd @ wvh)
        ortho = max(ortho, np.abs(rhs - final).max())

    ft = Tensor(fd)
    pooled = np.abs(learnable_pool(ft, params).data - learnable_pool(Tensor(pf), params).data).max()
    ptp = np.array_equal(pm.T @ pm, np.eye(pm.shape[0], dtype=pm.dtype))
    return InvarianceReport(float(commute), float(expanded), float(ortho), float(pooled), bool(ptp))
