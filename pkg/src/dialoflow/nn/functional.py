"""Attention and small layer helpers built on the autodiff core."""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .tensor import MASK_BIAS, Tensor, add, as_tensor, gelu, layer_norm, matmul, reshape, softmax, swap_last, transpose


class AttentionMeter:
    """Records the largest attention matrix (query rows x key columns) materialized."""

    def __init__(self):
        self.peak_entries = 0
        self.calls = 0

    def record(self, n_query: int, n_key: int) -> None:
        self.calls += 1
        self.peak_entries = max(self.peak_entries, n_query * n_key)


_METERS: list[AttentionMeter] = []


@contextlib.contextmanager
def track_attention():
    meter = AttentionMeter()
    _METERS.append(meter)
    try:
        yield meter
    finally:
        _METERS.remove(meter)


def _mask_array(mask) -> np.ndarray:
    m = getattr(mask, "matrix", mask)
    return np.asarray(m, dtype=bool)


def attention(Q: Tensor, K: Tensor, V: Tensor, mask) -> Tensor:
    """Scaled dot-product attention with a boolean mask (True = may attend).

    Shapes are ``(..., T_q, d)`` for Q and ``(..., T_k, d)`` for K and V; the
    mask broadcasts to ``(..., T_q, T_k)``.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    m = _mask_array(mask)
    n_q, n_k = Q.shape[-2], K.shape[-2]
    if m.shape[-2:] != (n_q, n_k):
        raise ValueError(f"mask shape {m.shape} incompatible with {n_q}x{n_k} attention")
    if not m.any(axis=-1).all():
        raise ValueError("empty receptive field")
    for meter in _METERS:
        meter.record(n_q, n_k)
    d = Q.shape[-1]
    bias = np.where(m, 0.0, MASK_BIAS)
    scores = add(matmul(Q, swap_last(K)) * (1.0 / math.sqrt(d)), bias)
    return matmul(softmax(scores, axis=-1), V)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., T, d) -> (..., h, T, d/h)"""
    *lead, t, d = x.shape
    x = reshape(x, (*lead, t, n_heads, d // n_heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(x, tuple(axes))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    x = transpose(x, tuple(axes))
    return reshape(x, (*lead, t, h * dh))


def multi_head_attention(xq: Tensor, xkv: Tensor, params: dict, prefix: str, n_heads: int, mask) -> Tensor:
    """Projected multi-head attention. ``mask`` broadcasts to (..., T_q, T_k);
    a head axis is inserted automatically."""
    q = split_heads(matmul(xq, params[prefix + "wq"]), n_heads)
    k = split_heads(matmul(xkv, params[prefix + "wk"]), n_heads)
    v = split_heads(matmul(xkv, params[prefix + "wv"]), n_heads)
    m = _mask_array(mask)
    m = m[..., None, :, :] if m.ndim >= 3 else m
    out = attention(q, k, v, m)
    return matmul(merge_heads(out), params[prefix + "wo"])


def linear(x: Tensor, params: dict, prefix: str, bias: bool = True) -> Tensor:
    y = matmul(x, params[prefix + "w"])
    return add(y, params[prefix + "b"]) if bias else y


def ln(x: Tensor, params: dict, prefix: str) -> Tensor:
    return layer_norm(x, params[prefix + "g"], params[prefix + "b"])


def feed_forward(x: Tensor, params: dict, prefix: str) -> Tensor:
    return linear(gelu(linear(x, params, prefix + "fc1.")), params, prefix + "fc2.")


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
