"""
Attention Primitives

Dense numpy forms of the building blocks shared by the overlap mask
predictor and the superpoint enhancement stages: scaled dot-product
attention with an optional logit bias, multi-head attention, layer
normalization and GELU.
"""

from typing import Optional, Tuple

import numpy as np
from scipy.special import erf, softmax

from errors import AttentionError


def check_dims(name: str, array: np.ndarray, dim: int) -> None:
    """Raise AttentionError unless `array` has `dim` columns."""
    if array.ndim != 2 or array.shape[1] != dim:
        raise AttentionError(f"{name}: expected {dim} columns, got shape {array.shape}")


def attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    scale_dim: Optional[int] = None,
    bias: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    softmax(Q K^T / sqrt(scale_dim) + bias) V.

    Args:
        queries: (n, d) query rows
        keys: (m, d) key rows
        values: (m, e) value rows
        scale_dim: Dimension in the score scaling, defaults to d
        bias: Optional (n, m) logit bias

    Returns:
        Tuple of (output (n, e), attention weights (n, m))
    """
    if queries.shape[1] != keys.shape[1]:
        raise AttentionError(f"query/key dims differ: {queries.shape[1]} vs {keys.shape[1]}")
    if keys.shape[0] != values.shape[0]:
        raise AttentionError(f"key/value counts differ: {keys.shape[0]} vs {values.shape[0]}")
    scale_dim = queries.shape[1] if scale_dim is None else scale_dim
    logits = queries @ keys.T / np.sqrt(scale_dim)
    if bias is not None:
        logits = logits + bias
    weights = softmax(logits, axis=1)
    return weights @ values, weights


def multi_head_attention(
    queries: np.ndarray,
    keys: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    heads: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Standard multi-head attention with output projection.

    Returns:
        Tuple of (output (n, d), weights (heads, n, m))

    Raises:
        AttentionError: If `heads` does not divide the model dim
    """
    dim = wq.shape[1]
    if heads < 1 or dim % heads:
        raise AttentionError(f"{heads} heads do not divide dim {dim}")
    check_dims("queries", queries, wq.shape[0])
    check_dims("keys", keys, wk.shape[0])

    q, k, v = queries @ wq, keys @ wk, keys @ wv
    head_dim = dim // heads
    outputs, weights = [], []
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        out, w = attention(q[:, cols], k[:, cols], v[:, cols])
        outputs.append(out)
        weights.append(w)
    return np.hstack(outputs) @ wo, np.stack(weights)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
