"""Attention mechanisms over point features.

Two variants: classic scaled dot-product with a row softmax, and an
affinity built from negated squared Euclidean distances that is
column-softmaxed first and then row-normalized ("double normalization").
The double normalization makes columns of the intermediate matrix measure
each point's contribution to every other point, which the condensation
stage exploits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ContractError, DimensionError
from .tensor import Tensor

MASK_FILL = -1e30  # additive stand-in for -inf; exp underflows to exactly 0


@dataclass
class AttentionParams:
    """Learned affine projections producing queries, keys, and values."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor

    @classmethod
    def init(cls, rng, d_in, d_attn):
        bound = 1.0 / math.sqrt(d_in)

        def weight():
            return Tensor(rng.uniform(-bound, bound, size=(d_in, d_attn)), requires_grad=True)

        def bias():
            return Tensor(rng.uniform(-bound, bound, size=d_attn), requires_grad=True)

        return cls(weight(), bias(), weight(), bias(), weight(), bias())

    @property
    def d_attn(self):
        return self.w_q.shape[1]

    def project(self, x):
        q = tc.affine_map(x, self.w_q, self.b_q)
        k = tc.affine_map(x, self.w_k, self.b_k)
        v = tc.affine_map(x, self.w_v, self.b_v)
        return q, k, v


@dataclass
class AttentionResult:
    """Raw affinities E, column-normalized A', and doubly-normalized A."""

    E: Tensor
    A_prime: Tensor
    A: Tensor


_DIAG_CACHE = {}


def _diagonal_mask(n):
    cached = _DIAG_CACHE.get(n)
    if cached is None:
        cached = Tensor(np.zeros((n, n)))
        np.fill_diagonal(cached.data, MASK_FILL)
        _DIAG_CACHE[n] = cached
    return cached


def _mask_matrix(mask, shape):
    """Build the additive mask; checks that no column is fully masked."""
    masked = np.zeros(shape, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != shape:
            raise DimensionError(f"mask shape {mask.shape} does not match affinity {shape}")
        masked[mask] = MASK_FILL
        blocked = mask
    else:
        if mask.ndim != 2 or mask.shape[1] != 2:
            raise ContractError("mask must be a boolean matrix or a sequence of (row, col) pairs")
        blocked = np.zeros(shape, dtype=bool)
        blocked[mask[:, 0], mask[:, 1]] = True
        masked[blocked] = MASK_FILL
    if blocked.all(axis=0).any():
        raise ContractError("mask leaves at least one column with no unmasked entry")
    return masked


def euclidean_attention(q, k, mask=None):
    """Distance-based attention with double normalization.

    E_ij = -||q_i - k_j||^2, optionally masked to -inf; A' is the column
    softmax of E and A divides each row of A' by its sum. ``mask`` may be a
    boolean matrix, (row, col) index pairs, or the string "diagonal" for
    the cached self-affinity mask. A fully masked row surfaces as a
    ``DegeneracyError`` from the row normalization.
    """
    dist = tc.pairwise_sq_dist(q, k)
    e = tc.scale(dist, -1.0)
    if mask is not None:
        if isinstance(mask, str):
            if mask != "diagonal" or e.shape[0] != e.shape[1]:
                raise ContractError(f"unsupported mask spec {mask!r} for shape {e.shape}")
            e = tc.add(e, _diagonal_mask(e.shape[0]))
        else:
            e = tc.add(e, Tensor(_mask_matrix(mask, e.shape)))
    a_prime = tc.softmax_cols(e)
    a = tc.normalize_rows(a_prime)
    return AttentionResult(E=e, A_prime=a_prime, A=a)


def dot_product_attention(x, params):
    """Self-attention: row-softmax(QK^T / sqrt(C)) applied to V.

    Returns the attended features and the attention matrix.
    """
    if x.shape[0] < 1:
        raise DimensionError("dot_product_attention requires at least one point")
    q, k, v = params.project(x)
    e = tc.matmul(q, tc.transpose(k), alpha=1.0 / math.sqrt(params.d_attn))
    a = tc.softmax_rows(e)
    out = tc.matmul(a, v)
    return out, a


def cross_attention(query_feats, context_feats, params):
    """Dot-product attention with queries from one stream, keys/values
    from another."""
    q = tc.affine_map(query_feats, params.w_q, params.b_q)
    k = tc.affine_map(context_feats, params.w_k, params.b_k)
    v = tc.affine_map(context_feats, params.w_v, params.b_v)
    e = tc.matmul(q, tc.transpose(k), alpha=1.0 / math.sqrt(params.d_attn))
    a = tc.softmax_rows(e)
    return tc.matmul(a, v), a


def apply_attention(a, v):
    """Weight rows of v by an attention matrix (plain matrix product)."""
    return tc.matmul(a, v)
