"""Position-to-structure attention layer.

Each layer computes one affinity matrix from both feature streams (sum of
negated squared distances between projected queries and keys), then
residually updates the position stream through the attended values and the
structure stream through the attended values concatenated with features
gathered from each point's top-k attention neighbors. Ablation variants
replace this exchange with vanilla self- or cross-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import (AttentionParams, AttentionResult, cross_attention,
                        dot_product_attention)
from .errors import ContractError, DimensionError
from .tensor import Tensor

VARIANTS = ("no_structure", "combined", "cross_pos_to_str", "cross_str_to_pos",
            "cross_two_way")


@dataclass
class TwoLayerMap:
    """affine -> ReLU -> affine, the mapping block used throughout."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, d_in, d_hidden, d_out):
        def uniform(fan_in, shape):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        return cls(
            w1=uniform(d_in, (d_in, d_hidden)),
            b1=uniform(d_in, d_hidden),
            w2=uniform(d_hidden, (d_hidden, d_out)),
            b2=uniform(d_hidden, d_out),
        )

    def apply(self, x):
        return tc.affine_map(tc.relu(tc.affine_map(x, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class PSLayerState:
    """Paired per-point streams plus the raw center coordinates."""

    f_pos: Tensor
    f_str: Tensor | None
    positions: np.ndarray | None = None

    def __post_init__(self):
        if self.f_str is not None and self.f_pos.shape != self.f_str.shape:
            raise DimensionError(
                f"position/structure extents disagree: {self.f_pos.shape} vs {self.f_str.shape}")


@dataclass
class PSLayerParams:
    pos: AttentionParams
    str_: AttentionParams
    k1_map: TwoLayerMap           # d -> d
    k2_map: TwoLayerMap           # 2d -> d
    gather_w: Tensor              # affine map on relative position features
    gather_b: Tensor
    topk: int = 16
    subtract: bool = True

    @classmethod
    def init(cls, rng, d, topk=16, subtract=True):
        bound = 1.0 / math.sqrt(d)
        return cls(
            pos=AttentionParams.init(rng, d, d),
            str_=AttentionParams.init(rng, d, d),
            k1_map=TwoLayerMap.init(rng, d, d, d),
            k2_map=TwoLayerMap.init(rng, 2 * d, d, d),
            gather_w=Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True),
            gather_b=Tensor(rng.uniform(-bound, bound, size=d), requires_grad=True),
            topk=topk,
            subtract=subtract,
        )


def ps_affinity(state, params):
    """Joint affinity: E_ij = -||Qp_i - Kp_j||^2 - ||Qs_i - Ks_j||^2,
    column-softmaxed then row-normalized."""
    qp = tc.affine_map(state.f_pos, params.pos.w_q, params.pos.b_q)
    kp = tc.affine_map(state.f_pos, params.pos.w_k, params.pos.b_k)
    qs = tc.affine_map(state.f_str, params.str_.w_q, params.str_.b_q)
    ks = tc.affine_map(state.f_str, params.str_.w_k, params.str_.b_k)
    e = tc.add(tc.scale(tc.pairwise_sq_dist(qp, kp), -1.0),
               tc.scale(tc.pairwise_sq_dist(qs, ks), -1.0))
    a_prime = tc.softmax_cols(e)
    a = tc.normalize_rows(a_prime)
    return AttentionResult(E=e, A_prime=a_prime, A=a)


def _topk_neighbors(a_data, topk):
    """Per-row indices of the top-k attention entries, self excluded,
    ties to the lowest column index."""
    t = a_data.shape[0]
    scores = a_data.copy()
    np.fill_diagonal(scores, -np.inf)
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :topk].astype(np.int64)


def gather_topk_relative(state, a, params):
    """Aggregate each point's top attention neighbors into one feature.

    Gathers (F_pos_j - F_pos_i) for the top-k columns j of row i (or raw
    F_pos_j without subtraction), maps them through the gather affine, and
    max-pools over the k neighbors. Two algebraic shortcuts keep the big
    (t, k, d) block out of most of the chain: the affine commutes with the
    subtraction, and the per-row center offset commutes with the max.
    """
    t = state.f_pos.shape[0]
    if not 1 <= params.topk <= t - 1:
        raise ContractError(f"topk={params.topk} outside [1, {t - 1}]")
    a_data = a.data if isinstance(a, Tensor) else np.asarray(a)
    if a_data.shape != (t, t):
        raise DimensionError(f"attention matrix shape {a_data.shape} does not match {t} points")
    idx = _topk_neighbors(a_data, params.topk)

    # max_j(proj_j - proj_i + b) = max_j(proj_j + b) - proj_i
    projected = tc.matmul(state.f_pos, params.gather_w)
    biased = tc.add_bias(projected, params.gather_b)
    pooled = tc.gather_rows_max(biased, idx)
    if params.subtract:
        return tc.sub(pooled, projected)
    return pooled


def ps_update(state, params):
    """One position-to-structure layer.

    F'_pos = F_pos + K1(A V_pos);  F'_str = F_str + K2(A V_str ++ F_gather).
    Positions pass through untouched.
    """
    result = ps_affinity(state, params)
    v_pos = tc.affine_map(state.f_pos, params.pos.w_v, params.pos.b_v)
    v_str = tc.affine_map(state.f_str, params.str_.w_v, params.str_.b_v)
    attended_pos = tc.matmul(result.A, v_pos)
    attended_str = tc.matmul(result.A, v_str)
    f_gather = gather_topk_relative(state, result.A, params)

    f_pos = tc.add(state.f_pos, params.k1_map.apply(attended_pos))
    f_str = tc.add(state.f_str, params.k2_map.apply(tc.concat_last(attended_str, f_gather)))
    return PSLayerState(f_pos=f_pos, f_str=f_str, positions=state.positions)


@dataclass
class SingleStreamLayerParams:
    """Vanilla self-attention block for the no-structure and combined
    ablations (one stream, width 2d)."""

    attn: AttentionParams
    out_map: TwoLayerMap

    @classmethod
    def init(cls, rng, width):
        return cls(attn=AttentionParams.init(rng, width, width),
                   out_map=TwoLayerMap.init(rng, width, width, width))


@dataclass
class CrossLayerParams:
    """Cross-attention exchange between the two streams."""

    pos_to_str: AttentionParams | None
    str_to_pos: AttentionParams | None
    str_map: TwoLayerMap | None
    pos_map: TwoLayerMap | None

    @classmethod
    def init(cls, rng, d, directions):
        p2s = "pos_to_str" in directions
        s2p = "str_to_pos" in directions
        return cls(
            pos_to_str=AttentionParams.init(rng, d, d) if p2s else None,
            str_to_pos=AttentionParams.init(rng, d, d) if s2p else None,
            str_map=TwoLayerMap.init(rng, d, d, d) if p2s else None,
            pos_map=TwoLayerMap.init(rng, d, d, d) if s2p else None,
        )


def _single_stream_layer(state, params):
    out, _ = dot_product_attention(state.f_pos, params.attn)
    f_pos = tc.add(state.f_pos, params.out_map.apply(out))
    return PSLayerState(f_pos=f_pos, f_str=state.f_str, positions=state.positions)


def ablation_layer(variant, state, params):
    """One layer of an ablation variant; shapes match its inputs.

    no_structure / combined: vanilla self-attention over the single
    (doubled-width or fused) stream carried in ``f_pos``. Cross variants:
    vanilla cross-attention where queries come from the stream being
    enriched and keys/values from the other stream, residually applied.
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown ablation variant {variant!r}")
    if variant in ("no_structure", "combined"):
        return _single_stream_layer(state, params)

    f_pos, f_str = state.f_pos, state.f_str
    new_pos, new_str = f_pos, f_str
    if variant in ("cross_pos_to_str", "cross_two_way"):
        out, _ = cross_attention(f_str, f_pos, params.pos_to_str)
        new_str = tc.add(f_str, params.str_map.apply(out))
    if variant in ("cross_str_to_pos", "cross_two_way"):
        out, _ = cross_attention(f_pos, f_str, params.str_to_pos)
        new_pos = tc.add(f_pos, params.pos_map.apply(out))
    return PSLayerState(f_pos=new_pos, f_str=new_str, positions=state.positions)
