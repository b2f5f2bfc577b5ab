"""Learnable point condensation: attention-driven center selection plus
per-center structure features built from surrounding points.

Center selection walks the column-normalized attention matrix: the running
score of each point starts as its row sum, the best point is picked, and
every score is debited by the attention that point received from the new
center, which keeps later picks from crowding around earlier ones. A
farthest-point-sampling baseline is included for comparison.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .attention import AttentionParams, dot_product_attention, euclidean_attention
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class CondensationConfig:
    T: int
    k: int
    subtract: bool = True
    neighbor_pool: str = "all_points"  # or "discarded_only"
    mask_diagonal: bool = True

    def validate(self, n_points):
        if not 1 <= self.T <= n_points:
            raise ContractError(f"T={self.T} outside [1, {n_points}]")
        if not 1 <= self.k <= n_points - 1:
            raise ContractError(f"k={self.k} outside [1, {n_points - 1}]")
        if self.neighbor_pool not in ("all_points", "discarded_only"):
            raise ContractError(f"unknown neighbor_pool {self.neighbor_pool!r}")


@dataclass
class SampleResult:
    """Selected center indices, their coordinates, and the leftover indices."""

    selected: np.ndarray           # (T,) distinct indices, selection order
    centers: Tensor                # (T, d) gathered center rows
    discarded: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def attention_condense(a, T):
    """Select T center indices from a column-normalized attention matrix.

    Scores start as row sums; each round picks the argmax (ties to the
    lowest index), subtracts the winner's column from every score, and
    retires the winner with -inf. Returns indices in selection order.
    """
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"attention matrix must be square, got {a.shape}")
    n = a.shape[0]
    if not 1 <= T <= n:
        raise ContractError(f"T={T} outside [1, {n}]")
    col_sums = a.sum(axis=0)
    if np.abs(col_sums - 1.0).max() > 1e-6:
        raise ContractError("attention matrix columns must sum to 1 (column-normalized)")

    e = a.sum(axis=1)
    selected = np.empty(T, dtype=np.int64)
    for i in range(T):
        r = int(np.argmax(e))  # first maximum = lowest index on ties
        selected[i] = r
        e -= a[:, r]
        e[r] = -np.inf
    return selected


def fps(points, T, start=0):
    """Farthest point sampling: greedy max-min Euclidean selection."""
    pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= T <= n:
        raise ContractError(f"T={T} outside [1, {n}]")
    if not 0 <= start < n:
        raise ContractError(f"start index {start} out of range")
    selected = np.empty(T, dtype=np.int64)
    selected[0] = start
    min_dist = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, T):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        d = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_dist, d, out=min_dist)
    return selected


def knn_indices(anchor, pool, k, exclude_self=False, anchor_rows=None):
    """Indices into ``pool`` of the k nearest rows for each anchor row.

    Distances are squared Euclidean; ties break to the lowest pool index.
    With ``exclude_self``, pool rows at exactly zero distance from the
    anchor are skipped (the anchor itself, when the pool contains it).
    When the caller knows each anchor's own pool row, ``anchor_rows``
    names it and only that row is skipped, so coincident points (e.g.
    dropout duplicates) stay eligible as neighbors.
    """
    a = anchor.data if isinstance(anchor, Tensor) else np.asarray(anchor, dtype=np.float64)
    p = pool.data if isinstance(pool, Tensor) else np.asarray(pool, dtype=np.float64)
    if a.ndim != 2 or p.ndim != 2 or a.shape[1] != p.shape[1]:
        raise DimensionError(f"knn feature extents disagree: {a.shape} vs {p.shape}")
    m = p.shape[0]
    if k < 1 or k > m:
        raise ContractError(f"k={k} outside [1, {m}]")

    # Differences computed directly (not via the norm expansion) so that
    # identical rows land at exactly zero distance.
    dist = np.zeros((a.shape[0], m))
    for ch in range(a.shape[1]):
        diff = a[:, ch, None] - p[None, :, ch]
        diff *= diff
        dist += diff
    if anchor_rows is not None:
        anchor_rows = np.asarray(anchor_rows)
        if k > m - 1:
            raise ContractError(f"k={k} too large once the self row is excluded")
        dist[np.arange(a.shape[0]), anchor_rows] = np.inf
    elif exclude_self:
        self_rows = dist == 0.0
        if (m - self_rows.sum(axis=1).max()) < k:
            raise ContractError(f"k={k} too large once zero-distance self rows are excluded")
        dist[self_rows] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


@dataclass
class CondenseParams:
    """Parameters of the condensation stage."""

    attn: AttentionParams   # vanilla attention updating the selected rows
    w_str: Tensor           # shared map from gathered point channels to d
    b_str: Tensor

    @classmethod
    def init(cls, rng, d, in_channels):
        bound = 1.0 / math.sqrt(in_channels)
        return cls(
            attn=AttentionParams.init(rng, d, d),
            w_str=Tensor(rng.uniform(-bound, bound, size=(in_channels, d)), requires_grad=True),
            b_str=Tensor(rng.uniform(-bound, bound, size=d), requires_grad=True),
        )


def _neighbor_pool_ids(n, selected, cfg):
    if cfg.neighbor_pool == "discarded_only":
        keep = np.ones(n, dtype=bool)
        keep[selected] = False
        pool_ids = np.nonzero(keep)[0]
        if pool_ids.size == 0:
            warnings.warn(
                "discarded-only neighbor pool is empty (T == N); falling back to all points",
                RuntimeWarning,
            )
            return np.arange(n, dtype=np.int64), True
        return pool_ids.astype(np.int64), False
    return np.arange(n, dtype=np.int64), True


def build_structure_features(features, selected, cfg, w, b):
    """One structure feature per center from its k nearest pool rows.

    Neighbors come from all points or from the discarded set per the
    config; gathered rows are taken relative to the center when
    ``cfg.subtract``, pushed through the shared affine+ReLU map, and
    aggregated with an element-wise max.
    """
    selected = np.asarray(selected, dtype=np.int64)
    n = features.shape[0]
    pool_ids, pool_has_anchor = _neighbor_pool_ids(n, selected, cfg)
    anchors = features.data[selected]
    # When the pool is all points, each anchor's own row is known exactly;
    # only it is excluded, so coincident points remain valid neighbors.
    idx_in_pool = knn_indices(anchors, features.data[pool_ids], cfg.k,
                              anchor_rows=selected if pool_has_anchor else None)
    neighbor_idx = pool_ids[idx_in_pool]  # (T, k) indices into features

    return tc.gather_relative_relu_max(
        features, neighbor_idx, w, b,
        center_idx=selected if cfg.subtract else None)


def condense(features, positions, cfg, params, with_structure=True):
    """Run the full condensation stage.

    Center selection uses the column-normalized Euclidean attention over
    the learned features (diagonal masked per config). Position features
    of the selected rows are updated with vanilla attention over all
    points; structure features are built from the raw input channels
    (coordinates, plus color/normals when present). The structure half is
    skipped for the position-only ablation.

    Returns (F_pos, F_str, SampleResult); F_str is None when skipped.
    """
    n, d = features.shape
    cfg.validate(n)
    pos = positions.data if isinstance(positions, Tensor) else np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] != n:
        raise DimensionError(f"positions shape {pos.shape} does not match {n} feature rows")

    mask = "diagonal" if cfg.mask_diagonal else None
    result = euclidean_attention(features, features, mask=mask)
    selected = attention_condense(result.A_prime, cfg.T)
    keep = np.ones(n, dtype=bool)
    keep[selected] = False
    discarded = np.nonzero(keep)[0].astype(np.int64)

    # Position stream: vanilla attention with queries restricted to the
    # selected rows, residually added to the selected features.
    q, k, v = params.attn.project(features)
    q_sel = tc.gather_rows(q, selected, unique=True)
    e = tc.matmul(q_sel, tc.transpose(k), alpha=1.0 / math.sqrt(params.attn.d_attn))
    a = tc.softmax_rows(e)
    f_pos = tc.add(tc.gather_rows(features, selected, unique=True), tc.matmul(a, v))

    f_str = None
    if with_structure:
        positions_t = positions if isinstance(positions, Tensor) else Tensor(pos)
        f_str = build_structure_features(positions_t, selected, cfg, params.w_str, params.b_str)

    sample = SampleResult(selected=selected, centers=Tensor(pos[selected]), discarded=discarded)
    return f_pos, f_str, sample
