"""Finite-difference verification suite.

Runs central-difference checks (eps 1e-5, float64) against the backward
pass for every differentiable operation and for the composite blocks:
Euclidean attention, condensation, the position-to-structure layer, each
ablation layer, and the full classifier with its loss. Every check draws
its instances from a seeded stream, so a passing report is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as tc
from .attention import AttentionParams, dot_product_attention, euclidean_attention
from .condensation import CondensationConfig, CondenseParams, condense
from .model import ModelConfig, build, cross_entropy_loss, forward_classify, forward_segment
from .ps_layer import (CrossLayerParams, PSLayerParams, PSLayerState,
                       SingleStreamLayerParams, ablation_layer, ps_update)
from .tensor import Tensor

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _gen(seed, *tags):
    return rngmod.stream(seed, rngmod.GENERIC, 71, *tags)


def _mix(shape, rng):
    return Tensor(rng.normal(size=shape))


def _op_checks(seed):
    """One scalar-valued probe per engine operation."""
    rng = _gen(seed, 0)
    m5 = _mix((5, 4), rng)
    m55 = _mix((5, 5), rng)
    m3 = _mix((3, 2, 4), rng)
    weight = _mix((4, 4), rng)
    bias = _mix((4,), rng)
    other = _mix((5, 4), rng)
    idx2 = rng.integers(0, 5, size=(3, 2))
    idx1 = rng.integers(0, 5, size=4)
    labels = rng.integers(0, 4, size=5)
    half = Tensor(np.full((5, 4), 0.6))
    center = _mix((3, 4), rng)

    def probe(op):
        return lambda t: tc.sum_all(tc.mul(op(t), m5))

    return {
        "matmul": lambda t: tc.sum_all(tc.mul(tc.matmul(t, tc.transpose(other)), m55)),
        "transpose": lambda t: tc.sum_all(tc.mul(tc.transpose(t),
                                                 tc.transpose(m5))),
        "affine_map": probe(lambda t: tc.affine_map(t, weight, bias)),
        "pairwise_sq_dist": lambda t: tc.sum_all(
            tc.mul(tc.pairwise_sq_dist(t, other), m55)),
        "relu": probe(tc.relu),
        "add": probe(lambda t: tc.add(t, other)),
        "sub": probe(lambda t: tc.sub(other, t)),
        "mul": probe(lambda t: tc.mul(t, other)),
        "scale": probe(lambda t: tc.scale(t, -1.7)),
        "add_bias": probe(lambda t: tc.add_bias(t, bias)),
        "gather_rows": lambda t: tc.sum_all(tc.mul(tc.gather_rows(t, idx2), m3)),
        "relative_to_center": lambda t: tc.sum_all(tc.mul(
            tc.relative_to_center(tc.gather_rows(t, idx2), tc.gather_rows(t, idx1[:3])),
            m3)),
        "reduce_max_rows": lambda t: tc.sum_all(tc.reduce_max_rows(t)),
        "reduce_max_neighbors": lambda t: tc.sum_all(tc.mul(
            tc.reduce_max_neighbors(tc.gather_rows(t, idx2)), center)),
        "softmax_rows": probe(tc.softmax_rows),
        "softmax_cols": probe(tc.softmax_cols),
        "normalize_rows": probe(lambda t: tc.normalize_rows(tc.add(tc.relu(t), half))),
        "concat_last": lambda t: tc.sum_all(tc.mul(tc.concat_last(t, other),
                                                   _mix((5, 8), _gen(seed, 1)))),
        "broadcast_row": lambda t: tc.sum_all(tc.mul(
            tc.broadcast_row(tc.reduce_max_rows(t), 3), center)),
        "reshape": lambda t: tc.sum_all(tc.mul(tc.reshape(t, (4, 5)),
                                               tc.transpose(m5))),
        "cross_entropy_rows": lambda t: tc.cross_entropy_rows(t, labels),
    }


def check_operations(instances, seed=0):
    results = []
    for name, fn in _op_checks(seed).items():
        worst = 0.0
        for trial in range(instances):
            x = Tensor(_gen(seed, 2, trial).normal(size=(5, 4)) + 0.03)
            worst = max(worst, tc.grad_check(fn, x, eps=EPS))
        results.append(CheckResult(name, instances, worst))
    return results


def check_attention(instances, seed=0):
    rng = _gen(seed, 3)
    mix = _mix((6, 6), rng)
    params = AttentionParams.init(rng, 4, 4)
    mix_out = _mix((6, 4), rng)

    def euclid(t):
        return tc.sum_all(tc.mul(euclidean_attention(t, t).A, mix))

    def dot(t):
        out, _ = dot_product_attention(t, params)
        return tc.sum_all(tc.mul(out, mix_out))

    results = []
    for name, fn in (("euclidean_attention", euclid), ("dot_product_attention", dot)):
        worst = 0.0
        for trial in range(instances):
            x = Tensor(_gen(seed, 4, trial).normal(size=(6, 4)))
            worst = max(worst, tc.grad_check(fn, x, eps=EPS))
        results.append(CheckResult(name, instances, worst))
    return results


def check_condense(instances, seed=0):
    rng = _gen(seed, 5)
    params = CondenseParams.init(rng, 4, 3)
    cfg = CondensationConfig(T=3, k=2)
    mix = _mix((3, 8), rng)
    positions = rng.normal(size=(7, 3))

    def fn(t):
        f_pos, f_str, _ = condense(t, positions, cfg, params)
        return tc.sum_all(tc.mul(tc.concat_last(f_pos, f_str), mix))

    worst = 0.0
    for trial in range(instances):
        x = Tensor(_gen(seed, 6, trial).normal(size=(7, 4)))
        worst = max(worst, tc.grad_check(fn, x, eps=EPS))
    return [CheckResult("condense", instances, worst)]


def check_ps_layers(instances, seed=0):
    rng = _gen(seed, 7)
    d = 4
    full = PSLayerParams.init(rng, d, topk=2)
    single = SingleStreamLayerParams.init(rng, d)
    p2s = CrossLayerParams.init(rng, d, ("pos_to_str",))
    s2p = CrossLayerParams.init(rng, d, ("str_to_pos",))
    both = CrossLayerParams.init(rng, d, ("pos_to_str", "str_to_pos"))
    mix = _mix((8, 2 * d), rng)
    mix_single = _mix((8, d), rng)
    f_str_base = Tensor(rng.normal(size=(8, d)))

    def run_full(t):
        out = ps_update(PSLayerState(f_pos=t, f_str=f_str_base), full)
        return tc.sum_all(tc.mul(tc.concat_last(out.f_pos, out.f_str), mix))

    def run_variant(variant, params):
        def fn(t):
            f_str = None if variant in ("no_structure", "combined") else f_str_base
            out = ablation_layer(variant, PSLayerState(f_pos=t, f_str=f_str), params)
            target = out.f_pos if out.f_str is None else tc.add(out.f_pos, out.f_str)
            return tc.sum_all(tc.mul(target, mix_single))
        return fn

    cases = [("ps_update", run_full),
             ("ablation_no_structure", run_variant("no_structure", single)),
             ("ablation_combined", run_variant("combined", single)),
             ("ablation_cross_pos_to_str", run_variant("cross_pos_to_str", p2s)),
             ("ablation_cross_str_to_pos", run_variant("cross_str_to_pos", s2p)),
             ("ablation_cross_two_way", run_variant("cross_two_way", both))]
    results = []
    for name, fn in cases:
        worst = 0.0
        for trial in range(instances):
            x = Tensor(_gen(seed, 8, trial).normal(size=(8, d)))
            worst = max(worst, tc.grad_check(fn, x, eps=EPS))
        results.append(CheckResult(name, instances, worst))
    return results


def check_full_model(instances, seed=0):
    cfg = ModelConfig(n_points=8, n_condensed=4, n_classes=3, embed_dim=6,
                      knn_k=2, n_ps_layers=1, topk=2)
    model = build(cfg, seed=seed)

    def fn(t):
        return cross_entropy_loss(forward_classify(model, t), 1)

    worst = 0.0
    for trial in range(instances):
        x = Tensor(_gen(seed, 9, trial).normal(size=(8, 3)))
        worst = max(worst, tc.grad_check(fn, x, eps=EPS))

    seg_cfg = ModelConfig(n_points=8, n_condensed=8, n_classes=3, embed_dim=6,
                          knn_k=2, n_ps_layers=1, topk=2, task="segment",
                          structure_only=True)
    seg_model = build(seg_cfg, seed=seed)
    labels = _gen(seed, 10).integers(0, 3, size=8)

    def seg_fn(t):
        return tc.cross_entropy_rows(forward_segment(seg_model, t), labels)

    seg_worst = 0.0
    for trial in range(instances):
        x = Tensor(_gen(seed, 11, trial).normal(size=(8, 3)))
        seg_worst = max(seg_worst, tc.grad_check(seg_fn, x, eps=EPS))

    return [CheckResult("forward_classify_loss", instances, worst),
            CheckResult("forward_segment_loss", instances, seg_worst)]


def run_suite(instances=100, seed=0):
    """Full verification sweep; returns one result per check."""
    results = []
    results.extend(check_operations(instances, seed))
    results.extend(check_attention(instances, seed))
    results.extend(check_condense(instances, seed))
    results.extend(check_ps_layers(instances, seed))
    results.extend(check_full_model(instances, seed))
    return results


def format_report(results):
    lines = []
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok " if r.passed else "FAIL"
        lines.append(f"{status} {r.name:<{width}}  n={r.instances:<4d} "
                     f"max_rel_err={r.max_error:.3e}  (tol {r.tolerance:g})")
    return "\n".join(lines)
