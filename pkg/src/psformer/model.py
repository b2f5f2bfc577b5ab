"""Full model assembly: embedding, self-attention blocks, condensation,
stacked position-to-structure layers, and task heads.

The classification path pools the concatenated feature streams over the
condensed points; the segmentation path keeps one output token per input
point (condensation count equals the point count) and concatenates each
point's feature with the pooled global feature. Ablation variants swap the
layer stack and stream widths but keep the head capacity constant.
"""

from __future__ import annotations

import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import rng as rngmod
from . import tensor as tc
from .attention import AttentionParams, dot_product_attention
from .condensation import CondensationConfig, CondenseParams, condense
from .errors import (ConfigError, ContractError, DimensionError, FormatError)
from .ps_layer import (CrossLayerParams, PSLayerParams, PSLayerState,
                       SingleStreamLayerParams, TwoLayerMap, ablation_layer,
                       ps_update)
from .tensor import Tensor

VARIANTS = ("full", "no_structure", "combined", "cross_pos_to_str",
            "cross_str_to_pos", "cross_two_way", "multi_scale")


@dataclass
class ModelConfig:
    n_points: int
    n_condensed: int
    n_classes: int
    embed_dim: int = 128
    knn_k: int = 16
    n_ps_layers: int = 2
    topk: int = 16
    task: str = "classify"
    variant: str = "full"
    structure_only: bool = False
    subtract: bool = True
    input_channels: int = 3
    seed: int = 0

    def validate(self):
        if self.n_points < 2:
            raise ConfigError("n_points must be at least 2")
        if not 1 <= self.n_condensed <= self.n_points:
            raise ConfigError(f"n_condensed={self.n_condensed} outside [1, {self.n_points}]")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be at least 2")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if not 1 <= self.knn_k <= self.n_points - 1:
            raise ConfigError(f"knn_k={self.knn_k} outside [1, {self.n_points - 1}]")
        if self.n_ps_layers < 1:
            raise ConfigError("n_ps_layers must be at least 1")
        if self.topk < 1:
            raise ConfigError("topk must be at least 1")
        if self.task not in ("classify", "segment"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.input_channels not in (3, 9):
            raise ConfigError("input_channels must be 3 or 9")
        if self.task == "segment":
            if self.n_condensed != self.n_points:
                raise ConfigError("segmentation requires n_condensed == n_points")
            if self.variant != "full":
                raise ConfigError("segmentation supports only the full variant")
        if self.structure_only and self.task != "segment":
            raise ConfigError("structure_only applies to the segmentation task")


@dataclass
class Trunk:
    """Embedding through layer stack for one branch."""

    embed: TwoLayerMap
    sa1: AttentionParams
    sa2: AttentionParams
    cond: CondenseParams
    layers: list
    n_condensed: int
    topk: int


@dataclass
class Model:
    config: ModelConfig
    trunks: list
    head: TwoLayerMap


def _effective_topk(requested, t):
    return max(1, min(requested, t - 1))


def _build_trunk(cfg, rng, n_condensed):
    d = cfg.embed_dim
    width = 2 * d if cfg.variant == "no_structure" else d
    embed = TwoLayerMap.init(rng, cfg.input_channels, width, width)
    sa1 = AttentionParams.init(rng, width, width)
    sa2 = AttentionParams.init(rng, width, width)
    cond = CondenseParams.init(rng, width, cfg.input_channels)
    topk = _effective_topk(cfg.topk, n_condensed)

    layers = []
    for _ in range(cfg.n_ps_layers):
        if cfg.variant in ("full", "multi_scale"):
            layers.append(PSLayerParams.init(rng, d, topk=topk, subtract=cfg.subtract))
        elif cfg.variant == "no_structure":
            layers.append(SingleStreamLayerParams.init(rng, width))
        elif cfg.variant == "combined":
            layers.append(SingleStreamLayerParams.init(rng, 2 * d))
        elif cfg.variant == "cross_pos_to_str":
            layers.append(CrossLayerParams.init(rng, d, ("pos_to_str",)))
        elif cfg.variant == "cross_str_to_pos":
            layers.append(CrossLayerParams.init(rng, d, ("str_to_pos",)))
        elif cfg.variant == "cross_two_way":
            layers.append(CrossLayerParams.init(rng, d, ("pos_to_str", "str_to_pos")))
    return Trunk(embed=embed, sa1=sa1, sa2=sa2, cond=cond, layers=layers,
                 n_condensed=n_condensed, topk=topk)


def build(config, seed=None):
    """Construct a model with deterministic uniform(+-1/sqrt(fan_in)) init."""
    config.validate()
    rng = rngmod.stream(config.seed if seed is None else seed, rngmod.PARAMS)
    d = config.embed_dim

    if config.variant == "multi_scale":
        trunks = [_build_trunk(config, rng, config.n_condensed),
                  _build_trunk(config, rng, config.n_points)]
        feat_width = 4 * d
    else:
        trunks = [_build_trunk(config, rng, config.n_condensed)]
        feat_width = 2 * d

    if config.task == "segment":
        point_width = d if config.structure_only else 2 * d
        head = TwoLayerMap.init(rng, 2 * point_width, max(1, d // 2), config.n_classes)
    else:
        head = TwoLayerMap.init(rng, feat_width, max(1, d // 2), config.n_classes)
    return Model(config=config, trunks=trunks, head=head)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@contextmanager
def _timed(timer, key):
    if timer is None:
        yield
        return
    t0 = time.perf_counter()
    try:
        yield
    finally:
        timer[key] = timer.get(key, 0.0) + (time.perf_counter() - t0)


def _as_cloud_tensor(model, cloud):
    t = cloud if isinstance(cloud, Tensor) else Tensor(cloud)
    cfg = model.config
    if t.ndim != 2 or t.shape[1] != cfg.input_channels:
        raise DimensionError(f"expected (N, {cfg.input_channels}) cloud, got {t.shape}")
    if t.shape[0] != cfg.n_points:
        raise DimensionError(f"expected {cfg.n_points} points, got {t.shape[0]}")
    return t


def _trunk_forward(model, trunk, cloud_t, timer=None):
    """Run one branch up to its final per-point feature matrix.

    Returns (feature, state, sample); ``state`` is None for the fused
    single-stream variants.
    """
    cfg = model.config
    with _timed(timer, "embed"):
        x = trunk.embed.apply(cloud_t)
    with _timed(timer, "self_attention"):
        for sa in (trunk.sa1, trunk.sa2):
            out, _ = dot_product_attention(x, sa)
            x = tc.add(x, out)

    ccfg = CondensationConfig(T=trunk.n_condensed, k=cfg.knn_k, subtract=cfg.subtract)
    with _timed(timer, "condense"):
        if cfg.variant == "no_structure":
            f_pos, _, sample = condense(x, cloud_t, ccfg, trunk.cond, with_structure=False)
            state = PSLayerState(f_pos=f_pos, f_str=None,
                                 positions=sample.centers.data[:, :3])
        else:
            f_pos, f_str, sample = condense(x, cloud_t, ccfg, trunk.cond)
            if cfg.variant == "combined":
                state = PSLayerState(f_pos=tc.concat_last(f_pos, f_str), f_str=None,
                                     positions=sample.centers.data[:, :3])
            else:
                state = PSLayerState(f_pos=f_pos, f_str=f_str,
                                     positions=sample.centers.data[:, :3])

    with _timed(timer, "ps_layers"):
        for layer in trunk.layers:
            if cfg.variant in ("full", "multi_scale"):
                state = ps_update(state, layer)
            else:
                state = ablation_layer(cfg.variant, state, layer)

    if state.f_str is None:
        feature = state.f_pos
    else:
        feature = tc.concat_last(state.f_pos, state.f_str)
    return feature, state, sample


def forward_classify(model, cloud, timer=None):
    """Logits for one cloud: trunk features, max-pool, two-layer head."""
    cfg = model.config
    if cfg.task != "classify":
        raise ContractError("forward_classify requires a classification config")
    if cfg.variant == "multi_scale":
        return forward_multi_scale(model, cloud, timer=timer)
    cloud_t = _as_cloud_tensor(model, cloud)
    feature, _, _ = _trunk_forward(model, model.trunks[0], cloud_t, timer=timer)
    with _timed(timer, "head"):
        pooled = tc.reduce_max_rows(feature)
        logits = model.head.apply(tc.reshape(pooled, (1, pooled.shape[0])))
        return tc.reshape(logits, (cfg.n_classes,))


def forward_multi_scale(model, cloud, timer=None):
    """Concatenate both branches' pooled features, then the shared head."""
    cfg = model.config
    if cfg.variant != "multi_scale":
        raise ContractError("forward_multi_scale requires the multi_scale variant")
    cloud_t = _as_cloud_tensor(model, cloud)
    pooled = []
    for trunk in model.trunks:
        feature, _, _ = _trunk_forward(model, trunk, cloud_t, timer=timer)
        pooled.append(tc.reduce_max_rows(feature))
    fused = tc.concat_last(pooled[0], pooled[1])
    with _timed(timer, "head"):
        logits = model.head.apply(tc.reshape(fused, (1, fused.shape[0])))
        return tc.reshape(logits, (cfg.n_classes,))


def _segment_logits(model, state, selected, timer=None):
    """Head of the segmentation path: per-point feature (structure stream
    alone under structure_only) joined with the pooled global feature."""
    cfg = model.config
    per_point = state.f_str if cfg.structure_only else tc.concat_last(state.f_pos, state.f_str)
    # Condensation emits tokens in selection order; with T == N that is a
    # permutation of the input, undone here so row i describes input point i.
    inverse = np.empty(cfg.n_points, dtype=np.int64)
    inverse[selected] = np.arange(cfg.n_points)
    per_point = tc.gather_rows(per_point, inverse, unique=True)

    with _timed(timer, "head"):
        pooled = tc.reduce_max_rows(per_point)
        stacked = tc.concat_last(per_point, tc.broadcast_row(pooled, cfg.n_points))
        return model.head.apply(stacked)


def forward_segment(model, cloud, timer=None):
    """Per-point logits in the original input order."""
    cfg = model.config
    if cfg.task != "segment":
        raise ContractError("forward_segment requires a segmentation config")
    cloud_t = _as_cloud_tensor(model, cloud)
    _, state, sample = _trunk_forward(model, model.trunks[0], cloud_t, timer=timer)
    return _segment_logits(model, state, sample.selected, timer=timer)


def forward(model, cloud, timer=None):
    if model.config.task == "segment":
        return forward_segment(model, cloud, timer=timer)
    return forward_classify(model, cloud, timer=timer)


def cross_entropy_loss(logits, label):
    """Stabilized -log softmax(logits)[label]."""
    return tc.cross_entropy_logits(logits, label)


# ---------------------------------------------------------------------------
# parameter registry and checkpoints
# ---------------------------------------------------------------------------

def named_parameters(model):
    """Deterministically ordered (name, tensor) pairs of trainable params."""
    out = []

    def walk(prefix, obj):
        if isinstance(obj, Tensor):
            if obj.requires_grad:
                out.append((prefix, obj))
        elif isinstance(obj, list):
            for i, item in enumerate(obj):
                walk(f"{prefix}.{i}", item)
        elif hasattr(obj, "__dataclass_fields__"):
            for f in fields(obj):
                walk(f"{prefix}.{f.name}", getattr(obj, f.name))

    walk("trunks", model.trunks)
    walk("head", model.head)
    return out


def flatten_parameters(model, buffer=None):
    """Pack parameters into one flat float64 vector and rebind each
    parameter's storage to a view of it.

    Passing an existing buffer (e.g. shared memory) makes external updates
    of the vector immediately visible to the model.
    """
    params = named_parameters(model)
    total = sum(p.data.size for _, p in params)
    if buffer is None:
        buffer = np.empty(total, dtype=np.float64)
    if buffer.shape != (total,):
        raise ContractError(f"parameter buffer must have shape ({total},)")
    specs = []
    offset = 0
    for name, p in params:
        size = p.data.size
        buffer[offset:offset + size] = p.data.reshape(-1)
        p.data = buffer[offset:offset + size].reshape(p.data.shape)
        specs.append((name, p, offset, size))
        offset += size
    return buffer, specs


def collect_gradients(specs, out):
    """Write parameter gradients (zeros when absent) into a flat vector."""
    for _, p, offset, size in specs:
        if p.grad is None:
            out[offset:offset + size] = 0.0
        else:
            out[offset:offset + size] = p.grad.reshape(-1)
    return out


def clear_gradients(specs):
    for _, p, _, _ in specs:
        p.grad = None


CHECKPOINT_MAGIC = b"PSF1"
CHECKPOINT_VERSION = 1
_CONFIG_BOOL = ("structure_only", "subtract")
_CONFIG_STR = ("task", "variant")


def _config_block(config):
    lines = []
    for f in sorted(fields(config), key=lambda f: f.name):
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_block(blob):
    values = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition(" = ")
        values[key] = raw
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in values:
            raise FormatError(f"checkpoint config is missing {f.name!r}")
        raw = values[f.name]
        if f.name in _CONFIG_BOOL:
            kwargs[f.name] = raw == "True"
        elif f.name in _CONFIG_STR:
            kwargs[f.name] = raw
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs)


def save_checkpoint(path, model):
    """Write magic, version, config block, then (name, shape, raw float64
    little-endian values) records. Round-trips bitwise."""
    params = named_parameters(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        block = _config_block(model.config)
        fh.write(struct.pack("<Q", len(block)))
        fh.write(block)
        fh.write(struct.pack("<Q", len(params)))
        for name, p in params:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", p.data.ndim))
            for extent in p.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (block_len,) = struct.unpack("<Q", fh.read(8))
        config = _parse_config_block(fh.read(block_len))
        model = build(config)
        params = dict(named_parameters(model))
        (count,) = struct.unpack("<Q", fh.read(8))
        if count != len(params):
            raise FormatError(f"checkpoint holds {count} parameters, model has {len(params)}")
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", fh.read(8))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            raw = fh.read(8 * int(np.prod(shape, dtype=np.int64)) if shape else 8)
            if name not in params:
                raise FormatError(f"unknown parameter {name!r} in checkpoint")
            tensor = params[name]
            if tensor.data.shape != shape:
                raise FormatError(f"parameter {name!r} shape {shape} != {tensor.data.shape}")
            tensor.data[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    return model
