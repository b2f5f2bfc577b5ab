"""Model assembly: builds, forward shape contracts, invariance properties,
checkpoint round-trips, and end-to-end training sanity."""

import numpy as np
import pytest

import psformer.tensor as tc
from psformer import rng as rngmod
from psformer.errors import ConfigError, ContractError, DimensionError
from psformer.model import (ModelConfig, _segment_logits, _trunk_forward,
                            build, cross_entropy_loss, flatten_parameters,
                            forward_classify, forward_multi_scale,
                            forward_segment, load_checkpoint,
                            named_parameters, save_checkpoint)
from psformer.ps_layer import PSLayerState
from psformer.tensor import ComputeGraph, Tensor


def toy_config(**overrides):
    base = dict(n_points=12, n_condensed=6, n_classes=4, embed_dim=8,
                knn_k=3, n_ps_layers=2, topk=3)
    base.update(overrides)
    return ModelConfig(**base)


def toy_cloud(n=12, seed=0, spread=1.0):
    return rngmod.stream(seed, rngmod.GENERIC).normal(size=(n, 3)) * spread


class TestBuild:
    def test_same_seed_is_bitwise_identical(self):
        a = build(toy_config())
        b = build(toy_config())
        for (name_a, pa), (name_b, pb) in zip(named_parameters(a), named_parameters(b)):
            assert name_a == name_b
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a = build(toy_config(), seed=0)
        b = build(toy_config(), seed=1)
        assert any(not np.array_equal(pa.data, pb.data)
                   for (_, pa), (_, pb) in zip(named_parameters(a), named_parameters(b)))

    def test_invalid_condensed_count(self):
        with pytest.raises(ConfigError):
            build(toy_config(n_condensed=13))

    def test_head_output_width(self):
        model = build(toy_config())
        assert model.head.w2.shape[1] == 4

    def test_init_respects_fan_in_bound(self):
        model = build(toy_config())
        for name, p in named_parameters(model):
            fan_in = p.data.shape[0] if p.data.ndim == 2 else None
            if fan_in:
                assert np.abs(p.data).max() <= 1.0 / np.sqrt(fan_in)

    def test_segment_requires_full_point_count(self):
        with pytest.raises(ConfigError):
            build(toy_config(task="segment", n_condensed=6))


class TestForwardClassify:
    def test_logits_shape(self):
        model = build(toy_config())
        logits = forward_classify(model, toy_cloud())
        assert logits.shape == (4,)

    def test_wrong_point_count(self):
        model = build(toy_config())
        with pytest.raises(DimensionError):
            forward_classify(model, toy_cloud(n=11))

    def test_permutation_invariance(self):
        model = build(toy_config())
        cloud = toy_cloud(seed=3)
        base = forward_classify(model, cloud).data
        rng = rngmod.stream(4, rngmod.GENERIC)
        for _ in range(5):
            perm = rng.permutation(12)
            permuted = forward_classify(model, cloud[perm]).data
            np.testing.assert_allclose(permuted, base, atol=1e-6)

    def test_gradcheck_through_full_model(self):
        cfg = toy_config(n_points=8, n_condensed=4, embed_dim=6, knn_k=2, topk=2,
                         n_ps_layers=1)
        model = build(cfg)

        def f(t):
            return cross_entropy_loss(forward_classify(model, t), 1)

        x = Tensor(toy_cloud(n=8, seed=5))
        assert tc.grad_check(f, x, eps=1e-5) < 1e-3

    def test_every_parameter_receives_gradient(self):
        model = build(toy_config())
        with ComputeGraph() as g:
            loss = cross_entropy_loss(forward_classify(model, toy_cloud(seed=6)), 0)
        g.backward(loss)
        missing = [name for name, p in named_parameters(model) if p.grad is None]
        assert missing == []


class TestForwardSegment:
    def seg_config(self, **overrides):
        return toy_config(task="segment", n_condensed=12, **overrides)

    def test_output_shape(self):
        model = build(self.seg_config())
        out = forward_segment(model, toy_cloud(seed=7))
        assert out.shape == (12, 4)

    def test_permutation_equivariance(self):
        model = build(self.seg_config())
        cloud = toy_cloud(seed=8)
        base = forward_segment(model, cloud).data
        perm = rngmod.stream(9, rngmod.GENERIC).permutation(12)
        permuted = forward_segment(model, cloud[perm]).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-6)

    def test_structure_only_ignores_position_stream(self):
        model = build(self.seg_config(structure_only=True))
        cloud_t = Tensor(toy_cloud(seed=10))
        _, state, sample = _trunk_forward(model, model.trunks[0], cloud_t)
        base = _segment_logits(model, state, sample.selected).data
        zeroed = PSLayerState(f_pos=Tensor(np.zeros(state.f_pos.shape)),
                              f_str=state.f_str, positions=state.positions)
        np.testing.assert_array_equal(
            _segment_logits(model, zeroed, sample.selected).data, base)

    def test_classify_entry_rejected(self):
        model = build(self.seg_config())
        with pytest.raises(ContractError):
            forward_classify(model, toy_cloud())


class TestVariants:
    def test_all_variants_produce_logits(self):
        cloud = toy_cloud(seed=11)
        for variant in ("no_structure", "combined", "cross_pos_to_str",
                        "cross_str_to_pos", "cross_two_way", "multi_scale"):
            model = build(toy_config(variant=variant))
            logits = forward_classify(model, cloud)
            assert logits.shape == (4,), variant

    def test_no_structure_stream_width_doubled(self):
        model = build(toy_config(variant="no_structure"))
        cloud_t = Tensor(toy_cloud(seed=12))
        feature, state, _ = _trunk_forward(model, model.trunks[0], cloud_t)
        assert state.f_str is None
        assert feature.shape == (6, 16)  # 2 * embed_dim

    def test_multi_scale_branch_sizes(self):
        cfg = toy_config(variant="multi_scale", n_points=16, n_condensed=4)
        model = build(cfg)
        assert model.trunks[0].n_condensed == 4
        assert model.trunks[1].n_condensed == 16
        logits = forward_multi_scale(model, toy_cloud(n=16, seed=13))
        assert logits.shape == (4,)

    def test_multi_scale_identical_branches_duplicate_feature(self):
        cfg = toy_config(variant="multi_scale", n_points=12, n_condensed=12)
        model = build(cfg)
        model.trunks[1] = model.trunks[0]
        cloud_t = Tensor(toy_cloud(seed=14))
        feat0, _, _ = _trunk_forward(model, model.trunks[0], cloud_t)
        pooled = tc.reduce_max_rows(feat0).data
        logits = forward_multi_scale(model, cloud_t)
        manual = model.head.apply(Tensor(np.concatenate([pooled, pooled])[None, :])).data
        np.testing.assert_allclose(logits.data, manual[0], atol=1e-12)

    def test_multi_scale_gradient_reaches_both_branches(self):
        cfg = toy_config(variant="multi_scale", n_points=12, n_condensed=6)
        model = build(cfg)
        with ComputeGraph() as g:
            loss = cross_entropy_loss(forward_multi_scale(model, toy_cloud(seed=15)), 2)
        g.backward(loss)
        for trunk in model.trunks:
            assert trunk.embed.w1.grad is not None
            assert np.abs(trunk.embed.w1.grad).max() > 0.0

    def test_multi_scale_entry_guard(self):
        model = build(toy_config())
        with pytest.raises(ContractError):
            forward_multi_scale(model, toy_cloud())


class TestLoss:
    def test_uniform_logits(self):
        loss = cross_entropy_loss(Tensor(np.zeros(4)), 0)
        assert float(loss.data) == pytest.approx(np.log(4.0), abs=1e-12)

    def test_training_reduces_loss_on_separable_set(self):
        # Two linearly separable blobs; 50 plain gradient steps must help.
        cfg = toy_config(n_points=8, n_condensed=4, n_classes=2, embed_dim=6,
                         knn_k=2, topk=2, n_ps_layers=1)
        model = build(cfg)
        buf, specs = flatten_parameters(model)
        rng = rngmod.stream(16, rngmod.GENERIC)
        clouds, labels = [], []
        for i in range(8):
            label = i % 2
            offset = np.array([2.0, 0, 0]) if label else np.array([-2.0, 0, 0])
            clouds.append(rng.normal(size=(8, 3)) * 0.3 + offset)
            labels.append(label)

        def total_loss():
            vals = []
            for pts, label in zip(clouds, labels):
                vals.append(float(cross_entropy_loss(
                    forward_classify(model, pts), label).data))
            return float(np.mean(vals))

        first = total_loss()
        grad = np.zeros_like(buf)
        for _ in range(50):
            grad[:] = 0.0
            for pts, label in zip(clouds, labels):
                with ComputeGraph() as g:
                    loss = cross_entropy_loss(forward_classify(model, pts), label)
                g.backward(loss)
                from psformer.model import clear_gradients, collect_gradients
                step = np.zeros_like(buf)
                collect_gradients(specs, step)
                clear_gradients(specs)
                grad += step
            buf -= 0.05 * grad / len(clouds)
        assert total_loss() < first


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        model = build(toy_config())
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        restored = load_checkpoint(path)
        for (name_a, pa), (name_b, pb) in zip(named_parameters(model),
                                              named_parameters(restored)):
            assert name_a == name_b
            assert pa.data.tobytes() == pb.data.tobytes()
        assert restored.config == model.config

    def test_round_trip_preserves_outputs(self, tmp_path):
        model = build(toy_config(variant="cross_two_way"))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        restored = load_checkpoint(path)
        cloud = toy_cloud(seed=17)
        np.testing.assert_array_equal(forward_classify(model, cloud).data,
                                      forward_classify(restored, cloud).data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        from psformer.errors import FormatError
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestShapeLattice:
    def test_config_lattice(self):
        # Small sweep over (N, T, d); every config must build and forward.
        for n in (8, 16):
            for t in (n, n // 2, n // 4):
                for d in (6, 10):
                    cfg = ModelConfig(n_points=n, n_condensed=t, n_classes=3,
                                      embed_dim=d, knn_k=3, n_ps_layers=1, topk=2)
                    model = build(cfg)
                    logits = forward_classify(model, toy_cloud(n=n, seed=n + t))
                    assert logits.shape == (3,)
