"""Encoder modules: isolation wiring, forward equivalence, shape audits."""

import numpy as np
import pytest

from infostack.encoders import (LayerSpec, StackConfig, audit_audio_outline,
                                audit_shapes, build_stack, encode,
                                stack_forward)
from infostack.rng import SeededRng
from infostack.tensor import ShapeError, Tensor, backward, relu, tsum, mul


def module_specs(cin, cout, stride=2):
    return [LayerSpec("conv1d", cin, cout, 4, stride, 1), LayerSpec("relu"),
            LayerSpec("conv1d", cout, cout, 3, 1, 1)]


def make_stack(widths=(8, 16, 16, 16), stride=2, rng=None):
    specs = [module_specs(widths[i], widths[i + 1], stride)
             for i in range(len(widths) - 1)]
    config = StackConfig(specs, "sequence", input_channels=widths[0])
    return config, build_stack(config, rng or SeededRng(0))


class TestBuildStack:
    def test_single_module(self):
        config = StackConfig([[LayerSpec("conv1d", 4, 6, 3, 1, 1)]],
                             "sequence", input_channels=4)
        stack = build_stack(config, SeededRng(0))
        assert len(stack) == 1 and stack[0].out_dim == 6

    def test_parameter_sets_disjoint(self):
        _, stack = make_stack()
        ids = [set(map(id, m.parameters())) for m in stack]
        names = [set(p.name for p in m.parameters()) for m in stack]
        assert ids[0] & ids[1] == set() and ids[1] & ids[2] == set()
        assert names[0] & names[1] == set()

    def test_channel_mismatch_names_boundary(self):
        specs = [module_specs(8, 16), module_specs(32, 32)]
        config = StackConfig(specs, "sequence", input_channels=8)
        with pytest.raises(ShapeError, match="module 1"):
            build_stack(config, SeededRng(0))

    def test_init_deterministic_per_seed(self):
        _, a = make_stack(rng=SeededRng(5))
        _, b = make_stack(rng=SeededRng(5))
        for ma, mb in zip(a, b):
            assert ma.param_hash() == mb.param_hash()

    def test_init_bounds_follow_fan(self):
        config = StackConfig([[LayerSpec("conv1d", 4, 8, 3, 1, 0)]],
                             "sequence", input_channels=4)
        stack = build_stack(config, SeededRng(1))
        w = stack[0].params["0.0.w"].data
        bound = np.sqrt(6.0 / (4 * 3 + 8 * 3))
        assert np.abs(w).max() <= bound
        assert np.array_equal(stack[0].params["0.0.b"].data, np.zeros(8))


class TestEncode:
    def test_single_relu_module(self):
        config = StackConfig([[LayerSpec("relu")]], "sequence", input_channels=0)
        stack = build_stack(config, SeededRng(0))
        out = encode(stack[0], Tensor(np.array([[[-1.0, 2.0]]])))
        assert np.array_equal(out.data, [[[0.0, 2.0]]])

    def test_gradients_stop_at_module_boundary(self):
        _, stack = make_stack()
        x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 16)))
        z0 = encode(stack[0], x)
        z1 = encode(stack[1], z0)
        loss = tsum(mul(z1, z1))
        params = stack[0].parameters() + stack[1].parameters()
        grads = backward(loss, params=params)
        for p in stack[0].parameters():
            assert np.all(grads[p] == 0.0)
        assert any(np.any(grads[p] != 0.0) for p in stack[1].parameters())

    def test_forward_equals_unblocked_composition(self):
        config, stack = make_stack()
        x = Tensor(np.random.default_rng(1).normal(size=(3, 8, 32)))
        blocked = stack_forward(stack, x)
        h = x
        for mod in stack:
            h = mod.apply_layers(h)  # no grad_block anywhere
        assert np.array_equal(blocked.data, h.data)  # 0 ulps

    def test_intermediates_match_chained_encode(self):
        config, stack = make_stack()
        x = Tensor(np.random.default_rng(2).normal(size=(2, 8, 32)))
        out, inter = stack_forward(stack, x, return_intermediates=True)
        h = x
        for mod, z in zip(stack, inter):
            h = encode(mod, h)
            assert np.array_equal(h.data, z.data)
        assert out is inter[-1]


class TestShapeAudit:
    def test_runtime_shapes_match_audit(self):
        config, stack = make_stack()
        entries = audit_shapes(config, (32,))
        x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 32)))
        _, inter = stack_forward(stack, x, return_intermediates=True)
        per_module = {}
        for e in entries:
            per_module[e.module] = e  # keeps the last layer of each module
        for z, m in zip(inter, range(len(stack))):
            assert z.shape[2:] == per_module[m].out_extent

    def test_audio_outline_rows_1_to_4_match_row_5_flagged(self):
        rows = audit_audio_outline()
        assert [r.computed for r in rows[:4]] == [4095, 1023, 512, 257]
        assert all(r.ok for r in rows[:4])
        assert not rows[4].ok
        assert rows[4].declared == 128 and rows[4].computed == 130

    def test_mean_pool_layer_collapses_extent(self):
        config = StackConfig(
            [[LayerSpec("conv1d", 4, 8, 3, 1, 1), LayerSpec("mean_pool")]],
            "sequence", input_channels=4)
        entries = audit_shapes(config, (10,))
        assert entries[-1].out_extent == ()


class TestFreeze:
    def test_param_hash_constant_after_freeze(self):
        _, stack = make_stack()
        stack[0].freeze()
        h0 = stack[0].param_hash()
        x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 16)))
        z0 = encode(stack[0], x)
        assert not z0.requires_grad  # frozen forward builds no graph
        assert stack[0].param_hash() == h0
