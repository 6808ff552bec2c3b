"""BlockNet: construction, forward recomposition oracle, resource accounting."""

import numpy as np
import pytest

import amalgam.blocknet as B
import amalgam.tensor as T
from amalgam.blocknet import BlockNetSpec, HeadSpec
from amalgam.errors import GeometryError, ShapeError, SpecError
from amalgam.tensor import Tensor


def tiny_spec(heads=(HeadSpec("a", 2),)):
    return BlockNetSpec(
        input_shape=(2, 9, 9),
        stem_channels=3,
        block_channels=(3, 5),
        block_strides=(1, 2),
        heads=tuple(heads),
    )


class TestSpecValidation:
    def test_default_spec_schedule(self):
        spec = B.default_spec({"t": 2})
        assert spec.spatial_schedule() == ((17, 17), (9, 9), (5, 5))

    def test_fewer_than_two_blocks_rejected(self):
        with pytest.raises(SpecError):
            BlockNetSpec((3, 9, 9), 4, (8,), (1,), (HeadSpec("t", 2),))

    def test_bad_stride_rejected(self):
        with pytest.raises(SpecError):
            BlockNetSpec((3, 9, 9), 4, (8, 8), (1, 3), (HeadSpec("t", 2),))

    def test_duplicate_tasks_rejected(self):
        with pytest.raises(SpecError):
            tiny_spec((HeadSpec("a", 2), HeadSpec("a", 3)))

    def test_single_class_head_rejected(self):
        with pytest.raises(SpecError):
            tiny_spec((HeadSpec("a", 1),))

    def test_even_size_with_stride_two_is_geometry_error(self):
        # (16 - 1) / 2 + 1 is not integral under the strict conv contract
        with pytest.raises(GeometryError):
            BlockNetSpec((3, 16, 16), 4, (4, 8), (1, 2), (HeadSpec("t", 2),))

    def test_widen_spec_rounds_up(self):
        spec = B.widen_spec(B.default_spec({"t": 2}), 1.5)
        assert spec.stem_channels == 12
        assert spec.block_channels == (12, 24, 48)


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = B.build_blocknet(tiny_spec(), seed=9)
        b = B.build_blocknet(tiny_spec(), seed=9)
        assert a.params.keys() == b.params.keys()
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_different_seeds_differ(self):
        a = B.build_blocknet(tiny_spec(), seed=1)
        b = B.build_blocknet(tiny_spec(), seed=2)
        assert any(
            not np.array_equal(a.params[name].data, b.params[name].data) for name in a.params
        )

    def test_three_blocks_yield_three_maps_with_spec_channels(self):
        spec = BlockNetSpec((3, 9, 9), 8, (8, 16, 32), (1, 2, 2), (HeadSpec("t", 2),))
        net = B.build_blocknet(spec, seed=0)
        feats = B.forward(net, Tensor(np.zeros((1, 3, 9, 9))))
        assert len(feats.maps) == 3
        assert [m.shape[1] for m in feats.maps] == [8, 16, 32]

    def test_head_biases_start_at_zero(self):
        net = B.build_blocknet(tiny_spec(), seed=4)
        assert np.array_equal(net.params["head.a.b"].data, np.zeros(2))


class TestForward:
    def test_zero_input_gives_zero_logits(self):
        net = B.build_blocknet(tiny_spec(), seed=5)
        feats = B.forward(net, Tensor(np.zeros((3, 2, 9, 9))))
        assert np.array_equal(feats.logits["a"].data, np.zeros((3, 2)))

    def test_batch_dim_carried_through(self):
        net = B.build_blocknet(tiny_spec(), seed=5)
        feats = B.forward(net, Tensor(np.zeros((2, 2, 9, 9))))
        assert all(m.shape[0] == 2 for m in feats.maps)
        assert feats.logits["a"].shape == (2, 2)

    def test_shape_mismatch(self):
        net = B.build_blocknet(tiny_spec(), seed=5)
        with pytest.raises(ShapeError):
            B.forward(net, Tensor(np.zeros((1, 3, 9, 9))))

    def test_recomposition_oracle_bitwise(self):
        """Forward equals a literal re-wiring from the same primitive ops."""
        spec = BlockNetSpec(
            input_shape=(2, 9, 9),
            stem_channels=3,
            block_channels=(3, 5),
            block_strides=(1, 2),
            heads=(HeadSpec("a", 2), HeadSpec("b", 3)),
        )
        net = B.build_blocknet(spec, seed=17)
        rng = np.random.default_rng(18)
        x = Tensor(rng.uniform(0, 1, size=(2, 2, 9, 9)))
        feats = B.forward(net, x)

        p = net.params
        h = T.relu(T.conv2d(x, p["stem.w"], stride=1, padding=1))
        expected_maps = []
        for i, stride in enumerate(spec.block_strides):
            inner = T.relu(T.conv2d(h, p[f"block{i}.conv1.w"], stride=stride, padding=1))
            inner = T.conv2d(inner, p[f"block{i}.conv2.w"], stride=1, padding=1)
            key = f"block{i}.shortcut.w"
            shortcut = T.conv2d(h, p[key], stride=stride, padding=0) if key in p else h
            h = T.relu(T.add(inner, shortcut))
            expected_maps.append(h)
        pooled = T.reduce("mean", h, axes=(2, 3))
        for i, m in enumerate(expected_maps):
            assert np.array_equal(feats.maps[i].data, m.data)
        for head in spec.heads:
            logits = T.linear(pooled, p[f"head.{head.task_id}.w"], p[f"head.{head.task_id}.b"])
            assert np.array_equal(feats.logits[head.task_id].data, logits.data)

    def test_residual_identity_when_block_convs_zero(self):
        # block0 keeps channels and stride 1 -> identity shortcut
        net = B.build_blocknet(tiny_spec(), seed=6)
        net.params["block0.conv1.w"].data[...] = 0.0
        net.params["block0.conv2.w"].data[...] = 0.0
        assert "block0.shortcut.w" not in net.params
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(0, 1, size=(2, 2, 9, 9)))
        stem = T.relu(T.conv2d(x, net.params["stem.w"], stride=1, padding=1))
        feats = B.forward(net, x)
        assert np.array_equal(feats.maps[0].data, stem.data)

    def test_forward_is_pure(self):
        net = B.build_blocknet(tiny_spec(), seed=8)
        before = {k: v.data.copy() for k, v in net.params.items()}
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(0, 1, size=(1, 2, 9, 9)))
        a = B.forward(net, x)
        b = B.forward(net, x)
        assert np.array_equal(a.logits["a"].data, b.logits["a"].data)
        for k in before:
            assert np.array_equal(net.params[k].data, before[k])


def spec_param_formula(spec: BlockNetSpec) -> int:
    """Independent closed-form parameter count."""
    c_in = spec.input_shape[0]
    total = spec.stem_channels * c_in * 9
    prev = spec.stem_channels
    for ch, stride in zip(spec.block_channels, spec.block_strides):
        total += ch * prev * 9 + ch * ch * 9
        if prev != ch or stride != 1:
            total += ch * prev
        prev = ch
    for head in spec.heads:
        total += prev * head.num_classes + head.num_classes
    return total


class TestResources:
    def test_one_by_one_conv_closed_form(self):
        """A 1x1 conv mixing 2 channels into 3 over a 4x4 map costs exactly
        6 parameters and 2*6*16 = 192 flops."""
        spec = BlockNetSpec(
            input_shape=(2, 4, 4),
            stem_channels=2,
            block_channels=(3, 3),
            block_strides=(1, 1),
            heads=(HeadSpec("t", 2),),
        )
        net = B.build_blocknet(spec, seed=0)
        res = B.count_resources(net)
        by_name = {name: (params, macs) for name, params, macs in res.per_layer}
        params, macs = by_name["block0.shortcut.w"]
        assert params == 6
        assert 2 * macs == 192

    def test_params_equal_sum_of_tensor_sizes(self):
        net = B.build_blocknet(B.default_spec({"x": 2, "y": 3}), seed=1)
        res = B.count_resources(net)
        assert res.params == sum(p.data.size for p in net.params.values())

    def test_closed_form_formula_and_channel_doubling(self):
        base = tiny_spec()
        doubled = BlockNetSpec(
            input_shape=base.input_shape,
            stem_channels=base.stem_channels * 2,
            block_channels=tuple(c * 2 for c in base.block_channels),
            block_strides=base.block_strides,
            heads=base.heads,
        )
        res_base = B.count_resources(B.build_blocknet(base, 0))
        res_doubled = B.count_resources(B.build_blocknet(doubled, 0))
        assert res_base.params == spec_param_formula(base)
        assert res_doubled.params == spec_param_formula(doubled)
        # conv params scale by 4; heads and shortcuts keep the ratio near 4
        assert 3.5 < res_doubled.params / res_base.params < 4.1

    def test_extra_head_costs_exactly_its_linear_layer(self):
        one = B.count_resources(B.build_blocknet(tiny_spec((HeadSpec("a", 2),)), 0))
        two = B.count_resources(
            B.build_blocknet(tiny_spec((HeadSpec("a", 2), HeadSpec("b", 4))), 0)
        )
        d = 5  # final block channels
        assert two.params - one.params == d * 4 + 4

    def test_flops_are_twice_macs(self):
        net = B.build_blocknet(tiny_spec(), seed=2)
        res = B.count_resources(net)
        assert res.flops_per_image == 2 * sum(m for _, _, m in res.per_layer)
