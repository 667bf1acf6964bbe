import json

import numpy as np
import pytest

from bnexpand.arch import (
    BinaryBranch,
    Identity,
    ResidualUnit,
    Sequential,
    Unit,
    build_model,
    dump_spec,
    enumerate_partitions,
    group_forward_multi,
    group_forward_single,
    layerwise_forward,
    load_spec,
    override_spec,
    partition_space_size,
    spec_digest,
    spec_from_dict,
    variant_partition,
)
from bnexpand.errors import DimensionError, SpecError
from bnexpand.quant import QuantSpec, binarize_weights_dense, quantize_activation
from bnexpand.tensor import (
    BatchNormState,
    ConvGeometry,
    batchnorm_forward,
    conv2d_ref,
    global_avgpool,
    linear_ref,
)


# Test helpers.

class Scale(Unit):
    def __init__(self, factor):
        self.factor = factor

    def forward(self, x, train=False):
        return self.factor * x

    def backward(self, grad):
        return self.factor * grad


def tiny_config(kinds=("basic", "basic"), groups="v1", bases=2, k=2,
                strides=None):
    strides = strides or [1] * len(kinds)
    channels = 4
    blocks = []
    for kind, stride in zip(kinds, strides):
        if stride > 1:
            channels *= 2
        blocks.append({"kind": kind, "channels": channels, "stride": stride})
    return {"name": "tiny", "input": [3, 8, 8], "classes": 5,
            "stem": {"channels": 4}, "blocks": blocks, "groups": groups,
            "bases": bases, "quant": {"k": k}}


def tiny_spec(**kwargs):
    return spec_from_dict(tiny_config(**kwargs))


def batch(seed=0, n=2, shape=(3, 8, 8)):
    return np.random.default_rng(seed).standard_normal((n,) + shape)


def branches(count, geom, q, seed=0):
    rng = np.random.default_rng(seed)
    return [BinaryBranch(f"b{i}", geom, q, rng, np.float64)
            for i in range(count)]


def base_params(unit):
    return [p for u in unit.walk() for p in u.own_params()]


def bn_eval(x, state, prefix):
    bn = BatchNormState(x.shape[1], np.float64)
    bn.gamma[:] = state[f"{prefix}.gamma"]
    bn.delta[:] = state[f"{prefix}.delta"]
    bn.running_mean[:] = state[f"{prefix}.running_mean"]
    bn.running_var[:] = state[f"{prefix}.running_var"]
    return batchnorm_forward(x, bn, train=False)[0]


# Tests.

@pytest.mark.parametrize("variant,partition,mode", [
    ("v1", (1, 1, 1, 1), "groupwise"),
    ("v2", (2, 2), "groupwise"),
    ("v3", (4,), "ensemble"),
    ("layerwise", (1, 1, 1, 1), "layerwise"),
])
def test_variant_partition(variant, partition, mode):
    assert variant_partition(4, variant) == (partition, mode)
    model = build_model(tiny_spec(kinds=("basic",) * 4, groups=variant), 0,
                        np.float64)
    assert [len(g.blocks) for g in model.spec.groups] == list(partition)
    assert len(model.groups) == len(partition)


def test_variant_partition_odd():
    assert variant_partition(5, "v2") == ((2, 2, 1), "groupwise")
    with pytest.raises(SpecError):
        variant_partition(4, "v4")


def test_partition_space():
    assert partition_space_size(1) == 1
    assert partition_space_size(4) == 8
    assert partition_space_size(6) == 32
    with pytest.raises(ValueError):
        partition_space_size(0)

    partitions = list(enumerate_partitions(4))
    assert len(partitions) == len(set(partitions)) == 8
    assert all(sum(p) == 4 for p in partitions)
    assert (4,) in partitions and (1, 1, 1, 1) in partitions
    assert (1, 2, 1) in partitions


def test_layerwise_single_branch():
    q = QuantSpec(k=2)
    geom = ConvGeometry(3, 4, 3, 3, padding=1, in_h=5, in_w=5)
    [branch] = branches(1, geom, q)
    x = quantize_activation(batch(shape=(3, 5, 5)), q)
    assert np.array_equal(layerwise_forward(x, [branch], np.ones(1)),
                          branch.forward(x))


def test_layerwise_identical_branches():
    q = QuantSpec(k=2)
    geom = ConvGeometry(3, 4, 3, 3, padding=1, in_h=5, in_w=5)
    first, *others = branches(3, geom, q)
    for other in others:
        other.weight.value = first.weight.value
    x = quantize_activation(batch(shape=(3, 5, 5)), q)
    np.testing.assert_allclose(layerwise_forward(x, [first, *others], np.ones(3)),
                               3 * first.forward(x), rtol=1e-12)


def test_layerwise_matches_reference():
    q = QuantSpec(k=2)
    geom = ConvGeometry(3, 4, 3, 3, stride=2, padding=1, in_h=6, in_w=6)
    pair = branches(2, geom, q, seed=3)
    x = quantize_activation(batch(shape=(3, 6, 6)), q)
    scales = np.array([0.7, -0.2])
    expected = sum(s * conv2d_ref(x, binarize_weights_dense(b.weight.value), geom)
                   for s, b in zip(scales, pair))
    np.testing.assert_allclose(layerwise_forward(x, pair, scales), expected,
                               rtol=1e-12)


def test_layerwise_geometry_mismatch():
    q = QuantSpec(k=2)
    a = branches(1, ConvGeometry(3, 4, 3, 3, padding=1, in_h=5, in_w=5), q)
    b = branches(1, ConvGeometry(3, 4, 1, 1, in_h=5, in_w=5), q)
    with pytest.raises(DimensionError):
        layerwise_forward(np.zeros((1, 3, 5, 5)), a + b, np.ones(2))


def test_group_single_zero_scales():
    x = batch()
    out = group_forward_single(x, [Scale(2.0), Scale(-3.0)], np.zeros(2))
    assert np.array_equal(out, x)


def test_group_single_hand_assembly():
    x = batch()
    theta = np.array([0.3, 1.5])
    out = group_forward_single(x, [Scale(2.0), Scale(-3.0)], theta)
    np.testing.assert_allclose(out, 0.3 * 2.0 * x + 1.5 * -3.0 * x + x)


def test_group_single_shape_mismatch():
    class Shrink(Unit):
        def forward(self, x, train=False):
            return x[:, :1]

    with pytest.raises(DimensionError) as e:
        group_forward_single(batch(), [Shrink()], np.ones(1))
    assert e.value.axis == "skip"


def test_group_single_real_blocks():
    model = build_model(tiny_spec(), 1, np.float64)
    group = model.groups[0]
    x = quantize_activation(batch(shape=(4, 8, 8)), model.spec.quant)
    theta = np.array([0.4, 0.9])
    expected = (0.4 * group.bases[0].forward(x) + 0.9 * group.bases[1].forward(x)
                + group.shortcut.forward(x))
    np.testing.assert_allclose(group_forward_single(x, group.bases, theta,
                                                    group.shortcut),
                               expected, rtol=1e-12)


def test_group_aggregation_linear():
    x = batch()
    bases = [Scale(2.0), Scale(-0.5), Scale(1.25)]
    theta = np.array([0.2, 0.3, 0.5])
    base = group_forward_single(x, bases, theta) - x
    scaled = group_forward_single(x, bases, 4.0 * theta) - x
    np.testing.assert_allclose(scaled, 4.0 * base)


def test_group_multi_reduces_to_single():
    x = batch()
    theta = np.array([0.5, 0.5])
    chains = [Sequential([ResidualUnit(Sequential([Scale(c)]), Identity())])
              for c in (2.0, -1.0)]
    single = group_forward_single(x, [Scale(2.0), Scale(-1.0)], theta)
    np.testing.assert_allclose(group_forward_multi(x, chains, theta), single)


def test_group_multi_two_blocks():
    x = batch()
    chain = Sequential([ResidualUnit(Sequential([Scale(2.0)]), Identity()),
                        ResidualUnit(Sequential([Scale(3.0)]), Identity())])
    out = group_forward_multi(x, [chain], np.ones(1))
    np.testing.assert_allclose(out, 4.0 * (3.0 * x))


def test_group_multi_chain_mismatch():
    short = Sequential([Scale(1.0)])
    long = Sequential([Scale(1.0), Scale(1.0)])
    with pytest.raises(DimensionError):
        group_forward_multi(batch(), [short, long], np.ones(2))


def test_group_scales_length():
    with pytest.raises(DimensionError):
        group_forward_single(batch(), [Scale(1.0)], np.ones(2))


def test_build_deterministic():
    spec = tiny_spec(groups="v2", strides=[1, 2])
    x = batch()
    a = build_model(spec, 7).forward(x.astype(np.float32))
    b = build_model(spec, 7).forward(x.astype(np.float32))
    c = build_model(spec, 8).forward(x.astype(np.float32))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_forward_repeatable():
    model = build_model(tiny_spec(groups="v3"), 0)
    x = batch().astype(np.float32)
    assert np.array_equal(model.forward(x), model.forward(x))


def test_workers_do_not_change_output():
    model = build_model(tiny_spec(bases=3), 0, np.float64)
    x = batch()
    serial = model.forward(x)
    model.workers = 3
    assert np.array_equal(model.forward(x), serial)


def test_bases_are_homogeneous():
    model = build_model(tiny_spec(groups="v2", bases=3, strides=[1, 2]), 0)
    for group in model.groups:
        shapes = [[p.value.shape for p in base_params(base)]
                  for base in group.bases]
        assert all(s == shapes[0] for s in shapes)


def test_no_bias_parameters():
    model = build_model(tiny_spec(groups="layerwise", bases=2, strides=[1, 2]), 0)
    suffixes = (".weight", ".gamma", ".delta", ".theta", ".lambda")
    names = [p.name for p in model.parameters()]
    assert names and all(name.endswith(suffixes) for name in names)
    assert len(set(names)) == len(names)
    assert any(name.endswith(".lambda") for name in names)
    assert not any(name.endswith(".theta") for name in names)


def test_full_precision_matches_parent_network():
    spec = tiny_spec(bases=1, k=32, strides=[1, 2])
    model = build_model(spec, 3, np.float64)
    state = model.state_dict()
    rng = np.random.default_rng(4)
    for name, value in state.items():
        if name.endswith(("running_mean", "delta")):
            value[...] = rng.standard_normal(value.shape)
        elif name.endswith("running_var"):
            value[...] = rng.uniform(0.5, 2.0, value.shape)
    model.load_state_dict(state)

    x = batch()
    y = bn_eval(conv2d_ref(x, state["stem.conv.weight"], spec.stem_geometry),
                state, "stem.bn")
    for p, block in enumerate(spec.block_specs):
        prefix = f"groups.{p}.bases.0"
        h = y
        for i, geom in enumerate(block.layers):
            h = conv2d_ref(h, state[f"{prefix}.conv{i}.weight"], geom)
            h = bn_eval(h, state, f"{prefix}.bn{i}")
        skip = y
        if block.projection is not None:
            skip = conv2d_ref(y, state[f"groups.{p}.shortcut.conv.weight"],
                              block.projection)
            skip = bn_eval(skip, state, f"groups.{p}.shortcut.bn")
        y = h + skip
    logits = linear_ref(global_avgpool(y), state["head.weight"])

    np.testing.assert_allclose(model.forward(x), logits, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_packed_engine_matches_reference(k):
    model = build_model(tiny_spec(groups="v2", k=k, strides=[1, 2]), 0,
                        np.float64)
    x = batch()
    reference = model.forward(x)
    model.engine = "packed"
    np.testing.assert_allclose(model.forward(x), reference, rtol=1e-6,
                               atol=1e-9)


def test_unknown_engine():
    model = build_model(tiny_spec(), 0)
    with pytest.raises(ValueError):
        model.engine = "gpu"


def test_bundled_specs():
    resnet = load_spec("cifar_resnet")
    assert len(resnet.blocks) == 6
    assert resnet.partition == (1,) * 6
    assert resnet.residual
    plain = load_spec("mnist_plain")
    assert not plain.residual
    assert plain.input_shape == (1, 28, 28)
    assert plain.classifier_features == 512


def test_spec_roundtrip(tmp_path):
    spec = tiny_spec(groups=[1, 1], strides=[1, 2])
    assert spec_from_dict(json.loads(dump_spec(spec))) == spec
    path = tmp_path / "tiny.json"
    path.write_text(dump_spec(spec))
    assert load_spec(path) == spec
    assert spec_digest(load_spec(path)) == spec_digest(spec)


def test_spec_digest_changes_with_overrides():
    spec = tiny_spec()
    assert spec_digest(override_spec(spec, bases=5)) != spec_digest(spec)
    assert spec_digest(override_spec(spec)) == spec_digest(spec)


def test_override_spec():
    spec = override_spec(tiny_spec(kinds=("basic",) * 4), bases=5, k=4,
                         beta=2.0, variant="v2")
    assert spec.bases == 5
    assert spec.quant == QuantSpec(4, 2.0)
    assert spec.partition == (2, 2)


@pytest.mark.parametrize("change", [
    {"groups": [1, 2]},
    {"groups": [0, 2]},
    {"bases": 0},
    {"quant": {"k": 0}},
    {"blocks": [{"kind": "inception", "channels": 4}]},
    {"mode": "ensemble", "groups": [1, 1]},
    {"mode": "layerwise", "groups": [2]},
])
def test_invalid_specs(change):
    config = tiny_config()
    config.update(change)
    with pytest.raises(SpecError):
        spec_from_dict(config)


def test_missing_spec(tmp_path):
    with pytest.raises(SpecError):
        load_spec(tmp_path / "nope.json")
    with pytest.raises(SpecError):
        load_spec("no_such_bundled_spec")


def test_bottleneck_block():
    spec = tiny_spec(kinds=("bottleneck", "bottleneck"), strides=[1, 2])
    first, second = spec.block_specs
    assert [g.kernel_h for g in first.layers] == [1, 3, 1]
    assert first.layers[0].out_channels == 1
    assert second.projection is not None and second.projection.stride == 2
    logits = build_model(spec, 0).forward(batch().astype(np.float32))
    assert logits.shape == (2, 5)


def test_plain_model():
    model = build_model(load_spec("mnist_plain"), 0)
    x = np.random.default_rng(0).standard_normal((2, 1, 28, 28))
    assert model.forward(x.astype(np.float32)).shape == (2, 10)
