"""Tests for the inverted-bottleneck model builder."""

import numpy as np
import pytest

import attnlab.autodiff as ad
from attnlab.layers import BatchNorm, Context
from attnlab.models import (
    AttentionSpec,
    BlockSpec,
    ModelConfig,
    build_model,
    channel_plan,
    copy_common_state,
    make_divisible,
)


def eval_logits(model, x):
    tape = ad.Tape()
    ctx = Context(tape=tape, training=False)
    return model(ctx, tape.leaf(x)).data


# ---------------------------------------------------------------------------
# rounding rule
# ---------------------------------------------------------------------------


def test_make_divisible_known_values():
    assert make_divisible(32) == 32
    assert make_divisible(32 * 0.35) == 16  # 11.2 -> 8 would lose >10%, bumps to 16
    assert make_divisible(16 * 0.35) == 8
    assert make_divisible(24 * 0.35) == 8
    assert make_divisible(96 * 0.35) == 32
    assert make_divisible(320 * 0.35) == 112
    assert make_divisible(1280 * 0.75) == 960


def test_make_divisible_invariants():
    for v in np.linspace(1, 400, 1200):
        out = make_divisible(v)
        assert out % 8 == 0 and out >= 8
        assert out >= 0.9 * v


def test_make_divisible_rejects_nonpositive():
    with pytest.raises(ad.ConfigError):
        make_divisible(0)


# ---------------------------------------------------------------------------
# channel plan
# ---------------------------------------------------------------------------


def test_channel_plan_035_table():
    cfg = ModelConfig(width_multiplier=0.35, variant="imagenet", num_classes=1000)
    plan = channel_plan(cfg)
    assert plan["stem"] == 16 and plan["stem_stride"] == 2
    assert plan["head"] == 1280
    outs = [b.out_channels for b in plan["blocks"]]
    assert outs == [8, 8, 8, 16, 16, 16, 24, 24, 24, 24, 32, 32, 32, 56, 56, 56, 112]
    strides = [b.stride for b in plan["blocks"]]
    assert strides == [1, 2, 1, 2, 1, 1, 2, 1, 1, 1, 1, 1, 1, 2, 1, 1, 1]


def test_channel_plan_width_one():
    cfg = ModelConfig(width_multiplier=1.0, variant="imagenet", num_classes=1000)
    plan = channel_plan(cfg)
    assert plan["stem"] == 32 and plan["head"] == 1280
    assert plan["blocks"][0] == BlockSpec(32, 16, 1, 1)
    assert plan["blocks"][-1].out_channels == 320


def test_head_never_narrows_below_base():
    for w in (0.35, 0.5, 0.75, 1.0):
        cfg = ModelConfig(width_multiplier=w, variant="imagenet", num_classes=1000)
        assert channel_plan(cfg)["head"] == 1280
    wide = ModelConfig(width_multiplier=1.4, variant="imagenet", num_classes=1000)
    assert channel_plan(wide)["head"] == make_divisible(1280 * 1.4)


def test_cifar_variant_keeps_early_resolution():
    ima = channel_plan(ModelConfig(variant="imagenet", num_classes=10))
    cif = channel_plan(ModelConfig(variant="cifar", num_classes=10))
    assert ima["stem_stride"] == 2 and cif["stem_stride"] == 1
    # first block of the second stage drops its stride 2 -> 1 on cifar
    assert ima["blocks"][1].stride == 2
    assert cif["blocks"][1].stride == 1
    # later downsampling stages are untouched
    assert [b.stride for b in ima["blocks"][3:]] == [b.stride for b in cif["blocks"][3:]]


def test_toy_plan():
    plan = channel_plan(ModelConfig(variant="toy", num_classes=10))
    assert plan["stem"] == 16 and plan["stem_stride"] == 1 and plan["head"] == 128
    assert [(b.in_channels, b.out_channels, b.expansion, b.stride) for b in plan["blocks"]] == [
        (16, 16, 1, 1),
        (16, 24, 6, 2),
    ]


def test_residual_rule():
    assert BlockSpec(16, 16, 1, 1).residual
    assert not BlockSpec(16, 24, 6, 2).residual
    assert not BlockSpec(16, 24, 6, 1).residual  # width change blocks the skip
    assert not BlockSpec(16, 16, 6, 2).residual  # stride blocks the skip


def test_config_validation():
    with pytest.raises(ad.ConfigError):
        ModelConfig(variant="resnet")
    with pytest.raises(ad.ConfigError):
        ModelConfig(width_multiplier=0.0)
    with pytest.raises(ad.ConfigError):
        ModelConfig(num_classes=1)
    with pytest.raises(ad.ConfigError):
        AttentionSpec(placement=("c4",))
    with pytest.raises(ad.ConfigError):
        BlockSpec(8, 8, 1, 3)


# ---------------------------------------------------------------------------
# built models: naming and structure
# ---------------------------------------------------------------------------


def test_parameter_names_follow_topology():
    model = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    names = set(model.named_parameters())
    assert "stem.kernel" in names and "stem.bn.gamma" in names
    # expansion 1 block has no c1 unit
    assert "features.0.c1.kernel" not in names
    assert "features.0.c2.kernel" in names and "features.0.c3.kernel" in names
    assert "features.1.c1.kernel" in names
    assert "head.kernel" in names
    assert "classifier.weight" in names and "classifier.bias" in names


def test_trunk_names_identical_across_mechanisms():
    static = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    sb = build_model(
        ModelConfig(variant="toy", num_classes=10, attention=AttentionSpec(mechanism="sb")),
        seed=0,
    )
    static_names = set(static.named_parameters())
    sb_names = set(sb.named_parameters())
    assert static_names <= sb_names
    extra = sb_names - static_names
    assert extra and all(".attn." in n or n.endswith(".balance") for n in extra)


def test_static_has_no_attention_params():
    model = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    assert all(".attn." not in n and ".balance" not in n for n in model.named_parameters())


def test_placement_controls_which_units_attend():
    spec = AttentionSpec(mechanism="se", placement=("c2",))
    model = build_model(ModelConfig(variant="toy", num_classes=10, attention=spec), seed=0)
    mechs = {u.name: u.mechanism for u in model.attentive_units()}
    assert mechs["features.0.c2"] == "se" and mechs["features.1.c2"] == "se"
    assert mechs["features.0.c3"] == "static" and mechs["features.1.c1"] == "static"
    assert mechs["stem"] == "static" and mechs["head"] == "static"


def test_balance_param_count_matches_placed_widths():
    spec = AttentionSpec(mechanism="sb")
    sb = build_model(ModelConfig(variant="toy", num_classes=10, attention=spec), seed=0)
    se = build_model(
        ModelConfig(variant="toy", num_classes=10, attention=AttentionSpec(mechanism="se")),
        seed=0,
    )
    placed = [u.c_out for u in sb.attentive_units() if u.mechanism == "sb"]
    assert sum(p.size for p in sb.balance_params().values()) == sum(placed)
    assert sb.param_count() - se.param_count() == sum(placed)


def test_dyconv_experts_multiply_kernel_count():
    static = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    dy = build_model(
        ModelConfig(
            variant="toy", num_classes=10, attention=AttentionSpec(mechanism="dyconv", n_experts=4)
        ),
        seed=0,
    )
    static_named = static.named_parameters()
    for unit in dy.attentive_units():
        if unit.mechanism != "dyconv":
            continue
        kernel = static_named[f"{unit.name}.kernel"]
        expert_total = sum(
            p.size for n, p in dy.named_parameters().items() if n.startswith(f"{unit.name}.experts.")
        )
        assert expert_total == 4 * kernel.size


# ---------------------------------------------------------------------------
# forward behaviour
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "variant,resolution,classes",
    [("toy", 32, 10), ("cifar", 32, 10), ("imagenet", 64, 7)],
)
def test_forward_shapes(variant, resolution, classes):
    cfg = ModelConfig(
        variant=variant, num_classes=classes, width_multiplier=0.35, input_resolution=resolution
    )
    model = build_model(cfg, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3, resolution, resolution))
    assert eval_logits(model, x).shape == (2, classes)


def test_forward_rejects_bad_input():
    model = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    tape = ad.Tape()
    ctx = Context(tape=tape, training=False)
    with pytest.raises(ad.ShapeError):
        model(ctx, tape.leaf(np.zeros((2, 1, 32, 32))))


def test_eval_logits_do_not_depend_on_batch_company():
    model = build_model(
        ModelConfig(variant="toy", num_classes=10, attention=AttentionSpec(mechanism="sb")),
        seed=3,
    )
    rng = np.random.default_rng(7)
    batch = rng.standard_normal((5, 3, 32, 32))
    together = eval_logits(model, batch)
    for i in range(5):
        alone = eval_logits(model, batch[i : i + 1])
        assert np.array_equal(alone[0], together[i])


def test_zeroed_residual_block_is_identity():
    model = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    block = model.blocks[0]
    assert block.spec.residual
    block.depthwise.conv.kernel.value[...] = 0.0
    block.project.conv.kernel.value[...] = 0.0
    x = np.random.default_rng(1).standard_normal((2, 16, 8, 8))
    tape = ad.Tape()
    ctx = Context(tape=tape, training=False)
    y = block(ctx, tape.leaf(x))
    assert np.array_equal(y.data, x)


def test_stride_two_block_downsamples():
    model = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    block = model.blocks[1]
    assert not block.spec.residual
    x = np.random.default_rng(1).standard_normal((2, 16, 8, 8))
    tape = ad.Tape()
    ctx = Context(tape=tape, training=False)
    y = block(ctx, tape.leaf(x))
    assert y.shape == (2, 24, 4, 4)


# ---------------------------------------------------------------------------
# trunk-state transfer
# ---------------------------------------------------------------------------


def test_copy_common_state_roundtrip():
    src = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    dst = build_model(ModelConfig(variant="toy", num_classes=10), seed=99)
    for bn in (m for m in src.modules() if isinstance(m, BatchNorm)):
        bn.running_mean[...] = 0.25
        bn.running_var[...] = 1.5
    copied = copy_common_state(src, dst)
    assert copied == len(src.named_parameters())
    x = np.random.default_rng(2).standard_normal((2, 3, 32, 32))
    assert np.array_equal(eval_logits(src, x), eval_logits(dst, x))


def test_zero_balance_matches_static_bitwise():
    static = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    sb = build_model(
        ModelConfig(
            variant="toy",
            num_classes=10,
            attention=AttentionSpec(mechanism="sb", balance_init=0.0),
        ),
        seed=11,
    )
    copy_common_state(static, sb)
    x = np.random.default_rng(3).standard_normal((4, 3, 32, 32))
    assert np.array_equal(eval_logits(static, x), eval_logits(sb, x))


def test_nonzero_balance_changes_logits():
    static = build_model(ModelConfig(variant="toy", num_classes=10), seed=0)
    sb = build_model(
        ModelConfig(variant="toy", num_classes=10, attention=AttentionSpec(mechanism="sb")),
        seed=11,
    )
    copy_common_state(static, sb)
    x = np.random.default_rng(3).standard_normal((2, 3, 32, 32))
    assert not np.allclose(eval_logits(static, x), eval_logits(sb, x))


# ---------------------------------------------------------------------------
# description and gradients
# ---------------------------------------------------------------------------


def test_describe_is_json_ready():
    import json

    model = build_model(
        ModelConfig(variant="cifar", num_classes=10, attention=AttentionSpec(mechanism="sb")),
        seed=0,
    )
    desc = json.loads(json.dumps(model.describe()))
    assert desc["parameter_count"] == model.param_count()
    assert desc["units"][0]["name"] == "stem"
    assert desc["units"][-1]["name"] == "head"
    assert desc["units"][-1]["output_size"] == [4, 4]  # 32 halved by three live stride-2 stages
    sizes = {u["name"]: u["input_size"] for u in desc["units"]}
    assert sizes["features.1.c2"] == [32, 32]


@pytest.mark.parametrize("placement", [("c1",), ("c2",), ("c3",), ("c1", "c2", "c3")])
def test_whole_model_gradients_match_finite_differences(placement):
    cfg = ModelConfig(
        variant="toy",
        num_classes=10,
        input_resolution=8,
        classifier_dropout=0.0,
        attention=AttentionSpec(mechanism="sb", gate="tanh", placement=placement),
    )
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(100)
    x0 = rng.standard_normal((2, 3, 8, 8))
    balance = next(iter(model.balance_params().values()))
    read = rng.standard_normal(10)
    point = {
        "x": x0,
        "classifier.bias": np.zeros(10),
        balance.name: balance.value.copy(),
    }

    def fn(leaves):
        tape = leaves["x"].tape
        ctx = Context(
            tape=tape,
            training=False,
            overrides={k: v for k, v in leaves.items() if k != "x"},
        )
        logits = model(ctx, leaves["x"])
        return ad.sum_all(ad.mul(logits, tape.leaf(np.tile(read, (2, 1)))))

    # Small eps keeps single-coordinate probes from pushing any of the
    # thousands of relu6 pre-activations across a kink, where central
    # differences stop describing the (one-sided) analytic derivative.
    err = ad.grad_check(fn, point, eps=1e-6)
    assert err < 1e-3
