"""Inverted-bottleneck classifier builder with optional channel attention.

The network family is the standard mobile one: a stem conv, a stack of
inverted bottlenecks (1x1 expand -> 3x3 depthwise -> 1x1 linear project,
residual when stride is 1 and widths agree), a 1x1 head conv, global average
pooling, dropout, and a linear classifier.  Channel widths scale with a
width multiplier and round to multiples of 8.

Any of the three convolutions inside a bottleneck (c1 = expand, c2 =
depthwise, c3 = project) can carry an attention mechanism; the stem, head,
and classifier always stay static.  Parameter names depend only on the
topology, never on the mechanism, so structurally matching models can
exchange trunk weights by name.

Variants: "imagenet" (stride-2 stem, 224 default resolution), "cifar"
(stride-1 stem and first stage kept at stride 1, 32 default resolution), and
"toy" (stem + two bottlenecks + narrow head, for desk-scale training runs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentiveConv
from .autodiff import Tensor
from .layers import BatchNorm, Context, Dropout, Linear, Module

VARIANTS = ("imagenet", "cifar", "toy")

DEFAULT_RESOLUTION = {"imagenet": 224, "cifar": 32, "toy": 32}

# (expansion, base channels, repeats, first stride) per stage.
FULL_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)

TOY_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 1, 2),
)

STEM_BASE = 32
HEAD_BASE = 1280
TOY_STEM = 16
TOY_HEAD = 128

PLACEMENTS = ("c1", "c2", "c3")


def make_divisible(v: float, divisor: int = 8) -> int:
    """Round to the nearest multiple of ``divisor``, never below 90% of ``v``."""
    if v <= 0:
        raise ad.ConfigError(f"make_divisible: value must be positive, got {v}")
    out = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if out < 0.9 * v:
        out += divisor
    return out


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    expansion: int
    stride: int

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ad.ConfigError(f"block stride must be 1 or 2, got {self.stride}")
        if self.expansion < 1:
            raise ad.ConfigError(f"block expansion must be >= 1, got {self.expansion}")

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class AttentionSpec:
    """Which mechanism decorates which convolutions inside each bottleneck."""

    mechanism: str = "static"
    gate: str | None = None
    placement: tuple[str, ...] = PLACEMENTS
    balance_init: float = 0.1
    n_experts: int = 4
    temperature: float = 30.0
    branch_dropout: float = 0.0

    def __post_init__(self):
        for p in self.placement:
            if p not in PLACEMENTS:
                raise ad.ConfigError(f"unknown placement {p!r}; expected subset of {PLACEMENTS}")

    def mechanism_at(self, position: str) -> str:
        if self.mechanism == "static" or position not in self.placement:
            return "static"
        return self.mechanism


@dataclass(frozen=True)
class ModelConfig:
    width_multiplier: float = 1.0
    num_classes: int = 10
    variant: str = "cifar"
    input_resolution: int | None = None
    classifier_dropout: float = 0.2
    attention: AttentionSpec = field(default_factory=AttentionSpec)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ad.ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.width_multiplier <= 0:
            raise ad.ConfigError(f"width multiplier must be positive, got {self.width_multiplier}")
        if self.num_classes < 2:
            raise ad.ConfigError(f"need at least 2 classes, got {self.num_classes}")

    @property
    def resolution(self) -> int:
        return self.input_resolution or DEFAULT_RESOLUTION[self.variant]


def channel_plan(config: ModelConfig) -> dict:
    """Resolved channel widths and block list for a configuration."""
    w = config.width_multiplier
    if config.variant == "toy":
        stages = TOY_STAGES
        stem = make_divisible(TOY_STEM * w)
        head = make_divisible(TOY_HEAD * w) if w != 1.0 else TOY_HEAD
        stem_stride = 1
        demote_first_stage = False
    else:
        stages = FULL_STAGES
        stem = make_divisible(STEM_BASE * w)
        head = make_divisible(HEAD_BASE * max(1.0, w))
        stem_stride = 2 if config.variant == "imagenet" else 1
        demote_first_stage = config.variant == "cifar"

    blocks: list[BlockSpec] = []
    c_in = stem
    for stage_idx, (t, c, n, s) in enumerate(stages):
        c_out = make_divisible(c * w)
        for i in range(n):
            stride = s if i == 0 else 1
            if demote_first_stage and stage_idx == 1 and i == 0:
                stride = 1
            blocks.append(BlockSpec(c_in, c_out, t, stride))
            c_in = c_out
    return {"stem": stem, "stem_stride": stem_stride, "blocks": blocks, "head": head}


class InvertedBottleneck(Module):
    """expand (c1) -> depthwise (c2) -> linear project (c3), optional residual."""

    def __init__(self, spec: BlockSpec, attention: AttentionSpec, *, rng: np.random.Generator, name: str):
        super().__init__()
        self.spec = spec
        expanded = spec.in_channels * spec.expansion
        common = dict(
            gate=attention.gate,
            balance_init=attention.balance_init,
            n_experts=attention.n_experts,
            router_temperature=attention.temperature,
            branch_dropout=attention.branch_dropout,
            rng=rng,
        )
        self.expand = None
        if spec.expansion > 1:
            self.expand = self.register(
                AttentiveConv(
                    spec.in_channels, expanded, 1, activation="relu6",
                    mechanism=attention.mechanism_at("c1"), name=f"{name}.c1", **common,
                )
            )
        self.depthwise = self.register(
            AttentiveConv(
                expanded, expanded, 3, stride=spec.stride, padding=1, groups=expanded,
                activation="relu6", mechanism=attention.mechanism_at("c2"),
                name=f"{name}.c2", **common,
            )
        )
        self.project = self.register(
            AttentiveConv(
                expanded, spec.out_channels, 1, activation=None,
                mechanism=attention.mechanism_at("c3"), name=f"{name}.c3", **common,
            )
        )

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        h = x
        if self.expand is not None:
            h = self.expand(ctx, h)
        h = self.depthwise(ctx, h)
        h = self.project(ctx, h)
        if self.spec.residual:
            h = ad.add(h, x)
        return h


class Model(Module):
    """Full classifier: stem, bottlenecks, head, pooled linear readout."""

    def __init__(self, config: ModelConfig, *, rng: np.random.Generator):
        super().__init__()
        self.config = config
        plan = channel_plan(config)
        self.plan = plan

        self.stem = self.register(
            AttentiveConv(
                3, plan["stem"], 3, stride=plan["stem_stride"], padding=1,
                activation="relu6", mechanism="static", rng=rng, name="stem",
            )
        )
        self.blocks = [
            self.register(
                InvertedBottleneck(spec, config.attention, rng=rng, name=f"features.{i}")
            )
            for i, spec in enumerate(plan["blocks"])
        ]
        last = plan["blocks"][-1].out_channels
        self.head = self.register(
            AttentiveConv(
                last, plan["head"], 1, activation="relu6", mechanism="static",
                rng=rng, name="head",
            )
        )
        self.drop = self.register(Dropout(config.classifier_dropout))
        self.classifier = self.register(
            Linear(plan["head"], config.num_classes, init_std=0.01, rng=rng, name="classifier")
        )

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ad.ShapeError(f"model expects [N, 3, H, W] input, got {x.shape}")
        h = self.stem(ctx, x)
        for block in self.blocks:
            h = block(ctx, h)
        h = self.head(ctx, h)
        pooled = ad.global_avg_pool(h)
        pooled = self.drop(ctx, pooled)
        return self.classifier(ctx, pooled)

    # -- introspection ----------------------------------------------------

    def attentive_units(self) -> list[AttentiveConv]:
        return [m for m in self.modules() if isinstance(m, AttentiveConv)]

    def balance_params(self) -> dict[str, ad.Parameter]:
        return {p.name: p for p in self.parameters() if p.name.endswith(".balance")}

    def describe(self) -> dict:
        units = []
        res = self.config.resolution
        h = w = res
        for unit in self.attentive_units():
            out_h = (h + 2 * unit.padding - unit.kernel_size) // unit.stride + 1
            out_w = (w + 2 * unit.padding - unit.kernel_size) // unit.stride + 1
            units.append(
                {
                    "name": unit.name,
                    "mechanism": unit.mechanism,
                    "in_channels": unit.c_in,
                    "out_channels": unit.c_out,
                    "kernel_size": unit.kernel_size,
                    "stride": unit.stride,
                    "groups": unit.groups,
                    "input_size": [h, w],
                    "output_size": [out_h, out_w],
                }
            )
            h, w = out_h, out_w
        att = self.config.attention
        return {
            "variant": self.config.variant,
            "width_multiplier": self.config.width_multiplier,
            "num_classes": self.config.num_classes,
            "input_resolution": res,
            "attention": {
                "mechanism": att.mechanism,
                "gate": att.gate,
                "placement": list(att.placement),
            },
            "parameter_count": self.param_count(),
            "units": units,
        }


def build_model(config: ModelConfig, *, seed: int = 0) -> Model:
    return Model(config, rng=np.random.default_rng(seed))


def copy_common_state(src: Model, dst: Model) -> int:
    """Copy parameter values and BN running stats shared by name; returns count."""
    dst_params = dst.named_parameters()
    copied = 0
    for name, p in src.named_parameters().items():
        q = dst_params.get(name)
        if q is not None:
            if q.shape != p.shape:
                raise ad.ShapeError(f"parameter {name!r}: shape {p.shape} vs {q.shape}")
            q.value[...] = p.value
            copied += 1
    dst_bns = {m.name: m for m in dst.modules() if isinstance(m, BatchNorm)}
    for m in src.modules():
        if isinstance(m, BatchNorm):
            q = dst_bns.get(m.name)
            if q is not None:
                q.running_mean = m.running_mean.copy()
                q.running_var = m.running_var.copy()
    return copied
