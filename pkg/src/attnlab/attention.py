"""Channel attention mechanisms and the gradient-saturation probe.

Three ways to condition a convolution on its input:

* ``se`` (scaled): a squeeze branch produces one gate value per output
  channel and the trunk output is multiplied by it, ``y = a * t``.
* ``sb`` (shifted): the branch output is scaled by a learned per-channel
  balance factor and added, ``y = t + balance * a``.  The balance factor
  bounds how far the output can move from the trunk value.
* ``dyconv`` (kernel mixture): the branch routes over ``n`` expert kernels
  and each sample is convolved with its own convex mixture of them.

All three read the branch from the convolution *input*, so the branch cost
depends on (c_in, c_hid, c_out) and never on the spatial extent except
through the initial pooling.

The probe utilities split the input gradient of a unit into the part that
flows through the trunk and the part that flows through the branch, which is
the quantity that distinguishes scaled from shifted attention when the gate
saturates: a saturated multiplicative gate crushes both parts, while the
shifted combine leaves the trunk part untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ACTIVATIONS, BatchNorm, Context, Conv2d, Dropout, Linear, Module

GATE_KINDS = ("tanh", "sigmoid", "softmax", "relu", "none")

MECHANISMS = ("static", "se", "sb", "dyconv")

DEFAULT_GATES = {"se": "sigmoid", "sb": "tanh", "dyconv": "softmax"}


def apply_gate(z: Tensor, gate: str, temperature: float = 1.0) -> Tensor:
    if gate == "tanh":
        return ad.tanh(z)
    if gate == "sigmoid":
        return ad.sigmoid(z)
    if gate == "softmax":
        return ad.softmax(z, axis=1, temperature=temperature)
    if gate == "relu":
        return ad.relu(z)
    if gate == "none":
        return z
    raise ad.ConfigError(f"unknown gate {gate!r}; expected one of {GATE_KINDS}")


def hidden_width(c_out: int, *, depthwise: bool) -> int:
    """Branch hidden width: c_out for pointwise/regular convs, ceil(c_out/6) depthwise."""
    if depthwise:
        return max(1, math.ceil(c_out / 6))
    return c_out


class AttentionBranch(Module):
    """Squeeze branch: GAP -> FC -> BN -> ReLU -> (dropout) -> FC -> gate.

    Maps an NCHW tensor with ``c_in`` channels to one value per sample and
    output channel.  The pre-gate logits are exposed separately so callers
    can inject a bias offset (used to force the gate into saturation).
    """

    def __init__(
        self,
        c_in: int,
        c_hidden: int,
        c_out: int,
        *,
        gate: str = "tanh",
        temperature: float = 1.0,
        dropout: float = 0.0,
        rng: np.random.Generator,
        name: str,
    ):
        super().__init__()
        if c_hidden < 1:
            raise ad.ConfigError(f"branch {name!r}: hidden width must be >= 1, got {c_hidden}")
        if gate not in GATE_KINDS:
            raise ad.ConfigError(f"branch {name!r}: unknown gate {gate!r}; expected one of {GATE_KINDS}")
        self.c_in, self.c_hidden, self.c_out = c_in, c_hidden, c_out
        self.gate = gate
        self.temperature = temperature
        self.name = name
        self.fc1 = self.register(Linear(c_in, c_hidden, rng=rng, name=f"{name}.fc1"))
        self.bn = self.register(BatchNorm(c_hidden, name=f"{name}.bn"))
        self.drop = self.register(Dropout(dropout))
        self.fc2 = self.register(Linear(c_hidden, c_out, rng=rng, name=f"{name}.fc2"))

    def logits(self, ctx: Context, x: Tensor, *, bias_offset: float = 0.0) -> Tensor:
        squeezed = ad.global_avg_pool(x)
        h = ad.relu(self.bn(ctx, self.fc1(ctx, squeezed)))
        h = self.drop(ctx, h)
        z = self.fc2(ctx, h)
        if bias_offset != 0.0:
            z = ad.add(z, ctx.tape.leaf(np.full(z.shape, bias_offset), label=f"{self.name}.offset"))
        return z

    def forward(self, ctx: Context, x: Tensor, *, bias_offset: float = 0.0) -> Tensor:
        return apply_gate(self.logits(ctx, x, bias_offset=bias_offset), self.gate, self.temperature)


class AttentiveConv(Module):
    """One convolution unit: conv -> BN -> activation -> attention combine.

    ``mechanism`` selects how the unit is conditioned on its input:

    - "static": plain conv, no branch.
    - "se": multiplicative combine with a sigmoid-gated branch by default.
    - "sb": additive combine through a learned per-channel balance factor
      (decay-exempt, initialized at ``balance_init``), tanh gate by default.
    - "dyconv": the kernel is a per-sample mixture of ``n_experts`` kernels
      weighted by a softmax router (temperature ``router_temperature``).

    The combine applies after BN and activation so a zero-scaled channel is
    genuinely zero in the unit output (normalization cannot resurrect it).
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        *,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        activation: str | None = "relu6",
        mechanism: str = "static",
        gate: str | None = None,
        branch_hidden: int | None = None,
        branch_dropout: float = 0.0,
        balance_init: float = 0.1,
        n_experts: int = 4,
        router_temperature: float = 30.0,
        rng: np.random.Generator,
        name: str,
    ):
        super().__init__()
        if mechanism not in MECHANISMS:
            raise ad.ConfigError(f"unit {name!r}: unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.stride, self.padding, self.groups = kernel_size, stride, padding, groups
        self.activation = activation
        self.mechanism = mechanism
        self.name = name
        self.gate = gate or DEFAULT_GATES.get(mechanism, "none")

        depthwise = groups == c_in and groups == c_out
        if branch_hidden is None:
            branch_hidden = hidden_width(c_out, depthwise=depthwise)

        self.conv: Conv2d | None = None
        self.branch: AttentionBranch | None = None
        self.balance = None
        self.experts: list[ad.Parameter] = []
        self.router: AttentionBranch | None = None

        if mechanism == "dyconv":
            if n_experts < 1:
                raise ad.ConfigError(f"unit {name!r}: need at least one expert kernel, got {n_experts}")
            fan_in = (c_in // groups) * kernel_size * kernel_size
            std = float(np.sqrt(2.0 / fan_in))
            shape = (c_out, c_in // groups, kernel_size, kernel_size)
            self.experts = [
                self.register_param(
                    ad.Parameter(rng.standard_normal(shape) * std, name=f"{name}.experts.{i}")
                )
                for i in range(n_experts)
            ]
            self.router = self.register(
                AttentionBranch(
                    c_in,
                    max(1, c_in // 4),
                    n_experts,
                    gate=self.gate,
                    temperature=router_temperature,
                    dropout=branch_dropout,
                    rng=rng,
                    name=f"{name}.router",
                )
            )
        else:
            self.conv = self.register(
                Conv2d(
                    c_in, c_out, kernel_size,
                    stride=stride, padding=padding, groups=groups,
                    rng=rng, name=name,
                )
            )
            if mechanism in ("se", "sb"):
                self.branch = self.register(
                    AttentionBranch(
                        c_in, branch_hidden, c_out,
                        gate=self.gate, dropout=branch_dropout,
                        rng=rng, name=f"{name}.attn",
                    )
                )
            if mechanism == "sb":
                self.balance = self.register_param(
                    ad.Parameter(
                        np.full(c_out, float(balance_init)),
                        decay_exempt=True,
                        name=f"{name}.balance",
                    )
                )

        self.bn = self.register(BatchNorm(c_out, name=f"{name}.bn"))

    # -- forward ----------------------------------------------------------

    def _trunk(self, ctx: Context, x: Tensor) -> Tensor:
        if self.mechanism == "dyconv":
            pi = self.router(ctx, x)  # [N, n]
            stacked = ad.stack([ctx.bind(p) for p in self.experts])
            n = len(self.experts)
            flat = ad.reshape(stacked, (n, stacked.size // n))
            mixed = ad.matmul(pi, flat)
            kshape = self.experts[0].shape
            kernels = ad.reshape(mixed, (x.shape[0],) + kshape)
            h = ad.conv2d_per_sample(
                x, kernels,
                stride=self.stride, padding=self.padding, groups=self.groups,
                label=self.name,
            )
        else:
            h = self.conv(ctx, x)
        h = self.bn(ctx, h)
        if self.activation is not None:
            fn = ACTIVATIONS.get(self.activation)
            if fn is None:
                raise ad.ConfigError(f"unit {self.name!r}: unknown activation {self.activation!r}")
            h = fn(h)
        return h

    def forward_parts(
        self, ctx: Context, x: Tensor, *, bias_offset: float = 0.0
    ) -> tuple[Tensor, Tensor | None, Tensor]:
        """Return (trunk output, branch output or None, combined output)."""
        t = self._trunk(ctx, x)
        if self.mechanism in ("static", "dyconv"):
            return t, None, t
        a = self.branch(ctx, x, bias_offset=bias_offset)
        y = self._combine(ctx, t, a)
        return t, a, y

    def _combine(self, ctx: Context, t: Tensor, a: Tensor) -> Tensor:
        if self.mechanism == "se":
            return ad.scale_channels(t, a)
        return ad.shift_channels(t, a, ctx.bind(self.balance))

    def forward(
        self,
        ctx: Context,
        x: Tensor,
        *,
        bias_offset: float = 0.0,
        detach_trunk: bool = False,
        detach_branch: bool = False,
    ) -> Tensor:
        if self.mechanism in ("static", "dyconv"):
            if bias_offset or detach_trunk or detach_branch:
                raise ad.ConfigError(
                    f"unit {self.name!r}: probe options need a branch mechanism (se or sb)"
                )
            return self._trunk(ctx, x)
        t = self._trunk(ctx, x)
        a = self.branch(ctx, x, bias_offset=bias_offset)
        if detach_trunk:
            t = ad.detach(t, label=f"{self.name}.stop_trunk")
        if detach_branch:
            a = ad.detach(a, label=f"{self.name}.stop_branch")
        return self._combine(ctx, t, a)


# ---------------------------------------------------------------------------
# Gradient decomposition probe
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    """Gradient norms of one saturation level, under a sum readout."""

    offset: float
    trunk_grad_norm: float
    branch_grad_norm: float
    input_grad_norm: float


def input_gradient(
    unit: AttentiveConv,
    x: np.ndarray,
    *,
    bias_offset: float = 0.0,
    detach_trunk: bool = False,
    detach_branch: bool = False,
) -> np.ndarray:
    """d(sum of unit output)/d(input), in eval mode for determinism."""
    tape = ad.Tape()
    ctx = Context(tape=tape, training=False)
    xt = tape.leaf(np.asarray(x, dtype=np.float64), label="probe_input")
    y = unit.forward(
        ctx, xt, bias_offset=bias_offset, detach_trunk=detach_trunk, detach_branch=detach_branch
    )
    grads = ad.backward(tape, ad.sum_all(y))
    g = grads.get(xt.node_id)
    return np.zeros_like(xt.data) if g is None else g


def saturation_sweep(
    unit: AttentiveConv, x: np.ndarray, offsets: list[float]
) -> list[SweepPoint]:
    """Decompose the input gradient at each pre-gate bias offset.

    The trunk term detaches the branch output (gradient flows only through
    the convolution path); the branch term detaches the trunk output.  The
    two terms sum to the full input gradient exactly.
    """
    if unit.mechanism not in ("se", "sb"):
        raise ad.ConfigError(
            f"saturation sweep needs a branch mechanism (se or sb), got {unit.mechanism!r}"
        )
    points = []
    for offset in offsets:
        full = input_gradient(unit, x, bias_offset=offset)
        trunk = input_gradient(unit, x, bias_offset=offset, detach_branch=True)
        branch = input_gradient(unit, x, bias_offset=offset, detach_trunk=True)
        points.append(
            SweepPoint(
                offset=float(offset),
                trunk_grad_norm=float(np.linalg.norm(trunk)),
                branch_grad_norm=float(np.linalg.norm(branch)),
                input_grad_norm=float(np.linalg.norm(full)),
            )
        )
    return points
