"""Stateful layers over the autodiff tape.

A layer owns :class:`~attnlab.autodiff.Parameter` objects and turns a bound
input tensor into a bound output tensor.  All evaluation state lives in a
:class:`Context`: the tape for the current pass, the train/eval flag, and the
random generator used by stochastic layers.  Layers themselves hold no
per-pass state, so one module instance can run any number of passes.

Parameter names are absolute (assigned at construction via the ``name``
prefix), which lets tooling match parameters across structurally different
models that share a trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor


@dataclass
class Context:
    """Per-pass evaluation state shared by every layer in a model.

    ``overrides`` substitutes already-bound tensors for parameters by name;
    gradient checking uses this to evaluate a module as a pure function of
    leaf tensors without touching the module's stored values.
    """

    tape: Tape
    training: bool = False
    rng: np.random.Generator | None = None
    overrides: dict[str, Tensor] | None = None
    _bound: dict[int, Tensor] = field(default_factory=dict)

    def bind(self, param: Parameter) -> Tensor:
        if self.overrides is not None and param.name in self.overrides:
            return self.overrides[param.name]
        key = id(param)
        t = self._bound.get(key)
        if t is None:
            t = self.tape.bind(param)
            self._bound[key] = t
        return t

    def require_rng(self) -> np.random.Generator:
        if self.rng is None:
            raise ad.ConfigError("this pass needs a Context with an rng (stochastic layer in train mode)")
        return self.rng


class Module:
    """Base class: tracks direct parameters and child modules."""

    def __init__(self) -> None:
        self._params: list[Parameter] = []
        self._children: list["Module"] = []

    def register_param(self, param: Parameter) -> Parameter:
        self._params.append(param)
        return param

    def register(self, child: "Module") -> "Module":
        self._children.append(child)
        return child

    def parameters(self) -> list[Parameter]:
        out = list(self._params)
        for child in self._children:
            out.extend(child.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ad.ConfigError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self):
        """Yield this module and every descendant, depth first."""
        yield self
        for child in self._children:
            yield from child.modules()

    def forward(self, ctx: Context, x: Tensor) -> Tensor:  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, ctx: Context, x: Tensor, **kwargs) -> Tensor:
        return self.forward(ctx, x, **kwargs)


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        self.steps = [self.register(m) for m in modules]

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        for m in self.steps:
            x = m(ctx, x)
        return x


class Identity(Module):
    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        return x


class Conv2d(Module):
    """Bias-free 2-d convolution with He (fan-in) initialization."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        *,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        rng: np.random.Generator,
        name: str,
    ):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ad.ConfigError(f"conv {name!r}: groups={groups} must divide {c_in} and {c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size = kernel_size
        self.stride, self.padding, self.groups = stride, padding, groups
        self.name = name
        fan_in = (c_in // groups) * kernel_size * kernel_size
        std = float(np.sqrt(2.0 / fan_in))
        self.kernel = self.register_param(
            Parameter(
                rng.standard_normal((c_out, c_in // groups, kernel_size, kernel_size)) * std,
                name=f"{name}.kernel",
            )
        )

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        return ad.conv2d(
            x,
            ctx.bind(self.kernel),
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
            label=self.name,
        )


class BatchNorm(Module):
    """Batch normalization over [N, C] or [N, C, H, W] inputs.

    Train mode normalizes by batch statistics and updates the running
    estimates with momentum 0.1 (the running variance uses the unbiased
    batch variance).  Eval mode is a fixed affine map from the running
    statistics and is deterministic.
    """

    def __init__(self, channels: int, *, eps: float = 1e-5, momentum: float = 0.1, name: str):
        super().__init__()
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        self.name = name
        self.gamma = self.register_param(
            Parameter(np.ones(channels), decay_exempt=True, name=f"{name}.gamma")
        )
        self.beta = self.register_param(
            Parameter(np.zeros(channels), decay_exempt=True, name=f"{name}.beta")
        )
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        gamma, beta = ctx.bind(self.gamma), ctx.bind(self.beta)
        if ctx.training:
            y, mean, var = ad.batch_norm_train(x, gamma, beta, eps=self.eps, label=self.name)
            axes = (0,) if x.ndim == 2 else (0, 2, 3)
            m = int(np.prod([x.shape[i] for i in axes]))
            unbiased = var * (m / (m - 1))
            self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased
            return y
        return ad.batch_norm_eval(
            x, gamma, beta, self.running_mean, self.running_var, eps=self.eps, label=self.name
        )


class Linear(Module):
    """Fully-connected layer with optional bias."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        *,
        bias: bool = True,
        init_std: float | None = None,
        rng: np.random.Generator,
        name: str,
    ):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.name = name
        std = float(np.sqrt(2.0 / c_in)) if init_std is None else init_std
        self.weight = self.register_param(
            Parameter(rng.standard_normal((c_in, c_out)) * std, name=f"{name}.weight")
        )
        self.bias = None
        if bias:
            self.bias = self.register_param(Parameter(np.zeros(c_out), name=f"{name}.bias"))

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        out = ad.matmul(x, ctx.bind(self.weight))
        if self.bias is not None:
            out = ad.add_bias(out, ctx.bind(self.bias))
        return out


class Dropout(Module):
    """Inverted dropout: zero with probability p in train mode, scale by 1/(1-p)."""

    def __init__(self, p: float = 0.2):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ad.ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        if not ctx.training or self.p == 0.0:
            return x
        rng = ctx.require_rng()
        keep = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return ad.mul(x, ctx.tape.leaf(keep, label="dropout_mask"))


ACTIVATIONS = {
    "relu": ad.relu,
    "relu6": ad.relu6,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ad.ConfigError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}")
        self.kind = kind

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        return ACTIVATIONS[self.kind](x)
