"""Dense float64 tensors with reverse-mode automatic differentiation.

Values flow through an explicit append-only tape (one per forward/backward
pass).  Every operation pushes a node holding its kind, input handles, output
shape and a backward rule; node order is creation order, which is already
topological.  The tape also carries an operation counter used by the analytic
cost model.

Counting convention: the counter tracks the operations the cost model prices
(convolution kernels, matrix products, pooling sums, attention integration).
Elementwise activations and normalization record nothing; they fuse away at
inference time under the same convention.  Fully-connected bias additions are
folded into the matrix-product count.

Everything is float64 and row-major NCHW.  Tapes are single-threaded for the
duration of a pass; tensors not bound to a tape are plain immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Structural parameters (groups, strides, counts) are inconsistent."""


class NumericError(ArithmeticError):
    """A forward evaluation produced or met a non-finite value."""


class StatisticsError(ValueError):
    """Batch statistics are undefined (fewer than two elements per channel)."""


class LifecycleError(RuntimeError):
    """A tape was used after its backward pass consumed it."""


@dataclass
class OpCounter:
    """Running tallies of counted multiplies and adds on one tape."""

    multiplies: int = 0
    adds: int = 0

    def record(self, multiplies: int, adds: int) -> None:
        self.multiplies += int(multiplies)
        self.adds += int(adds)

    def snapshot(self) -> tuple[int, int]:
        return (self.multiplies, self.adds)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    # Maps the output gradient to one gradient per input (None = no flow).
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    label: str = ""


class Parameter:
    """A trainable value with its gradient and momentum slots.

    ``decay_exempt`` marks values excluded from weight decay (normalization
    affine terms and per-channel balance factors).
    """

    __slots__ = ("value", "grad", "momentum", "decay_exempt", "name")

    def __init__(self, value: np.ndarray, *, decay_exempt: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)
        self.decay_exempt = decay_exempt
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.value.shape})"


class Tensor:
    """A float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node_id={self.node_id})"


class Tape:
    """Append-only computation record for one forward/backward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.counter = OpCounter()
        self.params: dict[int, Parameter] = {}
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def push(
        self,
        op: str,
        inputs: Sequence[Tensor],
        value: np.ndarray,
        backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None,
        label: str = "",
    ) -> Tensor:
        if self.consumed:
            raise LifecycleError("tape already consumed by a backward pass")
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            where = f" in '{label}'" if label else ""
            raise NumericError(f"non-finite values produced by op '{op}'{where}")
        ids = tuple(self._require_bound(t) for t in inputs)
        node = Node(op=op, inputs=ids, shape=value.shape, backward=backward, label=label)
        self.nodes.append(node)
        return Tensor(value, self, len(self.nodes) - 1)

    def leaf(self, value: np.ndarray, label: str = "leaf") -> Tensor:
        return self.push("leaf", (), np.asarray(value, dtype=np.float64), None, label)

    def bind(self, param: Parameter) -> Tensor:
        """Bind a parameter's current value as a leaf and remember the link."""
        t = self.leaf(param.value, label=param.name or "param")
        self.params[t.node_id] = param
        return t

    def _require_bound(self, t: Tensor) -> int:
        if t.tape is not self or t.node_id is None:
            raise LifecycleError("input tensor is not bound to this tape")
        return t.node_id


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; returns node-id -> gradient.

    Nodes unreachable from the loss are absent from the map.  Contributions
    from multiple consumers accumulate in descending node order, so results
    are deterministic.  The tape is consumed afterwards.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise LifecycleError("loss tensor is not bound to this tape")
    if tape.consumed:
        raise LifecycleError("tape already consumed by a backward pass")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            continue
        input_grads = node.backward(g)
        stored: set[int] = set()
        for input_id, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            acc = grads.get(input_id)
            if acc is None:
                # Dict entries are accumulated in place, so never store an
                # array that aliases the output gradient or another entry.
                if ig is g or ig.base is not None or id(ig) in stored:
                    ig = ig.copy()
                stored.add(id(ig))
                grads[input_id] = ig
            else:
                acc += ig
    tape.consumed = True
    return grads


def apply_param_grads(tape: Tape, grads: Mapping[int, np.ndarray]) -> None:
    """Accumulate gradients from a backward pass into bound parameters."""
    for nid, param in tape.params.items():
        g = grads.get(nid)
        if g is not None:
            param.grad += g


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return a.tape.push("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return a.tape.push("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return a.tape.push("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape.push("scale", (a,), a.data * c, lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return a.tape.push("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        _check_same_shape("stack", first, t)
    value = np.stack([t.data for t in tensors])
    return first.tape.push(
        "stack", tuple(tensors), value, lambda g: tuple(g[i] for i in range(len(tensors)))
    )


def detach(a: Tensor, label: str = "detach") -> Tensor:
    """Copy a value onto the same tape with no gradient link to its history."""
    return a.tape.leaf(a.data, label=label)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return a.tape.push("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.ones(shape) * g,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Broadcast a [C] bias over the rows of [N, C].  Counts fold into matmul."""
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    return x.tape.push("add_bias", (x, bias), x.data + bias.data, lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return x.tape.push("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0.0) & (x.data < 6.0)
    return x.tape.push("relu6", (x,), np.clip(x.data, 0.0, 6.0), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return x.tape.push("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)
    return x.tape.push("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = 1, temperature: float = 1.0) -> Tensor:
    """Softmax along ``axis`` of logits divided by ``temperature`` first."""
    if temperature <= 0.0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g: np.ndarray) -> tuple[np.ndarray]:
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner) / temperature,)

    return x.tape.push("softmax", (x,), y, back)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    ad, bd = a.data, b.data
    # Row-at-a-time product: every row is computed as a (1, k) @ (k, n)
    # contraction, so a row's bits never depend on how many other rows ride
    # along (a sample scores identically alone or inside a batch).
    out = (ad[:, None, :] @ bd)[:, 0]
    a.tape.counter.record(m * n * k, m * n * k)
    return a.tape.push("matmul", (a, b), out, lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _conv_checks(x_shape, k_shape, stride, padding, groups, label):
    if len(x_shape) != 4 or len(k_shape) != 4:
        raise ShapeError(f"conv '{label}': need NCHW input and OIHW kernel, got {x_shape}, {k_shape}")
    n, c_in, h, w = x_shape
    c_out, c_in_g, kh, kw = k_shape
    if kh != kw:
        raise ShapeError(f"conv '{label}': only square kernels supported, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv '{label}': invalid stride/padding {stride}/{padding}")
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0:
        raise ConfigError(
            f"conv '{label}': groups={groups} must divide c_in={c_in} and c_out={c_out}"
        )
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"conv '{label}': kernel expects {c_in_g} channels/group, input provides {c_in // groups}"
        )
    if h + 2 * padding < kh or w + 2 * padding < kh:
        raise ShapeError(f"conv '{label}': padded extent smaller than kernel size {kh}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kh) // stride + 1
    return n, c_in, c_out, kh, ho, wo


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # View of shape [N, C, H', W', k, k]; no copy.
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward_g1(xp, kernel, k, stride, ho, wo):
    # Per-sample im2col product: sample i is a (c_out, ck^2) @ (ck^2, H'W')
    # contraction regardless of batch size, keeping eval logits independent
    # of batch company.
    n = xp.shape[0]
    c_out = kernel.shape[0]
    cols = _windows(xp, k, stride).transpose(0, 1, 4, 5, 2, 3).reshape(n, -1, ho * wo)
    out = (kernel.reshape(c_out, -1)[None] @ cols).reshape(n, c_out, ho, wo)
    return out, cols


def _conv_backward_g1(grad, cols, kernel, xp_shape, k, stride, padding):
    n, c_in, hp, wp = xp_shape
    c_out = kernel.shape[0]
    ho, wo = grad.shape[2], grad.shape[3]
    go = grad.reshape(n, c_out, ho * wo)
    gk = (go @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    gcols = (kernel.reshape(c_out, -1).T[None] @ go).reshape(n, c_in, k, k, ho, wo)
    gpad = np.zeros(xp_shape)
    for ki in range(k):
        for kj in range(k):
            gpad[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                gcols[:, :, ki, kj]
            )
    if padding:
        gpad = gpad[:, :, padding : hp - padding, padding : wp - padding]
    return gk, gpad


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    label: str = "conv2d",
) -> Tensor:
    """2-d cross-correlation, NCHW in, OIHW kernel, no bias.

    Records multiplies = adds = N * c_out * H' * W' * (c_in/groups) * k**2.
    """
    n, c_in, c_out, k, ho, wo = _conv_checks(x.shape, kernel.shape, stride, padding, groups, label)
    xd, kd = x.data, kernel.data
    xp = _pad_nchw(xd, padding)
    xp_shape = xp.shape

    depthwise = groups == c_in and groups == c_out
    if depthwise:
        # One fused multiply-add per kernel tap; elementwise over the batch,
        # so each sample's result is independent of batch company.
        k2 = kd[:, 0]
        out = np.zeros((n, c_out, ho, wo))
        for ki in range(k):
            for kj in range(k):
                out += (
                    xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    * k2[None, :, ki, kj, None, None]
                )

        def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            gk2 = np.empty_like(k2)
            gpad = np.zeros(xp_shape)
            for ki in range(k):
                for kj in range(k):
                    tap = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    gk2[:, ki, kj] = np.einsum("nchw,nchw->c", tap, g)
                    gpad[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                        g * k2[None, :, ki, kj, None, None]
                    )
            gx = gpad[:, :, padding : xp_shape[2] - padding, padding : xp_shape[3] - padding] if padding else gpad
            return gx, gk2[:, None]

    elif groups == 1:
        out, cols = _conv_forward_g1(xp, kd, k, stride, ho, wo)

        def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            gk, gx = _conv_backward_g1(g, cols, kd, xp_shape, k, stride, padding)
            return gx, gk

    else:
        cg_in = c_in // groups
        cg_out = c_out // groups
        parts, saved_cols = [], []
        for gi in range(groups):
            xg = xp[:, gi * cg_in : (gi + 1) * cg_in]
            out_g, cols_g = _conv_forward_g1(xg, kd[gi * cg_out : (gi + 1) * cg_out], k, stride, ho, wo)
            parts.append(out_g)
            saved_cols.append(cols_g)
        out = np.concatenate(parts, axis=1)

        def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            gx = np.empty((n, c_in) + xp_shape[2:])
            gk = np.empty_like(kd)
            for gi in range(groups):
                ks = slice(gi * cg_out, (gi + 1) * cg_out)
                gk[ks], gxg = _conv_backward_g1(
                    g[:, ks], saved_cols[gi], kd[ks],
                    (n, cg_in) + xp_shape[2:], k, stride, padding=0,
                )
                gx[:, gi * cg_in : (gi + 1) * cg_in] = gxg
            if padding:
                gx = gx[:, :, padding : xp_shape[2] - padding, padding : xp_shape[3] - padding]
            return gx, gk

    mults = n * c_out * ho * wo * (c_in // groups) * k * k
    x.tape.counter.record(mults, mults)
    return x.tape.push("conv2d", (x, kernel), out, back, label=label)


def conv2d_per_sample(
    x: Tensor,
    kernels: Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    label: str = "conv2d_per_sample",
) -> Tensor:
    """Convolve each sample with its own kernel: kernels[n] applies to x[n]."""
    if kernels.ndim != 5 or kernels.shape[0] != x.shape[0]:
        raise ShapeError(
            f"conv '{label}': per-sample kernels need shape [N, ...], got {kernels.shape} for batch {x.shape[0]}"
        )
    n = x.shape[0]
    n1, c_in, c_out, k, ho, wo = _conv_checks(
        (1,) + x.shape[1:], kernels.shape[1:], stride, padding, groups, label
    )
    xd, kd = x.data, kernels.data
    out = np.empty((n, c_out, ho, wo))
    saved = []
    for i in range(n):
        xp = _pad_nchw(xd[i : i + 1], padding)
        if groups == 1:
            out[i : i + 1], cols = _conv_forward_g1(xp, kd[i], k, stride, ho, wo)
            saved.append((cols, xp.shape))
        else:
            cg_in = c_in // groups
            cg_out = c_out // groups
            cols_list = []
            for gi in range(groups):
                og, cols_g = _conv_forward_g1(
                    xp[:, gi * cg_in : (gi + 1) * cg_in],
                    kd[i, gi * cg_out : (gi + 1) * cg_out], k, stride, ho, wo,
                )
                out[i : i + 1, gi * cg_out : (gi + 1) * cg_out] = og
                cols_list.append(cols_g)
            saved.append((cols_list, xp.shape))

    def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gx = np.empty_like(xd)
        gk = np.empty_like(kd)
        for i in range(n):
            cols_i, xp_shape = saved[i]
            if groups == 1:
                gk[i], gxi = _conv_backward_g1(g[i : i + 1], cols_i, kd[i], xp_shape, k, stride, padding)
                gx[i] = gxi[0]
            else:
                cg_in = c_in // groups
                cg_out = c_out // groups
                gxp = np.empty((1, c_in) + xp_shape[2:])
                for gi in range(groups):
                    ks = slice(gi * cg_out, (gi + 1) * cg_out)
                    gk[i, ks], gxg = _conv_backward_g1(
                        g[i : i + 1, ks], cols_i[gi], kd[i, ks],
                        (1, cg_in) + xp_shape[2:], k, stride, padding=0,
                    )
                    gxp[:, gi * cg_in : (gi + 1) * cg_in] = gxg
                if padding:
                    gxp = gxp[:, :, padding : xp_shape[2] - padding, padding : xp_shape[3] - padding]
                gx[i] = gxp[0]
        return gx, gk

    mults = n * c_out * ho * wo * (c_in // groups) * k * k
    x.tape.counter.record(mults, mults)
    return x.tape.push("conv2d_per_sample", (x, kernels), out, back, label=label)


# ---------------------------------------------------------------------------
# Pooling and channel-wise combines
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N, C, H, W] -> [N, C].

    Counts C multiplies (the divisions) and C*H*W adds per sample.
    """
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    area = h * w
    out = x.data.mean(axis=(2, 3))
    x.tape.counter.record(n * c, n * c * h * w)

    def back(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to((g / area)[:, :, None, None], (n, c, h, w)).copy(),)

    return x.tape.push("global_avg_pool", (x,), out, back)


def scale_channels(t: Tensor, a: Tensor) -> Tensor:
    """Multiplicative combine: y[n,c,h,w] = a[n,c] * t[n,c,h,w].

    Counts N*C*H*W broadcast multiplies (the integration cost of a scaled
    attention) and no adds.
    """
    if t.ndim != 4 or a.ndim != 2 or t.shape[:2] != a.shape:
        raise ShapeError(f"scale_channels: shapes {t.shape} and {a.shape} do not align on [N, C]")
    n, c, h, w = t.shape
    td, ad = t.data, a.data
    out = td * ad[:, :, None, None]
    t.tape.counter.record(n * c * h * w, 0)

    def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g * ad[:, :, None, None], (g * td).sum(axis=(2, 3))

    return t.tape.push("scale_channels", (t, a), out, back)


def shift_channels(t: Tensor, a: Tensor, balance: Tensor) -> Tensor:
    """Additive combine: y[n,c,h,w] = t[n,c,h,w] + balance[c] * a[n,c].

    Counts C multiplies (balance * a, per sample) and N*C*H*W broadcast adds.
    """
    if t.ndim != 4 or a.ndim != 2 or t.shape[:2] != a.shape:
        raise ShapeError(f"shift_channels: shapes {t.shape} and {a.shape} do not align on [N, C]")
    if balance.shape != (t.shape[1],):
        raise ShapeError(
            f"shift_channels: balance shape {balance.shape} does not match {t.shape[1]} channels"
        )
    n, c, h, w = t.shape
    ad, bd = a.data, balance.data
    shift = ad * bd[None, :]
    out = t.data + shift[:, :, None, None]
    t.tape.counter.record(n * c, n * c * h * w)

    def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_nc = g.sum(axis=(2, 3))
        return g, g_nc * bd[None, :], (g_nc * ad).sum(axis=0)

    return t.tape.push("shift_channels", (t, a, balance), out, back)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def _bn_axes(shape: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if len(shape) == 2:
        return (0,), (1, shape[1])
    if len(shape) == 4:
        return (0, 2, 3), (1, shape[1], 1, 1)
    raise ShapeError(f"batch_norm: expected [N, C] or NCHW, got {shape}")


def batch_norm_train(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, label: str = "batch_norm"
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize by batch statistics; also returns (biased) batch mean/var."""
    axes, bshape = _bn_axes(x.shape)
    m = math.prod(x.shape[i] for i in axes)
    if m < 2:
        raise StatisticsError(f"batch_norm '{label}': needs >= 2 elements per channel, got {m}")
    xd = x.data
    mean = xd.mean(axis=axes)
    xm = xd - mean.reshape(bshape)
    var = np.mean(xm * xm, axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xm * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    gd = gamma.data

    def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        # dxhat = g * gamma, and gamma is constant per channel, so the batch
        # sums of dxhat and dxhat*xhat are gamma * dbeta and gamma * dgamma.
        dx = ((gd * inv).reshape(bshape) / m) * (
            m * g - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape)
        )
        return dx, dgamma, dbeta

    y = x.tape.push("batch_norm_train", (x, gamma, beta), out, back, label=label)
    return y, mean, var


def batch_norm_eval(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    label: str = "batch_norm",
) -> Tensor:
    """Deterministic affine using frozen running statistics."""
    axes, bshape = _bn_axes(x.shape)
    if np.any(running_var <= 0.0):
        raise StatisticsError(f"batch_norm '{label}': running variance must stay positive")
    inv = 1.0 / np.sqrt(running_var + eps)
    gd = gamma.data
    xd = x.data
    scale = (gd * inv).reshape(bshape)
    out = xd * scale + (beta.data - running_mean * gd * inv).reshape(bshape)

    def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xhat = (xd - running_mean.reshape(bshape)) * inv.reshape(bshape)
        return (
            g * scale,
            (g * xhat).sum(axis=axes),
            g.sum(axis=axes),
        )

    return x.tape.push("batch_norm_eval", (x, gamma, beta), out, back, label=label)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [N, K] logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [N, K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"cross_entropy: labels out of range [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = zmax[:, 0] + np.log(ez.sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()
    probs = ez / ez.sum(axis=1, keepdims=True)

    def back(g: np.ndarray) -> tuple[np.ndarray]:
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return logits.tape.push("cross_entropy", (logits,), np.asarray(loss), back)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` receives tape-bound leaves for every entry of ``point`` and must
    return a scalar tensor on the same tape.  Per coordinate the error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v, label=k) for k, v in arrays.items()}
    loss = fn(leaves)
    if loss.size != 1:
        raise ShapeError(f"grad_check: fn must return a scalar, got shape {loss.shape}")
    grads = backward(tape, loss)
    analytic = {
        k: grads.get(leaves[k].node_id, np.zeros_like(arrays[k])) for k in arrays
    }

    def evaluate(values: dict[str, np.ndarray], key: str, index: int) -> float:
        t = Tape()
        out = fn({k: t.leaf(v, label=k) for k, v in values.items()})
        val = float(out.data)
        if not math.isfinite(val):
            raise NumericError(f"grad_check: non-finite value probing point[{key!r}] index {index}")
        return val

    max_err = 0.0
    for key, base in arrays.items():
        flat_analytic = analytic[key].reshape(-1)
        probe = {k: v.copy() for k, v in arrays.items()}
        flat = probe[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate(probe, key, i)
            flat[i] = orig - eps
            f_minus = evaluate(probe, key, i)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = flat_analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err
