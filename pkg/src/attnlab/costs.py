"""Closed-form parameter and multiply/add accounting for built models.

The conventions match the instrumented op counter exactly, so every formula
here can be cross-checked against a live batch-1 forward pass:

* conv: multiplies = adds = c_out * H' * W' * (c_in / groups) * k^2
* fully connected: multiplies = adds = c_in * c_out (bias folded)
* global average pool: C multiplies (the 1/HW scale), C * H * W adds
* channel scaling: C * H * W multiplies; channel shifting: C multiplies
  (the per-channel weights) and C * H * W adds
* BN, activations, gates, bias adds: zero (fusable at inference)

"MAdds" is the multiply count at batch size 1 under this convention.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentiveConv
from .layers import Context
from .models import Model


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    multiplies: int
    adds: int


@dataclass(frozen=True)
class CostReport:
    params: int
    multiplies: int
    adds: int
    breakdown: tuple[LayerCost, ...]

    @property
    def madds(self) -> int:
        return self.multiplies

    def __post_init__(self):
        if self.params != sum(b.params for b in self.breakdown):
            raise ad.ConfigError("cost report: params total disagrees with breakdown")
        if self.multiplies != sum(b.multiplies for b in self.breakdown):
            raise ad.ConfigError("cost report: multiply total disagrees with breakdown")
        if self.adds != sum(b.adds for b in self.breakdown):
            raise ad.ConfigError("cost report: add total disagrees with breakdown")

    def to_json_dict(self) -> dict:
        return {
            "params": self.params,
            "multiplies": self.multiplies,
            "adds": self.adds,
            "madds": self.madds,
            "breakdown": [
                {
                    "name": b.name,
                    "type": b.kind,
                    "params": b.params,
                    "multiplies": b.multiplies,
                    "adds": b.adds,
                }
                for b in self.breakdown
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["name", "type", "params", "multiplies", "adds"])
        for b in self.breakdown:
            writer.writerow([b.name, b.kind, b.params, b.multiplies, b.adds])
        writer.writerow(["total", "", self.params, self.multiplies, self.adds])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# closed-form pieces
# ---------------------------------------------------------------------------


def _branch_terms(c_in: int, c_hidden: int, c_out: int, h: int, w: int) -> tuple[int, int]:
    """Squeeze branch alone: pool + two FCs (BN/activation/gate cost-free)."""
    mults = c_in + c_in * c_hidden + c_hidden * c_out
    adds = c_in * h * w + c_in * c_hidden + c_hidden * c_out
    return mults, adds


def attention_overhead(
    c_in: int, c_out: int, c_hid: int, h: int, w: int, mechanism: str
) -> tuple[int, int]:
    """Extra multiplies/adds of one attention site over the static conv.

    Shift-style integration adds ``c_out`` multiplies (the per-channel
    balance weights) plus ``c_out * h * w`` adds; scale-style integration is
    a broadcast multiply, ``c_out * h * w`` multiplies and no adds.
    """
    for label, v in (("c_in", c_in), ("c_out", c_out), ("c_hid", c_hid), ("h", h), ("w", w)):
        if int(v) != v or v <= 0:
            raise ad.ConfigError(f"attention_overhead: {label} must be a positive integer, got {v}")
    if mechanism not in ("se", "sb"):
        raise ad.ConfigError(f"attention_overhead: mechanism must be 'se' or 'sb', got {mechanism!r}")
    mults, adds = _branch_terms(c_in, c_hid, c_out, h, w)
    if mechanism == "sb":
        return mults + c_out, adds + c_out * h * w
    return mults + c_out * h * w, adds


def _unit_cost(unit: AttentiveConv, h: int, w: int) -> tuple[LayerCost, int, int]:
    ho = (h + 2 * unit.padding - unit.kernel_size) // unit.stride + 1
    wo = (w + 2 * unit.padding - unit.kernel_size) // unit.stride + 1
    conv = unit.c_out * ho * wo * (unit.c_in // unit.groups) * unit.kernel_size**2
    mults, adds = conv, conv
    if unit.mechanism in ("se", "sb"):
        bm, ba = _branch_terms(unit.c_in, unit.branch.c_hidden, unit.c_out, h, w)
        mults += bm
        adds += ba
        if unit.mechanism == "sb":
            mults += unit.c_out
            adds += unit.c_out * ho * wo
        else:
            mults += unit.c_out * ho * wo
    elif unit.mechanism == "dyconv":
        n = len(unit.experts)
        bm, ba = _branch_terms(unit.c_in, unit.router.c_hidden, n, h, w)
        mixing = n * unit.c_out * (unit.c_in // unit.groups) * unit.kernel_size**2
        mults += bm + mixing
        adds += ba + mixing
    kind = "conv" if unit.mechanism == "static" else f"conv+{unit.mechanism}"
    cost = LayerCost(unit.name, kind, unit.param_count(), mults, adds)
    return cost, ho, wo


def count_costs(model: Model, input_shape: tuple[int, int, int] | None = None) -> CostReport:
    """Analytic per-layer costs for a batch-1 forward pass."""
    if input_shape is None:
        r = model.config.resolution
        input_shape = (3, r, r)
    if len(input_shape) != 3 or input_shape[0] != 3:
        raise ad.ShapeError(f"count_costs: expected (3, H, W) input shape, got {input_shape}")
    _, h, w = input_shape

    rows: list[LayerCost] = []
    for unit in model.attentive_units():
        cost, h, w = _unit_cost(unit, h, w)
        rows.append(cost)

    head_c = model.plan["head"]
    rows.append(LayerCost("pool", "global_avg_pool", 0, head_c, head_c * h * w))
    fc = model.classifier
    rows.append(
        LayerCost(
            "classifier", "linear", fc.param_count(), fc.c_in * fc.c_out, fc.c_in * fc.c_out
        )
    )
    return CostReport(
        params=sum(r.params for r in rows),
        multiplies=sum(r.multiplies for r in rows),
        adds=sum(r.adds for r in rows),
        breakdown=tuple(rows),
    )


def count_params(model: Model) -> int:
    return model.param_count()


def count_madds(model: Model, input_shape: tuple[int, int, int] | None = None) -> CostReport:
    return count_costs(model, input_shape)


# ---------------------------------------------------------------------------
# instrumented cross-check
# ---------------------------------------------------------------------------


def measure_costs(model: Model, *, seed: int = 0) -> tuple[int, int]:
    """Multiply/add counters from a real batch-1 eval forward pass."""
    r = model.config.resolution
    x = np.random.default_rng(seed).standard_normal((1, 3, r, r))
    tape = ad.Tape()
    before = tape.counter.snapshot()
    model(Context(tape=tape, training=False), tape.leaf(x))
    after = tape.counter.snapshot()
    return after[0] - before[0], after[1] - before[1]
