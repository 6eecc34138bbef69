"""Gradient verification utilities for whole attention units.

Central differences are only valid away from activation kinks (relu/relu6
corners, gate corners).  ``checked_unit_and_input`` builds a unit whose
forward pass provably keeps every kinked pre-activation at least a small
margin from its corner, nudging the input deterministically until that
holds; ``unit_grad_check`` then compares analytic gradients of the complete
unit (every parameter plus the input) against central differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import AttentiveConv
from .layers import Context

KINK_MARGIN = 2e-3


def _bn_affine(bn, h):
    return bn.gamma.value * (h - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) + bn.beta.value


def _branch_margins(branch, x):
    """Distances of branch-internal pre-activations from their kinks (eval mode)."""
    s = x.mean(axis=(2, 3))
    h_pre = _bn_affine(branch.bn, s @ branch.fc1.weight.value + branch.fc1.bias.value)
    margins = [np.abs(h_pre).min()]
    if branch.gate == "relu":
        h = np.maximum(h_pre, 0.0)
        z = h @ branch.fc2.weight.value + branch.fc2.bias.value
        margins.append(np.abs(z).min())
    return margins


def _trunk_margins(unit, x):
    if unit.activation is None:
        return []
    saved = unit.activation
    unit.activation = None
    try:
        tape = ad.Tape()
        ctx = Context(tape=tape, training=False)
        t_pre = unit._trunk(ctx, tape.leaf(x)).data
    finally:
        unit.activation = saved
    margins = [np.abs(t_pre).min()]
    if saved == "relu6":
        margins.append(np.abs(t_pre - 6.0).min())
    return margins


def kink_margin(unit, x):
    """Smallest distance of any kinked pre-activation from its corner."""
    margins = _trunk_margins(unit, x)
    for branch in (unit.branch, unit.router):
        if branch is not None:
            margins.extend(_branch_margins(branch, x))
    return min(margins)


def checked_unit_and_input(mechanism, gate, seed, *, c_in=3, c_out=4, n=2, spatial=4):
    """Build a small attention unit plus an input clear of every kink.

    The branch biases are set away from zero so gates with gate(0)=0 do not
    collapse the whole unit onto the relu6 corner; candidate inputs are then
    drawn from a seeded stream until all kinked pre-activations have margin.
    """
    rng = np.random.default_rng(seed)
    unit = AttentiveConv(
        c_in, c_out, 3, padding=1, activation="relu6",
        mechanism=mechanism, gate=gate, branch_hidden=2, n_experts=2,
        rng=np.random.default_rng(seed + 1), name="u",
    )
    for branch in (unit.branch, unit.router):
        if branch is not None:
            branch.fc1.bias.value[...] = 0.3
            width = branch.fc2.bias.value.shape[0]
            branch.fc2.bias.value[...] = np.where(np.arange(width) % 2 == 0, 0.35, -0.45)

    for _attempt in range(40):
        x = rng.standard_normal((n, c_in, spatial, spatial))
        if kink_margin(unit, x) > KINK_MARGIN:
            return unit, x
    raise ad.NumericError(
        f"could not find a kink-free probe point for {mechanism}/{gate} seed {seed}"
    )


def unit_grad_check(mechanism, gate, seed, eps=1e-5):
    """Max relative gradient error of a whole unit against central differences."""
    unit, x = checked_unit_and_input(mechanism, gate, seed)
    w = np.random.default_rng(seed + 2).standard_normal((x.shape[0], unit.c_out) + x.shape[2:])
    point = {p.name: p.value for p in unit.parameters()}
    point["x"] = x

    def fn(leaves):
        tape = leaves["x"].tape
        ctx = Context(
            tape=tape, training=False,
            overrides={k: v for k, v in leaves.items() if k != "x"},
        )
        y = unit(ctx, leaves["x"])
        return ad.sum_all(ad.mul(y, tape.leaf(w)))

    return ad.grad_check(fn, point, eps=eps)


def grad_check_trials(mechanism, gate, trials, *, seed=0, eps=1e-5) -> dict:
    """Run seeded whole-unit gradient checks and collect the error profile."""
    if trials < 1:
        raise ad.ConfigError(f"need at least one trial, got {trials}")
    errors = [float(unit_grad_check(mechanism, gate, seed + t, eps=eps)) for t in range(trials)]
    return {
        "mechanism": mechanism,
        "gate": gate,
        "trials": trials,
        "eps": eps,
        "max_rel_err": max(errors),
        "errors": errors,
    }
