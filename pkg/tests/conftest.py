"""Shared test helpers.

The gradient-checking machinery lives in the package so the service's
grad-check endpoint runs the identical probes; the op-counter probe below is
test-only and shared between the cost-model unit tests and the acceptance
suite.
"""

import numpy as np

from attnlab import autodiff as ad
from attnlab.attention import AttentionBranch
from attnlab.diagnostics import (  # noqa: F401 (re-exported for test modules)
    KINK_MARGIN,
    checked_unit_and_input,
    kink_margin,
    unit_grad_check,
)
from attnlab.layers import Context


def measured_branch_and_combine(c_in, c_out, c_hid, h, w, mechanism, seed=0):
    """Op-counter deltas of a real squeeze branch plus combine execution."""
    rng = np.random.default_rng(seed)
    branch = AttentionBranch(c_in, c_hid, c_out, gate="sigmoid", rng=rng, name="probe")
    tape = ad.Tape()
    ctx = Context(tape=tape, training=False)
    x = tape.leaf(rng.standard_normal((1, c_in, h, w)))
    trunk = tape.leaf(rng.standard_normal((1, c_out, h, w)))
    before = tape.counter.snapshot()
    a = branch(ctx, x)
    if mechanism == "se":
        ad.scale_channels(trunk, a)
    else:
        balance = tape.leaf(np.full(c_out, 0.1))
        ad.shift_channels(trunk, a, balance)
    after = tape.counter.snapshot()
    return after[0] - before[0], after[1] - before[1]
