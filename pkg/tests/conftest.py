"""Shared test helpers: random layers, acceptance criterion reporting."""

import numpy as np

from sbsim import LayerDescriptor, LayerKind, QuantTensor, SliceConfig

_ACCEPTANCE_LINES = []


def acceptance_line(number: int, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line for an acceptance criterion."""
    line = (f"[acceptance] criterion {number:02d} "
            f"{'PASS' if ok else 'FAIL'} - {detail}")
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_layer(rng, name="layer", max_dim=8, precisions=(4, 7, 10, 13),
                 zero_prob=0.35):
    """A small random conv layer plus matching operand tensors.

    Operand values mix zeros in so skip paths see real work to elide.
    """
    ic = int(rng.integers(1, max_dim + 1))
    oc = int(rng.integers(1, max_dim + 1))
    h = int(rng.integers(1, max_dim + 1))
    w = int(rng.integers(1, max_dim + 1))
    kh = int(rng.integers(1, min(3, h) + 1))
    kw = int(rng.integers(1, min(3, w) + 1))
    stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    padding = (int(rng.integers(0, kh)), int(rng.integers(0, kw)))
    p_in = int(rng.choice(precisions))
    p_w = int(rng.choice(precisions))
    layer = LayerDescriptor(
        name,
        LayerKind.CONV2D,
        in_channels=ic,
        height=h,
        width=w,
        out_channels=oc,
        kernel=(kh, kw),
        stride=stride,
        padding=padding,
        input_slices=SliceConfig.for_precision(p_in),
        weight_slices=SliceConfig.for_precision(p_w),
    )
    top_in = (1 << (p_in - 1)) - 1
    top_w = (1 << (p_w - 1)) - 1
    keep_in = rng.random((ic, h, w)) >= zero_prob
    keep_w = rng.random((oc, ic, kh, kw)) >= zero_prob
    inputs = QuantTensor(
        rng.integers(-top_in, top_in + 1, (ic, h, w)) * keep_in, p_in
    )
    weights = QuantTensor(
        rng.integers(-top_w, top_w + 1, (oc, ic, kh, kw)) * keep_w, p_w
    )
    return layer, inputs, weights
