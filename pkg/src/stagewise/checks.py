"""Finite-difference oracle battery over the whole layer vocabulary.

Each case builds a random small fragment ending in softmax cross-entropy and
compares tape gradients against central differences. Inputs near relu kinks
or maxpool ties are nudged away so the difference quotient stays valid.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .layers import Layer, LayerSpec, build_layers, walk_shapes


def _safe_relu_input(rng, shape, margin=5e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += 4 * margin
    return x


def _safe_bn_input(rng, shape, min_var=0.3):
    # tiny per-channel batch variance makes 1/sqrt(var + eps) third
    # derivatives blow past FD truncation accuracy; redraw until safe
    axes = (0, 2, 3) if len(shape) == 4 else (0,)
    for _ in range(100):
        x = rng.normal(size=shape) * 2.0
        if x.var(axis=axes).min() >= min_var:
            return x
    raise RuntimeError("could not draw a well-conditioned batchnorm input")


def _safe_pool_input(rng, shape, margin=1e-3):
    # separate window entries so the argmax cannot flip under +/-epsilon
    x = rng.normal(size=shape)
    b, c, h, w = shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2)
    flat = win.reshape(-1, 4)
    for row in flat:
        order = np.argsort(row)
        for i in range(1, 4):
            lo = row[order[i - 1]]
            if row[order[i]] - lo < margin:
                row[order[i]] = lo + margin
    return flat.reshape(b, c, h // 2, 2, w // 2, 2).reshape(shape)


def _make_case(layers, proj, labels):
    params = [l.params for l in layers if l.params is not None] + [proj.params]

    def forward(x, tape):
        h = x
        for l in layers:
            h = l.forward(h, tape, training=True)
        if h.ndim > 2:
            h = T.flatten(h, tape)
        logits = proj.forward(h, tape, training=True)
        return T.softmax_xent(logits, labels, tape)

    return forward, params


def _case_for(kind, rng, classes=3):
    b = int(rng.integers(2, 4))
    if kind == "dense":
        din, dout = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        specs = [LayerSpec("dense", (din, dout))]
        x = rng.normal(size=(b, din))
        in_shape = (din,)
    elif kind in ("conv3x3", "conv1x1"):
        c, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(3, 6))
        specs = [LayerSpec(kind, (c, co))]
        x = rng.normal(size=(b, c, h, h))
        in_shape = (c, h, h)
    elif kind == "maxpool2x2":
        c = int(rng.integers(1, 3))
        h = int(rng.choice([2, 4, 6]))
        specs = [LayerSpec("maxpool2x2")]
        x = _safe_pool_input(rng, (b, c, h, h))
        in_shape = (c, h, h)
    elif kind == "avgpool_to":
        c = int(rng.integers(1, 3))
        h = int(rng.integers(3, 8))
        th = int(rng.integers(1, min(h, 4)))
        specs = [LayerSpec("avgpool_to", (th, th))]
        x = rng.normal(size=(b, c, h, h))
        in_shape = (c, h, h)
    elif kind == "batchnorm":
        c = int(rng.integers(1, 4))
        if rng.integers(2):
            h = int(rng.integers(2, 5))
            x = _safe_bn_input(rng, (b, c, h, h))
            in_shape = (c, h, h)
        else:
            x = _safe_bn_input(rng, (b, c))
            in_shape = (c,)
        specs = [LayerSpec("batchnorm", (c,))]
    elif kind == "relu":
        c = int(rng.integers(2, 6))
        specs = [LayerSpec("relu")]
        x = _safe_relu_input(rng, (b, c))
        in_shape = (c,)
    elif kind == "softmax_xent":
        c = int(rng.integers(2, 6))
        specs = []
        x = rng.normal(size=(b, c))
        in_shape = (c,)
    elif kind == "compose_conv_pool":
        c, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        specs = [LayerSpec("conv3x3", (c, co)), LayerSpec("relu"),
                 LayerSpec("maxpool2x2")]
        x = rng.normal(size=(b, c, 4, 4))
        in_shape = (c, 4, 4)
    elif kind == "compose_conv_bn":
        # relu between conv and batchnorm keeps the conv bias gradient
        # nonzero (bn directly after conv makes it exactly zero, which FD
        # cannot resolve against the denominator floor)
        c, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        specs = [LayerSpec("conv3x3", (c, co)), LayerSpec("relu"),
                 LayerSpec("batchnorm", (co,)), LayerSpec("avgpool_to", (2, 2))]
        x = rng.normal(size=(b, c, 4, 4))
        in_shape = (c, 4, 4)
    elif kind == "compose_mlp":
        d = int(rng.integers(2, 6))
        specs = [LayerSpec("dense", (d, d)), LayerSpec("relu"),
                 LayerSpec("dense", (d, d))]
        x = _safe_relu_input(rng, (b, d))
        in_shape = (d,)
    else:
        raise ValueError(kind)
    layers = build_layers(specs, rng)
    out = walk_shapes(specs, in_shape)[-1] if specs else in_shape
    flat = int(np.prod(out))
    proj = Layer(LayerSpec("dense", (flat, classes)),
                 T.LayerParams(rng.normal(0, 0.5, (flat, classes)),
                               np.zeros(classes)))
    labels = rng.integers(0, classes, size=b)
    forward, params = _make_case(layers, proj, labels)
    return forward, x, params


BATTERY_KINDS = ("dense", "conv3x3", "conv1x1", "maxpool2x2", "avgpool_to",
                 "batchnorm", "relu", "softmax_xent",
                 "compose_conv_pool", "compose_conv_bn", "compose_mlp")


def run_gradcheck_battery(cases_per_type: int = 100, epsilon: float = 1e-5,
                          tolerance: float = 1e-4, seed: int = 0,
                          floor: float = 2e-6):
    """Returns (kind, worst relative error, passed) per layer kind.

    The denominator floor sits above the central-difference roundoff noise
    (about |loss| * 5e-11 at epsilon 1e-5): gradient entries that are
    legitimately near zero would otherwise read as pure noise.
    """
    results = []
    for kind in BATTERY_KINDS:
        rng = np.random.default_rng([seed, zlib.crc32(kind.encode())])
        worst = 0.0
        for _ in range(cases_per_type):
            forward, x, params = _case_for(kind, rng)
            worst = max(worst, T.grad_check(forward, x, epsilon, params,
                                            floor=floor))
        results.append((kind, worst, worst <= tolerance))
    return results
