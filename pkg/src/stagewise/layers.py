"""Declarative layer specs: seeded parameter init, shape walking, MAC counts.

A LayerSpec is pure geometry ("conv3x3 128 256"); a Layer binds it to
initialized LayerParams and dispatches forward calls into the tensor ops.
MAC counting is shape-only so FLOP reports never need instantiated weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError

# kind -> number of integer args
KINDS = {
    "dense": 2,       # in, out
    "conv3x3": 2,     # C_in, C_out
    "conv1x1": 2,     # C_in, C_out
    "batchnorm": 1,   # channels
    "relu": 0,
    "maxpool2x2": 0,
    "avgpool_to": 2,  # target_h, target_w
    "flatten": 0,
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown layer kind '{self.kind}'")
        if len(self.args) != KINDS[self.kind]:
            raise ValidationError(
                f"layer '{self.kind}' takes {KINDS[self.kind]} args, "
                f"got {self.args}")

    def __str__(self):
        return " ".join([self.kind] + [str(a) for a in self.args])


def parse_layer(text: str) -> LayerSpec:
    parts = text.split()
    if not parts:
        raise ValidationError("empty layer spec")
    try:
        args = tuple(int(a) for a in parts[1:])
    except ValueError as e:
        raise ValidationError(f"bad layer args in '{text}': {e}") from None
    return LayerSpec(parts[0], args)


def out_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape of one layer; raises ShapeError on any mismatch."""
    k, a = spec.kind, spec.args
    if k == "dense":
        if len(in_shape) != 1 or in_shape[0] != a[0]:
            raise ShapeError(f"dense {a[0]}->{a[1]} cannot take input {in_shape}")
        return (a[1],)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    if k == "relu":
        return in_shape
    if k == "batchnorm":
        if in_shape[0] != a[0]:
            raise ShapeError(f"batchnorm({a[0]}) cannot take input {in_shape}")
        return in_shape
    if len(in_shape) != 3:
        raise ShapeError(f"layer '{k}' needs a (C, H, W) input, got {in_shape}")
    c, h, w = in_shape
    if k in ("conv3x3", "conv1x1"):
        if c != a[0]:
            raise ShapeError(f"{k} {a[0]}->{a[1]} cannot take {c} channels")
        return (a[1], h, w)
    if k == "maxpool2x2":
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)
    if k == "avgpool_to":
        if a[0] > h or a[1] > w:
            raise ShapeError(f"avgpool_to {a} cannot upsample from {h}x{w}")
        return (c, a[0], a[1])
    raise ValidationError(k)


def layer_macs(spec: LayerSpec, in_shape: tuple[int, ...]) -> int:
    """Multiply-accumulate count per sample. Pooling, relu, flatten and
    batchnorm count as zero."""
    k, a = spec.kind, spec.args
    if k == "dense":
        return a[0] * a[1]
    if k in ("conv3x3", "conv1x1"):
        ksq = 9 if k == "conv3x3" else 1
        _, h, w = out_shape(spec, in_shape)
        return a[0] * a[1] * ksq * h * w
    return 0


def walk_shapes(specs, in_shape) -> list[tuple[int, ...]]:
    """Shapes after each layer (validates the whole chain)."""
    shapes = []
    shape = tuple(in_shape)
    for spec in specs:
        shape = out_shape(spec, shape)
        shapes.append(shape)
    return shapes


def chain_macs(specs, in_shape) -> list[int]:
    macs = []
    shape = tuple(in_shape)
    for spec in specs:
        macs.append(layer_macs(spec, shape))
        shape = out_shape(spec, shape)
    return macs


@dataclass(frozen=True)
class FlopReport:
    """Shape-only MAC counts for one stage (primary body + auxiliary head)."""

    body_macs: tuple[int, ...]
    head_macs: tuple[int, ...]

    @property
    def body_total(self) -> int:
        return sum(self.body_macs)

    @property
    def head_total(self) -> int:
        return sum(self.head_macs)

    @property
    def total(self) -> int:
        return self.body_total + self.head_total


def flop_count(body, head, in_shape) -> FlopReport:
    body_macs = chain_macs(body, in_shape)
    mid = walk_shapes(body, in_shape)[-1] if body else tuple(in_shape)
    head_macs = chain_macs(head, mid) if head else []
    return FlopReport(tuple(body_macs), tuple(head_macs))


# -- parameter init and bound layers ----------------------------------------


def init_params(spec: LayerSpec, rng: np.random.Generator) -> T.LayerParams | None:
    """Fan-in-scaled Gaussian init (std sqrt(2/fan_in)), zero bias; batchnorm
    starts at identity with zeroed running stats."""
    k, a = spec.kind, spec.args
    if k == "dense":
        std = math.sqrt(2.0 / a[0])
        return T.LayerParams(rng.normal(0.0, std, (a[0], a[1])), np.zeros(a[1]))
    if k in ("conv3x3", "conv1x1"):
        ksz = 3 if k == "conv3x3" else 1
        std = math.sqrt(2.0 / (a[0] * ksz * ksz))
        return T.LayerParams(rng.normal(0.0, std, (a[1], a[0], ksz, ksz)),
                             np.zeros(a[1]))
    if k == "batchnorm":
        return T.LayerParams(np.ones(a[0]), np.zeros(a[0]),
                             running_mean=np.zeros(a[0]),
                             running_var=np.ones(a[0]))
    return None


class Layer:
    """A LayerSpec bound to its (possibly absent) parameters."""

    def __init__(self, spec: LayerSpec, params: T.LayerParams | None):
        self.spec = spec
        self.params = params

    def forward(self, x, tape=None, training=False, update_stats=None):
        k = self.spec.kind
        if k == "dense":
            return T.dense(x, self.params, tape)
        if k == "conv3x3":
            return T.conv2d_3x3(x, self.params, tape)
        if k == "conv1x1":
            return T.conv2d_1x1(x, self.params, tape)
        if k == "batchnorm":
            return T.batchnorm(x, self.params, training, tape,
                               update_stats=update_stats)
        if k == "relu":
            return T.relu(x, tape)
        if k == "maxpool2x2":
            return T.maxpool2x2(x, tape)
        if k == "avgpool_to":
            return T.avgpool_to(x, *self.spec.args, tape)
        if k == "flatten":
            return T.flatten(x, tape)
        raise ValidationError(k)

    def __repr__(self):
        return f"Layer({self.spec})"


def build_layers(specs, rng) -> list[Layer]:
    return [Layer(s, init_params(s, rng)) for s in specs]
