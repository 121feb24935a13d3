"""Greedy stage construction: primary bodies, auxiliary heads, MAC-balanced
splits, and the per-stage local update.

A network is a list of StageSpec. Each stage owns a primary body f and a head
g mapping the body output to class logits; the head is an auxiliary design
(cnn_aux / mlp_aux / mlp_sr_aux) everywhere except the last stage, which
carries the real classifier instead. stage_step performs one local update:
a single tape spans head-on-top-of-body, so no gradient ever crosses a stage
boundary.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import NonFiniteError, ShapeError, ValidationError
from .layers import (FlopReport, Layer, LayerSpec, build_layers, chain_macs,
                     flop_count, parse_layer, walk_shapes)
from .optim import sgd_step

log = logging.getLogger(__name__)

AUX_KINDS = ("cnn_aux", "mlp_aux", "mlp_sr_aux", "none")


@dataclass(frozen=True)
class StageSpec:
    """One greedy stage: primary layers, head layers, bookkeeping shapes."""

    body: tuple[LayerSpec, ...]
    head: tuple[LayerSpec, ...] | None
    aux_kind: str
    classes: int
    in_shape: tuple[int, ...]

    def __post_init__(self):
        if self.aux_kind not in AUX_KINDS:
            raise ValidationError(f"unknown aux kind '{self.aux_kind}'")

    @property
    def out_shape(self) -> tuple[int, ...]:
        return walk_shapes(self.body, self.in_shape)[-1] if self.body \
            else self.in_shape

    def flops(self) -> FlopReport:
        return flop_count(self.body, self.head or (), self.in_shape)


def validate_chain(specs) -> None:
    """Adjacent shapes must agree; exactly the last stage is the classifier."""
    for i, s in enumerate(specs):
        last = i == len(specs) - 1
        if last and s.aux_kind != "none":
            raise ValidationError("last stage must have aux kind 'none' "
                                  "(it carries the final classifier)")
        if not last and s.aux_kind == "none" and s.head is not None:
            raise ValidationError(f"stage {i} is not last but has aux 'none'")
        if i > 0 and specs[i - 1].out_shape != s.in_shape:
            raise ShapeError(
                f"stage {i} input {s.in_shape} != stage {i - 1} output "
                f"{specs[i - 1].out_shape}")


# -- serialization (harness config format) -----------------------------------


def stage_to_text(spec: StageSpec) -> str:
    body = " | ".join(str(l) for l in spec.body)
    head = " | ".join(str(l) for l in (spec.head or ()))
    shape = "x".join(str(d) for d in spec.in_shape)
    return f"{spec.aux_kind} ; {spec.classes} ; {shape} ; {body} ; {head}"


def stage_from_text(text: str) -> StageSpec:
    parts = [p.strip() for p in text.split(";")]
    if len(parts) != 5:
        raise ValidationError(f"stage spec needs 5 ';'-separated fields, "
                              f"got {len(parts)}")
    aux, classes, shape, body, head = parts
    in_shape = tuple(int(d) for d in shape.split("x"))
    body_specs = tuple(parse_layer(x) for x in body.split("|") if x.strip())
    head_specs = tuple(parse_layer(x) for x in head.split("|") if x.strip())
    return StageSpec(body_specs, head_specs or None, aux, int(classes), in_shape)


# -- architectures ------------------------------------------------------------


def build_cifar6(width: int, classes: int,
                 in_shape: tuple[int, int, int] = (3, 32, 32)) -> list[StageSpec]:
    """Six single-conv stages: 3x3 convs with batchnorm, relu and shape
    preserving padding, 2x2 maxpool inside stages 2 and 4, channel width
    doubling after each downsampling. The last stage carries a pooled
    2-hidden-layer fully connected classifier."""
    if width < 1:
        raise ValidationError(f"width must be >= 1, got {width}")
    c_in = in_shape[0]
    widths = [width, width, 2 * width, 2 * width, 4 * width, 4 * width]
    pooled = (1, 3)  # 0-indexed stages that end in a maxpool
    specs = []
    shape = tuple(in_shape)
    for j in range(6):
        body = [LayerSpec("conv3x3", (c_in, widths[j])),
                LayerSpec("batchnorm", (widths[j],)),
                LayerSpec("relu")]
        if j in pooled:
            body.append(LayerSpec("maxpool2x2"))
        spec = StageSpec(tuple(body), None, "none", classes, shape)
        shape = spec.out_shape
        c_in = widths[j]
        specs.append(spec)
    head = build_classifier(specs[-1].out_shape, classes)
    specs[-1] = replace(specs[-1], head=tuple(head))
    return specs


def _pool_to(shape, th, tw):
    """avgpool_to spec with fallback to 1x1 when the map is too small."""
    c, h, w = shape
    if h < th or w < tw:
        log.info("aux pooling fallback to 1x1 (map %dx%d smaller than "
                 "target %dx%d)", h, w, th, tw)
        th, tw = 1, 1
    return LayerSpec("avgpool_to", (th, tw)), (c, th, tw)


def _mlp_tail(flat_dim: int, hidden: int, classes: int) -> list[LayerSpec]:
    # three fully connected layers of the given width, then the projection
    tail = [LayerSpec("dense", (flat_dim, hidden)), LayerSpec("relu"),
            LayerSpec("dense", (hidden, hidden)), LayerSpec("relu"),
            LayerSpec("dense", (hidden, hidden)), LayerSpec("relu"),
            LayerSpec("dense", (hidden, classes))]
    return tail


def build_aux(kind: str, shape: tuple[int, int, int], classes: int,
              hidden_width: int | None = None) -> list[LayerSpec]:
    """Auxiliary head mapping a (C, H, W) activation to class logits.

    cnn_aux: two 3x3 convs at input width, then 2x2 averaging and projection.
    mlp_aux: spatial averaging to 2x2 (any resolution), then a 3-layer MLP.
    mlp_sr_aux: 4x spatial reduction, three 1x1 convs, reduce to 2x2, then
    the same MLP tail. hidden_width defaults to the flattened 2x2 input
    (4*C); pass an explicit value to keep it constant across a network.
    """
    if len(shape) != 3:
        raise ShapeError(f"aux heads need a (C, H, W) activation, got {shape}")
    c = shape[0]
    hidden = hidden_width if hidden_width is not None else 4 * c
    if kind == "cnn_aux":
        pool, pooled = _pool_to(shape, 2, 2)
        flat = pooled[0] * pooled[1] * pooled[2]
        return [LayerSpec("conv3x3", (c, c)), LayerSpec("relu"),
                LayerSpec("conv3x3", (c, c)), LayerSpec("relu"),
                pool, LayerSpec("flatten"),
                LayerSpec("dense", (flat, classes))]
    if kind == "mlp_aux":
        pool, pooled = _pool_to(shape, 2, 2)
        flat = pooled[0] * pooled[1] * pooled[2]
        return [pool, LayerSpec("flatten")] + _mlp_tail(flat, hidden, classes)
    if kind == "mlp_sr_aux":
        _, h, w = shape
        sr, reduced = _pool_to(shape, max(1, h // 4), max(1, w // 4))
        layers = [sr]
        for _ in range(3):
            layers += [LayerSpec("conv1x1", (c, c)), LayerSpec("relu")]
        pool, pooled = _pool_to(reduced, 2, 2)
        flat = pooled[0] * pooled[1] * pooled[2]
        layers += [pool, LayerSpec("flatten")]
        return layers + _mlp_tail(flat, hidden, classes)
    raise ValidationError(f"unknown aux kind '{kind}'")


def build_classifier(shape: tuple[int, int, int], classes: int) -> list[LayerSpec]:
    """Final head: pooling then a 2-hidden-layer fully connected classifier
    (hidden widths equal the flattened pooled dimension)."""
    pool, pooled = _pool_to(shape, 2, 2)
    flat = pooled[0] * pooled[1] * pooled[2]
    return [pool, LayerSpec("flatten"),
            LayerSpec("dense", (flat, flat)), LayerSpec("relu"),
            LayerSpec("dense", (flat, flat)), LayerSpec("relu"),
            LayerSpec("dense", (flat, classes))]


def attach_aux(specs, kind: str, hidden_width: int | None = None) -> list[StageSpec]:
    """Give every non-final stage an auxiliary head of the chosen design.

    For MLP-style heads the hidden width defaults to 4x the first stage's
    output channels, constant across the network.
    """
    if hidden_width is None and kind in ("mlp_aux", "mlp_sr_aux"):
        hidden_width = 4 * specs[0].out_shape[0]
    out = []
    for i, s in enumerate(specs):
        if i == len(specs) - 1:
            out.append(s)
        else:
            head = build_aux(kind, s.out_shape, s.classes, hidden_width)
            out.append(replace(s, head=tuple(head), aux_kind=kind))
    validate_chain(out)
    return out


def split(specs, k: int) -> list[StageSpec]:
    """Partition per-layer stages into k contiguous multi-layer stages,
    balancing cumulative body MAC counts (exact argmin over all contiguous
    partitions of the maximum group load; deterministic tie-break).

    Interior aux heads of the input are discarded: only the new group
    boundaries carry heads, so attach_aux should run after split.
    """
    j = len(specs)
    if not 1 <= k <= j:
        raise ValidationError(f"k must lie in [1, {j}], got {k}")
    loads = [sum(chain_macs(s.body, s.in_shape)) for s in specs]
    best, best_cost = None, None
    for cuts in itertools.combinations(range(1, j), k - 1):
        bounds = (0,) + cuts + (j,)
        cost = max(sum(loads[a:b]) for a, b in zip(bounds, bounds[1:]))
        if best_cost is None or cost < best_cost:
            best, best_cost = bounds, cost
    merged = []
    for a, b in zip(best, best[1:]):
        body = tuple(l for s in specs[a:b] for l in s.body)
        merged.append(StageSpec(body,
                                specs[-1].head if b == j else None,
                                "none", specs[a].classes, specs[a].in_shape))
    return merged


# -- live stages --------------------------------------------------------------


class GreedyStage:
    """A stage's instantiated body and head with local optimizer state."""

    def __init__(self, index: int, spec: StageSpec, body: list[Layer],
                 head: list[Layer]):
        self.index = index
        self.spec = spec
        self.body = body
        self.head = head
        self.update_count = 0
        self.velocities = [np.zeros_like(a) for _, _, a in _collect_params(self)]

    def __repr__(self):
        return f"GreedyStage({self.index}, {len(self.body)} body layers)"


def _collect_params(stage: GreedyStage):
    """(LayerParams, name, array) triples in stable body-then-head order."""
    out = []
    for layer in stage.body + stage.head:
        if layer.params is not None:
            for name, arr in layer.params.arrays():
                out.append((layer.params, name, arr))
    return out


def stage_params(stage: GreedyStage) -> list[np.ndarray]:
    return [arr for _, _, arr in _collect_params(stage)]


def snapshot_params(stage: GreedyStage) -> list[np.ndarray]:
    return [arr.copy() for arr in stage_params(stage)]


def restore_params(stage: GreedyStage, arrays) -> None:
    for dst, src in zip(stage_params(stage), arrays, strict=True):
        dst[...] = src


def forward_body(stage: GreedyStage, x, tape=None, training=False,
                 update_stats=None):
    for layer in stage.body:
        x = layer.forward(x, tape, training, update_stats)
    return x


def forward_head(stage: GreedyStage, h, tape=None, training=False):
    for layer in stage.head:
        h = layer.forward(h, tape, training)
    return h


def build_stages(specs, seed) -> list[GreedyStage]:
    """Instantiate all stages with a single seeded init stream (stage order,
    body before head)."""
    validate_chain(specs)
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    stages = []
    for i, spec in enumerate(specs):
        body = build_layers(spec.body, rng)
        head = build_layers(spec.head or (), rng)
        if not head:
            raise ValidationError(f"stage {i} has no head; every stage needs "
                                  "a local loss path")
        stages.append(GreedyStage(i, spec, body, head))
    return stages


def stage_step(stage: GreedyStage, x, y, lr: float, momentum: float = 0.9,
               weight_decay: float = 5e-4, step_label: str = "") -> tuple[np.ndarray, float]:
    """One local update: forward body (pre-update output is returned for the
    next stage), forward head, local cross-entropy, one shared backward pass,
    one SGD step on body+head parameters."""
    tape = T.GradTape()
    h = forward_body(stage, x, tape, training=True)
    logits = forward_head(stage, h, tape, training=True)
    try:
        loss = T.softmax_xent(logits, y, tape)
    except NonFiniteError as e:
        raise NonFiniteError(f"stage {stage.index}{step_label}: {e}") from None
    res = T.backward(tape)
    triples = _collect_params(stage)
    grads = []
    for p, name, _ in triples:
        g = res.grad(p, name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"stage {stage.index}{step_label}: non-finite gradient in "
                f"{name}")
        grads.append(g)
    sgd_step([arr for _, _, arr in triples], grads, stage.velocities,
             lr, momentum, weight_decay)
    stage.update_count += 1
    return h, loss


def stage_eval_logits(stage: GreedyStage, x) -> tuple[np.ndarray, np.ndarray]:
    h = forward_body(stage, x, training=False)
    return h, forward_head(stage, h, training=False)


def evaluate(stages, inputs, labels, batch_size: int = 500) -> list[float]:
    """Per-stage head accuracy over a frozen eval pipeline (batchnorm in eval
    mode)."""
    n = inputs.shape[0]
    correct = np.zeros(len(stages))
    for lo in range(0, n, batch_size):
        x = inputs[lo:lo + batch_size]
        yb = labels[lo:lo + batch_size]
        for i, stage in enumerate(stages):
            x, logits = stage_eval_logits(stage, x)
            correct[i] += int((logits.argmax(axis=1) == yb).sum())
    return [float(c / n) for c in correct]


def stage_loss(stage: GreedyStage, x, y) -> float:
    """Head loss without any update (eval-mode body and head)."""
    _, logits = stage_eval_logits(stage, x)
    return T.softmax_xent(logits, y)
