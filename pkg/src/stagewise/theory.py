"""Empirical probes for the convergence quantities of greedy stage training.

Tracks, per training step: the learning rate, a full-batch estimate of the
squared gradient norm of a stage's local risk under the *converged* upstream
representation, the stage loss, and a drift estimate between the upstream
activation distribution at step t and its final state. The drift is the
total-variation-style distance between 2-d histograms of the activations
under a shared fixed random projection and grid (the integral distance is
not computable for continuous activations from finite samples; this proxy is
deterministic and exact for genuinely discrete cases).

bound_check compares the accumulated lr-weighted gradient norms against the
descent bound initial_loss + G * sum_t lr_t * (sqrt(2 c_t) + L lr_t / 2) and
reports the companion rate proxy sum(sqrt(c_t) lr_t) / sum(lr_t) for the
best-seen gradient norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .nets import forward_body, forward_head, stage_params

DRIFT_BINS = 32


@dataclass
class TheoryTrace:
    steps: np.ndarray       # 0..T
    eta: np.ndarray         # learning rate per step
    grad_norm: np.ndarray   # squared full-batch gradient norm estimate
    drift: np.ndarray       # c_t estimate in [0, 2]
    loss: np.ndarray        # stage loss estimate

    def validate(self):
        n = len(self.steps)
        for name in ("eta", "grad_norm", "drift", "loss"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"trace field '{name}' has wrong length")
        if not np.array_equal(self.steps, np.arange(n)):
            raise ValidationError("trace has missing checkpoints: steps must "
                                  "be contiguous from 0")


@dataclass(frozen=True)
class ConstantEstimates:
    """Empirical lower bounds for the gradient second-moment bound and the
    gradient Lipschitz constant, with the protocol that produced them."""

    g_sq_max: float
    lipschitz: float
    protocol: str = ""


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    satisfied: bool
    inf_grad_norm: float
    rate_proxy: float
    mode: str = "single"


# -- gradient probes ----------------------------------------------------------


def stage_full_grad(stage, inputs, labels) -> np.ndarray:
    """Flat full-batch gradient of the stage's local loss (eval-mode body,
    so frozen batch statistics do not perturb the estimate)."""
    tape = T.GradTape()
    h = forward_body(stage, inputs, tape, training=False)
    logits = forward_head(stage, h, tape, training=False)
    T.softmax_xent(logits, labels, tape)
    res = T.backward(tape)
    flats = []
    for layer in stage.body + stage.head:
        if layer.params is not None:
            for name, _ in layer.params.arrays():
                flats.append(res.grad(layer.params, name).ravel())
    return np.concatenate(flats)


def grad_norm_estimate(stage, inputs, labels) -> float:
    """Squared norm of the full-batch gradient over a fixed eval set."""
    if inputs.shape[0] == 0:
        raise ValidationError("grad_norm_estimate needs a non-empty eval set")
    g = stage_full_grad(stage, inputs, labels)
    return float(g @ g)


def per_sample_grad_norms(stage, inputs, labels) -> np.ndarray:
    """Squared per-sample gradient norms (one singleton backward each)."""
    out = np.empty(inputs.shape[0])
    for i in range(inputs.shape[0]):
        g = stage_full_grad(stage, inputs[i:i + 1], labels[i:i + 1])
        out[i] = g @ g
    return out


# -- drift estimator ----------------------------------------------------------


def random_projection(dim: int, seed: int = 12345) -> np.ndarray:
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=(dim, 2))
    return proj / np.linalg.norm(proj, axis=0, keepdims=True)


@dataclass(frozen=True)
class DriftGrid:
    x_edges: tuple[float, ...]
    y_edges: tuple[float, ...]


def make_drift_grid(acts_ref, projection, bins: int = DRIFT_BINS) -> DriftGrid:
    """Grid bounds frozen from the reference activations (slightly padded so
    boundary points always land inside)."""
    pts = _project(acts_ref, projection)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    pad = np.maximum(1e-9, 1e-9 * np.abs(hi - lo))
    return DriftGrid(tuple(np.linspace(lo[0] - pad[0], hi[0] + pad[0], bins + 1)),
                     tuple(np.linspace(lo[1] - pad[1], hi[1] + pad[1], bins + 1)))


def _project(acts, projection):
    flat = acts.reshape(acts.shape[0], -1)
    if flat.shape[1] != projection.shape[0]:
        raise ValidationError(
            f"projection expects dim {projection.shape[0]}, "
            f"activations have {flat.shape[1]}")
    return flat @ projection


def histogram(acts, projection, grid: DriftGrid) -> np.ndarray:
    """Probability-mass 2-d histogram; points outside the frozen grid are
    clipped into the edge bins so no mass is lost."""
    if acts.shape[0] == 0:
        raise ValidationError("cannot histogram an empty activation set")
    pts = _project(acts, projection)
    xe = np.asarray(grid.x_edges)
    ye = np.asarray(grid.y_edges)
    xs = np.clip(pts[:, 0], xe[0], xe[-1] - 1e-12)
    ys = np.clip(pts[:, 1], ye[0], ye[-1] - 1e-12)
    h, _, _ = np.histogram2d(xs, ys, bins=[xe, ye])
    return h / acts.shape[0]


def hist_distance(h1, h2) -> float:
    """L1 distance between two probability histograms (range [0, 2])."""
    return float(np.abs(np.asarray(h1) - np.asarray(h2)).sum())


def drift_estimate(acts_t, acts_ref, projection, grid: DriftGrid) -> float:
    """Histogram distance between current and reference activations."""
    return hist_distance(histogram(acts_t, projection, grid),
                         histogram(acts_ref, projection, grid))


# -- constants ----------------------------------------------------------------


def estimate_constants(thetas, per_sample_sq_norms, full_grad,
                       budget: int) -> ConstantEstimates:
    """Scan sampled parameter vectors for the largest per-sample squared
    gradient norm and the steepest full-gradient difference ratio.

    thetas: flat parameter vectors (ball around init plus visited iterates).
    per_sample_sq_norms(theta) -> array of squared per-sample norms.
    full_grad(theta) -> flat full-batch gradient.
    """
    if budget < 2:
        raise ValidationError(f"budget must be >= 2 to form pairs, got {budget}")
    use = list(thetas)[:budget]
    if len(use) < 2:
        raise ValidationError("need at least two parameter samples")
    g_sq = max(float(np.max(per_sample_sq_norms(t))) for t in use)
    grads = [full_grad(t) for t in use]
    lip = 0.0
    for a in range(len(use)):
        b = (a + 1) % len(use)
        dtheta = np.linalg.norm(use[a] - use[b])
        if dtheta == 0:
            continue
        lip = max(lip, float(np.linalg.norm(grads[a] - grads[b]) / dtheta))
    return ConstantEstimates(g_sq, lip,
                             protocol=f"max over {len(use)} parameter samples")


def bound_check(trace: TheoryTrace, consts: ConstantEstimates,
                initial_loss: float, mode: str = "single") -> BoundReport:
    """Evaluate both sides of the lr-weighted gradient-norm bound."""
    trace.validate()
    eta = trace.eta
    lhs = float(np.sum(eta * trace.grad_norm))
    drift_term = np.sqrt(2.0 * np.clip(trace.drift, 0.0, None))
    rhs = float(initial_loss
                + consts.g_sq_max * np.sum(eta * (drift_term
                                                  + consts.lipschitz * eta / 2.0)))
    denom = float(np.sum(eta))
    proxy = float(np.sum(np.sqrt(np.clip(trace.drift, 0.0, None)) * eta) / denom) \
        if denom > 0 else 0.0
    return BoundReport(lhs=lhs, rhs=rhs, satisfied=lhs <= rhs,
                       inf_grad_norm=float(np.min(trace.grad_norm)),
                       rate_proxy=proxy, mode=mode)


def average_traces(traces) -> TheoryTrace:
    """Pointwise mean across seeded replicate runs (strict-mode estimator of
    the trajectory expectation)."""
    first = traces[0]
    for t in traces:
        t.validate()
        if not np.array_equal(t.steps, first.steps):
            raise ValidationError("replicate traces cover different steps")
    return TheoryTrace(
        steps=first.steps.copy(),
        eta=np.mean([t.eta for t in traces], axis=0),
        grad_norm=np.mean([t.grad_norm for t in traces], axis=0),
        drift=np.mean([t.drift for t in traces], axis=0),
        loss=np.mean([t.loss for t in traces], axis=0),
    )


def flat_params(stage) -> np.ndarray:
    return np.concatenate([a.ravel() for a in stage_params(stage)])


def set_flat_params(stage, flat) -> None:
    offset = 0
    for arr in stage_params(stage):
        arr[...] = flat[offset:offset + arr.size].reshape(arr.shape)
        offset += arr.size
    if offset != flat.size:
        raise ValidationError(
            f"flat vector has {flat.size} entries, stage needs {offset}")
