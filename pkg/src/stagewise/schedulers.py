"""Training procedures: synchronous greedy, asynchronous greedy with replay
buffers under a pmf delay model, classic sequential greedy, and the
end-to-end baseline.

All four are deterministic single-threaded simulations driven entirely by
explicit seeds. train_sync optionally runs a software-pipelined schedule
(stage j works on batch t-j) that reproduces the loop schedule's parameter
trajectory bitwise, since a stage's update depends only on upstream outputs
computed from pre-update parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBufferError, ValidationError
from .nets import evaluate, forward_body, stage_step
from .optim import OptimizerConfig, lr_at
from .replay import ReplayBuffer


@dataclass(frozen=True)
class DelayModel:
    """Selection probabilities over the J stage workers.

    A slowdown factor S >= 1 divides one worker's unnormalized weight,
    making it S times less likely to be scheduled per tick.
    """

    pmf: tuple[float, ...]
    slow_worker: int | None = None  # 1-indexed
    slowdown: float = 1.0

    def __post_init__(self):
        total = sum(self.pmf)
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"pmf sums to {total!r}, not 1")
        if any(p <= 0 for p in self.pmf):
            raise ValidationError("pmf entries must all be positive")

    @property
    def workers(self) -> int:
        return len(self.pmf)


def make_slowdown_pmf(workers: int, slow_worker: int | None = None,
                      slowdown: float = 1.0) -> DelayModel:
    """Uniform pmf except one worker whose weight is divided by `slowdown`."""
    if workers < 1:
        raise ValidationError(f"need at least one worker, got {workers}")
    if slowdown < 1.0:
        raise ValidationError(f"slowdown factor must be >= 1, got {slowdown}")
    weights = np.ones(workers)
    if slow_worker is not None:
        if not 1 <= slow_worker <= workers:
            raise ValidationError(
                f"slow worker index {slow_worker} outside 1..{workers}")
        weights[slow_worker - 1] = 1.0 / slowdown
    pmf = weights / weights.sum()
    return DelayModel(tuple(float(p) for p in pmf), slow_worker, slowdown)


class BatchStream:
    """Seeded mini-batch stream: each epoch is a fresh permutation of the
    training set, cut into full batches (ragged tail dropped)."""

    def __init__(self, inputs, labels, batch_size: int, seed: int):
        if batch_size < 1 or batch_size > inputs.shape[0]:
            raise ValidationError(
                f"batch_size {batch_size} invalid for {inputs.shape[0]} samples")
        self.inputs = inputs
        self.labels = labels
        self.batch_size = batch_size
        self.seed = seed
        self.batches_per_epoch = inputs.shape[0] // batch_size

    def epoch(self, e: int):
        rng = np.random.default_rng([self.seed, e])
        perm = rng.permutation(self.inputs.shape[0])
        xs, ys = self.inputs[perm], self.labels[perm]
        b = self.batch_size
        for i in range(self.batches_per_epoch):
            yield xs[i * b:(i + 1) * b], ys[i * b:(i + 1) * b]

    def infinite(self):
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


@dataclass
class TrainReport:
    """Flat metric rows (step, epoch, stage, metric, value) plus the async
    event log used by the trace tests. Rows are appended in time order."""

    rows: list[tuple[int, int, int, str, float]] = field(default_factory=list)
    events: list[tuple[int, int, str]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def add(self, step, epoch, stage, metric, value):
        self.rows.append((int(step), int(epoch), int(stage), metric, float(value)))

    def series(self, metric: str, stage: int | None = None):
        return [(r[0], r[4]) for r in self.rows
                if r[3] == metric and (stage is None or r[2] == stage)]

    def final(self, metric: str, stage: int | None = None) -> float:
        picked = self.series(metric, stage)
        if not picked:
            raise KeyError(f"no rows for metric '{metric}' stage {stage}")
        return picked[-1][1]


def _eval_rows(report, stages, eval_data, step, epoch):
    if eval_data is None:
        return
    accs = evaluate(stages, eval_data[0], eval_data[1])
    for i, acc in enumerate(accs):
        report.add(step, epoch, i, "test_acc", acc)


def train_sync(stages, stream: BatchStream, opt: OptimizerConfig, epochs: int,
               eval_data=None, mode: str = "loop") -> TrainReport:
    """Update-unlocked greedy training: every stage takes one local step per
    mini-batch, consuming its predecessor's pre-update output."""
    if mode not in ("loop", "pipelined"):
        raise ValidationError(f"unknown sync mode '{mode}'")
    report = TrainReport()
    step = 0
    for e in range(epochs):
        if mode == "loop":
            for xb, yb in stream.epoch(e):
                x = xb
                for s in stages:
                    lr = lr_at(opt, step=step, epoch=e)
                    x, loss = stage_step(s, x, yb, lr, opt.momentum,
                                         opt.weight_decay, f" step {step}")
                    report.add(step, e, s.index, "train_loss", loss)
                    report.add(step, e, s.index, "lr", lr)
                step += 1
        else:
            step = _pipelined_epoch(stages, stream, opt, e, step, report)
        for s in stages:
            report.add(step - 1, e, s.index, "update_count", s.update_count)
        _eval_rows(report, stages, eval_data, step - 1, e)
    return report


def _pipelined_epoch(stages, stream, opt, epoch, step0, report):
    """Software-pipelined schedule: at tick t stage j processes batch t-j.
    The pipeline drains at the epoch boundary so epoch-end state matches the
    loop schedule exactly."""
    batches = list(stream.epoch(epoch))
    k = len(stages)
    rows = []
    slots = [None] * k  # slots[j]: (batch_index, x, y) awaiting stage j
    for t in range(len(batches) + k - 1):
        for j in reversed(range(k)):
            b = t - j
            if not 0 <= b < len(batches):
                continue
            if j == 0:
                x, y = batches[b]
            else:
                bi, x, y = slots[j]
                assert bi == b
            lr = lr_at(opt, step=step0 + b, epoch=epoch)
            x_next, loss = stage_step(stages[j], x, y, lr, opt.momentum,
                                      opt.weight_decay, f" step {step0 + b}")
            rows.append((step0 + b, epoch, stages[j].index, loss, lr))
            if j + 1 < k:
                slots[j + 1] = (b, x_next, y)
    for s, e, j, loss, lr in sorted(rows, key=lambda r: (r[0], r[2])):
        report.add(s, e, j, "train_loss", loss)
        report.add(s, e, j, "lr", lr)
    return step0 + len(batches)


def train_e2e(stages, stream: BatchStream, opt: OptimizerConfig, epochs: int,
              eval_data=None) -> TrainReport:
    """End-to-end backprop baseline: a single stage whose head is the final
    classifier. Shares the synchronous code path, so it is bitwise identical
    to train_sync on a K=1 split."""
    if len(stages) != 1:
        raise ValidationError(
            f"train_e2e expects the network merged into one stage, got "
            f"{len(stages)}")
    return train_sync(stages, stream, opt, epochs, eval_data)


def train_sequential(stages, stream: BatchStream, opt: OptimizerConfig,
                     epochs_per_stage: int, eval_data=None) -> TrainReport:
    """Classic greedy training: each stage is trained to completion on the
    frozen outputs of its fully trained predecessors."""
    report = TrainReport()
    step = 0
    for j, stage in enumerate(stages):
        for e in range(epochs_per_stage):
            own_step = 0
            for xb, yb in stream.epoch(e):
                x = xb
                for prev in stages[:j]:
                    x = forward_body(prev, x, training=False)
                lr = lr_at(opt, step=e * stream.batches_per_epoch + own_step,
                           epoch=e)
                _, loss = stage_step(stage, x, yb, lr, opt.momentum,
                                     opt.weight_decay, f" step {step}")
                report.add(step, e, stage.index, "train_loss", loss)
                report.add(step, e, stage.index, "lr", lr)
                own_step += 1
                step += 1
            report.add(step - 1, e, stage.index, "update_count",
                       stage.update_count)
            _eval_rows(report, stages, eval_data, step - 1, e)
    return report


def train_async(stages, stream: BatchStream, delay: DelayModel,
                buffer_size: int, update_cap: int, opt: OptimizerConfig,
                eval_data=None, seed=0, worker_sequence=None,
                collect_events: bool = False) -> TrainReport:
    """Forward-unlocked greedy training with inter-stage replay buffers.

    Each tick samples a worker j from the delay pmf. Worker 1 pulls from the
    stream; worker j>1 reads from buffer j-1 (an empty buffer is a stall
    tick: counted, no work). The worker forwards, takes one local step unless
    it has exhausted its update cap (then it forwards with frozen parameters),
    and writes its output to its own buffer. Training ends when every stage
    has performed exactly update_cap updates.
    """
    j_total = len(stages)
    if delay.workers != j_total:
        raise ValidationError(
            f"delay model has {delay.workers} workers for {j_total} stages")
    if update_cap < 1:
        raise ValidationError(f"update_cap must be >= 1, got {update_cap}")
    buffers = [ReplayBuffer(buffer_size) for _ in range(j_total - 1)]
    feed = stream.infinite()
    pmf = np.array(delay.pmf)
    rng = np.random.default_rng(seed)
    draws = iter(worker_sequence) if worker_sequence is not None else None
    report = TrainReport()
    bpe = stream.batches_per_epoch
    tick = 0
    stalls = 0
    while any(s.update_count < update_cap for s in stages):
        if draws is not None:
            try:
                j = next(draws)
            except StopIteration:
                break
        else:
            j = int(rng.choice(j_total, p=pmf))
        tick += 1
        if j == 0:
            xb, yb = next(feed)
        else:
            try:
                xb, yb = buffers[j - 1].read()
            except EmptyBufferError:
                stalls += 1
                if collect_events:
                    report.events.append((tick, j, "stall"))
                continue
        stage = stages[j]
        if stage.update_count < update_cap:
            epoch = stage.update_count // bpe
            lr = lr_at(opt, step=stage.update_count, epoch=epoch)
            h, loss = stage_step(stage, xb, yb, lr, opt.momentum,
                                 opt.weight_decay, f" tick {tick}")
            report.add(tick, epoch, stage.index, "train_loss", loss)
            if collect_events:
                report.events.append((tick, j, "update"))
        else:
            # capped: keep feeding downstream with frozen parameters
            h = forward_body(stage, xb, training=True, update_stats=False)
            if collect_events:
                report.events.append((tick, j, "forward"))
        if j < j_total - 1:
            buffers[j].write(h, yb)
    final_epoch = update_cap // bpe
    for s in stages:
        report.add(tick, final_epoch, s.index, "update_count", s.update_count)
    report.add(tick, final_epoch, 0, "ticks", tick)
    report.add(tick, final_epoch, 0, "stall_ticks", stalls)
    _eval_rows(report, stages, eval_data, tick, final_epoch)
    return report
