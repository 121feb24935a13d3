"""Experiment orchestration: build everything from a config and run it,
plus the slowdown/buffer sweep suites and the convergence probe experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nets, theory
from .config import ExperimentConfig
from .data import Dataset, gen_synthetic, load_idx
from .errors import ConfigError
from .optim import OptimizerConfig, lr_at
from .schedulers import (BatchStream, TrainReport, make_slowdown_pmf,
                         train_async, train_e2e, train_sequential, train_sync)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_kind == "idx":
        return load_idx(cfg.images, cfg.labels)
    seed = cfg.data_seed if cfg.data_seed is not None else cfg.seed
    return gen_synthetic(cfg.data_kind, cfg.n, cfg.classes, seed,
                         noise=cfg.noise, separation=cfg.separation)


def build_specs(cfg: ExperimentConfig, dataset: Dataset) -> list[nets.StageSpec]:
    if cfg.arch == "custom":
        specs = [nets.stage_from_text(t) for t in cfg.stages_text]
        nets.validate_chain(specs)
        return specs
    in_shape = dataset.inputs.shape[1:]
    if len(in_shape) != 3:
        raise ConfigError(
            f"field 'model.arch': cifar6 needs image data, got input shape "
            f"{in_shape}")
    specs = nets.build_cifar6(cfg.width, dataset.classes, in_shape)
    specs = nets.split(specs, cfg.k)
    if cfg.k > 1:
        specs = nets.attach_aux(specs, cfg.aux)
    return specs


def run_experiment(cfg: ExperimentConfig):
    """Build dataset, stages and stream, run the configured trainer."""
    dataset = build_dataset(cfg)
    specs = build_specs(cfg, dataset)
    if cfg.trainer == "e2e" and len(specs) > 1:
        specs = nets.split(specs, 1)
    stages = nets.build_stages(specs, cfg.seed)
    xt, yt = dataset.train
    stream = BatchStream(xt, yt, cfg.batch_size, cfg.seed)
    eval_data = dataset.test
    if cfg.trainer == "sync":
        report = train_sync(stages, stream, cfg.opt, cfg.epochs, eval_data)
    elif cfg.trainer == "sequential":
        report = train_sequential(stages, stream, cfg.opt, cfg.epochs,
                                  eval_data)
    elif cfg.trainer == "e2e":
        report = train_e2e(stages, stream, cfg.opt, cfg.epochs, eval_data)
    else:
        cap = cfg.update_cap if cfg.update_cap is not None \
            else cfg.epochs * stream.batches_per_epoch
        delay = make_slowdown_pmf(len(stages), cfg.slow_worker, cfg.s)
        # scheduling draws get their own seed stream so sweep cells that
        # share data/init (same run seed) still schedule independently
        draw_seed = [cfg.seed, cfg.slow_worker or 0, round(1000 * cfg.s), cfg.m]
        report = train_async(stages, stream, delay, cfg.m, cap, cfg.opt,
                             eval_data, seed=draw_seed)
    report.meta["trainer"] = cfg.trainer
    report.meta["seed"] = str(cfg.seed)
    return report, stages, dataset


def final_accuracy(report: TrainReport, stage: int) -> float:
    return report.final("test_acc", stage)


# -- sweep suites --------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: float
    position: int
    seed: int
    accuracy: float
    stall_ticks: float


def _async_cfg(base: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(base, trainer="async", **kw)


def run_slowdown_sweep(base: ExperimentConfig, values, positions, seeds):
    """One async run per (S, slow position, seed); rows carry the final
    classifier accuracy."""
    rows = []
    for s in values:
        for pos in positions:
            for seed in seeds:
                cfg = _async_cfg(base, s=float(s), slow_worker=int(pos),
                                 seed=int(seed))
                report, stages, _ = run_experiment(cfg)
                rows.append(SweepRow("s", float(s), int(pos), int(seed),
                                     final_accuracy(report, len(stages) - 1),
                                     report.final("stall_ticks")))
    return rows


def run_buffer_sweep(base: ExperimentConfig, sizes, position, seeds,
                     slowdown: float = 1.2):
    rows = []
    for m in sizes:
        for seed in seeds:
            cfg = _async_cfg(base, m=int(m), s=float(slowdown),
                             slow_worker=int(position), seed=int(seed))
            report, stages, _ = run_experiment(cfg)
            rows.append(SweepRow("m", float(m), int(position), int(seed),
                                 final_accuracy(report, len(stages) - 1),
                                 report.final("stall_ticks")))
    return rows


def write_sweep_csv(rows, path, meta=None) -> None:
    lines = [f"# {k}: {v}" for k, v in (meta or {}).items()]
    lines.append("param,value,position,seed,accuracy,stall_ticks")
    for r in rows:
        lines.append(f"{r.param},{r.value:.9g},{r.position},{r.seed},"
                     f"{r.accuracy:.9g},{r.stall_ticks:.9g}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


# -- convergence probe ----------------------------------------------------------


def linear_softmax_specs(dim: int, classes: int) -> list[nets.StageSpec]:
    """Two-stage linear toy: each stage is a square dense map with a linear
    projection head; the second head is the final classifier."""
    d1 = nets.LayerSpec("dense", (dim, dim))
    head = (nets.LayerSpec("dense", (dim, classes)),)
    s1 = nets.StageSpec((d1,), head, "mlp_aux", classes, (dim,))
    s2 = nets.StageSpec((d1,), head, "none", classes, (dim,))
    return [s1, s2]


@dataclass
class ProbeResult:
    trace: theory.TheoryTrace
    per_seed: list[theory.TheoryTrace]
    consts: theory.ConstantEstimates
    bound: theory.BoundReport
    initial_loss: float


def run_probe(steps: int = 5000, seeds=(0, 1, 2), classes: int = 2,
              n: int = 1200, batch_size: int = 32,
              opt: OptimizerConfig | None = None, probe_size: int = 256,
              const_budget: int = 40) -> ProbeResult:
    """Train the two-stage linear toy on blobs, snapshot both stages every
    step, then reconstruct the per-step trace: stage-2 gradient norms and
    losses under the *final* stage-1 representation, and the stage-1
    activation drift toward its final state.
    """
    if opt is None:
        opt = OptimizerConfig(lr=0.5, momentum=0.0, weight_decay=0.0,
                              schedule="robbins_monro", rm_alpha=0.7)
    traces = []
    g_max, lip_max = 0.0, 0.0
    proj = theory.random_projection(16)
    for seed in seeds:
        ds = gen_synthetic("blobs", n, classes, seed, separation=4.0)
        specs = linear_softmax_specs(16, classes)
        stages = nets.build_stages(specs, seed)
        stream = BatchStream(*ds.train, batch_size, seed)
        snaps1, snaps2 = [], []
        feed = stream.infinite()
        for t in range(steps + 1):
            snaps1.append(theory.flat_params(stages[0]))
            snaps2.append(theory.flat_params(stages[1]))
            if t == steps:
                break
            xb, yb = next(feed)
            lr = lr_at(opt, step=t)
            x = xb
            for s in stages:
                x, _ = stage_step_probe(s, x, yb, lr, opt)
        xp = ds.test[0][:probe_size]
        yp = ds.test[1][:probe_size]
        trace, consts = _reconstruct_trace(stages, snaps1, snaps2, xp, yp,
                                           opt, proj, const_budget,
                                           seed=seed)
        traces.append(trace)
        g_max = max(g_max, consts.g_sq_max)
        lip_max = max(lip_max, consts.lipschitz)
    avg = theory.average_traces(traces)
    pooled = theory.ConstantEstimates(
        g_max, lip_max,
        protocol=f"max over {len(seeds)} seeds, budget {const_budget}")
    bound = theory.bound_check(avg, pooled, float(avg.loss[0]),
                               mode="strict" if len(seeds) >= 3 else "single")
    return ProbeResult(avg, traces, pooled, bound, float(avg.loss[0]))


def stage_step_probe(stage, x, y, lr, opt):
    return nets.stage_step(stage, x, y, lr, opt.momentum, opt.weight_decay)


def _reconstruct_trace(stages, snaps1, snaps2, xp, yp, opt, proj, budget,
                       seed):
    n_steps = len(snaps1) - 1
    theory.set_flat_params(stages[0], snaps1[-1])
    acts_ref = nets.forward_body(stages[0], xp, training=False)
    grid = theory.make_drift_grid(acts_ref, proj)
    eta = np.array([lr_at(opt, step=t) for t in range(n_steps + 1)])
    gnorm = np.empty(n_steps + 1)
    drift = np.empty(n_steps + 1)
    loss = np.empty(n_steps + 1)
    for t in range(n_steps + 1):
        theory.set_flat_params(stages[0], snaps1[t])
        acts_t = nets.forward_body(stages[0], xp, training=False)
        drift[t] = theory.drift_estimate(acts_t, acts_ref, proj, grid)
        theory.set_flat_params(stages[1], snaps2[t])
        gnorm[t] = theory.grad_norm_estimate(stages[1], acts_ref, yp)
        loss[t] = nets.stage_loss(stages[1], acts_ref, yp)
    trace = theory.TheoryTrace(np.arange(n_steps + 1), eta, gnorm, drift, loss)

    # constant estimates: visited stage-2 iterates plus a ball around init
    rng = np.random.default_rng([seed, 99])
    picks = list(np.linspace(0, n_steps, budget // 2, dtype=int))
    thetas = [snaps2[t] for t in picks]
    thetas += [snaps2[0] + 0.5 * rng.normal(size=snaps2[0].shape)
               for _ in range(budget - len(thetas))]

    def per_sample(theta):
        theory.set_flat_params(stages[1], theta)
        return theory.per_sample_grad_norms(stages[1], acts_ref[:64], yp[:64])

    def full_grad(theta):
        theory.set_flat_params(stages[1], theta)
        return theory.stage_full_grad(stages[1], acts_ref, yp)

    consts = theory.estimate_constants(thetas, per_sample, full_grad, budget)
    return trace, consts
