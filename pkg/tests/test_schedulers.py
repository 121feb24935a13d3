import numpy as np
import pytest
from scipy import stats as spstats

from stagewise.data import gen_synthetic
from stagewise.errors import ValidationError
from stagewise.layers import LayerSpec
from stagewise.nets import (StageSpec, attach_aux, build_cifar6, build_stages,
                            snapshot_params, split, stage_params)
from stagewise.optim import OptimizerConfig, lr_at, sgd_step
from stagewise.schedulers import (BatchStream, DelayModel, make_slowdown_pmf,
                                  train_async, train_e2e, train_sequential,
                                  train_sync)

OPT = OptimizerConfig(lr=0.05, momentum=0.9, weight_decay=5e-4)


# -- sgd_step -------------------------------------------------------------------


def test_sgd_plain_step():
    p = [np.array([1.0, 2.0])]
    g = [np.array([0.5, -1.0])]
    v = [np.zeros(2)]
    sgd_step(p, g, v, lr=0.1)
    assert np.allclose(p[0], [0.95, 2.1])


def test_sgd_zero_lr_accumulates_momentum_only():
    p = [np.array([1.0])]
    v = [np.zeros(1)]
    sgd_step(p, [np.array([2.0])], v, lr=0.0, momentum=0.9)
    sgd_step(p, [np.array([2.0])], v, lr=0.0, momentum=0.9)
    assert p[0][0] == 1.0
    assert v[0][0] == pytest.approx(2.0 * 1.9)  # v = 0.9*2 + 2


def test_sgd_three_steps_match_hand_unrolled_recurrence():
    # quadratic f(t) = 0.5*lam*t^2, grad = lam*t, lam = 2, eta = 0.1, mu = 0.9
    lam, eta, mu = 2.0, 0.1, 0.9
    theta = [np.array([1.0])]
    v = [np.zeros(1)]
    t_hand, v_hand = 1.0, 0.0
    for _ in range(3):
        sgd_step(theta, [lam * theta[0]], v, lr=eta, momentum=mu)
        v_hand = mu * v_hand + lam * t_hand
        t_hand = t_hand - eta * v_hand
    assert theta[0][0] == pytest.approx(t_hand, rel=1e-12)


# -- learning-rate schedules ------------------------------------------------------


def test_step_decay_schedule_values():
    cfg = OptimizerConfig(lr=0.1, decay_factor=0.2, decay_period=15)
    assert lr_at(cfg, epoch=14) == pytest.approx(0.1)
    assert lr_at(cfg, epoch=15) == pytest.approx(0.02)
    assert lr_at(cfg, epoch=30) == pytest.approx(0.004)


def test_robbins_monro_schedule_values():
    cfg = OptimizerConfig(lr=1.0, schedule="robbins_monro", rm_alpha=1.0)
    assert [lr_at(cfg, step=t) for t in (0, 1, 3)] == [1.0, 0.5, 0.25]


def test_robbins_monro_alpha_below_half_rejected():
    with pytest.raises(ValidationError):
        OptimizerConfig(schedule="robbins_monro", rm_alpha=0.4)


# -- delay model -------------------------------------------------------------------


def test_slowdown_one_is_uniform():
    d = make_slowdown_pmf(4, slow_worker=2, slowdown=1.0)
    assert np.allclose(d.pmf, [0.25] * 4)


def test_slowdown_pmf_arithmetic():
    d = make_slowdown_pmf(5, slow_worker=3, slowdown=2.0)
    assert np.allclose(d.pmf, [2 / 9, 2 / 9, 1 / 9, 2 / 9, 2 / 9])


def test_slowdown_below_one_rejected():
    with pytest.raises(ValidationError):
        make_slowdown_pmf(3, slow_worker=1, slowdown=0.5)


def test_pmf_must_sum_to_one():
    with pytest.raises(ValidationError):
        DelayModel((0.5, 0.4))


def test_monte_carlo_selection_ratio_near_inverse_slowdown():
    d = make_slowdown_pmf(5, slow_worker=3, slowdown=2.0)
    rng = np.random.default_rng(0)
    draws = rng.choice(5, size=1_000_000, p=np.array(d.pmf))
    counts = np.bincount(draws, minlength=5)
    ratio = counts[2] / counts[0]
    assert abs(ratio - 0.5) / 0.5 < 0.01


def test_empirical_frequencies_pass_chi_square():
    d = make_slowdown_pmf(6, slow_worker=2, slowdown=1.5)
    rng = np.random.default_rng(1)
    draws = rng.choice(6, size=100_000, p=np.array(d.pmf))
    counts = np.bincount(draws, minlength=6)
    result = spstats.chisquare(counts, f_exp=np.array(d.pmf) * 100_000)
    assert result.pvalue > 0.001


# -- shared fixtures ----------------------------------------------------------------


def desk_setup(seed=0, k=6, aux="mlp_aux", n=240, epochs=2, batch=24):
    ds = gen_synthetic("gridimg", n, 2, seed)
    specs = split(build_cifar6(4, 2, in_shape=(1, 8, 8)), k)
    if k > 1:
        specs = attach_aux(specs, aux)
    stages = build_stages(specs, seed)
    xt, yt = ds.train
    stream = BatchStream(xt, yt, batch, seed)
    return ds, stages, stream, epochs


def linear_specs(j=3, dim=16, classes=2):
    body = (LayerSpec("dense", (dim, dim)),)
    head = (LayerSpec("dense", (dim, classes)),)
    specs = [StageSpec(body, head, "mlp_aux", classes, (dim,))
             for _ in range(j - 1)]
    specs.append(StageSpec(body, head, "none", classes, (dim,)))
    return specs


# -- sync ---------------------------------------------------------------------------


def test_sync_k1_bitwise_equals_e2e():
    ds, stages_a, stream_a, epochs = desk_setup(seed=3, k=1)
    report_a = train_sync(stages_a, stream_a, OPT, epochs)
    ds, stages_b, stream_b, _ = desk_setup(seed=3, k=1)
    report_b = train_e2e(stages_b, stream_b, OPT, epochs)
    for a, b in zip(stage_params(stages_a[0]), stage_params(stages_b[0])):
        assert a.tobytes() == b.tobytes()
    assert report_a.rows == report_b.rows


def test_e2e_requires_single_stage():
    _, stages, stream, _ = desk_setup(seed=0, k=2)
    with pytest.raises(ValidationError):
        train_e2e(stages, stream, OPT, 1)


def test_sync_loop_and_pipelined_bitwise_identical():
    _, stages_a, stream_a, epochs = desk_setup(seed=5)
    ra = train_sync(stages_a, stream_a, OPT, epochs, mode="loop")
    _, stages_b, stream_b, _ = desk_setup(seed=5)
    rb = train_sync(stages_b, stream_b, OPT, epochs, mode="pipelined")
    assert ra.rows == rb.rows
    for sa, sb in zip(stages_a, stages_b):
        for a, b in zip(stage_params(sa), stage_params(sb)):
            assert a.tobytes() == b.tobytes()


def test_sync_update_unlocking_downstream_perturbation():
    _, stages_a, stream_a, _ = desk_setup(seed=7)
    train_sync(stages_a, stream_a, OPT, 1)
    _, stages_b, stream_b, _ = desk_setup(seed=7)
    for layer in stages_b[4].body:  # perturb a downstream stage before training
        if layer.params is not None:
            layer.params.weights[...] *= -1.0
    train_sync(stages_b, stream_b, OPT, 1)
    for j in range(4):  # all stages before the perturbed one are untouched
        for a, b in zip(stage_params(stages_a[j]), stage_params(stages_b[j])):
            assert a.tobytes() == b.tobytes()


def test_sync_records_losses_and_eval(tmp_path):
    ds, stages, stream, epochs = desk_setup(seed=1)
    report = train_sync(stages, stream, OPT, epochs, eval_data=ds.test)
    assert len(report.series("train_loss", stage=0)) == epochs * stream.batches_per_epoch
    for j in range(6):
        assert 0.0 <= report.final("test_acc", j) <= 1.0
    caps = [report.final("update_count", j) for j in range(6)]
    assert caps == [epochs * stream.batches_per_epoch] * 6


# -- sequential ----------------------------------------------------------------------


def test_sequential_stage1_identical_to_sync_stage1():
    _, stages_a, stream_a, epochs = desk_setup(seed=9)
    train_sync(stages_a, stream_a, OPT, epochs)
    _, stages_b, stream_b, _ = desk_setup(seed=9)
    train_sequential(stages_b, stream_b, OPT, epochs)
    for a, b in zip(stage_params(stages_a[0]), stage_params(stages_b[0])):
        assert a.tobytes() == b.tobytes()


def test_sequential_j1_identical_to_sync_and_e2e():
    _, stages_a, stream_a, epochs = desk_setup(seed=11, k=1)
    train_sequential(stages_a, stream_a, OPT, epochs)
    _, stages_b, stream_b, _ = desk_setup(seed=11, k=1)
    train_sync(stages_b, stream_b, OPT, epochs)
    for a, b in zip(stage_params(stages_a[0]), stage_params(stages_b[0])):
        assert a.tobytes() == b.tobytes()


# -- async ----------------------------------------------------------------------------


def test_async_j1_reduces_to_plain_stream_training():
    _, stages_a, stream_a, epochs = desk_setup(seed=13, k=1)
    cap = epochs * stream_a.batches_per_epoch
    delay = make_slowdown_pmf(1)
    train_async(stages_a, stream_a, delay, 5, cap, OPT, seed=13)
    _, stages_b, stream_b, _ = desk_setup(seed=13, k=1)
    train_sync(stages_b, stream_b, OPT, epochs)
    for a, b in zip(stage_params(stages_a[0]), stage_params(stages_b[0])):
        assert a.tobytes() == b.tobytes()


def test_async_equal_updates_fairness():
    ds = gen_synthetic("blobs", 120, 2, 0)
    specs = linear_specs(3)
    stages = build_stages(specs, 0)
    stream = BatchStream(*ds.train, 16, 0)
    delay = make_slowdown_pmf(3, slow_worker=2, slowdown=1.7)
    report = train_async(stages, stream, delay, 4, 30, OPT, seed=5)
    assert [s.update_count for s in stages] == [30, 30, 30]
    assert report.final("stall_ticks") >= 0


def test_async_hand_simulated_trace():
    ds = gen_synthetic("blobs", 80, 2, 1)
    stages = build_stages(linear_specs(3), 1)
    stream = BatchStream(*ds.train, 8, 1)
    delay = make_slowdown_pmf(3)
    script = [1, 0, 1, 1, 2, 0, 1, 2]
    report = train_async(stages, stream, delay, 2, 2, OPT, seed=0,
                         worker_sequence=script, collect_events=True)
    # tick 1: worker 1 finds B0 empty -> stall
    # tick 2: worker 0 pulls batch, updates (1/2), writes B0
    # tick 3: worker 1 reads B0, updates (1/2), writes B1
    # tick 4: worker 1 re-reads B0 record, updates (2/2 = cap), writes B1
    # tick 5: worker 2 reads B1 (LIFO picks tick-4 output), updates (1/2)
    # tick 6: worker 0 pulls batch, updates (2/2 = cap), writes B0
    # tick 7: worker 1 capped: reads least-reused record, forwards only
    # tick 8: worker 2 reads B1 (least reused, newest = tick-7 output),
    #         updates (2/2) -> every stage capped, training ends
    assert report.events == [
        (1, 1, "stall"), (2, 0, "update"), (3, 1, "update"), (4, 1, "update"),
        (5, 2, "update"), (6, 0, "update"), (7, 1, "forward"), (8, 2, "update"),
    ]
    assert report.final("ticks") == 8
    assert report.final("stall_ticks") == 1
    assert [s.update_count for s in stages] == [2, 2, 2]


def test_async_determinism_same_seed():
    def run():
        ds = gen_synthetic("blobs", 120, 2, 3)
        stages = build_stages(linear_specs(3), 3)
        stream = BatchStream(*ds.train, 12, 3)
        delay = make_slowdown_pmf(3, slow_worker=1, slowdown=1.3)
        report = train_async(stages, stream, delay, 4, 20, OPT, seed=11)
        return report.rows, [a.tobytes() for s in stages for a in stage_params(s)]

    r1, p1 = run()
    r2, p2 = run()
    assert r1 == r2 and p1 == p2


def test_async_worker_count_must_match():
    ds = gen_synthetic("blobs", 60, 2, 0)
    stages = build_stages(linear_specs(3), 0)
    stream = BatchStream(*ds.train, 8, 0)
    with pytest.raises(ValidationError):
        train_async(stages, stream, make_slowdown_pmf(4), 2, 5, OPT)


# -- reporting ---------------------------------------------------------------------


def test_report_rows_monotone_in_step():
    _, stages, stream, epochs = desk_setup(seed=15, k=2)
    report = train_sync(stages, stream, OPT, epochs)
    steps = [r[0] for r in report.rows]
    assert steps == sorted(steps)
