"""Stage-parallel greedy training of small networks.

A desk-scale engine that trains a layered network as K decoupled stages,
each with its own local classifier head: synchronously (one local step per
stage per mini-batch), asynchronously through bounded replay buffers under a
simulated worker-delay pmf, sequentially (classic greedy), or end-to-end as
the backprop baseline. Includes shape-only MAC accounting for auxiliary-head
budgets and empirical probes for the convergence quantities of the local
optimization.
"""

from .data import Dataset, gen_synthetic, load_idx
from .layers import FlopReport, LayerSpec, flop_count
from .nets import (GreedyStage, StageSpec, attach_aux, build_aux,
                   build_cifar6, build_stages, evaluate, split, stage_step)
from .optim import OptimizerConfig, lr_at, sgd_step
from .replay import ReplayBuffer
from .schedulers import (BatchStream, DelayModel, TrainReport,
                         make_slowdown_pmf, train_async, train_e2e,
                         train_sequential, train_sync)
from .tensor import GradTape, LayerParams, as_tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "BatchStream", "Dataset", "DelayModel", "FlopReport", "GradTape",
    "GreedyStage", "LayerParams", "LayerSpec", "OptimizerConfig",
    "ReplayBuffer", "StageSpec", "TrainReport", "as_tensor", "attach_aux",
    "backward", "build_aux", "build_cifar6", "build_stages", "evaluate",
    "flop_count", "gen_synthetic", "grad_check", "load_idx", "lr_at",
    "make_slowdown_pmf", "sgd_step", "split", "stage_step", "train_async",
    "train_e2e", "train_sequential", "train_sync",
]
