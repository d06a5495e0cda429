"""Decoupled supervised learning with information-regularized local losses.

Core pieces: a small reverse-mode autodiff engine over dense matrices, the
variance/invariance/covariance local objective, gradient-truncated module
stacks with an end-to-end baseline, a pipeline schedule simulator, and a
multi-worker executor that trains modules concurrently.
"""

from .tensor import Matrix, RngState, ShapeError, column_mean_std, matmul, rng_normal, row_l2_normalize
from .autodiff import Graph, GradientMap, Node, fd_check, forward
from .layers import (Activation, BatchNormLayer, DenseLayer, Param, ParamLeafBinder, ParamSet,
                     SGD, init_params, load_params, save_params, sgd_step)
from .losses import (LossBreakdown, LossConfig, covariance_loss, cross_entropy_loss,
                     invariance_loss, local_loss, module_total, variance_loss)
from .network import (ClassifierSpec, EncoderSpec, ModuleSpec, Network, NetworkBuildError,
                      NetworkSpec, ProjectorSpec, TrainStepReport, accuracy, build,
                      encoder_gradient_profile, load_network, predict, save_network,
                      train_step_bp, train_step_deinforeg, uniform_spec)
from .pipeline import (FIGURE_STAGE_COSTS, HandoffPacket, PipelineStats, ScheduleEvent,
                       StageCost, emit_gantt, parse_gantt, run_pipelined, simulate)
from .data import (Dataset, NoiseSpec, batches, gen_blobs, gen_spirals, inject_label_noise,
                   load_csv, one_hot, save_csv, standardize)
from .harness import ExperimentConfig, Summary, run

__version__ = "0.1.0"
