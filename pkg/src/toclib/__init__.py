"""Computation-budgeted task-oriented communication.

A numpy substrate for small differentiable networks, PSNR-parameterized
AWGN/Rayleigh channel simulation with a compact learned codec, a single-exit
static pipeline and a multi-exit dynamic encoder, analytical FLOPs accounting,
and the budgeted-batch scheduling stack (exit distribution, rate inversion,
threshold calibration, budgeted inference).
"""

from .channel import ChannelSpec, channel_decode, channel_encode, measure_psnr, noise_var_from_psnr, normalize_power, transmit
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, augment_batch, gen_synthetic, parse_cifar, to_onehot
from .dynamic_model import (
    DynamicConfig,
    DynamicPipeline,
    ExitOutput,
    ExitPlacement,
    build_dynamic,
    build_dynamic_pipeline,
    confidence,
    forward_to_exit,
    place_exits,
)
from .engine import backward, finite_diff_check, forward, init_params
from .errors import (
    CheckpointError,
    DataError,
    GraphError,
    InfeasibleBudgetError,
    NonFiniteError,
    ParseError,
    ShapeError,
    TocError,
    TrainingDivergedError,
)
from .experiment import ExperimentConfig, ReportRow, emit_report, parse_report, sweep
from .flops import FlopsProfile, bottleneck_in_channels, conv_flops, linear_flops, profile_graph
from .network import LayerSpec, NetworkGraph
from .optim import OptimizerState, sgd_step
from .scheduler import (
    BudgetedRunResult,
    Calibration,
    CostVector,
    ExitPolicy,
    budgeted_run,
    calibrate_thresholds,
    design_policy,
    exit_probs,
    expected_cost,
    expected_cost_uniform,
    solve_rate,
)
from .static_model import StaticConfig, StaticPipeline, build_static, evaluate_accuracy, static_loss
from .training import (
    ConvergenceReport,
    TrainConfig,
    TrainResult,
    TrainTrace,
    channel_gradient_mode,
    convergence_diagnostic,
    dynamic_loss,
    train,
)

__version__ = "0.1.0"
