"""Residual-network surrogates for chaotic ODEs with inference-time
nudging feedback control.

The library trains small residual networks to emulate one time step of a
dynamical system (Lorenz 63/96 built in), then steers those networks at
inference time toward partial observations, either by classic nudging of
the true dynamics or by layerwise feedback inside the networks
themselves, and scores the recovered trajectories with a multi-run RMSE
protocol.
"""

from .resnet import (
    ActivationSpec,
    DivergenceError,
    HiddenTrace,
    LayerParams,
    ResNetParams,
    ResNetSystem,
    activation,
    activation_derivative,
    backprop,
    build_system,
    cyclic_stencils,
    forward,
    identity_stencils,
    pack_params,
    system_forward,
    unpack_params,
)
from .bfgs import BfgsResult, bfgs_minimize
from .training import (
    Dataset,
    TrainConfig,
    TrainHistory,
    bias_order_penalty,
    box_init,
    data_loss,
    max_bias_violation,
    regularizer,
    train_system,
)
from .dynamics import (
    IntegratorConfig,
    Lorenz63,
    Lorenz96,
    ReferenceRun,
    Trajectory,
    integrate,
    make_reference_runs,
    make_training_set,
    rhs,
    rk4_step,
)
from .assimilation import (
    METHODS,
    AssimilationResult,
    NudgeSchedule,
    ObservationOperator,
    ObservationStream,
    ScheduleError,
    case2_direction,
    classic_nudging,
    direct_obs_step,
    ninn_type1_step,
    ninn_type2_step,
    run_assimilation,
    tune_schedule,
)
from .evaluation import ProtocolConfig, RmseRow, RmseTable, rmse, run_protocol
from .model_io import (
    CorruptModelError,
    DimensionMismatchError,
    ModelIOError,
    VersionMismatchError,
    load_model,
    save_model,
)

__version__ = "0.1.0"
