"""ditlab: desk-scale diffusion transformers on a numpy autodiff tape."""

__version__ = "0.1.0"

from ditlab.analysis import (
    conformance_table,
    count_flops,
    count_params,
    sampling_compute,
    training_compute,
)
from ditlab.diffcore import Tensor, grad_check, load_tensors, no_grad, save_tensors
from ditlab.errors import ConfigError, NotFitted, ShapeError, TrainingDiverged
from ditlab.estimator import ArrayDataset, DiTGenerator
from ditlab.metrics import (
    FeatureStats,
    extract_features,
    frechet_distance,
    gaussian_stats,
    reference_stats,
)
from ditlab.model import (
    BlockVariant,
    DiTConfig,
    forward,
    init_parameters,
    mini_config,
    named_config,
    resolve_config,
    standard_configs,
)
from ditlab.sampler import SampleRequest, SampleResult, sample, write_ppm
from ditlab.schedule import (
    DiffusionSchedule,
    hybrid_loss,
    linear_schedule,
    q_sample,
    respace,
)
from ditlab.sweep import (
    EvalProtocol,
    SweepEntry,
    SweepRecord,
    read_sweep_csv,
    scaling_sweep,
    write_sweep_csv,
)
from ditlab.trainer import (
    ToyLatents,
    TrainConfig,
    TrainState,
    load_checkpoint,
    read_loss_log,
    save_checkpoint,
    train,
)
from ditlab.validation import check_latent_array, check_labels

__all__ = [
    "__version__",
    "ArrayDataset",
    "BlockVariant",
    "ConfigError",
    "DiTConfig",
    "DiTGenerator",
    "DiffusionSchedule",
    "EvalProtocol",
    "FeatureStats",
    "NotFitted",
    "SampleRequest",
    "SampleResult",
    "ShapeError",
    "SweepEntry",
    "SweepRecord",
    "Tensor",
    "ToyLatents",
    "TrainConfig",
    "TrainState",
    "TrainingDiverged",
    "check_latent_array",
    "check_labels",
    "conformance_table",
    "count_flops",
    "count_params",
    "extract_features",
    "forward",
    "frechet_distance",
    "gaussian_stats",
    "grad_check",
    "hybrid_loss",
    "init_parameters",
    "linear_schedule",
    "load_checkpoint",
    "load_tensors",
    "mini_config",
    "named_config",
    "no_grad",
    "q_sample",
    "read_loss_log",
    "read_sweep_csv",
    "reference_stats",
    "resolve_config",
    "respace",
    "sample",
    "sampling_compute",
    "save_checkpoint",
    "save_tensors",
    "scaling_sweep",
    "standard_configs",
    "train",
    "training_compute",
    "write_ppm",
    "write_sweep_csv",
]
