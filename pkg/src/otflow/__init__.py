"""Joint manifold learning and dynamic optimal transport for image time series."""

from .errors import (
    BadMagic,
    ConfigError,
    ConfigOutOfBounds,
    DimsMismatch,
    GridMismatch,
    IndexOutOfRange,
    IoError,
    MissingCheckpoint,
    MissingFile,
    NonFinite,
    NonIncreasingTimes,
    NonScalarRoot,
    OtflowError,
    OutOfInterval,
    ShapeMismatch,
    ZeroMass,
)
from .grids import (
    MASS_FLOOR,
    ImageGrid,
    NormalizedMeasure,
    normalize,
    read_f32grid,
    scale,
    total_mass,
    write_f32grid,
    write_pgm,
)
from .ot import (
    DualPotentials,
    GridCost,
    SinkhornConfig,
    TransportCost,
    barycenter_interp,
    default_barycenter_config,
    default_sinkhorn_config,
    ground_cost,
    sinkhorn,
    sinkhorn_grad,
)
from .datasets import (
    GaussianScheduleConfig,
    TimeSeries,
    generate_gaussian_series,
    load_dataset,
    load_series,
    subsample,
    write_dataset,
    write_series,
)
from .models import ArchitectureConfig, Trajectory, decode, encode, init_params, integrate
from .training import (
    LossWeights,
    TrainConfig,
    data_loss,
    l2_regularizers,
    mass_schedule,
    ot_regularizer,
    train,
)
from .evaluation import MetricReport, eval_dynamic, eval_static, interp_baselines, mse, ssim

__all__ = [name for name in dir() if not name.startswith("_")]
