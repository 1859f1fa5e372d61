"""corediff: dataset pruning and class reweighting for desk-scale diffusion training."""

__version__ = "0.1.0"

from .dataset import DatasetSpec, LabeledDataset, generate, load, save, subset
from .diffusion import (
    DenoiserModel,
    NoiseSchedule,
    TrainConfig,
    cfg_eps,
    load_checkpoint,
    loss_batch,
    make_schedule,
    q_sample,
    sample_ddim,
    sample_ddpm,
    save_checkpoint,
    train,
)
from .encoder import (
    ClassifierEncoder,
    EmbeddingSet,
    IdentityEncoder,
    PcaEncoder,
    embed,
    pca_encoder,
    train_classifier,
)
from .errors import (
    ConfigError,
    CorediffError,
    DataError,
    FormatError,
    InsufficientData,
    ShapeError,
    SingularCovariance,
    VersionError,
)
from .metrics import EvalReport, evaluate, frechet_distance, mmd_sq_gaussian
from .numerics import GaussianFit, fit_gaussian, mahalanobis_sq, percentile_threshold
from .pruning import (
    Coreset,
    ScoreTable,
    score_gaussian,
    score_moderate,
    select,
    select_uniform_random,
)
from .reweighting import ClassWeights, DroConfig, class_margins, run_dro, update_weights
