"""sharpmin: sharpness-aware minimization and landscape diagnostics at desk scale."""

from .analysis import (
    BoundReport,
    SpectrumReport,
    estimate_sharpness,
    lanczos_spectrum,
    pac_bayes_bound,
    update_cosine_similarity,
)
from .data import Batch, Dataset, NoiseSpec, Splits, inject_label_noise, \
    load_idx_or_csv, make_synthetic
from .errors import ConfigError, DivergenceError, NonFiniteError, ParseError
from .models import AnalyticLandscape, Mlp, make_double_well, make_mlp, make_quadratic
from .optim import (
    OptimizerState,
    SamConfig,
    TrainConfig,
    epsilon_hat,
    inner_maximize,
    msharpness_gradient,
    random_perturbation_gradient,
    sam_gradient,
    sam_gradient_second_order,
    step,
    train,
)
from .tensor import ParamVector, Tensor, grad, hvp

__version__ = "0.1.0"
