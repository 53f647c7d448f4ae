"""Local perturb-and-MAP inference and pseudolikelihood learning for grid CRFs."""
from ._backend import BACKEND, HAVE_NUMBA
from .inference import METHODS, InferenceConfig, InferenceResult, infer
from .learning import Dataset, TrainConfig, TrainingDiverged, pl_gradient, pl_objective, train
from .model import (BlockPartition, GridModel, UnsupportedBlockSize, Weights, load_model,
                    save_model, total_log_potential)
from .perturb import GumbelSource

__version__ = "0.1.0"
