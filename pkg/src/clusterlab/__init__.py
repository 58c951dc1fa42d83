"""Train modular ReLU networks with a clusterability loss and analyze their clusters."""

from .clustering import align_biclusters, bsgc, contiguous_clusters, gradient_similarity, weight_similarity
from .datahub import Dataset, batches, load_idx, synthetic_blobs
from .errors import DomainError, FormatError, NumericalError
from .modmetrics import (
    BiClustering,
    clusterability,
    clusterability_grad,
    clusterability_loss,
    community_structure,
    cross_module_params,
    random_baseline,
)
from .network import MlpModel, forward, load_checkpoint, mlp_init, save_checkpoint
from .trainer import TrainPlan, evaluate, train

__version__ = "0.1.0"
