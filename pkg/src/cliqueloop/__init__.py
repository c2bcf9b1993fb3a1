"""Visual loop-closure detection by graph consensus over retrieval cliques.

Stages: keyframe bundles, VLAD retrieval, clique construction, a graph
attention edge scorer, epipolar verification and evaluation metrics.
"""

from .exceptions import CliqueLoopError
from .geoverify import RansacConfig, verify_pair
from .gnn import CliqueEdgeClassifier, ModelHyper, init_params, model_forward
from .keyframes import CameraIntrinsics, Keyframe, Pose, SequenceDataset, load_dataset, relative_pose, save_dataset
from .metrics import ate_up_to_scale, average_precision, max_recall_full_precision, rpe
from .retrieval import CliqueRetriever, build_clique, build_index, query_topk
from .vlad import VladEncoder, compute_vlad, fit_vocabulary

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CliqueEdgeClassifier",
    "CliqueLoopError",
    "CliqueRetriever",
    "Keyframe",
    "ModelHyper",
    "Pose",
    "RansacConfig",
    "SequenceDataset",
    "VladEncoder",
    "ate_up_to_scale",
    "average_precision",
    "build_clique",
    "build_index",
    "compute_vlad",
    "fit_vocabulary",
    "init_params",
    "load_dataset",
    "max_recall_full_precision",
    "model_forward",
    "query_topk",
    "relative_pose",
    "rpe",
    "save_dataset",
    "verify_pair",
]
