"""Linear-chain CRF with factorized class embeddings for shelf-object recognition."""

from .data import Dataset, LabeledSequence, SynthConfig, generate_synthetic, load_dataset, save_dataset, split
from .evaluation import evaluate, nearest_neighbors, predict
from .model import CrfParams, FoldedCrf, ModelDims, fold_bn, init_params, load_model, save_model
from .training import TrainConfig, sgd_train, standardize_features
from .trellis import ScoreTable, brute_force_oracle, forward_backward, viterbi

__version__ = "0.1.0"

__all__ = [
    "CrfParams", "Dataset", "FoldedCrf", "LabeledSequence", "ModelDims", "ScoreTable",
    "SynthConfig", "TrainConfig", "brute_force_oracle", "evaluate", "fold_bn",
    "forward_backward", "generate_synthetic", "init_params", "load_dataset", "load_model",
    "nearest_neighbors", "predict", "save_dataset", "save_model", "sgd_train", "split",
    "standardize_features", "viterbi",
]
