"""Basis-function models of loudness in ensemble performances.

The pipeline runs score -> per-part basis matrices -> per-class fusion ->
piece matrix -> dataset, pairs each onset with a loudness target taken from
an audio recording, and fits linear, feedforward and recurrent models under
leave-one-out cross-validation.
"""

__version__ = "0.1.0"

from .basis import BasisDescriptor, PartBasisMatrix, extract_part_bases, format_label, parse_label
from .evaluation import (CorpusPiece, ExperimentConfig, loo_split, mse, pearson, r2,
                         run_experiment)
from .fusion import (PieceMatrix, aggregate_piece, assemble_dataset, fuse, merge,
                     score_to_piece_matrix)
from .models import ModelParams, TrainConfig, fit_linear, init_params, predict, train
from .score import Score, load_score, parse_score, resolve_instrument, unfold_repeats
from .targets import Alignment, LoudnessCurve, r128_loudness, sample_targets, standardize

__all__ = [
    "__version__", "BasisDescriptor", "PartBasisMatrix", "extract_part_bases", "format_label",
    "parse_label", "CorpusPiece", "ExperimentConfig", "loo_split", "mse", "pearson", "r2",
    "run_experiment", "PieceMatrix", "aggregate_piece", "assemble_dataset", "fuse", "merge",
    "score_to_piece_matrix", "ModelParams", "TrainConfig", "fit_linear", "init_params", "predict",
    "train", "Score", "load_score", "parse_score", "resolve_instrument", "unfold_repeats",
    "Alignment", "LoudnessCurve", "r128_loudness", "sample_targets", "standardize",
]
