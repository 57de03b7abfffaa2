"""Multi-modal person identification on synthetic embedding benchmarks."""

from .data import (ClipRecord, DatasetSplit, DISTRACTOR, FrameTrack,
                   MODALITIES, read_dataset, write_dataset)
from .frames import SelectedFrames, select_top_k
from .fusion import (FusionModel, ModelConfig, TrainConfig,
                     build_feature_table, classify, ensemble_predict,
                     load_model, map_features, mma_attention, mma_fuse,
                     save_model, train)
from .numerics import column_softmax, derive_seed, grad_check, gram, make_rng
from .retrieval import (RetrievalRun, average_precision, evaluate_scores,
                        mean_average_precision, rank_for_identity,
                        run_ablation)
from .synth import GenConfig, generate_benchmark

__all__ = [
    "ClipRecord", "DatasetSplit", "DISTRACTOR", "FrameTrack", "MODALITIES",
    "read_dataset", "write_dataset", "SelectedFrames", "select_top_k",
    "FusionModel", "ModelConfig", "TrainConfig", "build_feature_table",
    "classify", "ensemble_predict", "load_model", "map_features",
    "mma_attention", "mma_fuse", "save_model", "train", "column_softmax",
    "derive_seed", "grad_check", "gram", "make_rng", "RetrievalRun",
    "average_precision", "evaluate_scores", "mean_average_precision",
    "rank_for_identity", "run_ablation", "GenConfig", "generate_benchmark",
]

__version__ = "0.1.0"
