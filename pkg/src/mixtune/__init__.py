"""Contrastive tuning of masked-spectrogram encoders, desk scale.

A numpy-only pipeline: log-mel features and synthetic datasets, time-axis
CutMix augmentation with smoothed virtual labels, a nearest-neighbor
contrastive objective backed by a FIFO support queue, a hand-differentiated
transformer encoder with masked-reconstruction pretraining, two-stage
progressive retraining, and episodic few-shot evaluation.
"""

__version__ = "0.1.0"

from .data import (
    Dataset,
    Fbank,
    SynthSpec,
    compute_fbank,
    generate_synthetic,
    load_dataset,
    read_wav,
    save_dataset,
)
from .encoder import (
    EncoderConfig,
    EncoderState,
    TrainStage,
    backward,
    forward,
    init_state,
    load_checkpoint,
    mae_pretrain_step,
    save_checkpoint,
    set_trainable,
)
from .errors import CorruptionError, NumericalError, StateError
from .fewshot import (
    Episode,
    EvalReport,
    evaluate,
    evaluate_features,
    export_embeddings,
    nearest_centroid,
    sample_episode,
)
from .mixing import BoundingBox, MixedPair, MixMode, MixParams, make_mask, mix_batch, sample_bbox_t, sample_lambda
from .objective import ContrastiveBatch, SupportQueue, mixed_loss, nn_lookup, nnclr_loss, queue_push
from .tuning import RunLog, TuneConfig, llrd_rates, run_pretrain, run_stage1, run_stage2

__all__ = [
    "__version__",
    "Dataset", "Fbank", "SynthSpec", "compute_fbank", "generate_synthetic",
    "load_dataset", "read_wav", "save_dataset",
    "EncoderConfig", "EncoderState", "TrainStage", "backward", "forward",
    "init_state", "load_checkpoint", "mae_pretrain_step", "save_checkpoint", "set_trainable",
    "CorruptionError", "NumericalError", "StateError",
    "Episode", "EvalReport", "evaluate", "evaluate_features", "export_embeddings",
    "nearest_centroid", "sample_episode",
    "BoundingBox", "MixedPair", "MixMode", "MixParams", "make_mask", "mix_batch",
    "sample_bbox_t", "sample_lambda",
    "ContrastiveBatch", "SupportQueue", "mixed_loss", "nn_lookup", "nnclr_loss", "queue_push",
    "RunLog", "TuneConfig", "llrd_rates", "run_pretrain", "run_stage1", "run_stage2",
]
