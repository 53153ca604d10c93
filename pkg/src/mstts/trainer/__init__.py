from .checkpoint import (
    Checkpoint,
    assign_params,
    load_checkpoint,
    param_diff,
    save_checkpoint,
)
from .features import (
    FeatureSet,
    SpectrumBatch,
    UtteranceFeatures,
    VocoderBatch,
    collate_spectrum,
    length_buckets,
    load_features,
    pick_spectrum_batch,
    pick_vocoder_batch,
)
from .loop import (
    SpectrumBundle,
    TrainConfig,
    VocoderBundle,
    apply_ema,
    build_spectrum_bundle,
    build_vocoder_bundle,
    data_scaling_run,
    restore_spectrum_bundle,
    restore_vocoder_bundle,
    spectrum_config_for,
    spectrum_schedule,
    subset_manifest,
    train_spectrum,
    train_vocoder,
    vocoder_config_for,
    vocoder_schedule,
)

__all__ = [
    "Checkpoint",
    "FeatureSet",
    "SpectrumBatch",
    "SpectrumBundle",
    "TrainConfig",
    "UtteranceFeatures",
    "VocoderBatch",
    "VocoderBundle",
    "apply_ema",
    "assign_params",
    "build_spectrum_bundle",
    "build_vocoder_bundle",
    "collate_spectrum",
    "data_scaling_run",
    "length_buckets",
    "load_checkpoint",
    "load_features",
    "param_diff",
    "pick_spectrum_batch",
    "pick_vocoder_batch",
    "restore_spectrum_bundle",
    "restore_vocoder_bundle",
    "save_checkpoint",
    "spectrum_config_for",
    "spectrum_schedule",
    "subset_manifest",
    "train_spectrum",
    "train_vocoder",
    "vocoder_config_for",
    "vocoder_schedule",
]
