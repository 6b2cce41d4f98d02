"""Few-shot segmentation by one-step latent denoising."""

from ._core import (
    ConfigError,
    EmptyMaskError,
    IoError,
    LatentCodec,
    ProtocolError,
    SegmentationModel,
    ShapeError,
    TrainingError,
    Volume,
    assd,
    config_keys,
    cosine_similarity_map,
    default_config,
    dice,
    enhance_query,
    evaluate,
    extract_query_prototype,
    hd95,
    masked_average_pool,
    normalize_config,
    read_dataset,
    reconstruction_table,
    split_three,
    synthesize,
    train,
    train_codec,
    write_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
