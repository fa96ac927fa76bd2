"""Uncertainty-aware speaker embeddings: posterior pooling, UAAM/SVL losses and scoring."""
from .encoder import EncoderConfig, FrameEncoder, MVAConfig, banded_mask, encode_frames, window_size
from .losses import (
    ClassifierWeights,
    LambdaVariant,
    MarginScheduleConfig,
    SVLConfig,
    aam_loss,
    kappa_at,
    margin_at,
    svl_loss,
    uaam_loss,
    uncertainty_scale,
)
from .model import ModelConfig, SpeakerModel
from .pooling import (
    EmbeddingWithUncertainty,
    FrameGaussians,
    PriorParams,
    gaussian_posterior,
    propagate_mean,
    propagate_variance,
    temporal_average_pool,
)
from .scoring import ScoreSet, cosine, eer, min_dcf, uncertainty_cosine

__version__ = "0.1.0"
