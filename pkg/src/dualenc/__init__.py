"""Dual-encoder contrastive training and exact cross-modal retrieval on numpy."""

from .config import TrainConfig, apply_overrides, load_config, save_config
from .contrastive import (
    PairBatch,
    ReplicaGroup,
    ReplicaLayout,
    bidirectional_softmax_loss,
    compute_gradients,
    loss_gradient,
    pooled_gradients,
    pooled_training_step,
    similarity,
    training_step,
)
from .datapipe import (
    AugmentParams,
    FrameMatrix,
    augment_image,
    chunk_frames,
    fmat_read,
    fmat_write,
    gen_synthetic,
    load_split,
    pad_or_crop,
    read_fmat,
    read_manifest,
    write_fmat,
)
from .encoders import DualEncoder, EncoderConfig, encode_image, encode_long_utterance, encode_speech
from .optim import Adam, AdamConfig, lr_at
from .retrieval import EmbeddingIndex, embed_split, evaluate_split, recall_at_k, search, top_k
from .training import load_model, train

__version__ = "0.1.0"
