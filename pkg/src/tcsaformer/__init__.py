"""Token-compressed top-k sparse attention segmentation network on a small numpy autodiff core."""

from .attention import AttentionParams, AttentionTrace, dense_attention, effective_k, tksa
from .compression import CompressionState, MergeResult, PruneResult, compress, importance_scores, merge, prune
from .config import ModelConfig, StageConfig, TrainConfig, default_config, toy_config
from .decompression import decompress, unmerge
from .flops import FlopsReport, count_attention, count_model
from .network import Model, SegmentationOutput, forward, init_model, loss, train_step

__version__ = "0.1.0"
