"""maskgrid: iterative mask-predict decoding for conditional token grids.

A numpy-backed stack: autodiff tensor core, encoder-decoder transformer,
masking schedules, four non-autoregressive training regimes plus an
autoregressive baseline, freeze/revise iterative decoders, a synthetic
multimodal grid corpus with analytic entropy floors, and a benchmark
harness counting decoder forward passes.
"""

from .masking import Schedule, keep_count, keep_counts, sample_mask_ratio, apply_mask
from .model import ModelConfig, ModelBundle, init_bundle, encode, decode_parallel
from .decoding import (
    decode_maskpredict_freeze,
    decode_maskpredict_revise,
    decode_autoregressive,
    sample_candidates,
)
from .training import Trainer, TrainConfig, OptConfig, OptState
from .checkpoint import save_checkpoint, load_checkpoint

__version__ = "0.1.0"
