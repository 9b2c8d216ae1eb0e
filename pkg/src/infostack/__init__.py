"""Greedy stacks of gradient-isolated encoders trained with module-local
contrastive objectives, plus the harnesses that verify the construction:
exact stop-gradients, finite-difference checks, schedule equivalences,
memory accounting, and linear-probe evaluation."""

from .tensor import (Tensor, GradGraph, ShapeError, backward, conv_out_len,
                     finite_diff_check, grad_block)
from .rng import SeededRng
from .encoders import (LayerSpec, StackConfig, EncoderModule, build_stack,
                       encode, stack_forward, audit_shapes, audit_audio_outline)
from .patching import (PatchGrid, PredictionPairSet, extract_patch_grid,
                       build_prediction_pairs_grid, build_prediction_pairs_seq,
                       subsample_loss_window)
from .contrastive import (ContrastiveBatch, LossReport, PredictionHead,
                          build_head, infonce_loss, mi_lower_bound,
                          sample_negatives, score_log_bilinear)
from .context import (AutoregressiveModule, ContextSequence,
                      build_autoregressive, context_forward, context_infonce,
                      gru_step)
from .data import SyntheticSpec, generate, true_mi_oracle
from .formats import (ActivationCacheStore, read_dataset, write_dataset,
                      open_cache, write_cache, load_checkpoint, save_checkpoint)
from .probe import LinearProbe, ProbeResult, pool_features, train_probe
from .training import (Adam, MemoryMeter, Model, Trainer, TrainerSettings,
                       build_model, cache_activations, isolation_check,
                       measure_peak_bytes)
from .config import RunConfig, parse_config, parse_config_text, config_digest

__version__ = "0.1.0"
