"""Toy point encoder + decoder-only transformer with the hybrid attention
mask, trained and sampled entirely in numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, gradient_check, format_report
from .mask import AttentionMask, build_attention_mask, hybrid_mask, \
    render_mask
from .model import (Batch, ContactReasoningModel, ModelConfig,
                    farthest_point_sample, point_encoder_features)
from .sampling import GenerationResult, generate
from .training import (AdamW, TrainResult, TrainingSample, assemble_batch,
                       clip_gradients, lr_at_step, prepare_sample,
                       save_loss_curve, target_positions, train)

__all__ = [
    "AdamW", "AttentionMask", "Batch", "ContactReasoningModel",
    "GenerationResult", "GradCheckReport", "ModelConfig", "TrainResult",
    "TrainingSample", "assemble_batch", "build_attention_mask",
    "clip_gradients", "farthest_point_sample", "format_report", "generate",
    "gradient_check", "hybrid_mask", "load_checkpoint", "lr_at_step",
    "point_encoder_features", "prepare_sample", "render_mask",
    "save_checkpoint", "save_loss_curve", "target_positions", "train",
]
