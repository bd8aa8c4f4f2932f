"""Decomposed conditional video diffusion at desk scale.

Foreground, background and optical-flow conditions drive a dual-to-single
stream denoising transformer; pretraining uses random-block masks and
sampling switches prompts of increasing detail across three stages.
"""
from .cop import PromptHierarchy, StageConfig, hierarchical_denoise, summarize
from .data import SyntheticScene, VideoClip, gen_clip, load_clip, make_batch, save_clip
from .decompose import bbox_mask, dilate, random_block_mask, split_frame
from .motion import BACKEND as FLOW_BACKEND, estimate_flow, perturb_flow
from .net import DecomposedDiT, ModelConfig, init_params
from .schedule import NoiseSchedule, denoising_loss, make_schedule, q_sample, reverse_step
from .trainer import TrainConfig, apply_toggles, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "PromptHierarchy", "StageConfig", "hierarchical_denoise", "summarize",
    "SyntheticScene", "VideoClip", "gen_clip", "load_clip", "make_batch", "save_clip",
    "bbox_mask", "dilate", "random_block_mask", "split_frame",
    "FLOW_BACKEND", "estimate_flow", "perturb_flow",
    "DecomposedDiT", "ModelConfig", "init_params",
    "NoiseSchedule", "denoising_loss", "make_schedule", "q_sample", "reverse_step",
    "TrainConfig", "apply_toggles", "load_checkpoint", "save_checkpoint", "train",
]
