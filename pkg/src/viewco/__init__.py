"""Multi-view consistency learning for text-supervised semantic segmentation.

A grouping vision encoder is trained against captions with three objectives:
segment-level teacher/student contrast across two augmented views, caption
contrast against both views, and multi-positive contrast against prompted
class labels. The EMA teacher then segments images zero-shot.

Submodules
----------
numerics    normalization, tempered softmax, gradient checks, tensor files
encoder     GroupEncoder and its patch-to-segment assignment maps
text        tokenizer, TextEncoder, prompt generation
losses      the contrastive objectives
data        synthetic shape corpus and two-view augmentation
trainer     Siamese training loop, EMA, checkpoints
segment     zero-shot inference, mIoU, cross-view consistency
evaluation  dataset-level scoring
experiments the objective-vs-ablation comparison
"""
from .config import EvalConfig, TrainConfig, load_config, parse_config
from .data import AugConfig, Geometry, augment_two_views, gen_scene, load_dataset, warp_mask, write_dataset
from .encoder import EncoderConfig, GroupEncoder, SegmentTokens, encode
from .errors import *  # noqa: F401,F403
from .losses import (info_nce, multilabel_prompt_loss, seg_consistency_loss, single_view_text_loss,
                     text_views_loss, total_loss)
from .numerics import grad_check, l2_normalize, load_tensors, log_softmax, save_tensors
from .segment import LabelSet, SegmentationResult, ZeroShotSegmenter, cross_view_consistency, miou
from .text import PromptSet, TextConfig, TextEncoder, Vocab, generate_prompts, tokenize
from .trainer import ViewCoModel, ema_update, fit, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
