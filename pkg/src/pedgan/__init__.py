"""Text-to-pedestrian GAN with part-based and sentence-aware discriminators,
plus pose-based generation metrics."""

from .attention import SelfCrossAttention, VisaAttention, sca_attend, visa_attend
from .config import PROFILES, AblationFlags, ModelConfig, TrainConfig, model_config
from .discriminators import PART_NAMES, GlobalScores, StageDiscriminators, split_parts
from .generator import StageBundle, StagedGenerator, generate
from .metrics import KeypointSet, inception_score, pose_score, pose_variance
from .text import (AugmentedCondition, ConditioningAugmentation, TextEncoder, TokenSequence,
                   Vocabulary, ca_kl_loss, condition_augment, encode_text)

__version__ = "0.1.0"
