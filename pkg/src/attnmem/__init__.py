"""Cross-attention entropy analysis of memorization in a toy text-to-image diffusion model."""
from .analytics import (AttentionTrace, DetectionResult, auroc, category_attention_sums, detection_D,
                        entropy, first_step_layer_entropy, mean_attention, summary_entropy, tpr_at_fpr)
from .config import LabConfig, load_config
from .denoiser import Denoiser, DenoiserConfig, MitigationPolicy, analytic_dC_gradient, intercept_logits
from .diffusion import NoiseSchedule, build_schedule, forward_diffuse, reverse_step, sample
from .errors import ConfigError, ContractError, LabError, NumericDivergence
from .mitigation import StepThresholds, calibrate_thresholds, filter_batch, make_policy
from .similarity import similarity_score
from .text import CausalTextEncoder, Vocabulary, encode, tokenize

__version__ = "0.1.0"
