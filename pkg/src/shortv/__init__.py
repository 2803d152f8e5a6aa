"""Toy-scale mixed-modality transformer with frozen-visual-token layers.

Measure how much each layer's work on visual or text tokens matters to the
next-token distribution, freeze visual tokens in the layers that matter
least, and account for the FLOPs that saves.
"""

from .core import FlopCounter, cosine_similarity, kl_divergence, matmul, rms_norm, softmax
from .errors import (AccountingError, DegenerateInputError, InputError, NumericError,
                     ScheduleError, ShapeError, ShortVError, StateError)
from .flops import (FlopsReport, crosscheck, dense_layer_flops, model_ratio, schedule_flops,
                    shortv_layer_flops, sparse_layer_flops)
from .metrics import (LCReport, RedundancyRanking, ablate, cosine_profile, cosine_report,
                      lc_profile, lc_score, make_plan, plan_divergence, rank_layers)
from .model import (AttentionMap, ForwardResult, LayerKind, LayerPlan, LayerWeights, ModelConfig,
                    Selector, TextToken, TokenSequence, VisualToken, Weights, embed, forward,
                    forward_dense_layer, forward_frozen_layer, logits_last)
from .pruning import PruneConfig, PruneEvent, fastv_prune, fastv_rank, vtw_event
from .toymodel import ToySpec, build_toy, gen_calibration, monotone_profile

__version__ = "0.1.0"
