"""Adapter-based transfer learning on a frozen transformer encoder.

Tap adapters bridge every encoder layer to the downstream head through a
learnable softmax-weighted sum; serial bottleneck adapters slot into the
encoder layers themselves. The package bundles the reverse-mode autodiff
engine the models run on, the synthetic tasks they train on, and the
metrics and sweep machinery that evaluate them.
"""

from .adapters import (
    STRATEGY_KINDS,
    TAP_VARIANTS,
    AdaptationStrategy,
    AdaptedModel,
    BottleneckAdapter,
    LayerWeights,
    TapConfig,
    aggregate,
    apply_strategy,
    count_learnable_params,
    fine_tune_top,
    format_param_count,
    frozen_parameters,
    head_input_dim,
    serial_only,
    serial_paired,
    tap_only,
    tap_param_table,
    tap_serial,
)
from .backbone import (
    PRESETS,
    TOY,
    WAVLM_BASE,
    Backbone,
    BackboneConfig,
    load_checkpoint,
    make_pretrain_corpus,
    pretrain_toy,
    save_checkpoint,
    sinusoidal_positions,
)
from .gradcheck import grad_check
from .heads import (
    BLANK,
    ClassifierHead,
    CtcHead,
    HeadSpec,
    ctc_greedy_decode,
    ctc_loss,
    make_head,
)
from .metrics import (
    TrialScore,
    adaptive_s_norm,
    accuracy,
    cosine_similarity,
    eer,
    read_trial_list,
    score_trials,
    weighted_accuracy,
    wer,
    write_score_csv,
)
from .nn import LayerNorm, Linear, Module
from .rng import stream
from .tasks import Dataset, Example, SyntheticTaskSpec, generate_task, nearest_token_decode
from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    cross_entropy,
    gelu,
    layer_norm,
    log_softmax,
    mean_over_time,
    relu,
    softmax,
)
from .training import LR_GRID, Adam, RunConfig, RunReport, evaluate, head_spec_for, train
from .experiments import (
    ablate_tap_variants,
    layer_weight_report,
    lr_grid_search,
    strategy_grid,
    sweep_layers,
)

__version__ = "0.1.0"
