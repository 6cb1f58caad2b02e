"""tinylm: a desk-scale toolkit for building tiny decoder-only language
models end to end: tokenizer compaction, architecture budgeting, weight
initialization, parameter inheritance from a trained parent, grouped-KV
conversion, and multi-round training with loss-driven resampling.
"""

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeConsumedError,
    Tensor,
    backward,
    finite_diff_check,
    softmax_cross_entropy,
)
from .arch import (
    ArchReport,
    ModelConfig,
    ParamStore,
    forward,
    generate,
    load_checkpoint,
    param_count,
    save_checkpoint,
    search_configs,
    speed_bench,
)
from .tokenizer import (
    CoverageCurve,
    FrequencyTable,
    Vocabulary,
    compact_vocab,
    compression_rate,
    count_frequencies,
    coverage_curve,
    decode,
    encode,
    train_bpe,
)
from .initializers import InitScheme, initialize
from .surgery import (
    InheritancePlan,
    LayerImportance,
    MaskParams,
    NeuronScores,
    build_child,
    convert_to_gqa,
    layer_skip_eval,
    learn_masks,
    make_plan,
    score_neurons,
    select_layers,
)
from .trainer import (
    BatchLossLedger,
    ScalingRule,
    TrainPlan,
    forgetting_scan,
    multi_round_train,
    resample,
    scaled_lr,
    train_round,
)
from .evaluator import ClozeItem, EvalReport, cloze_accuracy, perplexity

__version__ = "0.1.0"

__all__ = [
    "ArchReport",
    "BatchLossLedger",
    "ClozeItem",
    "CoverageCurve",
    "EvalReport",
    "FrequencyTable",
    "InheritancePlan",
    "InitScheme",
    "LayerImportance",
    "MaskParams",
    "ModelConfig",
    "NeuronScores",
    "NonFiniteError",
    "ParamStore",
    "ScalingRule",
    "ShapeError",
    "Tape",
    "TapeConsumedError",
    "Tensor",
    "TrainPlan",
    "Vocabulary",
    "backward",
    "build_child",
    "cloze_accuracy",
    "compact_vocab",
    "compression_rate",
    "convert_to_gqa",
    "count_frequencies",
    "coverage_curve",
    "decode",
    "encode",
    "finite_diff_check",
    "forgetting_scan",
    "forward",
    "generate",
    "initialize",
    "layer_skip_eval",
    "learn_masks",
    "load_checkpoint",
    "make_plan",
    "multi_round_train",
    "param_count",
    "perplexity",
    "resample",
    "save_checkpoint",
    "scaled_lr",
    "score_neurons",
    "search_configs",
    "select_layers",
    "softmax_cross_entropy",
    "speed_bench",
    "train_round",
    "train_bpe",
]
