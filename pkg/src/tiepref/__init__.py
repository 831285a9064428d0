"""Preference modeling with ties: BT/BTT likelihoods, the tie-induced strength bias, and its correction."""

from .dataset import (
    FIRST,
    SECOND,
    TIE,
    ComparisonRecord,
    PreferenceDataset,
    PreferenceLabel,
    break_ties,
    generate_synthetic,
    read_records,
    relabel_by_reward,
    write_records,
)
from .errors import (
    DomainError,
    GenerationError,
    InvalidDatasetError,
    InvalidParameterError,
    NumericalError,
    RecordParseError,
    TieprefError,
    TrainingError,
    UndefinedMetricError,
    ValidationError,
)
from .experiments import (
    GenConfig,
    emit_bias_curves,
    eval_accuracy,
    eval_mean_abs_bias,
    exact_expectation_dataset,
    run_bias_gap,
)
from .prefcore import (
    TieModelParams,
    bias_bound,
    bias_term,
    bt_win_prob,
    btt_tie_prob,
    btt_win_prob,
    collapsed_win_prob,
    forward_bias_map,
    invert_bias_map,
)
from .reward import (
    LinearReward,
    MlpReward,
    PolicyLogRatioReward,
    RewardModel,
    TabularReward,
    load_checkpoint,
    random_ground_truth,
    save_checkpoint,
)
from .train import LossKind, TrainConfig, TrainingReport, nll_bias_corrected, nll_bt, nll_btt, train

__version__ = "0.1.0"
