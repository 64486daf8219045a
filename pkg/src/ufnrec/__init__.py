"""Sequential recommendation with false-negative mining, label reversal and
EMA-teacher consistency regularization."""

__version__ = "0.1.0"

from .dataio import (
    EvalCandidateSet,
    Interaction,
    InteractionDataset,
    SplitDataset,
    build_dataset,
    build_eval_candidates,
    load_dataset,
    load_interactions,
    sample_eval_candidates,
    save_dataset,
    split_leave_one_out,
)
from .distill import EMATeacher, consistency_loss, final_loss, soft_label
from .encoder import EncoderConfig, SequenceEncoder, load_checkpoint, save_checkpoint
from .estimator import UFNRecommender
from .evaluation import RankingReport, compute_metrics, evaluate, sign_test
from .experiments import PRESETS, ExperimentPreset, compare_runs, run_preset
from .negatives import MiningStrategy, RecordLedger
from .synth import SynthConfig, generate, score_mining
from .trainer import EpochReport, TrainConfig, fit
from .validation import ConfigError, DataError, TrainingError, UFNRecError
