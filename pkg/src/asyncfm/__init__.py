"""Asynchronous flow matching for action chunks: backbone, confidence rater, training, evaluation."""

from .backbone import BackboneConfig, ContextBundle, ContextCache, VelocityModel, init_params
from .bench import CorruptionSpec, Dataset, TaskSpec, corrupt, gen_dataset, load_dataset, save_dataset
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (AsyncFMError, ConfigError, DigestMismatch, FormatError, InvalidArgument, InvalidState,
                     NumericError, StaleCacheError)
from .evaluation import EvalReport, data_efficiency_eval, evaluate, self_correction_eval, stage_timings
from .inference import MODES, Diagnostics, infer, infer_episode
from .rater import ConfidenceRater, RaterConfig, build_mask, init_rater, pseudo_labels
from .rng import RngStreams
from .training import TrainConfig, train_backbone, train_rater

__version__ = "0.1.0"
