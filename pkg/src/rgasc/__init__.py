"""Relation-guided acoustic scene classification with event pseudo labels, in numpy."""

__version__ = "0.1.0"

from .dataio import (CorpusSplit, EventVocabulary, LabeledExample, SceneVocabulary, load_corpus,
                     split_corpus, synth_corpus)
from .estimator import RGASCClassifier
from .evaluation import (EvalReport, compare_over_seeds, evaluate, run_ablation_suite, run_lambda_sweep,
                         run_shared_block_sweep)
from .features import LogMel, LogMelExtractor, MelConfig, StftConfig, WaveClip, logmel
from .losses import BEST_REPORTED, PURE_ASC, LossBreakdown, LossWeights, composite_loss
from .model import ModelConfig, RGASCNet, load_checkpoint, save_checkpoint
from .relation import RelationMatrix, build_relation_matrix
from .trainer import TrainConfig, resume, train

__all__ = [
    "BEST_REPORTED", "PURE_ASC", "CorpusSplit", "EvalReport", "EventVocabulary", "LabeledExample", "LogMel",
    "LogMelExtractor", "LossBreakdown", "LossWeights", "MelConfig", "ModelConfig", "RGASCClassifier",
    "RGASCNet", "RelationMatrix", "SceneVocabulary", "StftConfig", "TrainConfig", "WaveClip",
    "build_relation_matrix", "compare_over_seeds", "composite_loss", "evaluate", "load_checkpoint",
    "load_corpus", "logmel", "resume", "run_ablation_suite", "run_lambda_sweep", "run_shared_block_sweep",
    "save_checkpoint", "split_corpus", "synth_corpus", "train", "__version__",
]
