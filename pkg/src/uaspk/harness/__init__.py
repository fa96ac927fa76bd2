"""Synthetic data, training loop, evaluation, analysis and CLI."""
from .config import TrainingConfig, learning_rate_at, scale_at
from .data import Dataset, SyntheticDatasetConfig, Utterance, corrupt, generate_dataset, profile_utterance
from .train import ExperimentReport, TrainingDiverged, TrainResult, train, train_model
