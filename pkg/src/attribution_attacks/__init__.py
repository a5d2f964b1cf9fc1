"""Compensation-share attacks on top-k data attribution."""

from .attribution import ContributionMatrix, attribute
from .compensation import TopKConfig, compensation_share, fraction_of_change
from .config import ExperimentConfig
from .dataset import Dataset, split_contribution, synth_blobs
from .model import Architecture, ModelParams, TrainConfig, train
from .pipeline import RunArtifacts, run_experiment

__version__ = "0.1.0"
