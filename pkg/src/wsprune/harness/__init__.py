"""Datasets, augmentation, checkpoints and the sweep runner."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, logmel_extract, synth_dataset
from .experiment import ExperimentConfig, run_experiment, train_sparse

__all__ = ["Dataset", "ExperimentConfig", "load_checkpoint", "logmel_extract", "run_experiment",
           "save_checkpoint", "synth_dataset", "train_sparse"]
