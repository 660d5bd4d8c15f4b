"""Sparse sub-network continual learning with selective reuse of past neurons."""

from .allocation import AllocationConfig, NeuronLedger, build_allocation, enforce_ambiguity_constraints
from .data import build_benchmark, synth_gaussian_tasks
from .dst import TrainConfig, train_task
from .estimator import MethodSpec, SparseContinualClassifier
from .metrics import AccuracyMatrix, acc, bwt, la
from .network import LayerSpec, NetworkState
from .runner import ModelSpec, RunRecord, run_sequence

__all__ = [
    "AccuracyMatrix",
    "AllocationConfig",
    "LayerSpec",
    "MethodSpec",
    "ModelSpec",
    "NetworkState",
    "NeuronLedger",
    "RunRecord",
    "SparseContinualClassifier",
    "TrainConfig",
    "acc",
    "build_allocation",
    "build_benchmark",
    "bwt",
    "enforce_ambiguity_constraints",
    "la",
    "run_sequence",
    "synth_gaussian_tasks",
    "train_task",
]
