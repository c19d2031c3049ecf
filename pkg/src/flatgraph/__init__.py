"""Flat-minima training methods for GCN, GAT and Graph-MLP on a small numpy autodiff core."""
from .datasets import Split, generate_split, load_dataset, write_dataset
from .flatmin import MethodConfig
from .graph import Graph
from .models import ModelConfig, ParamSet
from .tensor import BACKEND
from .trainer import RunConfig, RunResult, multi_seed, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Graph",
    "MethodConfig",
    "ModelConfig",
    "ParamSet",
    "RunConfig",
    "RunResult",
    "Split",
    "generate_split",
    "load_dataset",
    "multi_seed",
    "train",
    "write_dataset",
]
