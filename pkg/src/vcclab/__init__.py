"""Desk-scale laboratory for compressing visual tokens inside a decoder-only transformer."""

from .accounting import compression_ratio, compute_report, token_total
from .compressor import IDENTITY, CompressorSpec, Kind, compress
from .model import Model, ModelConfig, build_model, forward, generate_answer, load_checkpoint, save_checkpoint
from .schedule import SCHEME_NAMES, StagePlan, named_scheme, two_stage
from .tasks import DataConfig, gen_dataset, render_sequence
from .trainer import RunConfig, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "IDENTITY",
    "SCHEME_NAMES",
    "CompressorSpec",
    "DataConfig",
    "Kind",
    "Model",
    "ModelConfig",
    "RunConfig",
    "StagePlan",
    "TrainConfig",
    "build_model",
    "compress",
    "compression_ratio",
    "compute_report",
    "evaluate",
    "forward",
    "gen_dataset",
    "generate_answer",
    "load_checkpoint",
    "named_scheme",
    "render_sequence",
    "save_checkpoint",
    "token_total",
    "train",
    "two_stage",
]
