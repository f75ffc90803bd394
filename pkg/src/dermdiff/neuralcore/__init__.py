"""Deterministic differentiable numeric kernel: primitives, tape, SGD, checkpoints."""

from dermdiff.neuralcore.rng import SeedStream
from dermdiff.neuralcore.ops import (
    PRIMITIVE_IDS,
    ShapeError,
    primitive_backward,
    primitive_forward,
)
from dermdiff.neuralcore.graph import (
    ParameterSet,
    SgdState,
    Tape,
    gradient_check,
    init_uniform,
    sgd_step,
)
from dermdiff.neuralcore.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "PRIMITIVE_IDS",
    "ShapeError",
    "primitive_forward",
    "primitive_backward",
    "ParameterSet",
    "SgdState",
    "Tape",
    "sgd_step",
    "gradient_check",
    "init_uniform",
    "SeedStream",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]
