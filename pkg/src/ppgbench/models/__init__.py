"""1D regression model zoo.

Every architecture maps a (batch, channels, length) waveform batch to a
(batch, 2) prediction of (SBP, DBP) in mmHg. All of them end in a global
average pool over time followed by a two-unit linear head, so any input
length at or above the architecture's minimum is admissible.

Normalization layers are per-sample (GroupNorm) rather than batch
statistics: this keeps forward passes independent of batch composition,
which makes gradient accumulation over micro-batches exactly equivalent
to one large batch.
"""

from .common import (
    ARCHITECTURES,
    Model,
    ModelSpec,
    build_model,
    forward,
    gradients,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)

__all__ = [
    "ARCHITECTURES",
    "Model",
    "ModelSpec",
    "build_model",
    "forward",
    "gradients",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
]
