"""Capture shim for torch.compile workloads.

Registers a custom backend that exports every post-AOT-Autograd graph
as a ``raw-ir/1`` JSON file, the format the trainsim toolkit ingests.
Run the model on the meta device and capture is allocation free.
"""

from .capture import (
    FORMAT_VERSION,
    CaptureConfig,
    UnmappedOperatorError,
    register_backend,
    serialize_fx,
)

__all__ = [
    "FORMAT_VERSION",
    "CaptureConfig",
    "UnmappedOperatorError",
    "register_backend",
    "serialize_fx",
]

__version__ = "0.1.0"
