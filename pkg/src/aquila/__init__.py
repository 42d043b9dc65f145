"""Multi-scale vision-language fusion at desk scale.

Region-restricted cross-attention from a learnable query grid onto a
feature pyramid, re-applied inside a small causal decoder, trained in two
stages with numpy and hand-written gradients.
"""

from .errors import (
    AquilaError,
    CapacityError,
    ConfigurationError,
    EmptyLossError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
    UsageError,
)
from .model import AquilaModel, ModelConfig
from .numerics import Tensor

__version__ = "0.1.0"
