"""Exception hierarchy shared by the engine, the trainer and the service."""
from typing import Optional


class XLSTMError(Exception):
    """Base class for every engine error"""


class ConfigurationError(XLSTMError, ValueError):
    """Invalid configuration value or unknown configuration key"""


class ShapeMismatchError(XLSTMError, ValueError):
    """Tensor dimensions disagree with each other or with the config"""


class TokenRangeError(XLSTMError, ValueError):
    """Token id outside [0, vocab_size)"""


class NonFiniteError(XLSTMError, FloatingPointError):
    """NaN or Inf found while checked mode is enabled"""


class CheckpointError(XLSTMError):
    """Checkpoint file is unreadable or malformed"""


class CheckpointManifestMismatch(CheckpointError):
    """Checkpoint manifest disagrees with the model built from its config"""

    def __init__(self, tensor_name: str, expected, found):
        self.tensor_name = tensor_name
        self.expected = expected
        self.found = found
        super().__init__(
            f"tensor '{tensor_name}': expected {expected}, manifest has {found}"
        )


class TrainingDivergedError(XLSTMError):
    """Loss became non-finite during training"""

    def __init__(self, step: int, loss: float, log: Optional[object] = None):
        self.step = step
        self.loss = loss
        self.log = log
        super().__init__(f"non-finite loss {loss} at step {step}")
