"""
    roomdistill.exceptions
    ~~~~~~~~~~~~~~~~~~~~~~

    Errors raised by the distillation engine.

    :license: BSD, see LICENSE for more details.
"""

from typing import List
from typing import Optional


class RoomDistillError(Exception):
    """Base class of every error raised by this package."""


class CentersDiffer(RoomDistillError, ValueError):
    """Two poses were expected to share a camera center but do not."""


class ScheduleCrossing(RoomDistillError, ValueError):
    """The interpolated timestep bounds cross (``t_min >= t_max``)."""


class DegenerateDepth(RoomDistillError, ValueError):
    """The camera sits at or beyond the estimated scene surface."""


class InsufficientOpacity(RoomDistillError, ValueError):
    """Too few opaque pixels to estimate a view depth."""


class SamplingMismatch(RoomDistillError, ValueError):
    """Forward and backward renders used different ray sampling."""


class OutsideRoom(RoomDistillError, ValueError):
    """A pose lies outside the oracle room."""


class ShapeMismatch(RoomDistillError, ValueError):
    """Feature arrays disagree on their dimensions."""


class NonFiniteGradient(RoomDistillError, ArithmeticError):
    """A step produced NaN or infinite gradients and was rejected."""


class AbortedStage(RoomDistillError, RuntimeError):
    """A stage hit too many consecutive failed steps."""

    def __init__(self, stage_id: int, iteration: int, reason: str) -> None:
        super().__init__(
            f"stage {stage_id} aborted at iteration {iteration}: {reason}"
        )
        self.stage_id = stage_id
        self.iteration = iteration
        self.reason = reason


class ConfigInvalid(RoomDistillError, ValueError):
    """A pipeline configuration failed validation.

    :param errors: one message per offending field.
    """

    def __init__(self, errors: List[str]) -> None:
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = list(errors)


class CheckpointCorrupt(RoomDistillError, ValueError):
    """A checkpoint file failed magic, version or length validation."""


class OracleUnavailable(RoomDistillError, RuntimeError):
    """Metrics need the analytic oracle room but the run did not use one."""

    def __init__(self, message: Optional[str] = None) -> None:
        super().__init__(message or "evaluation requires an oracle-room run")


class DirectoryLocked(RoomDistillError, RuntimeError):
    """Another run holds the checkpoint directory."""
