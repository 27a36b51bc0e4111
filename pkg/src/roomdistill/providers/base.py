"""
    roomdistill.providers.base
    ~~~~~~~~~~~~~~~~~~~~~~~~~~

    This module contains the BaseProvider that other score providers have to
    implement, together with the query and response types they exchange with
    the optimizer.

    :license: BSD, see LICENSE for more details.
"""

import math
from dataclasses import dataclass
from dataclasses import field
from typing import List
from typing import Sequence
from typing import Tuple

import numpy as np

from roomdistill.geometry import CameraPose
from roomdistill.renderer import RenderOutput


class NoiseSchedule:
    """Variance-preserving schedule ``x_t = alpha(t) * x + sigma(t) * eps``
    with ``alpha(t) = cos(pi t / 2)`` and ``sigma(t) = sin(pi t / 2)``.
    """

    def alpha(self, t: float) -> float:
        return math.cos(0.5 * math.pi * t)

    def sigma(self, t: float) -> float:
        return math.sin(0.5 * math.pi * t)

    def add_noise(self, x: np.ndarray, t: float, noise: np.ndarray) -> np.ndarray:
        return self.alpha(t) * x + self.sigma(t) * noise


@dataclass(frozen=True)
class Guidance:
    """Negative guidance: ``residual_pos + scale * (residual_pos -
    residual_neg)``.  The negative prompt is kept as metadata only.
    """

    negative_prompt_meta: Tuple[str, ...] = ()
    guidance_scale: float = 0.0


@dataclass(frozen=True)
class ScoreQuery:
    """What the optimizer hands to a provider for one batch.

    :param renders: one render per view.
    :param poses: the poses the prior should assume, one per view.
    :param t: diffusion timestep in ``[0, 1]``.
    :param noise: unit Gaussian samples shaped like each render's color.
    :param prompt_meta: prompt tags, metadata only.
    """

    renders: Sequence[RenderOutput]
    poses: Sequence[CameraPose]
    t: float
    noise: Sequence[np.ndarray]
    prompt_meta: Tuple[str, ...] = ()
    guidance: Guidance = field(default_factory=Guidance)

    def __post_init__(self) -> None:
        if not len(self.renders) == len(self.poses) == len(self.noise):
            raise ValueError(
                f"renders ({len(self.renders)}), poses ({len(self.poses)}) and "
                f"noise ({len(self.noise)}) must have equal length"
            )
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"timestep must lie in [0, 1], got {self.t!r}")
        for render, noise in zip(self.renders, self.noise):
            if noise.shape != render.color.shape:
                raise ValueError(
                    f"noise shape {noise.shape} does not match render shape "
                    f"{render.color.shape}"
                )

    def __len__(self) -> int:
        return len(self.renders)


@dataclass(frozen=True)
class ScoreResponse:
    """Per-view residuals ``eps_hat - eps`` shaped like the renders."""

    residuals: List[np.ndarray]

    def __post_init__(self) -> None:
        for residual in self.residuals:
            if not np.all(np.isfinite(residual)):
                raise FloatingPointError("provider returned a non-finite residual")

    def scaled(self, factor: float) -> "ScoreResponse":
        return ScoreResponse([factor * r for r in self.residuals])

    def rms(self) -> float:
        if not self.residuals:
            return 0.0
        return float(
            math.sqrt(np.mean([np.mean(np.square(r)) for r in self.residuals]))
        )


def zero_response(query: ScoreQuery) -> ScoreResponse:
    return ScoreResponse([np.zeros_like(r.color) for r in query.renders])


class BaseProvider:
    """Baseclass for score providers.  All providers implement :meth:`score`.

    Providers are stateless after construction, so independent queries may
    be scored concurrently.
    """

    def score(self, query: ScoreQuery) -> ScoreResponse:
        raise NotImplementedError()

    def __call__(self, query: ScoreQuery) -> ScoreResponse:
        return self.score(query)

    @classmethod
    def factory(cls, config, args, kwargs):
        return cls(*args, **kwargs)
