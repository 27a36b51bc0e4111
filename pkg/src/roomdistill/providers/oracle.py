"""
    roomdistill.providers.oracle
    ~~~~~~~~~~~~~~~~~~~~~~~~~~~~

    The analytic oracle room and the score provider built on it.  The room is
    an axis-aligned box centered on the origin with six Lambertian walls, each
    with a base color modulated by a low-frequency pattern.

    :license: BSD, see LICENSE for more details.
"""

import logging
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from roomdistill.exceptions import OutsideRoom
from roomdistill.geometry import CameraPose
from roomdistill.geometry import generate_rays
from roomdistill.providers.base import BaseProvider
from roomdistill.providers.base import NoiseSchedule
from roomdistill.providers.base import ScoreQuery
from roomdistill.providers.base import ScoreResponse

logger = logging.getLogger(__name__)

#: Wall order: +x, -x, +y (ceiling), -y (floor), +z, -z.
DEFAULT_PALETTE = (
    (0.80, 0.30, 0.25),
    (0.25, 0.55, 0.80),
    (0.90, 0.90, 0.85),
    (0.45, 0.33, 0.22),
    (0.35, 0.70, 0.40),
    (0.85, 0.75, 0.30),
)


class OracleRoom:
    """Closed-form box room.

    :param half_extent: the room spans ``[-half_extent, half_extent]`` on every
                        axis, meters.
    :param palette: six base colors in wall order ``+x, -x, +y, -y, +z, -z``.
    :param pattern_amplitude: relative strength of the wall pattern.
    :param pattern_frequency: pattern cycles per meter.
    :param saturation: scales each color's distance from its gray level.
    """

    def __init__(
        self,
        half_extent: float = 2.0,
        palette: Sequence[Tuple[float, float, float]] = DEFAULT_PALETTE,
        pattern_amplitude: float = 0.15,
        pattern_frequency: float = 0.5,
        saturation: float = 1.0,
    ) -> None:
        if len(palette) != 6:
            raise ValueError(f"palette needs six wall colors, got {len(palette)}")
        self.half_extent = float(half_extent)
        self.palette = np.asarray(palette, dtype=np.float64).reshape(6, 3)
        self.pattern_amplitude = float(pattern_amplitude)
        self.pattern_frequency = float(pattern_frequency)
        self.saturation = float(saturation)

    @classmethod
    def from_config(cls, room, saturation: float = 1.0) -> "OracleRoom":
        return cls(
            half_extent=room.half_extent,
            palette=room.palette,
            pattern_amplitude=room.pattern_amplitude,
            pattern_frequency=room.pattern_frequency,
            saturation=saturation,
        )

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        h = self.half_extent
        return np.full(3, -h), np.full(3, h)

    def contains(self, position: np.ndarray) -> bool:
        return bool(np.all(np.abs(position) < self.half_extent))

    def intersect(
        self, origins: np.ndarray, directions: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """First wall hit of rays starting inside the room.

        :returns: ``(distance, wall)`` where ``wall`` indexes the palette.
        """
        with np.errstate(divide="ignore", invalid="ignore"):
            planes = np.sign(directions) * self.half_extent
            candidates = np.where(
                directions != 0.0, (planes - origins) / directions, np.inf
            )
        axis = np.argmin(candidates, axis=-1)
        distance = np.take_along_axis(candidates, axis[..., None], axis=-1)[..., 0]
        positive = np.take_along_axis(directions, axis[..., None], axis=-1)[..., 0] > 0
        wall = 2 * axis + np.where(positive, 0, 1)
        return distance, wall

    def shade(self, points: np.ndarray, wall: np.ndarray) -> np.ndarray:
        """Wall color at hit points."""
        axis = wall // 2
        # the two in-plane coordinates of each hit
        first = np.take_along_axis(points, ((axis + 1) % 3)[..., None], axis=-1)[..., 0]
        second = np.take_along_axis(
            points, ((axis + 2) % 3)[..., None], axis=-1
        )[..., 0]
        k = 2.0 * np.pi * self.pattern_frequency
        pattern = 1.0 + self.pattern_amplitude * np.sin(k * first) * np.sin(k * second)
        color = self.palette[wall] * pattern[..., None]
        if self.saturation != 1.0:
            gray = color.mean(axis=-1, keepdims=True)
            color = gray + self.saturation * (color - gray)
        return np.clip(color, 0.0, 1.0)

    def trace(
        self, origins: np.ndarray, directions: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        distance, wall = self.intersect(origins, directions)
        points = origins + distance[..., None] * directions
        return self.shade(points, wall), distance

    def ground_truth(self, pose: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
        """The oracle color image and hit-distance depth seen from ``pose``.

        :raises OutsideRoom: if the camera is not strictly inside the room.
        """
        if not self.contains(pose.position):
            raise OutsideRoom(
                f"camera at {pose.position.tolist()} is outside the "
                f"{self.half_extent} m room"
            )
        rays = generate_rays(pose)
        return self.trace(rays.origins, rays.directions)


class OracleProvider(BaseProvider):
    """Scores renders against the oracle room.

    The denoised estimate is the room's ground truth at each query pose, so
    the residual reduces to ``alpha / max(sigma, sigma_floor) * (render -
    truth)``.

    :param room: the analytic scene.
    :param schedule: the noise schedule.
    :param sigma_floor: lower bound on ``sigma(t)`` in the division.
    """

    def __init__(
        self,
        room: Optional[OracleRoom] = None,
        schedule: Optional[NoiseSchedule] = None,
        sigma_floor: float = 1e-3,
    ) -> None:
        self.room = room if room is not None else OracleRoom()
        self.schedule = schedule if schedule is not None else NoiseSchedule()
        self.sigma_floor = sigma_floor

    def score(self, query: ScoreQuery) -> ScoreResponse:
        alpha = self.schedule.alpha(query.t)
        scale = alpha / max(self.schedule.sigma(query.t), self.sigma_floor)
        residuals = []
        for render, pose in zip(query.renders, query.poses):
            truth, _ = self.room.ground_truth(pose)
            if truth.shape != render.color.shape:
                raise ValueError(
                    f"render shape {render.color.shape} does not match the "
                    f"prior pose's image size {truth.shape}"
                )
            residuals.append(scale * (render.color - truth))
        return ScoreResponse(residuals)

    @classmethod
    def factory(cls, config, args, kwargs):
        kwargs.update(
            dict(
                room=OracleRoom.from_config(config.room),
                sigma_floor=config.prior.sigma_floor,
            )
        )
        return cls(*args, **kwargs)


class OversaturatedOracleProvider(OracleProvider):
    """The negative variant: the same room with exaggerated saturation, the
    look negative prompts steer away from.
    """

    @classmethod
    def factory(cls, config, args, kwargs):
        kwargs.update(
            dict(
                room=OracleRoom.from_config(
                    config.room, saturation=config.prior.negative_saturation
                ),
                sigma_floor=config.prior.sigma_floor,
            )
        )
        return cls(*args, **kwargs)
