"""
    roomdistill.view_schedule
    ~~~~~~~~~~~~~~~~~~~~~~~~~

    Progressive camera sampling.  Stage 1 keeps the camera at the origin and
    spins it, stage 2 moves it off-center while it keeps facing away from the
    origin, stage 3 places it anywhere and rotates it freely, with every view
    of one iteration sharing a position.  Each stage also anneals the range
    diffusion timesteps are drawn from.

    :license: BSD, see LICENSE for more details.
"""

import math
from dataclasses import dataclass
from typing import Any
from typing import Dict
from typing import List
from typing import Tuple

import numpy as np

from roomdistill.exceptions import ScheduleCrossing
from roomdistill.geometry import CameraPose
from roomdistill.geometry import Intrinsics
from roomdistill.geometry import rotation_facing
from roomdistill.geometry import sample_rotation

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class StageConfig:
    """Sampling scope, budget and annealing of one training stage.

    :param stage_id: 1, 2 or 3.
    :param iterations: number of optimization steps.
    :param views_per_iteration: poses per batch.
    :param position_radius: camera positions lie within this ball, meters.
    :param pitch_range: pitches are drawn from ``[-pitch_range, pitch_range]``
                        (stages 1 and 3), radians.
    :param t_max_schedule: ``(start, end)`` of the upper timestep bound.
    :param t_min_schedule: ``(start, end)`` of the lower timestep bound.
    :param min_radius: stage-2 positions keep at least this distance from the
                       origin.
    :param schedule_split: ``0`` interpolates linearly from start to end;
                           otherwise the fraction of iterations after which
                           the bounds jump from start to end values.
    """

    stage_id: int
    iterations: int
    views_per_iteration: int
    position_radius: float
    pitch_range: float
    t_max_schedule: Tuple[float, float]
    t_min_schedule: Tuple[float, float]
    min_radius: float = 0.05
    schedule_split: float = 0.0


@dataclass(frozen=True)
class ViewBatch:
    poses: List[CameraPose]
    stage_id: int
    iteration_index: int
    shared_position_flag: bool

    def __len__(self) -> int:
        return len(self.poses)


def _check_stage(config: StageConfig, expected: int) -> None:
    if config.stage_id != expected:
        raise ValueError(
            f"stage {expected} sampler called with a stage "
            f"{config.stage_id} config"
        )


def _uniform_direction(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        norm = float(np.linalg.norm(v))
        if norm > 1e-12:
            return v / norm


def sample_stage1(
    config: StageConfig, rng: np.random.Generator, intrinsics: Intrinsics
) -> ViewBatch:
    """Origin-centered panorama views: equally spaced yaws sharing one random
    offset, independently drawn pitches.
    """
    _check_stage(config, 1)
    n = config.views_per_iteration
    offset = rng.uniform(0.0, TWO_PI)
    pitches = rng.uniform(-config.pitch_range, config.pitch_range, size=n)
    poses = [
        CameraPose.look(
            (offset + k * TWO_PI / n) % TWO_PI, float(pitches[k]), intrinsics
        )
        for k in range(n)
    ]
    return ViewBatch(poses, 1, -1, True)


def sample_stage2(
    config: StageConfig, rng: np.random.Generator, intrinsics: Intrinsics
) -> ViewBatch:
    """Off-center views facing straight away from the origin.

    Positions are uniform in the ball of radius ``position_radius`` with the
    inner ball of radius ``min_radius`` removed.
    """
    _check_stage(config, 2)
    poses = [
        _outward_pose(config, rng, intrinsics)
        for _ in range(config.views_per_iteration)
    ]
    return ViewBatch(poses, 2, -1, False)


def _outward_pose(
    config: StageConfig, rng: np.random.Generator, intrinsics: Intrinsics
) -> CameraPose:
    inner = config.min_radius**3
    outer = config.position_radius**3
    direction = _uniform_direction(rng)
    radius = (rng.uniform() * (outer - inner) + inner) ** (1.0 / 3.0)
    return CameraPose(rotation_facing(direction), radius * direction, intrinsics)


def sample_stage3(
    config: StageConfig, rng: np.random.Generator, intrinsics: Intrinsics
) -> ViewBatch:
    """Freely rotated views that all share one random position."""
    _check_stage(config, 3)
    if config.views_per_iteration < 2:
        raise ValueError("stage 3 needs at least two views per iteration")
    direction = _uniform_direction(rng)
    position = config.position_radius * rng.uniform() ** (1.0 / 3.0) * direction
    poses = []
    for _ in range(config.views_per_iteration):
        yaw = rng.uniform(0.0, TWO_PI)
        pitch = rng.uniform(-config.pitch_range, config.pitch_range)
        poses.append(CameraPose(sample_rotation(yaw, pitch), position, intrinsics))
    return ViewBatch(poses, 3, -1, True)


STAGE_SAMPLERS = {1: sample_stage1, 2: sample_stage2, 3: sample_stage3}


def timestep_bounds(config: StageConfig, iteration_index: int) -> Tuple[float, float]:
    """The ``(t_min, t_max)`` range of a stage at one iteration.

    :raises ScheduleCrossing: if the bounds cross.
    """
    if not 0 <= iteration_index < config.iterations:
        raise IndexError(
            f"iteration {iteration_index} outside stage {config.stage_id} "
            f"budget of {config.iterations}"
        )
    if config.schedule_split > 0.0:
        boundary = int(round(config.schedule_split * config.iterations))
        frac = 0.0 if iteration_index < boundary else 1.0
    elif config.iterations > 1:
        frac = iteration_index / (config.iterations - 1)
    else:
        frac = 0.0

    def lerp(pair: Tuple[float, float]) -> float:
        return (1.0 - frac) * pair[0] + frac * pair[1]

    t_min, t_max = lerp(config.t_min_schedule), lerp(config.t_max_schedule)
    if not t_min < t_max:
        raise ScheduleCrossing(
            f"stage {config.stage_id} iteration {iteration_index}: "
            f"t_min={t_min:.4f} is not below t_max={t_max:.4f}"
        )
    return t_min, t_max


class ViewSampler:
    """Seeded pose and timestep source for one stage.

    A sampler is driven sequentially by a single owner.  Its generator state
    round-trips through :attr:`state` so a resumed run draws the same
    sequence as an uninterrupted one.
    """

    def __init__(
        self, config: StageConfig, intrinsics: Intrinsics, seed: int
    ) -> None:
        self.config = config
        self.intrinsics = intrinsics
        self.rng = np.random.Generator(np.random.PCG64([seed, config.stage_id]))
        self._sample = STAGE_SAMPLERS[config.stage_id]

    @property
    def state(self) -> Dict[str, Any]:
        return self.rng.bit_generator.state

    @state.setter
    def state(self, value: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = value

    def sample(self, iteration_index: int) -> ViewBatch:
        batch = self._sample(self.config, self.rng, self.intrinsics)
        return ViewBatch(
            batch.poses, batch.stage_id, iteration_index, batch.shared_position_flag
        )

    def sample_view(self) -> CameraPose:
        """One replacement stage-2 view, drawn like a batch member."""
        _check_stage(self.config, 2)
        return _outward_pose(self.config, self.rng, self.intrinsics)

    def bounds(self, iteration_index: int) -> Tuple[float, float]:
        return timestep_bounds(self.config, iteration_index)

    def sample_timestep(self, bounds: Tuple[float, float]) -> float:
        return float(self.rng.uniform(bounds[0], bounds[1]))
