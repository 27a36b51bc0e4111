"""
    roomdistill.pose_transform
    ~~~~~~~~~~~~~~~~~~~~~~~~~~

    Equivalent center poses for stage 2.  An off-center camera at distance
    ``d_cam`` from the origin, looking at a surface ``d`` meters from the
    origin, sees about as much as a camera at the origin with the same
    rotation and the narrower half field of view

        ``theta2 = arctan(tan(theta1) * (d - d_cam) / d)``.

    The depth ``d`` comes from the frozen stage-1 field.

    :license: BSD, see LICENSE for more details.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional
from typing import Tuple

import numpy as np
from cachelib import BaseCache
from cachelib import NullCache
from cachelib import SimpleCache

from roomdistill.exceptions import DegenerateDepth
from roomdistill.exceptions import InsufficientOpacity
from roomdistill.geometry import CameraPose
from roomdistill.geometry import SHARED_CENTER_TOLERANCE
from roomdistill.geometry import sample_rotation
from roomdistill.renderer import RaySampling
from roomdistill.renderer import render

logger = logging.getLogger(__name__)

ORIGIN = np.zeros(3)


@dataclass(frozen=True, eq=False)
class EquivalentPosePair:
    """The pose rendered by the field and the pose the prior is told about.

    :param real: the off-center camera.
    :param equivalent: the camera at the origin, same rotation, narrower view.
    :param d: mean scene depth seen from the origin, meters.
    :param d_cam: distance of the real camera from the origin, meters.
    """

    real: CameraPose
    equivalent: CameraPose
    d: float
    d_cam: float


def visible_half_extent(half_fov: float, distance: float) -> float:
    """Half-width of a frontal plane ``distance`` meters ahead that fits in a
    view of ``half_fov``.
    """
    return math.tan(half_fov) * distance


def _default_sampling(field) -> RaySampling:
    lower, upper = field.bounds
    far = float(np.linalg.norm(np.asarray(upper) - np.asarray(lower)))
    return RaySampling(n_samples=64, near=0.05, far=far, stratified=False)


def estimate_view_depth(
    field,
    center_pose: CameraPose,
    sampling: Optional[RaySampling] = None,
    opacity_threshold: float = 0.5,
    min_opaque_fraction: float = 0.1,
) -> float:
    """Opacity-weighted mean expected depth over the opaque pixels of a view
    from the origin.

    :param field: the frozen stage-1 field, or any renderable field.
    :param center_pose: a pose at the origin.
    :param sampling: ray sampling of the depth render; unjittered samples up
                     to the field's diagonal by default.
    :raises InsufficientOpacity: if fewer than ``min_opaque_fraction`` of the
                                 pixels reach ``opacity_threshold``.
    """
    if np.linalg.norm(center_pose.position) >= SHARED_CENTER_TOLERANCE:
        raise ValueError(
            f"depth is estimated from the origin, pose sits at "
            f"{center_pose.position.tolist()}"
        )
    if sampling is None:
        sampling = _default_sampling(field)
    out = render(field, center_pose, sampling)
    opaque = out.opacity >= opacity_threshold
    fraction = float(opaque.mean())
    if fraction < min_opaque_fraction:
        raise InsufficientOpacity(
            f"only {fraction:.1%} of pixels reach opacity {opacity_threshold}, "
            f"need {min_opaque_fraction:.0%}"
        )
    weights = out.opacity[opaque]
    return float(np.sum(weights * out.depth[opaque]) / np.sum(weights))


def transform_pose(
    real: CameraPose, d: float, margin: float = 0.1
) -> EquivalentPosePair:
    """Equivalent origin pose of ``real`` for a scene ``d`` meters away.

    :raises DegenerateDepth: if ``d <= d_cam + margin``.
    """
    d_cam = float(np.linalg.norm(real.position))
    if not d > d_cam + margin:
        raise DegenerateDepth(
            f"scene depth {d:.4f} m does not clear the camera at {d_cam:.4f} m "
            f"plus the {margin} m margin"
        )
    theta1 = real.intrinsics.half_fov
    theta2 = math.atan(math.tan(theta1) * (d - d_cam) / d)
    equivalent = CameraPose(
        real.rotation, ORIGIN, real.intrinsics.with_half_fov(theta2)
    )
    return EquivalentPosePair(real, equivalent, float(d), d_cam)


def origin_pose(real: CameraPose) -> CameraPose:
    """``real`` moved to the origin with its rotation and view kept."""
    return CameraPose(real.rotation, ORIGIN, real.intrinsics)


class DepthEstimator:
    """Depth source for stage 2 with an optional direction-binned cache.

    With the default :class:`cachelib.NullCache` every call renders at the
    exact view direction.  With any other cache, directions are snapped to
    the center of a yaw/pitch bin and the estimate for that bin is reused,
    so a cached value never depends on which view filled it.

    :param field: the frozen stage-1 field.
    :param sampling: ray sampling of the depth render.
    :param resolution: side of the square depth render, pixels.
    :param cache: a cachelib cache; :class:`~cachelib.NullCache` disables
                  caching.
    :param bins: yaw bins; pitch uses half as many.
    """

    def __init__(
        self,
        field,
        sampling: Optional[RaySampling] = None,
        resolution: int = 32,
        opacity_threshold: float = 0.5,
        min_opaque_fraction: float = 0.1,
        cache: Optional[BaseCache] = None,
        bins: int = 64,
    ) -> None:
        self.field = field
        self.sampling = sampling if sampling is not None else _default_sampling(field)
        self.resolution = resolution
        self.opacity_threshold = opacity_threshold
        self.min_opaque_fraction = min_opaque_fraction
        self.cache = cache if cache is not None else NullCache()
        self.bins = bins
        self.hits = 0
        self.misses = 0

    @classmethod
    def from_config(cls, field, config) -> "DepthEstimator":
        pose = config.pose
        cache = NullCache()
        if pose.depth_cache == "simple":
            cache = SimpleCache(
                threshold=pose.depth_cache_bins**2, default_timeout=0
            )
        return cls(
            field,
            sampling=config.ray_sampling(stratified=False),
            resolution=pose.depth_resolution,
            opacity_threshold=pose.opacity_threshold,
            min_opaque_fraction=pose.min_opaque_fraction,
            cache=cache,
            bins=pose.depth_cache_bins,
        )

    @property
    def binned(self) -> bool:
        return not isinstance(self.cache, NullCache)

    def _bin(self, pose: CameraPose) -> Tuple[int, int]:
        pitch_bins = max(1, self.bins // 2)
        i = int(math.floor(pose.yaw % (2.0 * math.pi) / (2.0 * math.pi) * self.bins))
        j = int(math.floor((pose.pitch + math.pi / 2) / math.pi * pitch_bins))
        return i % self.bins, min(max(j, 0), pitch_bins - 1)

    def _bin_rotation(self, i: int, j: int) -> np.ndarray:
        pitch_bins = max(1, self.bins // 2)
        yaw = (i + 0.5) * 2.0 * math.pi / self.bins
        pitch = -math.pi / 2 + (j + 0.5) * math.pi / pitch_bins
        return sample_rotation(yaw, pitch)

    def center_pose(self, real: CameraPose) -> CameraPose:
        """The origin pose the depth is rendered from: real rotation (or its
        bin center) and real half field of view, at depth resolution.
        """
        intrinsics = real.intrinsics.with_size(self.resolution, self.resolution)
        rotation = real.rotation
        if self.binned:
            rotation = self._bin_rotation(*self._bin(real))
        return CameraPose(rotation, ORIGIN, intrinsics)

    def estimate(self, real: CameraPose) -> float:
        """Scene depth ``d`` in the view direction of ``real``.

        :raises InsufficientOpacity: if the stage-1 field is too transparent
                                     there.
        """
        key = None
        if self.binned:
            i, j = self._bin(real)
            key = f"depth/{i}/{j}/{real.intrinsics.half_fov!r}"
            cached = self.cache.get(key)
            if cached is not None:
                self.hits += 1
                return cached
        self.misses += 1
        d = estimate_view_depth(
            self.field,
            self.center_pose(real),
            self.sampling,
            self.opacity_threshold,
            self.min_opaque_fraction,
        )
        if key is not None:
            self.cache.set(key, d)
        return d

    def __call__(self, real: CameraPose) -> float:
        return self.estimate(real)

    def pair(self, real: CameraPose, margin: float = 0.1) -> EquivalentPosePair:
        return transform_pose(real, self.estimate(real), margin)
