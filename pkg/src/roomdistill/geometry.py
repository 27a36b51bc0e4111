"""
    roomdistill.geometry
    ~~~~~~~~~~~~~~~~~~~~

    Camera poses, the world coordinate convention, ray generation and the
    pure-rotation pixel correspondences used by correspondence-aware
    attention.

    The world frame is right-handed with ``x`` forward, ``y`` up and ``z``
    right.  A camera's local frame uses the same axis assignment, so the
    columns of a world-from-camera rotation are its forward, up and right
    axes, in that order.  Pixel ``(col, row)`` covers ``[col, col + 1) x
    [row, row + 1)`` in continuous image coordinates ``(u, v)``; ``v`` grows
    downwards.

    :license: BSD, see LICENSE for more details.
"""

import math
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy import ndimage

from roomdistill.exceptions import CentersDiffer

ORTHONORMAL_TOLERANCE = 1e-9
SHARED_CENTER_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: square pixels, zero skew, principal point at the
    image center.

    :param half_fov: half of the horizontal field of view, radians.
    :param width: image width in pixels.
    :param height: image height in pixels.
    """

    half_fov: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not 0.0 < self.half_fov < math.pi / 2:
            raise ValueError(
                f"half_fov must lie in (0, pi/2), got {self.half_fov!r}"
            )
        if self.width < 1 or self.height < 1:
            raise ValueError(
                f"image size must be positive, got {self.width}x{self.height}"
            )

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(self.half_fov)

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def with_size(self, width: int, height: int) -> "Intrinsics":
        return replace(self, width=int(width), height=int(height))

    def with_half_fov(self, half_fov: float) -> "Intrinsics":
        return replace(self, half_fov=float(half_fov))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """A camera: world-from-camera ``rotation``, ``position`` in meters and
    pinhole ``intrinsics``.
    """

    rotation: np.ndarray
    position: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        position = np.array(self.position, dtype=np.float64).reshape(3)
        gram = rotation.T @ rotation
        if not np.allclose(gram, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOLERANCE):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError("rotation must have determinant +1")
        rotation.setflags(write=False)
        position.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "position", position)

    @classmethod
    def look(
        cls,
        yaw: float,
        pitch: float,
        intrinsics: Intrinsics,
        position: Optional[Sequence[float]] = None,
    ) -> "CameraPose":
        """Build a gravity-aligned pose from yaw and pitch."""
        if position is None:
            position = (0.0, 0.0, 0.0)
        return cls(sample_rotation(yaw, pitch), np.asarray(position), intrinsics)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def up(self) -> np.ndarray:
        return self.rotation[:, 1]

    @property
    def right(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def yaw(self) -> float:
        return math.atan2(self.forward[2], self.forward[0])

    @property
    def pitch(self) -> float:
        return math.asin(float(np.clip(self.forward[1], -1.0, 1.0)))

    def moved_to(self, position: Sequence[float]) -> "CameraPose":
        return CameraPose(self.rotation, np.asarray(position), self.intrinsics)

    def with_intrinsics(self, intrinsics: Intrinsics) -> "CameraPose":
        return CameraPose(self.rotation, self.position, intrinsics)

    def same_as(self, other: "CameraPose") -> bool:
        return (
            self.intrinsics == other.intrinsics
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.position, other.position)
        )


class Rays(NamedTuple):
    """Per-pixel rays, both arrays shaped ``(height, width, 3)``."""

    origins: np.ndarray
    directions: np.ndarray


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """Where each source pixel center lands in the target image.

    ``coords[row, col]`` holds the continuous target ``(u, v)``; ``valid``
    flags pixels whose ray falls inside the target frustum.  Out-of-bounds
    entries are flagged, never clamped; behind-camera entries are NaN.
    """

    source: CameraPose
    target: CameraPose
    coords: np.ndarray
    valid: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def source_size(self) -> Tuple[int, int]:
        return self.source.intrinsics.size

    @property
    def target_size(self) -> Tuple[int, int]:
        return self.target.intrinsics.size

    def transfer(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Map continuous source coordinates ``(..., 2)`` into the target."""
        directions = backproject(self.source, np.asarray(points, dtype=np.float64))
        return project_directions(self.target, directions)

    def inverse(self) -> "CorrespondenceMap":
        if "inverse" not in self._cache:
            self._cache["inverse"] = correspondence_map(self.target, self.source)
        return self._cache["inverse"]


def sample_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Rotation whose forward axis has azimuth ``yaw`` (measured from ``+x``
    towards ``+z``) and elevation ``pitch``; roll is always zero.
    """
    if not -math.pi / 2 <= pitch <= math.pi / 2:
        raise ValueError(f"pitch must lie in [-pi/2, pi/2], got {pitch!r}")
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, sp, cp * sy])
    up = np.array([-sp * cy, cp, -sp * sy])
    right = np.cross(forward, up)
    return np.stack([forward, up, right], axis=1)


def rotation_facing(direction: Sequence[float]) -> np.ndarray:
    """Zero-roll rotation whose forward axis is ``direction``."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return sample_rotation(
        math.atan2(d[2], d[0]), math.asin(float(np.clip(d[1], -1.0, 1.0)))
    )


def pixel_centers(intrinsics: Intrinsics) -> np.ndarray:
    """Continuous ``(u, v)`` of every pixel center, shaped ``(h, w, 2)``."""
    u, v = np.meshgrid(
        np.arange(intrinsics.width, dtype=np.float64) + 0.5,
        np.arange(intrinsics.height, dtype=np.float64) + 0.5,
        indexing="xy",
    )
    return np.stack([u, v], axis=-1)


def backproject(pose: CameraPose, points: np.ndarray) -> np.ndarray:
    """Unit world directions through continuous pixel coordinates."""
    intr = pose.intrinsics
    local = np.stack(
        [
            np.full(points.shape[:-1], intr.focal),
            intr.height / 2.0 - points[..., 1],
            points[..., 0] - intr.width / 2.0,
        ],
        axis=-1,
    )
    directions = local @ pose.rotation.T
    return directions / np.linalg.norm(directions, axis=-1, keepdims=True)


def project_directions(
    pose: CameraPose, directions: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Project world directions through a pose's pinhole.

    :returns: ``(coords, valid)`` with continuous ``(u, v)`` coordinates and
              an in-frustum flag.
    """
    intr = pose.intrinsics
    local = np.asarray(directions, dtype=np.float64) @ pose.rotation
    depth = local[..., 0]
    ahead = depth > 0.0
    safe = np.where(ahead, depth, 1.0)
    u = intr.width / 2.0 + intr.focal * local[..., 2] / safe
    v = intr.height / 2.0 - intr.focal * local[..., 1] / safe
    coords = np.stack([u, v], axis=-1)
    coords[~ahead] = np.nan
    with np.errstate(invalid="ignore"):
        valid = (
            ahead
            & (u >= 0.0)
            & (u <= intr.width)
            & (v >= 0.0)
            & (v <= intr.height)
        )
    return coords, valid


def generate_rays(pose: CameraPose) -> Rays:
    """One ray per pixel through its pixel center."""
    directions = backproject(pose, pixel_centers(pose.intrinsics))
    origins = np.broadcast_to(pose.position, directions.shape).copy()
    return Rays(origins, directions)


def check_shared_center(src: CameraPose, tgt: CameraPose) -> None:
    gap = float(np.linalg.norm(src.position - tgt.position))
    if gap >= SHARED_CENTER_TOLERANCE:
        raise CentersDiffer(
            f"correspondence needs a shared camera center, centers are "
            f"{gap:.3g} m apart"
        )


def correspondence_map(src: CameraPose, tgt: CameraPose) -> CorrespondenceMap:
    """Pixel correspondences between two cameras sharing a center.

    :raises CentersDiffer: if the positions are not coincident.
    """
    check_shared_center(src, tgt)
    coords, valid = project_directions(tgt, generate_rays(src).directions)
    return CorrespondenceMap(src, tgt, coords, valid)


def warp_to_source(
    target_image: np.ndarray, cmap: CorrespondenceMap
) -> Tuple[np.ndarray, np.ndarray]:
    """Resample ``target_image`` onto the source pixel grid.

    :returns: the warped ``(h, w, c)`` image and the validity mask; invalid
              pixels are zero.
    """
    image = np.asarray(target_image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    rows = np.where(cmap.valid, cmap.coords[..., 1] - 0.5, 0.0)
    cols = np.where(cmap.valid, cmap.coords[..., 0] - 0.5, 0.0)
    warped = np.stack(
        [
            ndimage.map_coordinates(
                image[..., c], [rows, cols], order=1, mode="nearest"
            )
            for c in range(image.shape[-1])
        ],
        axis=-1,
    )
    warped[~cmap.valid] = 0.0
    return warped, cmap.valid.copy()
