"""
    roomdistill.renderer
    ~~~~~~~~~~~~~~~~~~~~

    Emission-absorption volume rendering of a field through a pinhole
    camera, with reverse-mode gradients into the field parameters.

    Each ray is split into ``n_samples`` equal bins over ``[near, far]``; one
    sample is placed per bin (jittered when stratified) and the bin width is
    its quadrature weight, so weights plus the final transmittance telescope
    to exactly one.

    :license: BSD, see LICENSE for more details.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple
from typing import Optional
from typing import Tuple

import numpy as np
import torch

from roomdistill.exceptions import SamplingMismatch
from roomdistill.field import FieldSample
from roomdistill.geometry import CameraPose
from roomdistill.geometry import generate_rays

logger = logging.getLogger(__name__)

DEPTH_EPSILON = 1e-6


@dataclass(frozen=True)
class RaySampling:
    """How rays are sampled for one render.

    :param n_samples: samples per ray, at least 2.
    :param near: start of the sampled segment, meters.
    :param far: end of the sampled segment, meters.
    :param stratified: jitter samples inside their bins.
    :param seed: seed of the jitter; equal seeds give identical renders.
    :param background: color seen through the remaining transmittance.
    :param chunk_rays: rays evaluated per field query.
    """

    n_samples: int
    near: float
    far: float
    stratified: bool = True
    seed: int = 0
    background: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    chunk_rays: int = 2048

    def __post_init__(self) -> None:
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be below far ({self.far})")
        if self.n_samples < 2:
            raise ValueError(f"n_samples must be at least 2, got {self.n_samples}")

    @property
    def key(self) -> Tuple:
        return (self.n_samples, self.near, self.far, self.stratified, self.seed)

    @property
    def bin_width(self) -> float:
        return (self.far - self.near) / self.n_samples

    def depths(self, n_rays: int) -> np.ndarray:
        """Sample depths for ``n_rays`` rays, shaped ``(n_rays, n_samples)``."""
        if self.stratified:
            jitter = np.random.default_rng(self.seed).uniform(
                size=(n_rays, self.n_samples)
            )
        else:
            jitter = np.full((n_rays, self.n_samples), 0.5)
        return self.near + (np.arange(self.n_samples) + jitter) * self.bin_width


@dataclass(frozen=True, eq=False)
class RenderOutput:
    """One rendered view: ``color`` (h, w, 3), expected ``depth`` (h, w) and
    ``opacity`` (h, w), as float64 arrays.
    """

    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    pose: Optional[CameraPose] = None
    sampling_key: Optional[Tuple] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape


class Composite(NamedTuple):
    color: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor
    weights: torch.Tensor
    transmittance: torch.Tensor


def composite(
    density: torch.Tensor,
    color: torch.Tensor,
    depths: torch.Tensor,
    delta: float,
    background: torch.Tensor,
) -> Composite:
    """Alpha-composite samples along rays.

    :param density: ``(rays, samples)``.
    :param color: ``(rays, samples, 3)``.
    :param depths: ``(rays, samples)`` sample distances.
    :param delta: quadrature width of every sample.
    :param background: ``(3,)`` color behind the last sample.
    """
    optical = density * delta
    accumulated = torch.cumsum(optical, dim=-1)
    before = torch.exp(-(accumulated - optical))
    weights = before * (1.0 - torch.exp(-optical))
    final = torch.exp(-accumulated[..., -1])
    opacity = weights.sum(dim=-1)
    rgb = (weights[..., None] * color).sum(dim=-2) + final[..., None] * background
    depth = (weights * depths).sum(dim=-1) / torch.clamp(opacity, min=DEPTH_EPSILON)
    return Composite(rgb, depth, opacity, weights, final)


def _chunks(n_rays: int, size: int):
    for start in range(0, n_rays, size):
        yield slice(start, min(start + size, n_rays))


def _ray_tensors(field, pose: CameraPose, sampling: RaySampling):
    rays = generate_rays(pose)
    dtype = field.dtype
    origins = torch.from_numpy(rays.origins.reshape(-1, 3)).to(dtype)
    directions = torch.from_numpy(rays.directions.reshape(-1, 3)).to(dtype)
    depths = torch.from_numpy(sampling.depths(origins.shape[0])).to(dtype)
    background = torch.tensor(sampling.background, dtype=dtype)
    return origins, directions, depths, background


def _points(origins, directions, depths) -> torch.Tensor:
    return (origins[:, None, :] + depths[..., None] * directions[:, None, :]).reshape(
        -1, 3
    )


def render(field, pose: CameraPose, sampling: RaySampling) -> RenderOutput:
    """Render ``field`` from ``pose``.

    ``field`` is anything with a ``query(points) -> FieldSample`` method and a
    ``dtype`` attribute.
    """
    origins, directions, depths, background = _ray_tensors(field, pose, sampling)
    n_samples = sampling.n_samples
    parts = []
    with torch.no_grad():
        for rows in _chunks(origins.shape[0], sampling.chunk_rays):
            sample = field.query(_points(origins[rows], directions[rows], depths[rows]))
            parts.append(
                composite(
                    sample.density.reshape(-1, n_samples),
                    sample.color.reshape(-1, n_samples, 3),
                    depths[rows],
                    sampling.bin_width,
                    background,
                )
            )
    height, width = pose.intrinsics.height, pose.intrinsics.width

    def gather(name: str, *tail: int) -> np.ndarray:
        values = torch.cat([getattr(part, name) for part in parts])
        return values.to(torch.float64).numpy().reshape(height, width, *tail)

    return RenderOutput(
        color=gather("color", 3),
        depth=gather("depth"),
        opacity=gather("opacity"),
        pose=pose,
        sampling_key=sampling.key,
    )


def render_backward(
    field,
    pose: CameraPose,
    sampling: RaySampling,
    color_gradient: np.ndarray,
    opacity_gradient: Optional[np.ndarray] = None,
    forward: Optional[RenderOutput] = None,
) -> None:
    """Accumulate parameter gradients of a render into ``field``.

    The forward pass is recomputed with the same stratification and the
    pixel gradients are pulled back through compositing, then pushed into the
    parameters through :meth:`RadianceField.query_with_gradients`.

    :raises SamplingMismatch: if ``forward`` was rendered with a different
                              sampling or pose.
    """
    if forward is not None:
        if forward.sampling_key != sampling.key:
            raise SamplingMismatch(
                f"forward sampling {forward.sampling_key} differs from "
                f"backward sampling {sampling.key}"
            )
        if forward.pose is not None and not forward.pose.same_as(pose):
            raise SamplingMismatch("forward render used a different pose")
    origins, directions, depths, background = _ray_tensors(field, pose, sampling)
    dtype = field.dtype
    n_samples = sampling.n_samples
    color_grad = torch.from_numpy(
        np.ascontiguousarray(color_gradient, dtype=np.float64).reshape(-1, 3)
    ).to(dtype)
    opacity_grad = None
    if opacity_gradient is not None:
        opacity_grad = torch.from_numpy(
            np.ascontiguousarray(opacity_gradient, dtype=np.float64).reshape(-1)
        ).to(dtype)

    for rows in _chunks(origins.shape[0], sampling.chunk_rays):
        if not bool(color_grad[rows].any()) and (
            opacity_grad is None or not bool(opacity_grad[rows].any())
        ):
            continue
        points = _points(origins[rows], directions[rows], depths[rows])
        with torch.no_grad():
            sample = field.query(points)
        with torch.enable_grad():
            density = sample.density.detach().requires_grad_(True)
            color = sample.color.detach().requires_grad_(True)
            out = composite(
                density.reshape(-1, n_samples),
                color.reshape(-1, n_samples, 3),
                depths[rows],
                sampling.bin_width,
                background,
            )
            outputs, grads = [out.color], [color_grad[rows]]
            if opacity_grad is not None:
                outputs.append(out.opacity)
                grads.append(opacity_grad[rows])
            upstream = torch.autograd.grad(outputs, [density, color], grads)
        field.query_with_gradients(points, FieldSample(*upstream))
