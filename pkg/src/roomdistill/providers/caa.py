"""
    roomdistill.providers.caa
    ~~~~~~~~~~~~~~~~~~~~~~~~~

    Correspondence-aware attention over views that share a camera center, and
    a consistency score built from it: each view's features are pulled
    towards what the other views see at the corresponding locations.

    :license: BSD, see LICENSE for more details.
"""

from dataclasses import dataclass
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from roomdistill.exceptions import ShapeMismatch
from roomdistill.geometry import CameraPose
from roomdistill.geometry import CorrespondenceMap
from roomdistill.geometry import check_shared_center
from roomdistill.geometry import correspondence_map
from roomdistill.providers.base import BaseProvider
from roomdistill.providers.base import ScoreQuery
from roomdistill.providers.base import ScoreResponse


@dataclass(frozen=True, eq=False)
class CaaWeights:
    """Query, key and value projections over the feature dimension."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self) -> None:
        shapes = {w.shape for w in (self.w_q, self.w_k, self.w_v)}
        if len(shapes) != 1:
            raise ShapeMismatch(f"projection shapes differ: {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ShapeMismatch(f"projections must be square, got {shape}")
        for w in (self.w_q, self.w_k, self.w_v):
            if not np.all(np.isfinite(w)):
                raise ValueError("projection weights must be finite")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, dim: int = 3) -> "CaaWeights":
        return cls(np.eye(dim), np.eye(dim), np.eye(dim))

    @classmethod
    def random_orthonormal(cls, dim: int, rng: np.random.Generator) -> "CaaWeights":
        def draw() -> np.ndarray:
            q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
            return q * np.sign(np.diag(r))

        return cls(draw(), draw(), draw())


def _snap(cmap: CorrespondenceMap) -> Tuple[np.ndarray, np.ndarray]:
    """Grid cell containing each mapped location."""
    width, height = cmap.target_size
    coords = np.where(cmap.valid[..., None], cmap.coords, 0.0)
    cols = np.clip(np.floor(coords[..., 0]).astype(np.int64), 0, width - 1)
    rows = np.clip(np.floor(coords[..., 1]).astype(np.int64), 0, height - 1)
    return rows, cols


def caa_attention(
    src_features: np.ndarray,
    tgt_feature_stack: Sequence[np.ndarray],
    maps: Sequence[CorrespondenceMap],
    weights: CaaWeights,
    neighborhood_radius: int = 1,
) -> np.ndarray:
    """Attend from every source cell to the ``(2r + 1) ** 2`` target cells
    around its correspondence in each target view.

    The softmax runs jointly over all in-bounds candidates of all targets.
    Cells without any in-bounds candidate return their own feature.

    :param src_features: ``(h, w, c)`` source features.
    :param tgt_feature_stack: one ``(h_l, w_l, c)`` array per target.
    :param maps: source-to-target correspondence maps at feature resolution.
    :returns: attended features ``(h, w, c)``.
    :raises ShapeMismatch: on inconsistent feature dimensions or map sizes.
    """
    src = np.asarray(src_features, dtype=np.float64)
    if src.ndim != 3:
        raise ShapeMismatch(f"source features must be (h, w, c), got {src.shape}")
    height, width, dim = src.shape
    if weights.dim != dim:
        raise ShapeMismatch(
            f"projections act on {weights.dim} features, features have {dim}"
        )
    if len(tgt_feature_stack) != len(maps):
        raise ShapeMismatch(
            f"{len(tgt_feature_stack)} target feature maps for {len(maps)} "
            f"correspondence maps"
        )
    if not maps:
        return src.copy()

    query = src @ weights.w_q.T
    radius = int(neighborhood_radius)
    logits: List[np.ndarray] = []
    values: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    for tgt, cmap in zip(tgt_feature_stack, maps):
        tgt = np.asarray(tgt, dtype=np.float64)
        if tgt.ndim != 3 or tgt.shape[-1] != dim:
            raise ShapeMismatch(
                f"target features {tgt.shape} do not carry {dim} channels"
            )
        if cmap.source_size != (width, height) or cmap.target_size != (
            tgt.shape[1],
            tgt.shape[0],
        ):
            raise ShapeMismatch(
                f"map {cmap.source_size}->{cmap.target_size} does not match "
                f"features {(width, height)}->{(tgt.shape[1], tgt.shape[0])}"
            )
        keys = tgt @ weights.w_k.T
        vals = tgt @ weights.w_v.T
        rows, cols = _snap(cmap)
        for dr in range(-radius, radius + 1):
            for dc in range(-radius, radius + 1):
                r, c = rows + dr, cols + dc
                inside = (
                    cmap.valid
                    & (r >= 0)
                    & (r < tgt.shape[0])
                    & (c >= 0)
                    & (c < tgt.shape[1])
                )
                r = np.clip(r, 0, tgt.shape[0] - 1)
                c = np.clip(c, 0, tgt.shape[1] - 1)
                logits.append(np.einsum("hwc,hwc->hw", query, keys[r, c]))
                values.append(vals[r, c])
                masks.append(inside)

    logit = np.stack(logits, axis=-1)
    mask = np.stack(masks, axis=-1)
    logit = np.where(mask, logit, -np.inf)
    any_valid = mask.any(axis=-1)
    peak = np.where(any_valid, logit.max(axis=-1, initial=-np.inf), 0.0)
    scores = np.where(mask, np.exp(logit - peak[..., None]), 0.0)
    total = scores.sum(axis=-1, keepdims=True)
    attention = scores / np.where(total > 0.0, total, 1.0)
    attended = np.einsum("hwm,hwmc->hwc", attention, np.stack(values, axis=-2))
    return np.where(any_valid[..., None], attended, src)


def downsample(image: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    """Block-average an ``(h, w, c)`` image onto a ``grid = (w', h')``."""
    height, width, channels = image.shape
    gw, gh = grid
    if height % gh or width % gw:
        raise ShapeMismatch(
            f"image {width}x{height} is not a multiple of the {gw}x{gh} grid"
        )
    return image.reshape(gh, height // gh, gw, width // gw, channels).mean(axis=(1, 3))


def upsample(features: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    width, height = size
    gh, gw = features.shape[:2]
    return np.repeat(np.repeat(features, height // gh, axis=0), width // gw, axis=1)


def _grid_pose(pose: CameraPose, grid: Tuple[int, int]) -> CameraPose:
    return pose.with_intrinsics(pose.intrinsics.with_size(*grid))


def caa_consistency_score(
    query: ScoreQuery,
    weights: CaaWeights,
    grid: Tuple[int, int] = (16, 16),
    neighborhood_radius: int = 1,
) -> ScoreResponse:
    """Per-view residual ``feature - attended feature`` at pixel resolution.

    :raises CentersDiffer: unless every query pose shares one camera center.
    """
    poses = list(query.poses)
    for pose in poses[1:]:
        check_shared_center(poses[0], pose)
    features = [downsample(r.color, grid) for r in query.renders]
    grid_poses = [_grid_pose(p, grid) for p in poses]
    residuals = []
    for i, render in enumerate(query.renders):
        others = [j for j in range(len(poses)) if j != i]
        attended = caa_attention(
            features[i],
            [features[j] for j in others],
            [correspondence_map(grid_poses[i], grid_poses[j]) for j in others],
            weights,
            neighborhood_radius,
        )
        height, width = render.color.shape[:2]
        residuals.append(upsample(features[i] - attended, (width, height)))
    return ScoreResponse(residuals)


class CaaProvider(BaseProvider):
    """Multi-view consistency score from correspondence-aware attention.

    :param weights: projections, identity by default.
    :param grid: feature grid ``(width, height)``.
    :param neighborhood_radius: half-size of the attended neighborhood.
    """

    def __init__(
        self,
        weights: Optional[CaaWeights] = None,
        grid: Tuple[int, int] = (16, 16),
        neighborhood_radius: int = 1,
    ) -> None:
        self.weights = weights if weights is not None else CaaWeights.identity(3)
        self.grid = tuple(grid)
        self.neighborhood_radius = neighborhood_radius

    def score(self, query: ScoreQuery) -> ScoreResponse:
        return caa_consistency_score(
            query, self.weights, self.grid, self.neighborhood_radius
        )

    @classmethod
    def factory(cls, config, args, kwargs):
        prior = config.prior
        if prior.caa_weights == "orthonormal":
            weights = CaaWeights.random_orthonormal(
                3, np.random.default_rng(prior.caa_seed)
            )
        else:
            weights = CaaWeights.identity(3)
        kwargs.update(
            dict(
                weights=weights,
                grid=(prior.caa_grid, prior.caa_grid),
                neighborhood_radius=prior.caa_radius,
            )
        )
        return cls(*args, **kwargs)
