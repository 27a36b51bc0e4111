"""
    roomdistill.field
    ~~~~~~~~~~~~~~~~~

    The optimized scene: a multi-resolution hash-grid encoder followed by a
    small decoder producing density and color.

    Coarse levels whose ``(res + 1) ** 3`` vertices fit the table are indexed
    densely; finer levels use the spatial hash

        ``(x * 1) ^ (y * 2654435761) ^ (z * 805459861)``

    truncated to 32 bits and reduced modulo the table size.  Color does not
    depend on the viewing direction.

    The raw density carries a fixed bias rising linearly from
    ``density_bias`` at the center of the box to ``density_bias +
    shell_bias`` on its faces, so an untrained field is nearly transparent
    around the cameras and its first surfaces form near the walls.

    :license: BSD, see LICENSE for more details.
"""

import copy
import logging
import math
from dataclasses import dataclass
from typing import Iterator
from typing import List
from typing import NamedTuple
from typing import Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)
HASH_MASK = 0xFFFFFFFF


class FieldSample(NamedTuple):
    """Per-point field values: ``density`` shaped ``(n,)`` in 1/m and
    ``color`` shaped ``(n, 3)`` in ``[0, 1]``.
    """

    density: torch.Tensor
    color: torch.Tensor


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 8
    log2_table_size: int = 14
    feature_dim: int = 2
    base_resolution: int = 16
    max_resolution: int = 256
    hidden_dim: int = 32
    init_scale: float = 1e-4
    density_bias: float = -4.0
    shell_bias: float = 8.0

    @property
    def table_size(self) -> int:
        return 2**self.log2_table_size

    def resolutions(self) -> List[int]:
        if self.levels == 1:
            return [self.base_resolution]
        growth = math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution))
            / (self.levels - 1)
        )
        return [
            int(math.floor(self.base_resolution * growth**level + 1e-9))
            for level in range(self.levels)
        ]


def _corner_offsets() -> torch.Tensor:
    return torch.tensor(
        [[(i >> d) & 1 for d in range(3)] for i in range(8)], dtype=torch.long
    )


class RadianceField(nn.Module):
    """Hash-grid radiance field over an axis-aligned box.

    :param config: grid and decoder hyperparameters.
    :param bounds: ``(lower, upper)`` corners of the box, meters.
    :param seed: seed of the deterministic initialization.
    :param dtype: parameter dtype; float64 is used for gradient checks.
    """

    def __init__(
        self,
        config: FieldConfig,
        bounds: Tuple[np.ndarray, np.ndarray],
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        resolutions = config.resolutions()
        if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
            raise ValueError(
                f"level resolutions must strictly increase, got {resolutions}"
            )
        self.config = config
        self.resolutions = resolutions
        self.frozen = False
        lower = torch.as_tensor(np.asarray(bounds[0], dtype=np.float64), dtype=dtype)
        upper = torch.as_tensor(np.asarray(bounds[1], dtype=np.float64), dtype=dtype)
        self.register_buffer("lower", lower)
        self.register_buffer("upper", upper)
        self.register_buffer("offsets", _corner_offsets(), persistent=False)

        self.tables = nn.ParameterList(
            [
                nn.Parameter(
                    torch.zeros(self._entries(res), config.feature_dim, dtype=dtype)
                )
                for res in resolutions
            ]
        )
        width = config.levels * config.feature_dim
        self.decoder = nn.Sequential(
            nn.Linear(width, config.hidden_dim, dtype=dtype),
            nn.ReLU(),
            nn.Linear(config.hidden_dim, config.hidden_dim, dtype=dtype),
            nn.ReLU(),
            nn.Linear(config.hidden_dim, 4, dtype=dtype),
        )
        self.reset_parameters(seed)

    def _entries(self, resolution: int) -> int:
        return min(self.config.table_size, (resolution + 1) ** 3)

    def _is_dense(self, resolution: int) -> bool:
        return (resolution + 1) ** 3 <= self.config.table_size

    @property
    def dtype(self) -> torch.dtype:
        return self.lower.dtype

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.lower.cpu().numpy(), self.upper.cpu().numpy()

    def reset_parameters(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        scale = self.config.init_scale
        with torch.no_grad():
            for table in self.tables:
                table.copy_(
                    torch.from_numpy(
                        rng.uniform(-scale, scale, size=tuple(table.shape))
                    )
                )
            for layer in self.decoder:
                if isinstance(layer, nn.Linear):
                    bound = 1.0 / math.sqrt(layer.in_features)
                    layer.weight.copy_(
                        torch.from_numpy(
                            rng.uniform(-bound, bound, size=tuple(layer.weight.shape))
                        )
                    )
                    layer.bias.zero_()

    def grid_parameters(self) -> Iterator[nn.Parameter]:
        return iter(self.tables)

    def decoder_parameters(self) -> Iterator[nn.Parameter]:
        return self.decoder.parameters()

    def _index(self, corners: torch.Tensor, resolution: int) -> torch.Tensor:
        if self._is_dense(resolution):
            side = resolution + 1
            return corners[..., 0] + side * (corners[..., 1] + side * corners[..., 2])
        hashed = corners[..., 0] * HASH_PRIMES[0]
        hashed = hashed ^ (corners[..., 1] * HASH_PRIMES[1])
        hashed = hashed ^ (corners[..., 2] * HASH_PRIMES[2])
        return (hashed & HASH_MASK) % self.config.table_size

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        """Concatenated trilinear features of every level, ``(n, L * F)``."""
        unit = (points - self.lower) / (self.upper - self.lower)
        features = []
        for table, resolution in zip(self.tables, self.resolutions):
            scaled = unit * resolution
            base = torch.clamp(torch.floor(scaled), 0, resolution - 1)
            frac = scaled - base
            corners = base.long()[:, None, :] + self.offsets[None]
            index = self._index(corners, resolution)
            weights = torch.where(
                self.offsets[None].bool(), frac[:, None, :], 1.0 - frac[:, None, :]
            ).prod(dim=-1)
            features.append((weights[..., None] * table[index]).sum(dim=1))
        return torch.cat(features, dim=-1)

    def density_offset(self, points: torch.Tensor) -> torch.Tensor:
        """The fixed raw-density bias at ``points``, ``(n,)``."""
        center = 0.5 * (self.lower + self.upper)
        half = 0.5 * (self.upper - self.lower)
        # 0 at the center, 1 on the faces
        radius = ((points - center).abs() / half).amax(dim=-1)
        return self.config.density_bias + self.config.shell_bias * radius

    def query(self, points: torch.Tensor) -> FieldSample:
        """Density and color at ``points`` shaped ``(n, 3)``.

        Points outside the bounds have zero density and black color.
        """
        points = points.to(self.dtype)
        n = points.shape[0]
        inside = ((points >= self.lower) & (points <= self.upper)).all(dim=-1)
        index = inside.nonzero().squeeze(1)
        inner = points[index]
        raw = self.decoder(self.encode(inner))
        raw_density = raw[:, 0] + self.density_offset(inner)
        density = points.new_zeros(n).index_put((index,), F.softplus(raw_density))
        color = points.new_zeros(n, 3).index_put((index,), torch.sigmoid(raw[:, 1:]))
        return FieldSample(density, color)

    def forward(self, points: torch.Tensor) -> FieldSample:
        return self.query(points)

    def query_with_gradients(
        self, points: torch.Tensor, upstream: FieldSample
    ) -> None:
        """Accumulate ``d(outputs)/d(params)^T @ upstream`` into ``.grad``."""
        if self.frozen:
            raise RuntimeError("cannot accumulate gradients into a frozen field")
        with torch.enable_grad():
            sample = self.query(points)
            torch.autograd.backward(
                [sample.density, sample.color],
                [upstream.density.to(self.dtype), upstream.color.to(self.dtype)],
            )

    def freeze_copy(self) -> "RadianceField":
        """An independent read-only copy of the current parameters."""
        clone = copy.deepcopy(self)
        clone.requires_grad_(False)
        clone.frozen = True
        for param in clone.parameters():
            param.grad = None
        return clone

    def zero_(self) -> "RadianceField":
        with torch.no_grad():
            for param in self.parameters():
                param.zero_()
        return self

    def named_parameter_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """Parameters in checkpoint order: level tables 0..L-1, then decoder
        weight and bias of each linear layer.
        """
        return [
            (name, param.detach().cpu().numpy())
            for name, param in self.named_parameters()
        ]

    def load_parameter_arrays(self, arrays: List[np.ndarray]) -> None:
        params = list(self.parameters())
        if len(arrays) != len(params):
            raise ValueError(
                f"expected {len(params)} parameter arrays, got {len(arrays)}"
            )
        with torch.no_grad():
            for param, array in zip(params, arrays):
                if tuple(array.shape) != tuple(param.shape):
                    raise ValueError(
                        f"parameter shape {tuple(array.shape)} does not match "
                        f"{tuple(param.shape)}"
                    )
                param.copy_(torch.from_numpy(np.asarray(array)).to(self.dtype))

    def to_bytes(self) -> bytes:
        return b"".join(
            array.astype("<f4").tobytes() for _, array in self.named_parameter_arrays()
        )

    def gradient_vector(self) -> torch.Tensor:
        return torch.cat(
            [
                (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
                for p in self.parameters()
            ]
        )

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.parameters())
