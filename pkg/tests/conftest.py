import math

import numpy as np
import pytest
import torch

from roomdistill.config import PipelineConfig
from roomdistill.field import FieldConfig
from roomdistill.field import FieldSample
from roomdistill.field import RadianceField
from roomdistill.geometry import Intrinsics
from roomdistill.providers.oracle import OracleRoom

#: A configuration small enough for a whole run to finish in seconds.
TINY = {
    "seed": 3,
    "field.levels": 2,
    "field.log2_table_size": 10,
    "field.base_resolution": 4,
    "field.max_resolution": 8,
    "field.hidden_dim": 8,
    "render.width": 16,
    "render.height": 16,
    "render.n_samples": 16,
    "render.export_width": 8,
    "render.export_height": 8,
    "prior.caa_grid": 4,
    "pose.depth_resolution": 8,
    "stage1.iterations": 3,
    "stage1.views_per_iteration": 2,
    "stage2.iterations": 3,
    "stage2.views_per_iteration": 2,
    "stage2.position_radius": 0.3,
    "stage3.iterations": 3,
    "stage3.views_per_iteration": 2,
    "stage3.position_radius": 0.3,
    "sds.wall_clock": False,
    "export.turntable_frames": 2,
    "eval.n_poses": 2,
}


class BoxShellField:
    """Analytic stand-in for a field fit to the oracle room: a thin opaque
    shell just inside each wall, colored like the wall.
    """

    dtype = torch.float64

    def __init__(self, room=None, thickness=0.05, density=400.0):
        self.room = room if room is not None else OracleRoom()
        self.thickness = thickness
        self.density = density

    @property
    def bounds(self):
        return self.room.bounds

    def query(self, points):
        p = points.detach().to(torch.float64).numpy()
        a = np.abs(p)
        h = self.room.half_extent
        shell = np.all(a <= h, axis=-1) & (a.max(axis=-1) >= h - self.thickness)
        axis = np.argmax(a, axis=-1)
        negative = np.take_along_axis(p, axis[:, None], axis=-1)[:, 0] < 0
        wall = 2 * axis + negative.astype(np.int64)
        color = np.where(shell[:, None], self.room.shade(p, wall), 0.0)
        density = np.where(shell, self.density, 0.0)
        return FieldSample(torch.from_numpy(density), torch.from_numpy(color))


def tiny_field_config(**overrides):
    values = dict(
        levels=2,
        log2_table_size=10,
        feature_dim=2,
        base_resolution=4,
        max_resolution=8,
        hidden_dim=8,
        init_scale=0.5,
    )
    values.update(overrides)
    return FieldConfig(**values)


@pytest.fixture
def room():
    return OracleRoom()


@pytest.fixture
def intrinsics():
    return Intrinsics(math.radians(30.0), 9, 7)


@pytest.fixture
def tiny_field(room):
    return RadianceField(tiny_field_config(), room.bounds, seed=5, dtype=torch.float64)


@pytest.fixture
def box_field(room):
    return BoxShellField(room)


@pytest.fixture
def tiny_config():
    return PipelineConfig.from_mapping(TINY)


@pytest.fixture
def config_file(tmp_path):
    def write(**overrides):
        values = dict(TINY)
        values.update(overrides)
        path = tmp_path / "room.cfg"
        path.write_text(
            "# tiny test room\n" + "".join(f"{k}={v}\n" for k, v in values.items())
        )
        return str(path)

    return write
