"""
    roomdistill
    ~~~~~~~~~~~

    Progressive-view score distillation of room-scale radiance fields,
    checked against an analytic oracle room.

    :license: BSD, see LICENSE for more details.
"""

__version__ = "0.1.0"

from roomdistill.config import PipelineConfig  # noqa: E402
from roomdistill.field import FieldConfig  # noqa: E402
from roomdistill.field import RadianceField  # noqa: E402
from roomdistill.geometry import CameraPose  # noqa: E402
from roomdistill.geometry import Intrinsics  # noqa: E402
from roomdistill.pipeline import Pipeline  # noqa: E402
from roomdistill.renderer import RaySampling  # noqa: E402
from roomdistill.renderer import render  # noqa: E402

__all__ = (
    "CameraPose",
    "FieldConfig",
    "Intrinsics",
    "Pipeline",
    "PipelineConfig",
    "RadianceField",
    "RaySampling",
    "render",
)
