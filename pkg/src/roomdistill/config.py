"""
    roomdistill.config
    ~~~~~~~~~~~~~~~~~~

    Pipeline configuration.  A config file is flat ``key=value`` text with
    dotted section prefixes::

        # stage 2 moves the camera off-center
        stage2.position_radius=0.7
        prior.providers=oracle:1.0,caa:0.1

    Every key has a default in :data:`DEFAULTS`; values are coerced to the
    type of their default.  Unknown keys are errors.

    :license: BSD, see LICENSE for more details.
"""

import dataclasses
import logging
import math
import warnings
from typing import Any
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Tuple

from roomdistill.exceptions import ConfigInvalid
from roomdistill.field import FieldConfig
from roomdistill.geometry import Intrinsics
from roomdistill.providers import resolve_factory
from roomdistill.providers.oracle import DEFAULT_PALETTE
from roomdistill.renderer import RaySampling
from roomdistill.view_schedule import StageConfig

logger = logging.getLogger(__name__)

WEIGHTINGS = ("constant", "sigma2")
DEPTH_CACHES = ("null", "simple")
CAA_WEIGHTS = ("identity", "orthonormal")
STAGE_ORDERS = ("1", "12", "13", "123")


def _palette_text(palette) -> str:
    return ";".join(",".join(repr(float(c)) for c in rgb) for rgb in palette)


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "run.stages": "123",
    "run.pose_transform": True,
    "room.half_extent": 2.0,
    "room.pattern_amplitude": 0.15,
    "room.pattern_frequency": 0.5,
    "room.palette": _palette_text(DEFAULT_PALETTE),
    "field.levels": 8,
    "field.log2_table_size": 14,
    "field.feature_dim": 2,
    "field.base_resolution": 16,
    "field.max_resolution": 256,
    "field.hidden_dim": 32,
    "field.init_scale": 1e-4,
    "field.density_bias": -4.0,
    "field.shell_bias": 8.0,
    "render.width": 64,
    "render.height": 64,
    "render.half_fov_deg": 45.0,
    "render.n_samples": 64,
    "render.near": 0.05,
    "render.far": 0.0,
    "render.stratified": True,
    "render.background": 0.5,
    "render.chunk_rays": 2048,
    "render.export_width": 256,
    "render.export_height": 256,
    "prior.providers": "oracle:1.0,caa:0.1",
    "prior.negative": "",
    "prior.guidance_scale": 0.0,
    "prior.negative_saturation": 1.6,
    "prior.sigma_floor": 1e-3,
    "prior.caa_grid": 16,
    "prior.caa_radius": 1,
    "prior.caa_weights": "identity",
    "prior.caa_seed": 0,
    "prior.prompt": "a cozy living room",
    "prior.negative_prompt": "oversaturated, blurry",
    "pose.margin": 0.1,
    "pose.depth_resolution": 32,
    "pose.opacity_threshold": 0.5,
    "pose.min_opaque_fraction": 0.1,
    "pose.depth_cache": "null",
    "pose.depth_cache_bins": 64,
    "optim.lr_grid": 1e-2,
    "optim.lr_decoder": 1e-3,
    "optim.beta1": 0.9,
    "optim.beta2": 0.99,
    "optim.eps": 1e-15,
    "sds.weighting": "sigma2",
    "sds.max_failures": 10,
    "sds.wall_clock": False,
    "export.out_dir": "run",
    "export.checkpoint_every": 0,
    "export.turntable_frames": 8,
    "eval.seed": 1234,
    "eval.n_poses": 32,
    "eval.pair_yaw_deg": 30.0,
}

_STAGE_DEFAULTS = {
    1: dict(
        iterations=500,
        views_per_iteration=8,
        position_radius=0.0,
        min_radius=0.0,
        pitch_range_deg=15.0,
        t_max_start=0.98,
        t_max_end=0.7,
        t_min_start=0.6,
        t_min_end=0.02,
        schedule_split=0.0,
    ),
    2: dict(
        iterations=750,
        views_per_iteration=4,
        position_radius=0.7,
        min_radius=0.05,
        pitch_range_deg=0.0,
        t_max_start=0.7,
        t_max_end=0.4,
        t_min_start=0.02,
        t_min_end=0.02,
        schedule_split=2.0 / 3.0,
    ),
    3: dict(
        iterations=250,
        views_per_iteration=2,
        position_radius=0.7,
        min_radius=0.0,
        pitch_range_deg=30.0,
        t_max_start=0.4,
        t_max_end=0.4,
        t_min_start=0.02,
        t_min_end=0.02,
        schedule_split=0.0,
    ),
}

for _stage, _values in _STAGE_DEFAULTS.items():
    for _name, _value in _values.items():
        DEFAULTS[f"stage{_stage}.{_name}"] = _value


@dataclasses.dataclass(frozen=True)
class RoomSettings:
    half_extent: float
    pattern_amplitude: float
    pattern_frequency: float
    palette: Tuple[Tuple[float, float, float], ...]


@dataclasses.dataclass(frozen=True)
class RenderSettings:
    width: int
    height: int
    half_fov_deg: float
    n_samples: int
    near: float
    far: float
    stratified: bool
    background: float
    chunk_rays: int
    export_width: int
    export_height: int

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(math.radians(self.half_fov_deg), self.width, self.height)

    def export_intrinsics(self) -> Intrinsics:
        return self.intrinsics().with_size(self.export_width, self.export_height)


@dataclasses.dataclass(frozen=True)
class PriorSettings:
    providers: Tuple[Tuple[str, float], ...]
    negative: str
    guidance_scale: float
    negative_saturation: float
    sigma_floor: float
    caa_grid: int
    caa_radius: int
    caa_weights: str
    caa_seed: int
    prompt: str
    negative_prompt: str

    @property
    def prompt_meta(self) -> Tuple[str, ...]:
        return _tags(self.prompt)

    @property
    def negative_prompt_meta(self) -> Tuple[str, ...]:
        return _tags(self.negative_prompt)

    @property
    def uses_caa(self) -> bool:
        return any(
            name.rsplit(".", 1)[-1] in ("caa", "CaaProvider")
            for name, _ in self.providers
        )


@dataclasses.dataclass(frozen=True)
class PoseSettings:
    margin: float
    depth_resolution: int
    opacity_threshold: float
    min_opaque_fraction: float
    depth_cache: str
    depth_cache_bins: int


@dataclasses.dataclass(frozen=True)
class OptimSettings:
    lr_grid: float
    lr_decoder: float
    beta1: float
    beta2: float
    eps: float


@dataclasses.dataclass(frozen=True)
class SdsSettings:
    weighting: str
    max_failures: int
    wall_clock: bool


@dataclasses.dataclass(frozen=True)
class ExportSettings:
    out_dir: str
    checkpoint_every: int
    turntable_frames: int


@dataclasses.dataclass(frozen=True)
class EvalSettings:
    seed: int
    n_poses: int
    pair_yaw_deg: float


@dataclasses.dataclass(frozen=True)
class RunSettings:
    stages: Tuple[int, ...]
    pose_transform: bool


def _tags(text: str) -> Tuple[str, ...]:
    return tuple(tag.strip() for tag in text.split(",") if tag.strip())


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "yes", "on", "1"):
            return True
        if text in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        try:
            return int(str(value).strip())
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            result = float(value)
        else:
            try:
                result = float(str(value).strip())
            except ValueError:
                raise ValueError(f"{key}: expected a number, got {value!r}") from None
        if not math.isfinite(result):
            raise ValueError(f"{key}: expected a finite number, got {value!r}")
        return result
    return str(value).strip()


def parse_text(text: str) -> Dict[str, str]:
    """Raw ``key -> value`` strings of a config file.

    :raises ConfigInvalid: on malformed or repeated lines.
    """
    values: Dict[str, str] = {}
    errors: List[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            errors.append(f"line {lineno}: expected key=value, got {raw!r}")
            continue
        if key in values:
            errors.append(f"line {lineno}: {key} is set twice")
            continue
        values[key] = value.strip()
    if errors:
        raise ConfigInvalid(errors)
    return values


def _parse_palette(text: str, errors: List[str]):
    palette = []
    for entry in text.split(";"):
        try:
            rgb = tuple(float(c) for c in entry.split(","))
        except ValueError:
            rgb = ()
        if len(rgb) != 3 or not all(0.0 <= c <= 1.0 for c in rgb):
            errors.append(
                f"room.palette: {entry!r} is not an r,g,b triple in [0, 1]"
            )
            return tuple(DEFAULT_PALETTE)
        palette.append(rgb)
    if len(palette) != 6:
        errors.append(
            f"room.palette: needs six wall colors separated by ';', got "
            f"{len(palette)}"
        )
        return tuple(DEFAULT_PALETTE)
    return tuple(palette)


def _parse_providers(text: str, errors: List[str]) -> Tuple[Tuple[str, float], ...]:
    providers = []
    for entry in text.split(","):
        entry = entry.strip()
        if not entry:
            continue
        name, sep, weight = entry.partition(":")
        try:
            providers.append((name.strip(), float(weight) if sep else 1.0))
        except ValueError:
            errors.append(f"prior.providers: weight of {name!r} is not a number")
    if not providers:
        errors.append("prior.providers: at least one provider must be named")
    return tuple(providers)


def _stage_config(stage: int, values: Mapping[str, Any]) -> StageConfig:
    def get(name: str) -> Any:
        return values[f"stage{stage}.{name}"]

    return StageConfig(
        stage_id=stage,
        iterations=get("iterations"),
        views_per_iteration=get("views_per_iteration"),
        position_radius=get("position_radius"),
        pitch_range=math.radians(get("pitch_range_deg")),
        t_max_schedule=(get("t_max_start"), get("t_max_end")),
        t_min_schedule=(get("t_min_start"), get("t_min_end")),
        min_radius=get("min_radius"),
        schedule_split=get("schedule_split"),
    )


def _section(cls, prefix: str, values: Mapping[str, Any], **overrides):
    kwargs = {
        f.name: values[f"{prefix}.{f.name}"]
        for f in dataclasses.fields(cls)
        if f.name not in overrides
    }
    kwargs.update(overrides)
    return cls(**kwargs)


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """A validated pipeline configuration.

    Build it with :meth:`from_mapping` or :meth:`from_text`; the typed
    sections are derived from the flat :attr:`values`.
    """

    seed: int
    run: RunSettings
    room: RoomSettings
    stages: Tuple[StageConfig, StageConfig, StageConfig]
    field: FieldConfig
    render: RenderSettings
    prior: PriorSettings
    pose: PoseSettings
    optim: OptimSettings
    sds: SdsSettings
    export: ExportSettings
    eval: EvalSettings
    values: Mapping[str, Any] = dataclasses.field(repr=False, compare=False)

    @classmethod
    def from_mapping(
        cls, mapping: Optional[Mapping[str, Any]] = None
    ) -> "PipelineConfig":
        """Merge ``mapping`` over :data:`DEFAULTS`, coerce and validate.

        :raises ConfigInvalid: listing every offending field.
        """
        mapping = dict(mapping or {})
        errors: List[str] = []
        values: Dict[str, Any] = {}
        for key in sorted(mapping):
            if key not in DEFAULTS:
                errors.append(f"{key}: unknown configuration key")
        for key, default in DEFAULTS.items():
            if key not in mapping:
                values[key] = default
                continue
            try:
                values[key] = _coerce(key, default, mapping[key])
            except ValueError as e:
                errors.append(str(e))
                values[key] = default
        if errors:
            raise ConfigInvalid(errors)

        stage_text = values["run.stages"]
        stages = tuple(int(c) for c in stage_text if c.isdigit())
        config = cls(
            seed=values["seed"],
            run=RunSettings(stages, values["run.pose_transform"]),
            room=_section(
                RoomSettings,
                "room",
                values,
                palette=_parse_palette(values["room.palette"], errors),
            ),
            stages=tuple(_stage_config(s, values) for s in (1, 2, 3)),
            field=_section(FieldConfig, "field", values),
            render=_section(RenderSettings, "render", values),
            prior=_section(
                PriorSettings,
                "prior",
                values,
                providers=_parse_providers(values["prior.providers"], errors),
            ),
            pose=_section(PoseSettings, "pose", values),
            optim=_section(OptimSettings, "optim", values),
            sds=_section(SdsSettings, "sds", values),
            export=_section(ExportSettings, "export", values),
            eval=_section(EvalSettings, "eval", values),
            values=values,
        )
        errors.extend(config.validation_errors())
        if errors:
            raise ConfigInvalid(errors)
        config.warn_oddities()
        return config

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        return cls.from_mapping(parse_text(text))

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    def to_text(self) -> str:
        """Canonical text: every key, sorted, floats in ``repr`` form."""
        return "".join(
            f"{key}={format_value(self.values[key])}\n" for key in sorted(self.values)
        )

    def replace(self, overrides: Mapping[str, Any]) -> "PipelineConfig":
        return self.from_mapping({**self.values, **overrides})

    def stage(self, stage_id: int) -> StageConfig:
        return self.stages[stage_id - 1]

    @property
    def far(self) -> float:
        """``render.far``, or the room diagonal when it is left at 0."""
        if self.render.far > 0.0:
            return self.render.far
        return 2.0 * math.sqrt(3.0) * self.room.half_extent

    def ray_sampling(
        self, seed: int = 0, stratified: Optional[bool] = None
    ) -> RaySampling:
        gray = self.render.background
        return RaySampling(
            n_samples=self.render.n_samples,
            near=self.render.near,
            far=self.far,
            stratified=self.render.stratified if stratified is None else stratified,
            seed=seed,
            background=(gray, gray, gray),
            chunk_rays=self.render.chunk_rays,
        )

    def validation_errors(self) -> List[str]:
        errors = []
        half = self.room.half_extent
        if half <= 0.0:
            errors.append(f"room.half_extent must be positive, got {half}")
        if self.values["run.stages"] not in STAGE_ORDERS:
            errors.append(
                f"run.stages={self.values['run.stages']!r}: stages must run in "
                f"order and stage 2 needs stage 1; use one of {', '.join(STAGE_ORDERS)}"
            )
        for stage in self.stages:
            prefix = f"stage{stage.stage_id}"
            for which in (0, 1):
                t_min = stage.t_min_schedule[which]
                t_max = stage.t_max_schedule[which]
                end = "start" if which == 0 else "end"
                if not 0.0 <= t_min < t_max <= 1.0:
                    errors.append(
                        f"{prefix}.t_min_{end}={t_min} must be below "
                        f"{prefix}.t_max_{end}={t_max} inside [0, 1]"
                    )
            if stage.iterations < 0:
                errors.append(f"{prefix}.iterations must not be negative")
            if stage.views_per_iteration < 1:
                errors.append(f"{prefix}.views_per_iteration must be at least 1")
            if stage.position_radius >= half:
                errors.append(
                    f"{prefix}.position_radius={stage.position_radius} must be "
                    f"below room.half_extent={half}"
                )
            if not 0.0 <= stage.schedule_split < 1.0:
                errors.append(f"{prefix}.schedule_split must lie in [0, 1)")
            if not 0.0 <= stage.pitch_range <= math.pi / 2:
                errors.append(f"{prefix}.pitch_range_deg must lie in [0, 90]")
        if self.stage(1).position_radius != 0.0:
            errors.append(
                "stage1.position_radius must be 0, stage 1 stays at the origin"
            )
        stage2 = self.stage(2)
        if not 0.0 < stage2.min_radius < stage2.position_radius:
            errors.append(
                f"stage2.min_radius={stage2.min_radius} must lie between 0 and "
                f"stage2.position_radius={stage2.position_radius}"
            )
        if self.stage(3).views_per_iteration < 2:
            errors.append(
                "stage3.views_per_iteration must be at least 2, stage 3 views "
                "share a position"
            )

        resolutions = self.field.resolutions() if self.field.levels >= 1 else []
        if not resolutions or any(b <= a for a, b in zip(resolutions, resolutions[1:])):
            errors.append(
                f"field levels {self.field.levels} between resolutions "
                f"{self.field.base_resolution} and {self.field.max_resolution} "
                f"do not give strictly increasing grids"
            )
        if self.field.feature_dim < 1 or self.field.hidden_dim < 1:
            errors.append("field.feature_dim and field.hidden_dim must be positive")

        render = self.render
        if not 0.0 < render.half_fov_deg < 90.0:
            errors.append(
                f"render.half_fov_deg must lie in (0, 90), got {render.half_fov_deg}"
            )
        for key in ("width", "height", "export_width", "export_height", "chunk_rays"):
            if getattr(render, key) < 1:
                errors.append(f"render.{key} must be positive")
        if render.n_samples < 2:
            errors.append(
                f"render.n_samples must be at least 2, got {render.n_samples}"
            )
        if render.near <= 0.0 or render.near >= self.far:
            errors.append(
                f"render.near={render.near} must be positive and below "
                f"render.far={self.far}"
            )
        if not 0.0 <= render.background <= 1.0:
            errors.append("render.background must lie in [0, 1]")

        prior = self.prior
        names = [n for n, _ in prior.providers]
        if prior.negative:
            names.append(prior.negative)
        for name in names:
            try:
                resolve_factory(name)
            except ImportError:
                errors.append(f"prior provider {name!r} cannot be found")
        if prior.uses_caa:
            grid = prior.caa_grid
            if grid < 1 or render.width % grid or render.height % grid:
                errors.append(
                    f"render size {render.width}x{render.height} must be a "
                    f"multiple of prior.caa_grid={grid}"
                )
            if prior.caa_radius < 0:
                errors.append("prior.caa_radius must not be negative")
        if prior.caa_weights not in CAA_WEIGHTS:
            errors.append(f"prior.caa_weights must be one of {', '.join(CAA_WEIGHTS)}")
        if prior.sigma_floor <= 0.0:
            errors.append("prior.sigma_floor must be positive")

        if self.pose.margin < 0.0:
            errors.append("pose.margin must not be negative")
        if self.pose.depth_resolution < 1:
            errors.append("pose.depth_resolution must be positive")
        if self.pose.depth_cache not in DEPTH_CACHES:
            errors.append(f"pose.depth_cache must be one of {', '.join(DEPTH_CACHES)}")
        if self.pose.depth_cache_bins < 1:
            errors.append("pose.depth_cache_bins must be positive")
        if not 0.0 < self.pose.min_opaque_fraction <= 1.0:
            errors.append("pose.min_opaque_fraction must lie in (0, 1]")

        optim = self.optim
        if optim.lr_grid <= 0.0 or optim.lr_decoder <= 0.0:
            errors.append("optim learning rates must be positive")
        if not (0.0 <= optim.beta1 < 1.0 and 0.0 <= optim.beta2 < 1.0):
            errors.append("optim.beta1 and optim.beta2 must lie in [0, 1)")
        if self.sds.weighting not in WEIGHTINGS:
            errors.append(f"sds.weighting must be one of {', '.join(WEIGHTINGS)}")
        if self.sds.max_failures < 1:
            errors.append("sds.max_failures must be at least 1")
        if self.export.checkpoint_every < 0:
            errors.append("export.checkpoint_every must not be negative")
        if self.export.turntable_frames < 0:
            errors.append("export.turntable_frames must not be negative")
        if self.eval.n_poses < 1:
            errors.append("eval.n_poses must be positive")
        return errors

    def warn_oddities(self) -> None:
        if not any(weight for _, weight in self.prior.providers):
            warnings.warn(
                "RoomDistill: every provider weight is zero, training will not "
                "move the field.",
                stacklevel=3,
            )
        if self.prior.guidance_scale and not self.prior.negative:
            warnings.warn(
                "RoomDistill: prior.guidance_scale is set but no prior.negative "
                "provider is configured; guidance is disabled.",
                stacklevel=3,
            )
        if 2 in self.run.stages and not self.run.pose_transform:
            logger.info("stage 2 runs without pose transformation")
