"""
    roomdistill.pipeline
    ~~~~~~~~~~~~~~~~~~~~

    Orchestration of the three training stages, checkpoints, exports and
    evaluation against the oracle room.

    :license: BSD, see LICENSE for more details.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from dataclasses import field as dataclass_field
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np

from roomdistill import checkpoint as ckpt
from roomdistill.config import PipelineConfig
from roomdistill.exceptions import CheckpointCorrupt
from roomdistill.exceptions import DirectoryLocked
from roomdistill.exceptions import OracleUnavailable
from roomdistill.exporters import write_pfm
from roomdistill.exporters import write_png
from roomdistill.field import RadianceField
from roomdistill.geometry import CameraPose
from roomdistill.geometry import Intrinsics
from roomdistill.geometry import correspondence_map
from roomdistill.geometry import sample_rotation
from roomdistill.geometry import warp_to_source
from roomdistill.optimizer import DiagnosticsWriter
from roomdistill.optimizer import FieldOptimizer
from roomdistill.optimizer import SdsStep
from roomdistill.optimizer import StageContext
from roomdistill.optimizer import run_stage
from roomdistill.pose_transform import DepthEstimator
from roomdistill.providers import build_score_provider
from roomdistill.providers.base import Guidance
from roomdistill.providers.oracle import OracleProvider
from roomdistill.providers.oracle import OracleRoom
from roomdistill.renderer import RaySampling
from roomdistill.renderer import render
from roomdistill.view_schedule import ViewSampler

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"
DIAGNOSTICS_NAME = "diagnostics.tsv"
FINAL_NAME = "final.ckpt"
MAX_PSNR = 100.0


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio of images in ``[0, 1]``, capped at
    :data:`MAX_PSNR`.
    """
    mse = float(np.mean(np.square(np.asarray(image) - np.asarray(reference))))
    if mse <= 10.0 ** (-MAX_PSNR / 10.0):
        return MAX_PSNR
    return -10.0 * math.log10(mse)


def _float(value: str, what: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ValueError(f"{what} is not a number: {value!r}") from None


def parse_pose_spec(spec: str, intrinsics: Intrinsics) -> List[CameraPose]:
    """Poses named by a ``--pose`` argument.

    ``turntable:n_frames=16,radius=0,pitch=0``
        equally spaced yaws; cameras on a circle of ``radius`` meters facing
        outward, pitch in degrees.
    ``pose:yaw=0,pitch=0,x=0,y=0,z=0,fov=45``
        one pose; angles in degrees, ``fov`` is the half field of view.
    """
    kind, _, rest = spec.partition(":")
    params: Dict[str, str] = {}
    for item in rest.split(","):
        if not item.strip():
            continue
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"pose spec entry {item!r} is not key=value")
        params[key.strip()] = value.strip()

    if kind == "turntable":
        unknown = set(params) - {"n_frames", "radius", "pitch"}
        if unknown:
            raise ValueError(
                f"unknown turntable parameters: {', '.join(sorted(unknown))}"
            )
        n_frames = int(params.get("n_frames", "16"))
        if n_frames < 1:
            raise ValueError("turntable needs at least one frame")
        radius = _float(params.get("radius", "0"), "radius")
        pitch = math.radians(_float(params.get("pitch", "0"), "pitch"))
        poses = []
        for k in range(n_frames):
            yaw = 2.0 * math.pi * k / n_frames
            position = radius * np.array([math.cos(yaw), 0.0, math.sin(yaw)])
            poses.append(CameraPose(sample_rotation(yaw, pitch), position, intrinsics))
        return poses
    if kind == "pose":
        unknown = set(params) - {"yaw", "pitch", "x", "y", "z", "fov"}
        if unknown:
            raise ValueError(f"unknown pose parameters: {', '.join(sorted(unknown))}")
        values = {k: _float(v, k) for k, v in params.items()}
        if "fov" in values:
            intrinsics = intrinsics.with_half_fov(math.radians(values["fov"]))
        return [
            CameraPose.look(
                math.radians(values.get("yaw", 0.0)),
                math.radians(values.get("pitch", 0.0)),
                intrinsics,
                (values.get("x", 0.0), values.get("y", 0.0), values.get("z", 0.0)),
            )
        ]
    raise ValueError(f"pose spec must start with 'turntable:' or 'pose:', got {spec!r}")


def held_out_poses(config: PipelineConfig, intrinsics: Intrinsics) -> List[CameraPose]:
    """The evaluation pose set: positions inside the stage-3 ball and free
    rotations, drawn from the eval seed.
    """
    rng = np.random.Generator(np.random.PCG64([config.eval.seed, 0xE7A1]))
    stage3 = config.stage(3)
    poses = []
    for _ in range(config.eval.n_poses):
        direction = rng.standard_normal(3)
        direction /= max(float(np.linalg.norm(direction)), 1e-12)
        position = stage3.position_radius * rng.uniform() ** (1.0 / 3.0) * direction
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        pitch = rng.uniform(-stage3.pitch_range, stage3.pitch_range)
        poses.append(CameraPose(sample_rotation(yaw, pitch), position, intrinsics))
    return poses


def reprojection_error(
    field, pose: CameraPose, yaw_offset: float, sampling: RaySampling
) -> float:
    """Mean absolute color difference between a view and a second view from
    the same position warped onto it, over pixels both views see.
    """
    other = CameraPose(
        sample_rotation(pose.yaw + yaw_offset, pose.pitch),
        pose.position,
        pose.intrinsics,
    )
    first = render(field, pose, sampling)
    second = render(field, other, sampling)
    warped, valid = warp_to_source(second.color, correspondence_map(pose, other))
    if not valid.any():
        return 0.0
    return float(np.mean(np.abs(first.color - warped)[valid]))


def evaluate_field(field, config: PipelineConfig, room: OracleRoom) -> Dict[str, float]:
    """Metrics of ``field`` against the oracle room over the held-out poses."""
    intrinsics = config.render.intrinsics()
    sampling = config.ray_sampling(stratified=False)
    poses = held_out_poses(config, intrinsics)
    off_center_radius = 0.5 * config.stage(3).position_radius
    psnrs, off_center, depth_errors, reprojection = [], [], [], []
    yaw_offset = math.radians(config.eval.pair_yaw_deg)
    for pose in poses:
        out = render(field, pose, sampling)
        truth, truth_depth = room.ground_truth(pose)
        value = psnr(out.color, truth)
        psnrs.append(value)
        if np.linalg.norm(pose.position) >= off_center_radius:
            off_center.append(value)
        depth_errors.append(float(np.mean(np.square(out.depth - truth_depth))))
        reprojection.append(reprojection_error(field, pose, yaw_offset, sampling))
    center = CameraPose.look(0.0, 0.0, intrinsics)
    center_truth, _ = room.ground_truth(center)
    return {
        "n_poses": float(len(poses)),
        "psnr": float(np.mean(psnrs)),
        "psnr_off_center": float(np.mean(off_center)) if off_center else float("nan"),
        "depth_rms": float(math.sqrt(np.mean(depth_errors))),
        "reprojection_error": float(np.mean(reprojection)),
        "center_psnr": psnr(render(field, center, sampling).color, center_truth),
    }


class PsnrMonitor:
    """Callback recording the center-pose PSNR every ``every`` iterations."""

    def __init__(
        self, room: OracleRoom, field, config: PipelineConfig, every: int
    ) -> None:
        self.room = room
        self.field = field
        self.every = every
        self.sampling = config.ray_sampling(stratified=False)
        self.pose = CameraPose.look(0.0, 0.0, config.render.intrinsics())
        self.truth, _ = room.ground_truth(self.pose)
        self.history: List[Tuple[int, int, float]] = []

    def __call__(self, step: SdsStep, context: Optional[StageContext] = None) -> None:
        if (step.iteration + 1) % self.every:
            return
        value = psnr(render(self.field, self.pose, self.sampling).color, self.truth)
        self.history.append((step.stage_id, step.iteration, value))
        logger.info(
            "stage %d iteration %d: center PSNR %.2f dB",
            step.stage_id,
            step.iteration,
            value,
        )


@dataclass
class GenerateResult:
    final_checkpoint: str
    steps: List[SdsStep] = dataclass_field(default_factory=list)
    checkpoints: List[str] = dataclass_field(default_factory=list)
    exports: List[str] = dataclass_field(default_factory=list)


class Pipeline:
    """One configured run.

    :param config: a validated configuration.
    :param out_dir: checkpoint and export directory; ``export.out_dir`` by
                    default.
    """

    def __init__(self, config: PipelineConfig, out_dir: Optional[str] = None) -> None:
        self.config = config
        self.out_dir = os.fspath(out_dir or config.export.out_dir)
        self.room = OracleRoom.from_config(config.room)
        self.intrinsics = config.render.intrinsics()
        self.field = RadianceField(config.field, self.room.bounds, seed=config.seed)
        self.optimizer = FieldOptimizer.from_config(self.field, config.optim)
        self.provider = build_score_provider(config)
        self.frozen: Optional[RadianceField] = None
        self.checkpoint: Optional[ckpt.Checkpoint] = None
        self.callbacks: List[Any] = []

    @classmethod
    def from_checkpoint(cls, path, out_dir: Optional[str] = None) -> "Pipeline":
        """A pipeline restored from a checkpoint.

        :raises CheckpointCorrupt: if the file does not parse.
        """
        state = ckpt.load(path)
        config = PipelineConfig.from_text(state.config_text)
        pipeline = cls(config, out_dir)
        pipeline.restore(state)
        return pipeline

    def restore(self, state: ckpt.Checkpoint) -> None:
        """Load field, moments and frozen field from ``state``.

        :raises CheckpointCorrupt: if the arrays do not fit the configured
                                   field.
        """
        try:
            self.field.load_parameter_arrays([a for _, a in state.field_arrays])
            self.optimizer.load_moments(state.optimizer_step, state.moments)
            if state.depth_field_arrays is not None:
                frozen = RadianceField(
                    self.config.field, self.room.bounds, seed=self.config.seed
                )
                arrays = [a for _, a in state.depth_field_arrays]
                frozen.load_parameter_arrays(arrays)
                self.frozen = frozen.freeze_copy()
        except ValueError as e:
            raise CheckpointCorrupt(f"arrays do not match the config: {e}") from e
        self.checkpoint = state

    def _capture(
        self, stage: int, next_iteration: int, complete: bool, sampler: ViewSampler
    ) -> ckpt.Checkpoint:
        return ckpt.Checkpoint(
            config_text=self.config.to_text(),
            stage=stage,
            next_iteration=next_iteration,
            stage_complete=complete,
            field_arrays=self.field.named_parameter_arrays(),
            optimizer_step=self.optimizer.step_count,
            moments=self.optimizer.moment_arrays(),
            rng_state=sampler.state,
            prompt=self.config.prior.prompt,
            negative_prompt=self.config.prior.negative_prompt,
            depth_field_arrays=(
                self.frozen.named_parameter_arrays()
                if self.frozen is not None
                else None
            ),
        )

    def _save(self, state: ckpt.Checkpoint, name: str) -> str:
        path = os.path.join(self.out_dir, name)
        ckpt.save(state, path)
        return path

    def _context(self, stage_id: int, sampler: ViewSampler) -> StageContext:
        config = self.config
        depth = None
        if stage_id == 2 and config.run.pose_transform:
            if self.frozen is None:
                raise RuntimeError("stage 2 needs the frozen stage-1 field")
            depth = DepthEstimator.from_config(self.frozen, config)
        return StageContext(
            stage=config.stage(stage_id),
            sampler=sampler,
            sampling=config.ray_sampling(),
            depth=depth,
            pose_transform=config.run.pose_transform,
            margin=config.pose.margin,
            weighting=config.sds.weighting,
            max_failures=config.sds.max_failures,
            wall_clock=config.sds.wall_clock,
            prompt_meta=config.prior.prompt_meta,
            guidance=Guidance(
                config.prior.negative_prompt_meta, config.prior.guidance_scale
            ),
        )

    def _acquire(self) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        lock = os.path.join(self.out_dir, LOCK_NAME)
        try:
            with open(lock, "x") as f:
                f.write(f"{os.getpid()}\n")
        except FileExistsError:
            raise DirectoryLocked(
                f"{self.out_dir} is in use by another run (remove {lock} if it "
                f"is stale)"
            ) from None
        return lock

    def generate(self) -> GenerateResult:
        """Run the configured stages, resuming from :attr:`checkpoint` when a
        checkpoint was restored.

        :raises AbortedStage: if a stage fails too often in a row.
        """
        lock = self._acquire()
        try:
            return self._generate()
        finally:
            os.remove(lock)

    def _generate(self) -> GenerateResult:
        config = self.config
        every = config.export.checkpoint_every
        cursor = self.checkpoint.cursor if self.checkpoint is not None else (0, 0)
        resumed_complete = self.checkpoint.stage_complete if self.checkpoint else False
        result = GenerateResult(final_checkpoint="")
        diagnostics = DiagnosticsWriter(
            os.path.join(self.out_dir, DIAGNOSTICS_NAME),
            resume_from=cursor if self.checkpoint is not None else None,
        )
        last_state = self.checkpoint
        with diagnostics:
            for stage_id in config.run.stages:
                stage = config.stage(stage_id)
                sampler = ViewSampler(stage, self.intrinsics, config.seed)
                start = 0
                if stage_id < cursor[0] or (stage_id == cursor[0] and resumed_complete):
                    continue
                if stage_id == cursor[0]:
                    start = cursor[1]
                    sampler.state = self.checkpoint.rng_state
                else:
                    self.optimizer.reset()

                def cadence(
                    step: SdsStep, context: StageContext, stage_id=stage_id
                ) -> None:
                    done = step.iteration + 1
                    if every and done % every == 0 and done < context.stage.iterations:
                        state = self._capture(stage_id, done, False, context.sampler)
                        name = f"stage{stage_id}-iter{done:06d}.ckpt"
                        result.checkpoints.append(self._save(state, name))

                context = self._context(stage_id, sampler)
                result.steps.extend(
                    run_stage(
                        self.field,
                        context,
                        self.provider,
                        self.optimizer,
                        callbacks=[diagnostics, cadence, *self.callbacks],
                        start_iteration=start,
                    )
                )
                if stage_id == 1:
                    self.frozen = self.field.freeze_copy()
                last_state = self._capture(stage_id, stage.iterations, True, sampler)
                saved = self._save(last_state, f"stage{stage_id}.ckpt")
                result.checkpoints.append(saved)

        if last_state is not None:
            result.final_checkpoint = self._save(last_state, FINAL_NAME)
        frames = config.export.turntable_frames
        if frames:
            result.exports = self.render_views(
                f"turntable:n_frames={frames},radius=0,pitch=0",
                os.path.join(self.out_dir, "turntable"),
            )
        return result

    def render_views(self, pose_spec: str, out_dir) -> List[str]:
        """Render the poses of ``pose_spec`` at export resolution into
        ``frame_NNN.png`` color and ``frame_NNN.pfm`` depth files.
        """
        poses = parse_pose_spec(pose_spec, self.config.render.export_intrinsics())
        sampling = self.config.ray_sampling(stratified=False)
        os.makedirs(out_dir, exist_ok=True)
        written = []
        for k, pose in enumerate(poses):
            out = render(self.field, pose, sampling)
            base = os.path.join(os.fspath(out_dir), f"frame_{k:03d}")
            write_png(base + ".png", out.color)
            write_pfm(base + ".pfm", out.depth)
            written.extend([base + ".png", base + ".pfm"])
        logger.info("rendered %d frames into %s", len(poses), out_dir)
        return written

    def evaluate(self) -> Dict[str, Any]:
        """Metrics against the oracle room.

        :raises OracleUnavailable: if no oracle provider scored the run.
        """
        if not any(isinstance(p, OracleProvider) for p, _ in self.provider):
            raise OracleUnavailable()
        report: Dict[str, Any] = dict(
            evaluate_field(self.field, self.config, self.room)
        )
        if self.checkpoint is not None:
            report["stage"] = self.checkpoint.stage
            report["next_iteration"] = self.checkpoint.next_iteration
        return report


def write_report(report: Dict[str, Any], path) -> None:
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
