"""
    roomdistill.optimizer
    ~~~~~~~~~~~~~~~~~~~~~

    The score distillation loop.  Each step renders a batch of views, asks a
    provider for the noise residual at one shared timestep, weights it by
    ``omega(t)`` and pushes it back through the renderer into the field as a
    pixel-space gradient.  The residual is a constant with respect to the
    field parameters.

    :license: BSD, see LICENSE for more details.
"""

import copy
import dataclasses
import logging
import os
import time
from dataclasses import dataclass
from typing import Callable
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import torch

from roomdistill.exceptions import AbortedStage
from roomdistill.exceptions import DegenerateDepth
from roomdistill.exceptions import InsufficientOpacity
from roomdistill.exceptions import NonFiniteGradient
from roomdistill.field import RadianceField
from roomdistill.geometry import CameraPose
from roomdistill.geometry import SHARED_CENTER_TOLERANCE
from roomdistill.pose_transform import DepthEstimator
from roomdistill.pose_transform import origin_pose
from roomdistill.providers.base import BaseProvider
from roomdistill.providers.base import Guidance
from roomdistill.providers.base import NoiseSchedule
from roomdistill.providers.base import ScoreQuery
from roomdistill.renderer import RaySampling
from roomdistill.renderer import render
from roomdistill.renderer import render_backward
from roomdistill.view_schedule import StageConfig
from roomdistill.view_schedule import ViewBatch
from roomdistill.view_schedule import ViewSampler

logger = logging.getLogger(__name__)

SCHEDULE = NoiseSchedule()

#: ``omega(t)`` by name.
WEIGHTINGS: Dict[str, Callable[[float], float]] = {
    "constant": lambda t: 1.0,
    "sigma2": lambda t: SCHEDULE.sigma(t) ** 2,
}

DIAGNOSTICS_COLUMNS = (
    "iter",
    "stage",
    "t",
    "omega",
    "residual_norm",
    "grad_norm",
    "wall_ms",
)
DIAGNOSTICS_HEADER = "\t".join(DIAGNOSTICS_COLUMNS)


def omega(weighting: str, t: float) -> float:
    try:
        return WEIGHTINGS[weighting](t)
    except KeyError:
        raise ValueError(
            f"unknown weighting {weighting!r}, expected one of {sorted(WEIGHTINGS)}"
        ) from None


@dataclass(frozen=True, eq=False)
class SdsStep:
    """Diagnostics of one accepted step."""

    iteration: int
    stage_id: int
    t: float
    omega: float
    batch: ViewBatch
    residual_norm: float
    grad_norm: float
    wall_ms: float = 0.0

    def as_row(self) -> str:
        return "\t".join(
            [
                str(self.iteration),
                str(self.stage_id),
                repr(self.t),
                repr(self.omega),
                repr(self.residual_norm),
                repr(self.grad_norm),
                repr(self.wall_ms),
            ]
        )


class FieldOptimizer:
    """Adam over a field with separate grid and decoder learning rates.

    :meth:`reset` drops the moments; the pipeline calls it at every stage
    boundary.
    """

    def __init__(
        self,
        field: RadianceField,
        lr_grid: float = 1e-2,
        lr_decoder: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.99),
        eps: float = 1e-15,
    ) -> None:
        self.field = field
        self.lr_grid = lr_grid
        self.lr_decoder = lr_decoder
        self.betas = betas
        self.eps = eps
        self.reset()

    @classmethod
    def from_config(cls, field: RadianceField, optim) -> "FieldOptimizer":
        return cls(
            field,
            lr_grid=optim.lr_grid,
            lr_decoder=optim.lr_decoder,
            betas=(optim.beta1, optim.beta2),
            eps=optim.eps,
        )

    def reset(self) -> None:
        self.optimizer = torch.optim.Adam(
            [
                {"params": list(self.field.grid_parameters()), "lr": self.lr_grid},
                {
                    "params": list(self.field.decoder_parameters()),
                    "lr": self.lr_decoder,
                },
            ],
            betas=self.betas,
            eps=self.eps,
        )

    def zero_grad(self) -> None:
        for param in self.field.parameters():
            param.grad = None

    def fill_missing_grads(self) -> None:
        for param in self.field.parameters():
            if param.grad is None:
                param.grad = torch.zeros_like(param)

    def step(self) -> None:
        """Apply the accumulated gradients.

        :raises NonFiniteGradient: if the update leaves a parameter non-finite;
                                   parameters and moments are restored first.
        """
        saved = [p.detach().clone() for p in self.field.parameters()]
        state = copy.deepcopy(self.optimizer.state_dict())
        self.optimizer.step()
        if self.field.all_finite():
            return
        with torch.no_grad():
            for param, value in zip(self.field.parameters(), saved):
                param.copy_(value)
        self.optimizer.load_state_dict(state)
        raise NonFiniteGradient("the update left non-finite parameters")

    @property
    def step_count(self) -> int:
        states = [self.optimizer.state.get(p) for p in self.field.parameters()]
        counts = {int(s["step"]) for s in states if s}
        return counts.pop() if counts else 0

    def moment_arrays(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """First and second moments per parameter, in parameter order;
        zeros before the first step.
        """
        moments = []
        for param in self.field.parameters():
            state = self.optimizer.state.get(param)
            if state:
                moments.append(
                    (
                        state["exp_avg"].detach().cpu().numpy(),
                        state["exp_avg_sq"].detach().cpu().numpy(),
                    )
                )
            else:
                zeros = np.zeros(tuple(param.shape), dtype=np.float32)
                moments.append((zeros, zeros.copy()))
        return moments

    def load_moments(
        self, step_count: int, moments: Sequence[Tuple[np.ndarray, np.ndarray]]
    ) -> None:
        params = list(self.field.parameters())
        if len(moments) != len(params):
            raise ValueError(
                f"expected moments for {len(params)} parameters, got {len(moments)}"
            )
        self.reset()
        if step_count == 0:
            return
        for param, (first, second) in zip(params, moments):
            if not (np.all(np.isfinite(first)) and np.all(np.isfinite(second))):
                raise ValueError("optimizer moments must be finite")
            self.optimizer.state[param] = {
                "step": torch.tensor(float(step_count), dtype=torch.float32),
                "exp_avg": torch.from_numpy(np.array(first)).to(param.dtype),
                "exp_avg_sq": torch.from_numpy(np.array(second)).to(param.dtype),
            }


def sds_step(
    field: RadianceField,
    batch: ViewBatch,
    provider: BaseProvider,
    bounds: Tuple[float, float],
    optimizer: FieldOptimizer,
    rng: np.random.Generator,
    sampling: RaySampling,
    prior_poses: Optional[Sequence[CameraPose]] = None,
    weighting: str = "sigma2",
    prompt_meta: Tuple[str, ...] = (),
    guidance: Guidance = Guidance(),
    t: Optional[float] = None,
) -> SdsStep:
    """One update of ``field`` from one batch.

    Draws ``t`` (unless given), per-view stratification seeds and the noise
    from ``rng`` in that order.  ``prior_poses`` default to the batch poses.

    :raises NonFiniteGradient: without touching parameters or moments.
    """
    started = time.perf_counter()
    if t is None:
        t = float(rng.uniform(bounds[0], bounds[1]))
    seeds = rng.integers(0, 2**31 - 1, size=len(batch))
    samplings = [dataclasses.replace(sampling, seed=int(s)) for s in seeds]
    optimizer.zero_grad()

    renders = [render(field, pose, s) for pose, s in zip(batch.poses, samplings)]
    noise = [rng.standard_normal(r.color.shape) for r in renders]
    query = ScoreQuery(
        renders,
        list(prior_poses) if prior_poses is not None else batch.poses,
        t,
        noise,
        prompt_meta,
        guidance,
    )
    try:
        response = provider.score(query)
    except FloatingPointError as e:
        raise NonFiniteGradient(
            f"stage {batch.stage_id} iteration {batch.iteration_index}: {e}"
        ) from e
    w = omega(weighting, t)

    views = zip(batch.poses, samplings, renders, response.residuals)
    for pose, s, out, residual in views:
        render_backward(field, pose, s, w * residual, forward=out)
    optimizer.fill_missing_grads()

    gradient = field.gradient_vector()
    grad_norm = float(torch.linalg.vector_norm(gradient.to(torch.float64)))
    if not np.isfinite(grad_norm):
        optimizer.zero_grad()
        raise NonFiniteGradient(
            f"stage {batch.stage_id} iteration {batch.iteration_index}: "
            f"gradient norm is {grad_norm}"
        )
    try:
        optimizer.step()
    except NonFiniteGradient as e:
        optimizer.zero_grad()
        raise NonFiniteGradient(
            f"stage {batch.stage_id} iteration {batch.iteration_index}: {e}"
        ) from e
    return SdsStep(
        iteration=batch.iteration_index,
        stage_id=batch.stage_id,
        t=t,
        omega=w,
        batch=batch,
        residual_norm=response.rms(),
        grad_norm=grad_norm,
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )


def check_stage2_routing(real: CameraPose, prior: CameraPose) -> None:
    """The field sees the off-center pose, the prior an origin pose with the
    same rotation.
    """
    if np.linalg.norm(real.position) < SHARED_CENTER_TOLERANCE:
        raise RuntimeError("stage 2 rendered a pose at the origin")
    if np.linalg.norm(prior.position) >= SHARED_CENTER_TOLERANCE:
        raise RuntimeError("stage 2 handed an off-center pose to the prior")
    if not np.array_equal(real.rotation, prior.rotation):
        raise RuntimeError("stage 2 real and prior rotations differ")


@dataclass
class StageContext:
    """Everything a stage needs besides the field, provider and optimizer.

    :param depth: depth source for pose transformation, stage 2 only.
    :param pose_transform: hand equivalent poses to the prior in stage 2;
                           ``False`` hands it the real pose moved to the
                           origin.
    """

    stage: StageConfig
    sampler: ViewSampler
    sampling: RaySampling
    depth: Optional[DepthEstimator] = None
    pose_transform: bool = True
    margin: float = 0.1
    weighting: str = "sigma2"
    max_failures: int = 10
    wall_clock: bool = False
    prompt_meta: Tuple[str, ...] = ()
    guidance: Guidance = dataclasses.field(default_factory=Guidance)


StageCallback = Callable[[SdsStep, StageContext], None]


def _prior_pose(context: StageContext, real: CameraPose) -> CameraPose:
    if context.pose_transform:
        prior = context.depth.pair(real, context.margin).equivalent
    else:
        prior = origin_pose(real)
    check_stage2_routing(real, prior)
    return prior


def _route_views(
    context: StageContext, batch: ViewBatch
) -> Tuple[ViewBatch, List[CameraPose]]:
    """The batch to render and the poses the prior sees.

    A stage-2 view whose depth is degenerate or too transparent is replaced
    by a fresh draw; the rest of the batch is kept.

    :raises AbortedStage: after ``max_failures`` consecutive rejected draws
                          for one view.
    """
    if batch.stage_id != 2:
        return batch, list(batch.poses)
    reals, priors = [], []
    for real in batch.poses:
        failures = 0
        while True:
            try:
                prior = _prior_pose(context, real)
            except (DegenerateDepth, InsufficientOpacity) as e:
                failures += 1
                logger.warning(
                    "stage 2 iteration %d: redrawing view after %s (%d/%d)",
                    batch.iteration_index,
                    e,
                    failures,
                    context.max_failures,
                )
                if failures >= context.max_failures:
                    raise AbortedStage(2, batch.iteration_index, str(e)) from e
                real = context.sampler.sample_view()
                continue
            break
        reals.append(real)
        priors.append(prior)
    routed = ViewBatch(
        reals, batch.stage_id, batch.iteration_index, batch.shared_position_flag
    )
    return routed, priors


def run_stage(
    field: RadianceField,
    context: StageContext,
    provider: BaseProvider,
    optimizer: FieldOptimizer,
    callbacks: Iterable[StageCallback] = (),
    start_iteration: int = 0,
) -> List[SdsStep]:
    """Run the iterations ``start_iteration .. stage.iterations - 1``.

    Stage-2 views whose depth is degenerate or too transparent are redrawn
    one at a time; batches whose gradient or update is not finite are
    resampled whole.

    :raises AbortedStage: after ``max_failures`` consecutive failed attempts.
    """
    stage = context.stage
    if stage.stage_id == 2 and context.pose_transform and context.depth is None:
        raise ValueError("stage 2 pose transformation needs a depth estimator")
    callbacks = list(callbacks)
    steps: List[SdsStep] = []
    failures = 0
    logger.info(
        "stage %d: iterations %d..%d", stage.stage_id, start_iteration, stage.iterations
    )
    for i in range(start_iteration, stage.iterations):
        bounds = context.sampler.bounds(i)
        while True:
            batch, prior_poses = _route_views(context, context.sampler.sample(i))
            try:
                step = sds_step(
                    field,
                    batch,
                    provider,
                    bounds,
                    optimizer,
                    context.sampler.rng,
                    context.sampling,
                    prior_poses=prior_poses,
                    weighting=context.weighting,
                    prompt_meta=context.prompt_meta,
                    guidance=context.guidance,
                )
            except NonFiniteGradient as e:
                failures += 1
                logger.warning(
                    "stage %d iteration %d: resampling after %s (%d/%d)",
                    stage.stage_id,
                    i,
                    e,
                    failures,
                    context.max_failures,
                )
                if failures >= context.max_failures:
                    raise AbortedStage(stage.stage_id, i, str(e)) from e
                continue
            failures = 0
            break
        if not context.wall_clock:
            step = dataclasses.replace(step, wall_ms=0.0)
        steps.append(step)
        for callback in callbacks:
            callback(step, context)
    logger.info("stage %d: done", stage.stage_id)
    return steps


class DiagnosticsWriter:
    """Tab-separated diagnostics, one row per step after a header line.

    Usable directly as a :func:`run_stage` callback.
    """

    def __init__(self, path, resume_from: Optional[Tuple[int, int]] = None) -> None:
        self.path = os.fspath(path)
        rows: List[str] = []
        if resume_from is not None and os.path.exists(self.path):
            rows = self._rows_before(resume_from)
        self._file = open(self.path, "w", encoding="utf-8", newline="\n")
        self._file.write(DIAGNOSTICS_HEADER + "\n")
        for row in rows:
            self._file.write(row + "\n")
        self._file.flush()

    def _rows_before(self, cursor: Tuple[int, int]) -> List[str]:
        kept = []
        with open(self.path, encoding="utf-8") as f:
            for line in f.read().splitlines()[1:]:
                fields = line.split("\t")
                if len(fields) != len(DIAGNOSTICS_COLUMNS):
                    continue
                if (int(fields[1]), int(fields[0])) < cursor:
                    kept.append(line)
        return kept

    def __call__(self, step: SdsStep, context: Optional[StageContext] = None) -> None:
        self._file.write(step.as_row() + "\n")
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "DiagnosticsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_diagnostics(path) -> List[Dict[str, float]]:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != DIAGNOSTICS_HEADER:
        raise ValueError(f"{path} is not a diagnostics file")
    return [
        dict(zip(DIAGNOSTICS_COLUMNS, (float(v) for v in line.split("\t"))))
        for line in lines[1:]
    ]
