"""Sequential Monte Carlo over procedural program executions.

Particles advance one geometry-emitting step at a time; each advance
re-executes the program with its recorded prefix replayed (values reused,
nothing redrawn) and one live step appended. At every barrier a particle's
weight picks up the partial-likelihood increment, plus (prior - guide)
log-density terms for any choices drawn from a guide. Systematic
resampling triggers on an effective-sample-size threshold.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import ShapeConstraint
from .errors import ContractError, DegeneratePopulationError
from .executor import ExecutionContext, GuideSession, ModelProgram, _PauseExecution
from .guide import ParameterStore
from .raster import Canvas
from .rng import TAG_CHOICE, TAG_ENGINE, TAG_SELECT, KeyedStream, SeededDraws, fold
from .trace import Trace, TurtleState

RESAMPLE_ALWAYS = "always"
RESAMPLE_ESS = "ess_threshold"
SELECT_MAX_WEIGHT = "max_weight"
SELECT_SAMPLE = "sample_by_weight"


@dataclass(frozen=True)
class SmcConfig:
    num_particles: int = 10
    resample_strategy: str = RESAMPLE_ESS
    ess_fraction: float = 0.5
    seed: int = 0
    result_selection: str = SELECT_MAX_WEIGHT
    depth_cap: int = 60
    max_steps: int = 100000

    def __post_init__(self):
        if self.num_particles < 1:
            raise ContractError("num_particles must be >= 1")
        if self.resample_strategy not in (RESAMPLE_ALWAYS, RESAMPLE_ESS):
            raise ContractError(f"unknown resample strategy {self.resample_strategy!r}")
        if not 0.0 < self.ess_fraction <= 1.0:
            raise ContractError("ess_fraction must be in (0,1]")
        if self.result_selection not in (SELECT_MAX_WEIGHT, SELECT_SAMPLE):
            raise ContractError(f"unknown result selection {self.result_selection!r}")


def effective_sample_size(log_weights) -> float:
    """(sum w)^2 / sum w^2 on normalized weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    m = float(np.max(lw))
    if m == -math.inf:
        raise ContractError("effective_sample_size needs at least one finite weight")
    w = np.exp(lw - m)
    return float(w.sum() ** 2 / np.sum(w * w))


def systematic_resample(log_weights, u: float) -> np.ndarray:
    """Low-variance systematic resampling; u is one uniform in [0,1)."""
    lw = np.asarray(log_weights, dtype=np.float64)
    n = len(lw)
    m = float(np.max(lw))
    if m == -math.inf:
        raise ContractError("cannot resample an all-zero weight population")
    w = np.exp(lw - m)
    w /= w.sum()
    positions = (np.arange(n) + u) / n
    idx = np.searchsorted(np.cumsum(w), positions, side="right")
    return np.minimum(idx, n - 1)


@dataclass
class StepDiagnostics:
    step: int
    ess: float
    max_log_weight: float
    resampled: bool


@dataclass
class SmcDiagnostics:
    steps: list = field(default_factory=list)
    log_marginal: float = 0.0
    n_resamples: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,ess,max_log_weight,resampled\n")
        for s in self.steps:
            buf.write(f"{s.step},{s.ess!r},{s.max_log_weight!r},{int(s.resampled)}\n")
        return buf.getvalue()


@dataclass
class SmcResult:
    trace: Trace
    canvas: Canvas
    log_weight: float
    diagnostics: SmcDiagnostics
    selected_index: int


class _Particle:
    __slots__ = ("records", "canvas", "barriers", "log_weight", "last_partial", "finished", "gen", "slot")

    def __init__(self, records, canvas, barriers, log_weight, last_partial, finished, gen, slot):
        self.records = records
        self.canvas = canvas
        self.barriers = barriers
        self.log_weight = log_weight
        self.last_partial = last_partial
        self.finished = finished
        self.gen = gen
        self.slot = slot

    def clone(self, gen: int, slot: int) -> "_Particle":
        return _Particle(
            list(self.records),
            self.canvas.copy(),
            self.barriers,
            0.0,
            self.last_partial,
            self.finished,
            gen,
            slot,
        )


def _advance(program: ModelProgram, particle: _Particle, start: TurtleState, session, base_key: int, depth_cap: int):
    """Run one particle to its next barrier (or to completion)."""
    ctx = ExecutionContext(
        canvas=particle.canvas,
        turtle=start.copy(),
        draws=SeededDraws(fold(base_key, TAG_CHOICE, particle.gen, particle.slot)),
        replay_source=particle.records,
        reuse_prefix=True,
        prefix_barriers=particle.barriers,
        pause_at_barriers=True,
        session=session,
        depth_cap=depth_cap,
    )
    try:
        program.run(ctx)
        particle.finished = True
    except _PauseExecution:
        pass
    particle.barriers = ctx.barrier_index
    return ctx.pending_log_importance


def smc_run(
    program: ModelProgram,
    constraint,
    cfg: SmcConfig,
    *,
    canvas_size,
    start: TurtleState,
    guide: ParameterStore | None = None,
    channels: int = 1,
) -> SmcResult:
    """Run SMC; returns the selected (trace, canvas) plus diagnostics.

    With a guide, choices are proposed by the per-site networks and the
    weights carry the importance correction; without one, choices follow
    the prior and weights are pure likelihood increments.
    """
    n = cfg.num_particles
    base_key = fold(cfg.seed)
    engine = KeyedStream(fold(base_key, TAG_ENGINE))

    session = None
    if guide is not None:
        target_pyr = constraint.target_pyramid() if guide.feature_config.use_target else None
        session = GuideSession(guide, target_pyr)

    proto = Canvas.blank(canvas_size[0], canvas_size[1], channels)
    constraint.prepare_canvas(proto)
    particles = [_Particle([], proto.copy(), 0, 0.0, 0.0, False, 0, i) for i in range(n)]

    diag = SmcDiagnostics()
    step = 0
    while any(not p.finished for p in particles):
        step += 1
        if step > cfg.max_steps:
            raise ContractError(f"SMC exceeded max_steps={cfg.max_steps}")
        for p in particles:
            if p.finished:
                continue
            importance = _advance(program, p, start, session, base_key, cfg.depth_cap)
            partial = constraint.log_likelihood(p.canvas, p.records)
            p.log_weight += importance + (partial - p.last_partial)
            p.last_partial = partial

        lws = np.array([p.log_weight for p in particles])
        if not np.any(np.isfinite(lws)):
            raise DegeneratePopulationError(f"all {n} particles at -inf weight at step {step}", diag)
        ess = effective_sample_size(lws)
        live = any(not p.finished for p in particles)
        do_resample = live and (
            cfg.resample_strategy == RESAMPLE_ALWAYS or ess < cfg.ess_fraction * n
        )
        diag.steps.append(StepDiagnostics(step, ess, float(np.max(lws)), do_resample))
        if do_resample:
            u = engine.uniform()
            ancestors = systematic_resample(lws, u)
            m = float(np.max(lws))
            diag.log_marginal += m + math.log(float(np.sum(np.exp(lws - m)))) - math.log(n)
            particles = [particles[a].clone(step, i) for i, a in enumerate(ancestors)]
            diag.n_resamples += 1

    lws = np.array([p.log_weight for p in particles])
    if not np.any(np.isfinite(lws)):
        raise DegeneratePopulationError("final population fully degenerate", diag)
    m = float(np.max(lws))
    diag.log_marginal += m + math.log(float(np.sum(np.exp(lws - m)))) - math.log(n)

    if cfg.result_selection == SELECT_MAX_WEIGHT:
        idx = int(np.argmax(lws))
    else:
        w = np.exp(lws - m)
        w /= w.sum()
        u = KeyedStream(fold(base_key, TAG_SELECT)).uniform()
        idx = min(int(np.searchsorted(np.cumsum(w), u, side="right")), n - 1)
    chosen = particles[idx]
    return SmcResult(Trace(tuple(chosen.records)), chosen.canvas, float(chosen.log_weight), diag, idx)


def prior_equivalent_guide(program: ModelProgram, canvas_size, start: TurtleState, config=None, channels: int = 1, depth_cap: int = 60) -> ParameterStore:
    """Discover the program's sites and build an exactly prior-matching guide."""
    from .executor import discover_sites
    from .guide import FeatureConfig, make_prior_equivalent_store

    proto = Canvas.blank(canvas_size[0], canvas_size[1], channels)
    info = discover_sites(program, proto, start, depth_cap=depth_cap)
    return make_prior_equivalent_store(info, config or FeatureConfig(), channels)
