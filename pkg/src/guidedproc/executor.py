"""Program execution: forward sampling, trace replay, neural guidance.

Programs are plain callables receiving an ExecutionContext. They make
random choices through ctx.gaussian / ctx.flip (each call names its
lexical site) and emit geometry through ctx.segment / ctx.ellipse /
ctx.disk. Geometry calls are the scoring barriers SMC synchronizes on;
the engine re-executes a program from the start of its recorded prefix
(cheap: recorded values are reused and nothing is redrawn) and lets it
run live until the next barrier completes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

from . import raster
from .errors import ContractError, StructuralMismatchError, TraceExhaustedError
from .guide import ParameterStore, assemble_features, bound_outputs, flip_logpmf_from_logit, mlp_forward
from .raster import Canvas, Pyramid, build_pyramid
from .rng import SeededDraws
from .trace import (
    FLIP,
    ChoiceAddress,
    ChoiceRecord,
    DistributionSpec,
    Trace,
    TurtleState,
    flip,
    flip_logpmf,
    gaussian,
    sample_choice,
)

DEFAULT_DEPTH_CAP = 60


class _PauseExecution(Exception):
    """Internal control flow: stop after a live barrier (SMC stepping)."""


@dataclass(frozen=True)
class ModelProgram:
    """A procedural model: a name plus a callable taking an ExecutionContext."""

    name: str
    run: Callable


# --- execution modes ----------------------------------------------------------


class Forward:
    pass


@dataclass
class Replay:
    trace: Trace


@dataclass
class GuideSession:
    """Everything the executor needs to evaluate guide proposals."""

    store: ParameterStore
    target_pyramid: Optional[Pyramid] = None

    def __post_init__(self):
        if self.store.feature_config.use_target and self.target_pyramid is None:
            raise ContractError("guide was configured with target features but no target is present")


@dataclass
class Guided:
    session: GuideSession


class ExecutionContext:
    """Mutable state threaded through one program execution."""

    __slots__ = (
        "canvas",
        "turtle",
        "depth_cap",
        "records",
        "_replay_source",
        "_cursor",
        "_prefix_len",
        "_reuse_prefix",
        "prefix_barriers",
        "barrier_index",
        "pause_at_barriers",
        "_draws",
        "session",
        "observer",
        "pending_log_importance",
        "_site_counts",
        "_pyramid",
        "_dirty",
    )

    def __init__(
        self,
        canvas: Canvas,
        turtle: TurtleState,
        draws=None,
        replay_source=None,
        reuse_prefix: bool = False,
        prefix_barriers: int = 0,
        pause_at_barriers: bool = False,
        session: GuideSession | None = None,
        observer=None,
        depth_cap: int = DEFAULT_DEPTH_CAP,
    ):
        self.canvas = canvas
        self.turtle = turtle
        self.depth_cap = depth_cap
        self._draws = draws
        self._replay_source = replay_source
        self._cursor = 0
        self._prefix_len = 0 if replay_source is None else len(replay_source)
        self._reuse_prefix = reuse_prefix
        self.prefix_barriers = prefix_barriers
        self.barrier_index = 0
        self.pause_at_barriers = pause_at_barriers
        self.session = session
        self.observer = observer
        self.pending_log_importance = 0.0
        self.records = replay_source if reuse_prefix else []
        self._site_counts: dict[str, int] = {}
        self._pyramid = None
        self._dirty = True

    # --- features -------------------------------------------------------------

    def partial_pyramid(self) -> Pyramid:
        if self._dirty or self._pyramid is None:
            self._pyramid = build_pyramid(self.canvas)
            self._dirty = False
        return self._pyramid

    def _features(self, args):
        cfg = self.session.store.feature_config
        partial = self.partial_pyramid() if cfg.use_partial else None
        return assemble_features(args, partial, self.session.target_pyramid, self.turtle.position, cfg)

    # --- random choices ---------------------------------------------------------

    def gaussian(self, mean: float, stddev: float, site: str, args=()) -> float:
        return self._choice(gaussian(mean, stddev), site, args)

    def flip(self, prob: float, site: str, args=()) -> bool:
        return self._choice(flip(prob), site, args) == 1.0

    def _choice(self, prior: DistributionSpec, site: str, args) -> float:
        count = self._site_counts.get(site, 0)
        self._site_counts[site] = count + 1
        addr = ChoiceAddress(site, count)

        if self._cursor < self._prefix_len:
            return self._replay_choice(addr, prior, args)

        if self._replay_source is not None and not self._reuse_prefix:
            raise TraceExhaustedError(f"trace ended before choice {addr}")

        # live choice
        features = None
        forced = prior.kind == FLIP and self.turtle.depth >= self.depth_cap
        if forced:
            value = 0.0
            prior_logp = flip_logpmf(0.0, prior.params[0])
            guide_logp = None
        elif self.session is not None:
            value, prior_logp, guide_logp, features = self._guided_choice(addr, prior, site, args)
        else:
            draw = self._draws.draw_for(site, count)
            value, prior_logp, _ = sample_choice(prior, None, draw)
            guide_logp = None
        rec = ChoiceRecord(addr, prior, value, prior_logp, guide_logp)
        self.records.append(rec)
        if self.observer is not None:
            self.observer(rec, features, args)
        return value

    def _guided_choice(self, addr, prior, site, args):
        net = self.session.store.ensure(site, prior.kind, prior.params, len(args))
        x = self._features(args)
        raw = mlp_forward(net, x)
        params = bound_outputs(raw, net.output_spec)
        if prior.kind == FLIP:
            params = flip(params)
        draw = self._draws.draw_for(site, addr.instance_index)
        value, prior_logp, guide_logp = sample_choice(prior, params, draw)
        self.pending_log_importance += prior_logp - guide_logp
        return value, prior_logp, guide_logp, x

    def _replay_choice(self, addr, prior, args) -> float:
        rec = self._replay_source[self._cursor]
        self._cursor += 1
        if rec.address != addr or rec.prior.kind != prior.kind:
            raise StructuralMismatchError(
                f"replay expected {rec.address} ({rec.prior.kind}), program made {addr} ({prior.kind})"
            )
        if self._reuse_prefix:
            return rec.value
        prior_logp = prior.logpdf(rec.value)
        guide_logp = None
        features = None
        if self.session is not None:
            net = self.session.store.ensure(addr.site_id, prior.kind, prior.params, len(args))
            features = self._features(args)
            raw = mlp_forward(net, features)
            params = bound_outputs(raw, net.output_spec)
            if prior.kind == FLIP:
                guide_logp = flip_logpmf(rec.value, params)
                if guide_logp == -math.inf:
                    # sigmoid saturated in float; recover from the logit
                    guide_logp = flip_logpmf_from_logit(rec.value, float(raw[0]))
            else:
                guide_logp = params.logpdf(rec.value)
        new_rec = ChoiceRecord(addr, prior, rec.value, prior_logp, guide_logp)
        self.records.append(new_rec)
        if self.observer is not None:
            self.observer(new_rec, features, args)
        return rec.value

    # --- geometry (scoring barriers) -------------------------------------------

    def segment(self, a, b, width: float = 1.0, value: float = 1.0) -> None:
        self._barrier(lambda: raster.draw_segment(self.canvas, a, b, width, value), b)

    def ellipse(self, center, axes, angle: float, value: float = 1.0) -> None:
        self._barrier(lambda: raster.draw_ellipse(self.canvas, center, axes, angle, value), center)

    def disk(self, center, radius: float, value: float = 1.0) -> None:
        self._barrier(lambda: raster.draw_disk(self.canvas, center, radius, value), center)

    def _barrier(self, draw_fn, endpoint) -> None:
        self.barrier_index += 1
        live = self.barrier_index > self.prefix_barriers
        if live:
            draw_fn()
            self._dirty = True
        # the current position always lands on the last primitive's endpoint
        self.turtle.x = float(endpoint[0])
        self.turtle.y = float(endpoint[1])
        if live and self.pause_at_barriers:
            raise _PauseExecution()


def _as_draws(rng):
    if rng is None:
        return None
    if isinstance(rng, int):
        return SeededDraws(rng)
    return rng


def run_program(program: ModelProgram, mode, rng, canvas: Canvas, turtle: TurtleState, observer=None, depth_cap: int = DEFAULT_DEPTH_CAP):
    """Execute a program to completion; returns (Trace, Canvas).

    mode is Forward(), Replay(trace) or Guided(session). rng is a 64-bit
    seed or a draw source (e.g. ForcedDraws in tests); replay ignores it.
    """
    if isinstance(mode, Replay):
        ctx = ExecutionContext(
            canvas,
            turtle,
            draws=None,
            replay_source=list(mode.trace.choices),
            observer=observer,
            depth_cap=depth_cap,
        )
    elif isinstance(mode, Guided):
        ctx = ExecutionContext(
            canvas,
            turtle,
            draws=_as_draws(rng),
            session=mode.session,
            observer=observer,
            depth_cap=depth_cap,
        )
    elif isinstance(mode, Forward):
        ctx = ExecutionContext(canvas, turtle, draws=_as_draws(rng), observer=observer, depth_cap=depth_cap)
    else:
        raise ContractError(f"unknown execution mode {mode!r}")
    program.run(ctx)
    if isinstance(mode, Replay) and ctx._cursor != len(ctx._replay_source):
        raise StructuralMismatchError(
            f"program consumed {ctx._cursor} of {len(ctx._replay_source)} recorded choices"
        )
    return Trace(tuple(ctx.records)), canvas


def replay_with_guide(program: ModelProgram, trace: Trace, session: GuideSession, canvas: Canvas, turtle: TurtleState, observer=None, depth_cap: int = DEFAULT_DEPTH_CAP):
    """Replay a trace while evaluating the guide at each recorded value.

    Used by training: features are recomputed by re-rendering partial
    canvases exactly as a guided run would have seen them.
    """
    ctx = ExecutionContext(
        canvas,
        turtle,
        replay_source=list(trace.choices),
        session=session,
        observer=observer,
        depth_cap=depth_cap,
    )
    program.run(ctx)
    if ctx._cursor != len(ctx._replay_source):
        raise StructuralMismatchError(
            f"program consumed {ctx._cursor} of {len(ctx._replay_source)} recorded choices"
        )
    return Trace(tuple(ctx.records)), canvas


def discover_sites(program: ModelProgram, canvas: Canvas, turtle: TurtleState, seed: int = 0, depth_cap: int = DEFAULT_DEPTH_CAP, runs: int = 8):
    """Run the program forward a few times and collect site metadata.

    Returns {site_id: (kind, prior_params, n_a)} for every site reached,
    taking the first-encountered prior parameters (sites are lexical, so
    these are stable for the models shipped here).
    """
    info: dict[str, tuple] = {}

    def observer(rec, features, args):
        if rec.address.site_id not in info:
            info[rec.address.site_id] = (rec.prior.kind, rec.prior.params, len(args))

    for r in range(runs):
        run_program(program, Forward(), seed + r, canvas.copy(), turtle.copy(), observer=observer, depth_cap=depth_cap)
    return info
