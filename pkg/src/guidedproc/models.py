"""Accumulative procedural programs: the linear chain and a vine grower.

Both emit geometry through the execution context and keep the turtle's
position on the endpoint of the last primitive. Every random choice is a
gaussian (angle perturbation) or a flip (control flow), so the guide
machinery covers all of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .errors import ContractError, ParameterDomainError
from .executor import ExecutionContext, ModelProgram
from .trace import normalize_angle

# branch fork geometry for the vine (relative heading of a child)
BRANCH_ANGLE_MEAN = math.pi / 5
BRANCH_ANGLE_STDDEV = math.pi / 10

CHAIN_SITES = ("turn", "continue")
VINE_SITES = (
    "turn",
    "branch",
    "branch_side",
    "branch_angle",
    "leaf",
    "leaf_side",
    "continue",
    "flower",
)


def polar_to_rect(length: float, angle: float):
    """(length*cos(angle), length*sin(angle))."""
    return (length * math.cos(angle), length * math.sin(angle))


@dataclass(frozen=True)
class ChainConfig:
    segment_length: float = 4.0
    angle_stddev: float = math.pi / 8
    continue_prob: float = 0.5
    stroke_width: float = 1.0

    def __post_init__(self):
        if self.segment_length <= 0:
            raise ParameterDomainError("segment_length must be > 0")
        if self.angle_stddev <= 0:
            raise ParameterDomainError("angle_stddev must be > 0")
        if not 0.0 < self.continue_prob < 1.0:
            raise ParameterDomainError("continue_prob must be in (0,1)")
        if self.stroke_width < 1.0:
            raise ParameterDomainError("stroke_width must be >= 1")


@dataclass(frozen=True)
class VineConfig:
    segment_length: float = 4.0
    angle_stddev: float = math.pi / 8
    continue_prob: float = 0.95
    branch_prob: float = 0.15
    width_initial: float = 3.0
    width_decay: float = 0.8
    leaf_prob: float = 0.25
    flower_prob: float = 0.5
    leaf_size: float = 3.0
    flower_radius: float = 2.5
    max_depth: int = 4

    def __post_init__(self):
        for name in ("continue_prob", "branch_prob", "leaf_prob", "flower_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterDomainError(f"{name} must be in [0,1]")
        for name in ("segment_length", "angle_stddev", "width_initial", "leaf_size", "flower_radius"):
            if getattr(self, name) <= 0:
                raise ParameterDomainError(f"{name} must be > 0")
        if not 0.0 < self.width_decay <= 1.0:
            raise ParameterDomainError("width_decay must be in (0,1]")
        if self.max_depth < 0:
            raise ParameterDomainError("max_depth must be >= 0")


def _state_args(ctx: ExecutionContext, extra=()):
    t = ctx.turtle
    args = [
        (t.x, 0.0, float(ctx.canvas.width)),
        (t.y, 0.0, float(ctx.canvas.height)),
        (t.heading, -math.pi, math.pi),
    ]
    args.extend(extra)
    return tuple(args)


def chain_program(cfg: ChainConfig = ChainConfig()) -> ModelProgram:
    """The linear chain: turn by a gaussian, draw one segment, maybe recurse."""

    def run(ctx: ExecutionContext):
        t = ctx.turtle
        while True:
            x, y = t.x, t.y
            args = _state_args(ctx)
            newang = normalize_angle(t.heading + ctx.gaussian(0.0, cfg.angle_stddev, "turn", args))
            dx, dy = polar_to_rect(cfg.segment_length, newang)
            ctx.segment((x, y), (x + dx, y + dy), cfg.stroke_width)
            t.heading = newang
            t.depth += 1
            if not ctx.flip(cfg.continue_prob, "continue", args):
                return

    return ModelProgram("chain", run)


def vine_program(cfg: VineConfig = VineConfig()) -> ModelProgram:
    """Vine growth: tapered trunk, probabilistic side branches, leaves,
    and a flower at the tip of each finished branch.

    The recursion structure (fork angles, widths, leaf/flower shapes) is an
    approximation chosen to produce branching foliage; the branch depth is
    bounded by cfg.max_depth and per-lineage growth by the depth cap.
    """

    def grow(ctx: ExecutionContext, branch_depth: int):
        t = ctx.turtle
        while True:
            x, y = t.x, t.y
            width = max(1.0, t.width)
            args = _state_args(ctx, ((t.depth, 0.0, float(ctx.depth_cap)), (t.width, 0.0, cfg.width_initial)))
            newang = normalize_angle(t.heading + ctx.gaussian(0.0, cfg.angle_stddev, "turn", args))
            dx, dy = polar_to_rect(cfg.segment_length, newang)
            end = (x + dx, y + dy)
            ctx.segment((x, y), end, width)
            t.heading = newang
            t.depth += 1
            if branch_depth + 1 < cfg.max_depth and ctx.flip(cfg.branch_prob, "branch", args):
                side = 1.0 if ctx.flip(0.5, "branch_side", args) else -1.0
                fork = ctx.gaussian(BRANCH_ANGLE_MEAN, BRANCH_ANGLE_STDDEV, "branch_angle", args)
                saved = (t.x, t.y, t.heading, t.depth, t.width)
                t.heading = normalize_angle(newang + side * fork)
                t.width = t.width * cfg.width_decay
                grow(ctx, branch_depth + 1)
                t.x, t.y, t.heading, t.depth, t.width = saved
            if ctx.flip(cfg.leaf_prob, "leaf", args):
                side = 1.0 if ctx.flip(0.5, "leaf_side", args) else -1.0
                ndir = newang + side * math.pi / 2.0
                ox, oy = polar_to_rect(cfg.leaf_size * 0.8, ndir)
                ctx.ellipse((end[0] + ox, end[1] + oy), (cfg.leaf_size, cfg.leaf_size * 0.5), ndir)
                t.x, t.y = end
            if not ctx.flip(cfg.continue_prob, "continue", args):
                if ctx.flip(cfg.flower_prob, "flower", args):
                    ctx.disk(end, cfg.flower_radius)
                return

    def run(ctx: ExecutionContext):
        if cfg.max_depth <= 0:
            return
        ctx.turtle.width = cfg.width_initial
        grow(ctx, 0)

    return ModelProgram("vine", run)


# --- key-value config files ---------------------------------------------------


def load_model_config(path) -> dict:
    """Parse a `key = value` config file ('#' starts a comment)."""
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{ln}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def _config_from_file(cls, path):
    raw = load_model_config(path)
    kwargs = {}
    known = {f.name: f.type for f in fields(cls)}
    for key, value in raw.items():
        if key not in known:
            raise ContractError(f"unknown {cls.__name__} key {key!r} in {path}")
        kwargs[key] = int(value) if known[key] == "int" else float(value)
    return cls(**kwargs)


def chain_config_from_file(path) -> ChainConfig:
    return _config_from_file(ChainConfig, path)


def vine_config_from_file(path) -> VineConfig:
    return _config_from_file(VineConfig, path)


def make_program(name: str, config_path=None) -> ModelProgram:
    """Program factory used by the CLI and by dataset workers."""
    if name == "chain":
        cfg = chain_config_from_file(config_path) if config_path else ChainConfig()
        return chain_program(cfg)
    if name == "vine":
        cfg = vine_config_from_file(config_path) if config_path else VineConfig()
        return vine_program(cfg)
    raise ContractError(f"unknown program {name!r}")
