"""Trace-based probabilistic runtime: choice records, scoring, serialization.

A trace is the ordered vector of random choices one program execution made.
Each record stores its address (site id + per-site instance index), the
prior distribution it was drawn from, the drawn value, and log densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import ContractError, ParameterDomainError

GAUSSIAN = "gaussian"
FLIP = "flip"

_LOG_2PI = math.log(2.0 * math.pi)


def gaussian_logpdf(value: float, mean: float, stddev: float) -> float:
    z = (value - mean) / stddev
    return -0.5 * z * z - math.log(stddev) - 0.5 * _LOG_2PI


def flip_logpmf(value: float, prob: float) -> float:
    if value != 0.0 and value != 1.0:
        raise ContractError(f"flip value must be 0 or 1, got {value}")
    p = prob if value == 1.0 else 1.0 - prob
    if p <= 0.0:
        return -math.inf
    return math.log(p)


@dataclass(frozen=True)
class ChoiceAddress:
    site_id: str
    instance_index: int

    def __str__(self):
        return f"{self.site_id}#{self.instance_index}"


@dataclass(frozen=True)
class DistributionSpec:
    """A primitive distribution: gaussian(mean, stddev) or flip(prob).

    params is None for records loaded from the line format, which does not
    carry parameters; replay restores them from the program.
    """

    kind: str
    params: tuple | None

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, FLIP):
            raise ParameterDomainError(f"unknown distribution kind {self.kind!r}")
        if self.params is None:
            return
        if self.kind == GAUSSIAN:
            if len(self.params) != 2:
                raise ParameterDomainError("gaussian takes (mean, stddev)")
            if not (self.params[1] > 0.0):
                raise ParameterDomainError(f"gaussian stddev must be > 0, got {self.params[1]}")
        else:
            if len(self.params) != 1:
                raise ParameterDomainError("flip takes (prob,)")
            if not (0.0 <= self.params[0] <= 1.0):
                raise ParameterDomainError(f"flip probability must be in [0,1], got {self.params[0]}")

    def logpdf(self, value: float) -> float:
        if self.params is None:
            raise ContractError("distribution parameters unavailable (loaded trace)")
        if self.kind == GAUSSIAN:
            return gaussian_logpdf(value, self.params[0], self.params[1])
        return flip_logpmf(value, self.params[0])


def gaussian(mean: float, stddev: float) -> DistributionSpec:
    return DistributionSpec(GAUSSIAN, (float(mean), float(stddev)))


def flip(prob: float) -> DistributionSpec:
    return DistributionSpec(FLIP, (float(prob),))


@dataclass(frozen=True)
class ChoiceRecord:
    address: ChoiceAddress
    prior: DistributionSpec
    value: float
    prior_logp: float
    guide_logp: float | None = None


@dataclass(frozen=True)
class Trace:
    choices: tuple
    total_prior_logp: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.total_prior_logp is None:
            object.__setattr__(self, "total_prior_logp", math.fsum(c.prior_logp for c in self.choices))

    def __len__(self):
        return len(self.choices)


def score_trace(trace: Trace) -> float:
    """Total log prior probability of the trace."""
    return math.fsum(c.prior_logp for c in trace.choices)


def sample_choice(spec: DistributionSpec, proposal, draw):
    """Draw one value, from `proposal` when given, else from `spec`.

    proposal may be a DistributionSpec over the same support or a guide
    MixtureParams (for gaussian sites). Returns (value, prior_logp,
    proposal_logp), proposal_logp None when no proposal was used.
    """
    if spec.params is None:
        raise ContractError("cannot sample from a parameterless spec")
    if spec.kind == GAUSSIAN:
        if proposal is None:
            value = spec.params[0] + spec.params[1] * draw.normal()
            return value, gaussian_logpdf(value, *spec.params), None
        if isinstance(proposal, DistributionSpec):
            if proposal.kind != GAUSSIAN:
                raise ContractError("proposal support does not match a gaussian site")
            value = proposal.params[0] + proposal.params[1] * draw.normal()
            return value, gaussian_logpdf(value, *spec.params), gaussian_logpdf(value, *proposal.params)
        # guide mixture
        value, proposal_logp = proposal.sample(draw)
        return value, gaussian_logpdf(value, *spec.params), proposal_logp
    # flip
    if proposal is None:
        p = spec.params[0]
        value = 1.0 if draw.uniform() < p else 0.0
        return value, flip_logpmf(value, p), None
    if not (isinstance(proposal, DistributionSpec) and proposal.kind == FLIP):
        raise ContractError("proposal support does not match a flip site")
    value = 1.0 if draw.uniform() < proposal.params[0] else 0.0
    return value, flip_logpmf(value, spec.params[0]), flip_logpmf(value, proposal.params[0])


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(a, math.tau)
    if r <= -math.pi:
        r += math.tau
    return r


@dataclass
class TurtleState:
    """Current drawing state: position, heading, recursion depth, stroke width."""

    x: float
    y: float
    heading: float = 0.0
    depth: int = 0
    width: float = 1.0

    def __post_init__(self):
        self.heading = normalize_angle(self.heading)

    @property
    def position(self):
        return (self.x, self.y)

    def copy(self) -> "TurtleState":
        return replace(self)


# --- line-oriented trace serialization ---------------------------------------

_HEADER = "# guidedproc trace v1"


def serialize_trace(trace: Trace, program_name: str, seed: int) -> str:
    """Line format: `site_id instance_index kind value prior_logp`.

    Reals are written with repr(), the shortest decimal that round-trips
    the binary64 value exactly.
    """
    lines = [_HEADER, f"# program: {program_name}", f"# seed: {seed}"]
    for c in trace.choices:
        if " " in c.address.site_id:
            raise ContractError(f"site id {c.address.site_id!r} contains whitespace")
        lines.append(
            f"{c.address.site_id} {c.address.instance_index} {c.prior.kind} {c.value!r} {c.prior_logp!r}"
        )
    return "\n".join(lines) + "\n"


def parse_trace(text: str):
    """Inverse of serialize_trace; returns (Trace, header dict).

    Loaded records have prior parameters None (the format drops them);
    replaying against the program restores full records.
    """
    header = {}
    records = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if ":" in body:
                k, v = body.split(":", 1)
                header[k.strip()] = v.strip()
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ContractError(f"malformed trace line: {line!r}")
        site, inst, kind, value, logp = parts
        records.append(
            ChoiceRecord(
                address=ChoiceAddress(site, int(inst)),
                prior=DistributionSpec(kind, None),
                value=float(value),
                prior_logp=float(logp),
            )
        )
    return Trace(tuple(records)), header


def save_trace(trace: Trace, path, program_name: str, seed: int) -> None:
    with open(path, "w") as f:
        f.write(serialize_trace(trace, program_name, seed))


def load_trace(path):
    with open(path) as f:
        return parse_trace(f.read())
