import math

import numpy as np
import pytest

from guidedproc.errors import StructuralMismatchError, TraceExhaustedError
from guidedproc.executor import (
    ExecutionContext,
    Forward,
    ModelProgram,
    Replay,
    discover_sites,
    run_program,
)
from guidedproc.models import ChainConfig, chain_program
from guidedproc.raster import Canvas
from guidedproc.rng import ForcedDraws
from guidedproc.trace import TurtleState


def deterministic_program():
    def run(ctx):
        ctx.segment((2.0, 2.0), (10.0, 2.0), 1.0)
        ctx.segment((10.0, 2.0), (10.0, 8.0), 1.0)

    return ModelProgram("det", run)


def test_deterministic_program_empty_trace():
    trace, canvas = run_program(deterministic_program(), Forward(), 0, Canvas.blank(16, 16), TurtleState(0, 0))
    assert len(trace) == 0
    assert canvas.data.sum() > 0


def test_replay_reproduces_canvas_exactly():
    prog = chain_program()
    for seed in (3, 4, 5):
        t1, c1 = run_program(prog, Forward(), seed, Canvas.blank(48, 48), TurtleState(24, 24, 0.3))
        t2, c2 = run_program(prog, Replay(t1), None, Canvas.blank(48, 48), TurtleState(24, 24, 0.3))
        assert t1 == t2
        assert np.array_equal(c1.data, c2.data)


def test_forced_rng_chain_single_segment():
    prog = chain_program(ChainConfig(segment_length=10.0))
    trace, canvas = run_program(
        prog, Forward(), ForcedDraws(z=0.0, u=0.9999), Canvas.blank(128, 96), TurtleState(64, 48, 0.0)
    )
    assert [c.address.site_id for c in trace.choices] == ["turn", "continue"]
    assert trace.choices[0].value == 0.0
    assert trace.choices[1].value == 0.0
    # one horizontal width-1 segment from (64,48) to (74,48)
    ys, xs = np.nonzero(canvas.channel(0))
    assert set(ys) == {48}
    assert set(xs) == set(range(64, 75))


def test_replay_exhaustion_raises():
    prog = chain_program()
    t1, _ = run_program(prog, Forward(), 11, Canvas.blank(32, 32), TurtleState(16, 16))
    from guidedproc.trace import Trace

    short = Trace(t1.choices[:-1])
    with pytest.raises(TraceExhaustedError):
        run_program(prog, Replay(short), None, Canvas.blank(32, 32), TurtleState(16, 16))


def test_replay_structural_mismatch_raises():
    prog = chain_program()
    t1, _ = run_program(prog, Forward(), 11, Canvas.blank(32, 32), TurtleState(16, 16))

    def other(ctx):
        ctx.flip(0.5, "somewhere_else")

    with pytest.raises(StructuralMismatchError):
        run_program(ModelProgram("other", other), Replay(t1), None, Canvas.blank(32, 32), TurtleState(16, 16))


def test_address_stability_across_runs():
    prog = chain_program()
    t1, _ = run_program(prog, Forward(), 77, Canvas.blank(32, 32), TurtleState(16, 16))
    t2, _ = run_program(prog, Forward(), 77, Canvas.blank(32, 32), TurtleState(16, 16))
    assert [c.address for c in t1.choices] == [c.address for c in t2.choices]
    assert [c.value for c in t1.choices] == [c.value for c in t2.choices]


def test_per_site_instance_counters():
    prog = chain_program(ChainConfig(continue_prob=0.9))
    trace, _ = run_program(prog, Forward(), 123, Canvas.blank(64, 64), TurtleState(32, 32))
    turns = [c.address.instance_index for c in trace.choices if c.address.site_id == "turn"]
    assert turns == list(range(len(turns)))
    pairs = {(c.address.site_id, c.address.instance_index) for c in trace.choices}
    assert len(pairs) == len(trace)


def test_depth_cap_forces_continue_false():
    prog = chain_program(ChainConfig(continue_prob=0.999999))
    trace, _ = run_program(prog, Forward(), 5, Canvas.blank(64, 64), TurtleState(32, 32), depth_cap=7)
    flips = [c for c in trace.choices if c.address.site_id == "continue"]
    assert len(flips) == 7
    last = flips[-1]
    assert last.value == 0.0
    # forced flips still record the prior mass of the recorded value
    assert last.prior_logp == pytest.approx(math.log(1.0 - 0.999999), rel=1e-9)


def test_observer_sees_every_choice():
    prog = chain_program()
    seen = []
    run_program(prog, Forward(), 9, Canvas.blank(32, 32), TurtleState(16, 16), observer=lambda rec, feats, args: seen.append(rec))
    assert len(seen) > 0
    t2, _ = run_program(prog, Forward(), 9, Canvas.blank(32, 32), TurtleState(16, 16))
    assert [r.address for r in seen] == [c.address for c in t2.choices]


def test_discover_sites_chain():
    prog = chain_program()
    info = discover_sites(prog, Canvas.blank(32, 32), TurtleState(16, 16), runs=6)
    assert set(info) == {"turn", "continue"}
    kind, params, n_a = info["turn"]
    assert kind == "gaussian"
    assert n_a == 3


class _AccumulativityContext(ExecutionContext):
    """Checks the position contract right after every geometry emit."""

    def _barrier(self, draw_fn, endpoint):
        super()._barrier(draw_fn, endpoint)
        assert (self.turtle.x, self.turtle.y) == (float(endpoint[0]), float(endpoint[1]))


def test_position_tracks_last_primitive_endpoint():
    from guidedproc.models import VineConfig, vine_program
    from guidedproc.rng import SeededDraws

    for prog in (chain_program(), vine_program(VineConfig(continue_prob=0.8))):
        ctx = _AccumulativityContext(Canvas.blank(64, 64), TurtleState(32, 32), draws=SeededDraws(4))
        prog.run(ctx)
        assert ctx.barrier_index > 0
