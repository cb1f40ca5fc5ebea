"""Benchmark harness: particle sweeps, bootstrap intervals, equal-time calibration.

Produces tidy per-run records (every one replayable from its seed and
checkpoint hash) plus median summaries with percentile-bootstrap 95%
bounds. Plotting is left to external tools.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .constraints import ShapeConstraint
from .errors import ContractError
from .rng import KeyedStream, fold
from .smc import SmcConfig, smc_run
from .train import start_turtle

BOOTSTRAP_RESAMPLES = 1000


def bootstrap_ci(values, n_boot: int = BOOTSTRAP_RESAMPLES, alpha: float = 0.05, seed: int = 0):
    """Percentile bootstrap interval for the median."""
    vals = np.sort(np.asarray(values, dtype=np.float64))  # order-invariant
    if len(vals) == 0:
        raise ContractError("bootstrap_ci needs at least one value")
    stream = KeyedStream(fold(seed, 0xB0))
    meds = np.empty(n_boot)
    n = len(vals)
    for b in range(n_boot):
        idx = [stream.randint(n) for _ in range(n)]
        meds[b] = np.median(vals[idx])
    lo, hi = np.percentile(meds, [100.0 * alpha / 2.0, 100.0 * (1.0 - alpha / 2.0)])
    return float(lo), float(hi)


def checkpoint_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


@dataclass
class BenchRecord:
    variant: str
    n_particles: int
    target_id: str
    seed: int
    wall_time: float
    score: float
    checkpoint_hash: str


@dataclass
class BenchReport:
    records: list = field(default_factory=list)

    def conditions(self):
        keys = sorted({(r.variant, r.n_particles) for r in self.records})
        return keys

    def summarize(self):
        """Per (variant, N): median score with bootstrap bounds, median time."""
        rows = []
        for variant, n in self.conditions():
            scores = [r.score for r in self.records if r.variant == variant and r.n_particles == n]
            times = [r.wall_time for r in self.records if r.variant == variant and r.n_particles == n]
            lo, hi = bootstrap_ci(scores)
            rows.append(
                {
                    "variant": variant,
                    "n_particles": n,
                    "runs": len(scores),
                    "median_score": float(np.median(scores)),
                    "ci_lo": lo,
                    "ci_hi": hi,
                    "median_time": float(np.median(times)),
                }
            )
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("variant,n_particles,target_id,seed,wall_time,score,checkpoint_hash\n")
        for r in self.records:
            buf.write(
                f"{r.variant},{r.n_particles},{r.target_id},{r.seed},{r.wall_time!r},{r.score!r},{r.checkpoint_hash}\n"
            )
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"summary": self.summarize()}, indent=1)


def score_of(constraint, canvas) -> float:
    """The figure-facing scalar: normalized similarity or circuit score."""
    if isinstance(constraint, ShapeConstraint):
        return constraint.normalized_similarity(canvas)
    return constraint.score(canvas, canvas.oob_pixels, canvas.drawn_pixels)


def run_condition(program, constraint, target, canvas_size, n_particles, seed, guide=None, depth_cap=400):
    """One timed SMC run; returns (score, wall_time)."""
    start = start_turtle(target, canvas_size)
    cfg = SmcConfig(num_particles=n_particles, seed=seed, depth_cap=depth_cap)
    t0 = time.perf_counter()
    res = smc_run(program, constraint, cfg, canvas_size=canvas_size, start=start, guide=guide)
    wall = time.perf_counter() - t0
    return score_of(constraint, res.canvas), wall


def run_benchmark(program, variants, targets, particle_counts, reps, canvas_size, seed=0, depth_cap=400, circuit=None, progress=None) -> BenchReport:
    """Sweep (variant, N, target, rep); variants map name -> (guide|None, hash)."""
    report = BenchReport()
    total = len(variants) * len(particle_counts) * max(1, len(targets) if targets else 1) * reps
    done = 0
    target_list = targets if targets else [None]
    for vname, (guide, ck_hash) in variants.items():
        for n in particle_counts:
            for t_idx, target in enumerate(target_list):
                constraint = ShapeConstraint.from_target(target.mask) if target is not None else circuit
                for rep in range(reps):
                    run_seed = fold(seed, 0xBE, t_idx, n, rep)
                    score, wall = run_condition(
                        program, constraint, target, canvas_size, n, run_seed, guide=guide, depth_cap=depth_cap
                    )
                    report.records.append(
                        BenchRecord(
                            variant=vname,
                            n_particles=n,
                            target_id=target.source_id if target is not None else "circuit",
                            seed=run_seed,
                            wall_time=wall,
                            score=score,
                            checkpoint_hash=ck_hash,
                        )
                    )
                    done += 1
                    if progress is not None:
                        progress(done, total)
    return report


def time_to_threshold(program, variants, targets, thresholds, canvas_size, reps=3, n_max=400, seed=0, depth_cap=400, circuit=None):
    """Minimal N reaching each score threshold, by bisection over N.

    Returns rows {variant, threshold, n_particles, median_score, median_time};
    n_particles is None when even n_max misses the threshold.
    """

    def measure(vname, guide, n):
        scores, times = [], []
        target_list = targets if targets else [None]
        for t_idx, target in enumerate(target_list):
            constraint = ShapeConstraint.from_target(target.mask) if target is not None else circuit
            for rep in range(reps):
                run_seed = fold(seed, 0x77, t_idx, n, rep)
                s, w = run_condition(program, constraint, target, canvas_size, n, run_seed, guide=guide, depth_cap=depth_cap)
                scores.append(s)
                times.append(w)
        return float(np.median(scores)), float(np.median(times))

    rows = []
    for vname, (guide, _) in variants.items():
        cache: dict[int, tuple] = {}

        def probe(n):
            if n not in cache:
                cache[n] = measure(vname, guide, n)
            return cache[n]

        for thr in thresholds:
            hi_score, _ = probe(n_max)
            if hi_score < thr:
                rows.append({"variant": vname, "threshold": thr, "n_particles": None, "median_score": hi_score, "median_time": None})
                continue
            lo, hi = 1, n_max
            while lo < hi:
                mid = (lo + hi) // 2
                if probe(mid)[0] >= thr:
                    hi = mid
                else:
                    lo = mid + 1
            score, wall = probe(lo)
            rows.append({"variant": vname, "threshold": thr, "n_particles": lo, "median_score": score, "median_time": wall})
    return rows


def calibrate_equal_time(budget_seconds: float, runner, n_probe: int = 5, max_rounds: int = 4, tolerance: float = 0.2) -> int:
    """Pick N for an unguided run whose wall time matches a budget.

    runner(n) must execute one run and return its wall time. Assumes cost
    roughly linear in N; iterates until within the tolerance or rounds run
    out. Returns the chosen N (>= 1).
    """
    if budget_seconds <= 0:
        raise ContractError("time budget must be positive")
    n = max(1, n_probe)
    for _ in range(max_rounds):
        wall = runner(n)
        if abs(wall - budget_seconds) <= tolerance * budget_seconds:
            return n
        scaled = int(round(n * budget_seconds / max(wall, 1e-9)))
        scaled = max(1, scaled)
        if scaled == n:
            return n
        n = scaled
    return n
