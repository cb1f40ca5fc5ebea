"""Amortized training: SMC-generated example traces, Adam ascent on the
mean guided log-likelihood, dataset and checkpoint plumbing.

Each training example pairs a constraint (usually a target image) with one
posterior trace sampled by unguided SMC. Training replays traces while
re-rendering partial canvases, so the guide sees exactly the features a
guided run would have seen, and ascends the summed per-choice log density
with minibatch size one (one trace per step).
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .constraints import CircuitConstraint, ShapeConstraint
from .corpus import AnnotatedTarget, load_target, save_target
from .errors import ContractError, CorruptExampleError, DegeneratePopulationError
from .executor import GuideSession, ModelProgram, Replay, replay_with_guide, run_program
from .guide import ParameterStore, guide_logpdf_grad
from .models import make_program
from .raster import Canvas
from .rng import TAG_DATASET, TAG_TRAIN, KeyedStream, fold
from .smc import SELECT_SAMPLE, SmcConfig, smc_run
from .trace import Trace, TurtleState, load_trace, save_trace

log = logging.getLogger(__name__)

ADAM_STEP_SIZE = 0.01
ADAM_BETA1 = 0.75
ADAM_BETA2 = 0.75
ADAM_EPS = 1e-8


@dataclass
class TrainingExample:
    example_id: str
    trace: Trace
    constraint: object
    target: AnnotatedTarget | None
    canvas_size: tuple
    start: TurtleState
    seed: int
    particles: int
    depth_cap: int = 60
    program_key: tuple = ("chain", None)  # (program name, config path)


@dataclass(frozen=True)
class TrainConfig:
    num_examples: int = 500
    gen_particles: int = 600
    iterations: int = 20000
    seed: int = 0
    heldout_fraction: float = 0.1
    eval_every: int = 500

    def __post_init__(self):
        if self.num_examples < 1 or self.gen_particles < 1 or self.iterations < 0:
            raise ContractError("num_examples and gen_particles must be positive, iterations >= 0")


class AdamState:
    """First/second moments and step counts, one flat vector per site."""

    def __init__(self, step_size=ADAM_STEP_SIZE, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}


def adam_step(state: AdamState, grad: np.ndarray, params: np.ndarray, key: str = "params") -> np.ndarray:
    """One ascent step; returns the updated parameter vector.

    Non-finite gradients skip the step (moments untouched) and are logged.
    """
    if grad.shape != params.shape:
        raise ContractError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        log.warning("skipping Adam step for %s: non-finite gradient", key)
        return params
    m = state.m.get(key)
    if m is None:
        m = np.zeros_like(params)
        state.v[key] = np.zeros_like(params)
        state.t[key] = 0
    v = state.v[key]
    t = state.t[key] + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    state.m[key] = m
    state.v[key] = v
    state.t[key] = t
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    return params + state.step_size * mhat / (np.sqrt(vhat) + state.eps)


def start_turtle(target: AnnotatedTarget | None, canvas_size) -> TurtleState:
    """Execution start: the target's annotation, else the canvas center."""
    if target is not None:
        return TurtleState(target.start_x, target.start_y, target.start_heading)
    return TurtleState(canvas_size[0] / 2.0, canvas_size[1] / 2.0, 0.0)


def build_constraint(target: AnnotatedTarget | None, circuit: CircuitConstraint | None):
    if target is not None:
        return ShapeConstraint.from_target(target.mask)
    if circuit is None:
        raise ContractError("need either a target or a circuit constraint")
    return circuit


# --- dataset generation --------------------------------------------------------


def _generate_one(task: dict):
    """Worker: run unguided SMC for one example; returns a TrainingExample or None."""
    program = make_program(task["program"], task.get("config_path"))
    target = task["target"]
    circuit = task["circuit"]
    constraint = build_constraint(target, circuit)
    cfg = SmcConfig(
        num_particles=task["particles"],
        seed=task["seed"],
        result_selection=SELECT_SAMPLE,
        depth_cap=task["depth_cap"],
    )
    start = start_turtle(target, task["canvas_size"])
    try:
        result = smc_run(program, constraint, cfg, canvas_size=task["canvas_size"], start=start)
    except DegeneratePopulationError as e:
        log.warning("example %s skipped: %s", task["example_id"], e)
        return None
    return TrainingExample(
        example_id=task["example_id"],
        trace=result.trace,
        constraint=constraint,
        target=target,
        canvas_size=tuple(task["canvas_size"]),
        start=start,
        seed=task["seed"],
        particles=task["particles"],
        depth_cap=task["depth_cap"],
        program_key=(task["program"], task.get("config_path")),
    )


def generate_dataset(
    program_name: str,
    targets: list | None,
    cfg: TrainConfig,
    canvas_size,
    *,
    config_path=None,
    circuit: CircuitConstraint | None = None,
    depth_cap: int = 60,
    workers: int = 1,
):
    """Draw constraints uniformly and sample one posterior trace per example.

    Returns (examples, skipped_ids). Example seeds derive from (seed, index),
    so results are identical for any worker count; skipped examples (SMC
    degeneracy) are reported, never silently dropped from the count.
    """
    picker = KeyedStream(fold(cfg.seed, TAG_DATASET, 0xA))
    tasks = []
    for s in range(cfg.num_examples):
        target = targets[picker.randint(len(targets))] if targets else None
        tasks.append(
            {
                "example_id": f"ex{s:05d}",
                "program": program_name,
                "config_path": config_path,
                "target": target,
                "circuit": circuit,
                "particles": cfg.gen_particles,
                "seed": fold(cfg.seed, TAG_DATASET, s),
                "canvas_size": tuple(canvas_size),
                "depth_cap": depth_cap,
            }
        )
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, tasks, chunksize=4))
    else:
        results = [_generate_one(t) for t in tasks]
    examples = [r for r in results if r is not None]
    skipped = [t["example_id"] for t, r in zip(tasks, results) if r is None]
    return examples, skipped


# --- dataset directory layout ---------------------------------------------------


def save_dataset(out_dir, examples, skipped, meta: dict) -> None:
    """One trace file and one target (PNG + ann) per example, plus a manifest."""
    os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)
    entries = []
    have_targets = any(e.target is not None for e in examples)
    if have_targets:
        os.makedirs(os.path.join(out_dir, "targets"), exist_ok=True)
    for e in examples:
        trace_rel = f"traces/{e.example_id}.trace"
        save_trace(e.trace, os.path.join(out_dir, trace_rel), meta["program"], e.seed)
        target_rel = None
        if e.target is not None:
            target_rel = f"targets/{e.example_id}.png"
            save_target(e.target, os.path.join(out_dir, target_rel))
        entries.append(
            {
                "id": e.example_id,
                "trace": trace_rel,
                "target": target_rel,
                "seed": e.seed,
                "particles": e.particles,
                "canvas": list(e.canvas_size),
                "start": [e.start.x, e.start.y, e.start.heading],
                "depth_cap": e.depth_cap,
            }
        )
    doc = dict(meta)
    doc["format"] = "guidedproc-dataset"
    doc["examples"] = entries
    doc["skipped"] = skipped
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1)


def load_dataset(dataset_dir, limit: int | None = None):
    """Load a dataset and replay every trace to restore full records.

    A trace that no longer replays raises CorruptExampleError naming the
    example. Returns (examples, meta).
    """
    with open(os.path.join(dataset_dir, "manifest.json")) as f:
        meta = json.load(f)
    if meta.get("format") != "guidedproc-dataset":
        raise ContractError(f"{dataset_dir} is not a dataset directory")
    program = make_program(meta["program"], meta.get("config_path"))
    circuit = None
    if meta.get("constraint") == "circuit":
        c = meta["circuit"]
        circuit = CircuitConstraint(c["tau"], c["sigma"], tuple(c["die_bounds"]) if c["die_bounds"] else None, c["oob_weight"])
    examples = []
    entries = meta["examples"][:limit] if limit else meta["examples"]
    for entry in entries:
        loaded, _ = load_trace(os.path.join(dataset_dir, entry["trace"]))
        target = None
        if entry["target"]:
            target = load_target(os.path.join(dataset_dir, entry["target"]), source_id=entry["id"])
        canvas_size = tuple(entry["canvas"])
        start = TurtleState(*entry["start"])
        constraint = build_constraint(target, circuit)
        try:
            canvas = Canvas.blank(canvas_size[0], canvas_size[1])
            trace, _ = run_program(program, Replay(loaded), None, canvas, start.copy(), depth_cap=entry["depth_cap"])
        except Exception as e:
            raise CorruptExampleError(f"example {entry['id']} does not replay: {e}") from e
        examples.append(
            TrainingExample(
                example_id=entry["id"],
                trace=trace,
                constraint=constraint,
                target=target,
                canvas_size=canvas_size,
                start=start,
                seed=entry["seed"],
                particles=entry["particles"],
                depth_cap=entry["depth_cap"],
                program_key=(meta["program"], meta.get("config_path")),
            )
        )
    return examples, meta


# --- objective and training -----------------------------------------------------


def _session_for(example: TrainingExample, store: ParameterStore) -> GuideSession:
    target_pyr = None
    if store.feature_config.use_target:
        if not isinstance(example.constraint, ShapeConstraint):
            raise ContractError("guide expects target features but the example has no target image")
        target_pyr = example.constraint.target_pyramid()
    return GuideSession(store, target_pyr)


def example_choice_features(example: TrainingExample, store: ParameterStore):
    """Replay one example; returns [(site_id, features, value)] per choice."""
    program = _program_of(example)
    session = _session_for(example, store)
    collected = []

    def observer(rec, features, args):
        collected.append((rec.address.site_id, features, rec.value))

    canvas = Canvas.blank(example.canvas_size[0], example.canvas_size[1])
    try:
        replay_with_guide(program, example.trace, session, canvas, example.start.copy(), observer=observer, depth_cap=example.depth_cap)
    except Exception as e:
        raise CorruptExampleError(f"example {example.example_id} does not replay: {e}") from e
    return collected


_PROGRAM_CACHE: dict[tuple, ModelProgram] = {}


def _program_of(example: TrainingExample) -> ModelProgram:
    key = tuple(example.program_key)
    prog = _PROGRAM_CACHE.get(key)
    if prog is None:
        prog = make_program(key[0], key[1])
        _PROGRAM_CACHE[key] = prog
    return prog


def _objective_from_features(features_per_example, store: ParameterStore) -> float:
    if not features_per_example:
        return math.nan
    total = 0.0
    for feats in features_per_example:
        for site, x, value in feats:
            net = store.nets[site]
            logp, _ = guide_logpdf_grad(net, x, value)
            total += logp
    return total / len(features_per_example)


def objective_estimate(examples, store: ParameterStore) -> float:
    """Mean over examples of the summed guided log density at recorded values.

    Features are recomputed by replaying each trace and re-rendering its
    partial canvases.
    """
    return _objective_from_features([example_choice_features(e, store) for e in examples], store)


def example_grads(feats, store: ParameterStore):
    """Per-site summed gradients for one example's cached choice features."""
    logp_sum = 0.0
    grads: dict[str, np.ndarray] = {}
    for site, x, value in feats:
        net = store.nets[site]
        logp, g = guide_logpdf_grad(net, x, value)
        logp_sum += logp
        if site in grads:
            grads[site] += g
        else:
            grads[site] = g
    return logp_sum, grads


@dataclass
class CurveRow:
    iteration: int
    train_obj: float
    heldout_obj: float


def write_curve(path, rows) -> None:
    with open(path, "w") as f:
        f.write("iteration,train_obj,heldout_obj\n")
        for r in rows:
            f.write(f"{r.iteration},{r.train_obj!r},{r.heldout_obj!r}\n")


def train_guide(examples, store: ParameterStore, cfg: TrainConfig, progress=None):
    """Stochastic gradient ascent, one example per step, Adam(0.75, 0.75, 0.01).

    Features per example are cached after the first replay (bit-identical to
    recomputation; the replay path itself is pure). Returns (store, curve
    rows, per-iteration objectives).
    """
    if not examples:
        raise ContractError("train_guide needs at least one example")
    order = KeyedStream(fold(cfg.seed, TAG_TRAIN, 1)).shuffled(range(len(examples)))
    n_heldout = int(round(cfg.heldout_fraction * len(examples)))
    n_heldout = min(n_heldout, len(examples) - 1)
    heldout = [examples[i] for i in order[:n_heldout]]
    train_set = [examples[i] for i in order[n_heldout:]]

    # one replay per example builds the feature cache (bit-identical to
    # recomputation) and instantiates every site's network
    cache: dict[str, list] = {}
    for e in train_set + heldout:
        cache[e.example_id] = example_choice_features(e, store)
    heldout_feats = [cache[e.example_id] for e in heldout]
    train_feats = [cache[e.example_id] for e in train_set]

    adam = AdamState()
    pick = KeyedStream(fold(cfg.seed, TAG_TRAIN, 2))
    rows = [CurveRow(0, _objective_from_features(train_feats, store), _objective_from_features(heldout_feats, store))]
    history = []
    window = []
    for it in range(1, cfg.iterations + 1):
        e = train_set[pick.randint(len(train_set))]
        logp, grads = example_grads(cache[e.example_id], store)
        for site, g in grads.items():
            net = store.nets[site]
            net.set_flat(adam_step(adam, g, net.flat_params(), key=site))
        history.append(logp)
        window.append(logp)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            rows.append(CurveRow(it, float(np.mean(window)), _objective_from_features(heldout_feats, store)))
            window = []
            if progress is not None:
                progress(it, rows[-1])
    return store, rows, history
