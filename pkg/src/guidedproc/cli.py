"""Command-line surface: gen-data, train, sample, bench, selftest.

Every command takes --seed / --canvas / --out, writes its artifacts under
--out together with a run manifest (flags plus sha256 of each output), and
exits 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import filecmp
import hashlib
import json
import os
import sys
import time

from . import __version__
from .bench import BenchReport, calibrate_equal_time, checkpoint_hash, run_benchmark, run_condition, score_of, time_to_threshold
from .constraints import CircuitConstraint, ShapeConstraint
from .corpus import load_corpus, load_target, synth_corpus, synth_scribble
from .errors import ContractError
from .guide import FeatureConfig, ParameterStore, ablation_config
from .models import make_program
from .raster import write_mask_png
from .rng import KeyedStream, fold
from .smc import SmcConfig, smc_run
from .train import TrainConfig, generate_dataset, load_dataset, save_dataset, start_turtle, train_guide, write_curve


class UsageError(Exception):
    pass


def _parse_canvas(s: str):
    try:
        w, h = s.lower().split("x")
        w, h = int(w), int(h)
    except ValueError as e:
        raise UsageError(f"--canvas expects WxH, got {s!r}") from e
    if w < 8 or h < 8:
        raise UsageError("canvas must be at least 8x8")
    return (w, h)


def _parse_corpus(spec: str, seed: int, canvas):
    """synth:COUNT, synth-cross:COUNT, or a manifest path."""
    if spec.startswith("synth:") or spec.startswith("synth-cross:"):
        kind = "cross" if spec.startswith("synth-cross:") else "scribble"
        try:
            count = int(spec.split(":", 1)[1])
        except ValueError as e:
            raise UsageError(f"bad corpus spec {spec!r}") from e
        if count < 1:
            raise UsageError("corpus count must be >= 1")
        return synth_corpus(kind, count, seed, canvas[0], canvas[1])
    if not os.path.exists(spec):
        raise UsageError(f"corpus manifest {spec!r} does not exist")
    return load_corpus(spec)


def _parse_target(spec: str, seed: int, canvas):
    if spec.startswith("synth:"):
        idx = int(spec.split(":", 1)[1])
        return synth_scribble(KeyedStream(fold(seed, 0xC0, idx)), canvas[0], canvas[1], source_id=f"scribble-{seed}-{idx:04d}")
    return load_target(spec)


def _circuit_from_args(args, canvas) -> CircuitConstraint:
    inset = args.die_inset
    die = (inset, inset, canvas[0] - 1 - inset, canvas[1] - 1 - inset) if inset > 0 else None
    return CircuitConstraint(tau=args.tau, die_bounds=die)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir: str, command: str, argv, outputs) -> None:
    doc = {
        "tool": f"guidedproc {__version__}",
        "command": command,
        "argv": list(argv),
        "outputs": {os.path.relpath(p, out_dir): _sha256(p) for p in sorted(outputs) if os.path.isfile(p)},
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(doc, f, indent=1)


def _collect_files(root: str):
    out = []
    for base, _, names in os.walk(root):
        for n in names:
            if n != "run_manifest.json":
                out.append(os.path.join(base, n))
    return out


# --- commands -------------------------------------------------------------------


def cmd_gen_data(args, argv) -> int:
    if args.examples < 1:
        raise UsageError("--examples must be >= 1")
    if args.particles < 1:
        raise UsageError("--particles must be >= 1")
    canvas = _parse_canvas(args.canvas)
    os.makedirs(args.out, exist_ok=True)
    circuit = None
    targets = None
    if args.constraint == "circuit":
        circuit = _circuit_from_args(args, canvas)
    else:
        targets = _parse_corpus(args.corpus, args.seed, canvas)
    cfg = TrainConfig(num_examples=args.examples, gen_particles=args.particles, seed=args.seed)
    t0 = time.perf_counter()
    examples, skipped = generate_dataset(
        args.program,
        targets,
        cfg,
        canvas,
        config_path=args.model_config,
        circuit=circuit,
        depth_cap=args.depth_cap,
        workers=args.workers,
    )
    elapsed = time.perf_counter() - t0
    meta = {
        "program": args.program,
        "config_path": os.path.abspath(args.model_config) if args.model_config else None,
        "canvas": list(canvas),
        "seed": args.seed,
        "particles": args.particles,
        "constraint": args.constraint,
        "depth_cap": args.depth_cap,
    }
    if circuit is not None:
        meta["circuit"] = {
            "tau": circuit.tau,
            "sigma": circuit.sigma,
            "die_bounds": list(circuit.die_bounds) if circuit.die_bounds else None,
            "oob_weight": circuit.oob_weight,
        }
    save_dataset(args.out, examples, skipped, meta)
    print(f"generated {len(examples)} examples ({len(skipped)} skipped) at {len(examples) / max(elapsed, 1e-9):.2f} examples/s")
    _write_run_manifest(args.out, "gen-data", argv, _collect_files(args.out))
    return 0


def cmd_train(args, argv) -> int:
    if args.iterations < 0:
        raise UsageError("--iterations must be >= 0")
    if args.mixture < 1:
        raise UsageError("--mixture must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    examples, meta = load_dataset(args.dataset, limit=args.limit)
    if not examples:
        raise ContractError("dataset holds no examples")
    config = ablation_config(args.ablation, mixture_k=args.mixture)
    if meta.get("constraint") == "circuit" and config.use_target:
        # circuit datasets carry no target image, so those windows drop out
        config = FeatureConfig(config.use_local, config.use_partial, False, config.mixture_k)
    store = ParameterStore(config, seed=args.seed)
    cfg = TrainConfig(
        num_examples=len(examples),
        iterations=args.iterations,
        seed=args.seed,
        eval_every=args.eval_every,
    )

    def progress(it, row):
        print(f"iteration {it}: train={row.train_obj:.3f} heldout={row.heldout_obj:.3f}")

    store, rows, _ = train_guide(examples, store, cfg, progress=progress if args.verbose else None)
    ck_path = os.path.join(args.out, "checkpoint.json")
    store.save(ck_path)
    write_curve(os.path.join(args.out, "curve.csv"), rows)
    print(f"trained {args.iterations} iterations over {len(examples)} examples; checkpoint {ck_path}")
    _write_run_manifest(args.out, "train", argv, _collect_files(args.out))
    return 0


def cmd_sample(args, argv) -> int:
    if args.particles < 1 and args.equal_time is None:
        raise UsageError("--particles must be >= 1")
    canvas = _parse_canvas(args.canvas)
    if args.equal_time is not None and args.checkpoint:
        raise UsageError("--equal-time applies to unguided sampling")
    os.makedirs(args.out, exist_ok=True)
    program = make_program(args.program, args.model_config)
    guide = ParameterStore.load(args.checkpoint) if args.checkpoint else None
    if args.constraint == "circuit":
        constraint = _circuit_from_args(args, canvas)
        target = None
    else:
        if not args.target:
            raise UsageError("shape sampling needs --target (png path or synth:IDX)")
        target = _parse_target(args.target, args.seed, canvas)
        canvas = (target.mask.width, target.mask.height)
        constraint = ShapeConstraint.from_target(target.mask)

    n = args.particles
    if args.equal_time is not None:
        if guide is not None:
            raise UsageError("--equal-time applies to unguided sampling")

        def runner(k):
            _, wall = run_condition(program, constraint, target, canvas, k, fold(args.seed, 0xE7), depth_cap=args.depth_cap)
            return wall

        n = calibrate_equal_time(args.equal_time, runner)

    start = start_turtle(target, canvas)
    cfg = SmcConfig(num_particles=n, seed=args.seed, depth_cap=args.depth_cap)
    t0 = time.perf_counter()
    result = smc_run(program, constraint, cfg, canvas_size=canvas, start=start, guide=guide)
    wall = time.perf_counter() - t0
    score = score_of(constraint, result.canvas)
    png = os.path.join(args.out, "sample.png")
    write_mask_png(result.canvas, png)
    with open(os.path.join(args.out, "diagnostics.csv"), "w") as f:
        f.write(result.diagnostics.to_csv())
    # wall time goes to stdout only so reruns are byte-identical
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(f"N={n} score={score!r}\n")
    print(f"N={n} seconds={wall:.3f} score={score!r}")
    _write_run_manifest(args.out, "sample", argv, _collect_files(args.out))
    return 0


def cmd_bench(args, argv) -> int:
    canvas = _parse_canvas(args.canvas)
    os.makedirs(args.out, exist_ok=True)
    particle_counts = [int(s) for s in args.particles.split(",") if s]
    if not particle_counts or any(n < 1 for n in particle_counts):
        raise UsageError("--particles expects a comma list of positive ints")
    program = make_program(args.program, args.model_config)

    variants = {}
    skipped = []
    for spec in args.variant:
        if "=" not in spec:
            raise UsageError(f"--variant expects NAME=PATH|unguided, got {spec!r}")
        name, path = spec.split("=", 1)
        if path in ("unguided", "-"):
            variants[name] = (None, "unguided")
        elif not os.path.exists(path):
            skipped.append(name)
            print(f"warning: variant {name} checkpoint {path} missing, skipped", file=sys.stderr)
        else:
            variants[name] = (ParameterStore.load(path), checkpoint_hash(path))
    if not variants:
        raise ContractError("all benchmark variants were skipped")

    circuit = None
    targets = None
    if args.constraint == "circuit":
        circuit = _circuit_from_args(args, canvas)
    else:
        targets = _parse_corpus(args.targets, args.seed, canvas)

    report = run_benchmark(
        program, variants, targets, particle_counts, args.reps, canvas,
        seed=args.seed, depth_cap=args.depth_cap, circuit=circuit,
    )
    with open(os.path.join(args.out, "report.csv"), "w") as f:
        f.write(report.to_csv())
    with open(os.path.join(args.out, "report.json"), "w") as f:
        f.write(report.to_json())
    for row in report.summarize():
        print(
            f"{row['variant']} N={row['n_particles']}: median={row['median_score']:.3f} "
            f"[{row['ci_lo']:.3f}, {row['ci_hi']:.3f}] time={row['median_time']:.3f}s"
        )
    if args.thresholds:
        thresholds = [float(s) for s in args.thresholds.split(",") if s]
        rows = time_to_threshold(
            program, variants, targets, thresholds, canvas,
            reps=args.reps, n_max=max(particle_counts), seed=args.seed,
            depth_cap=args.depth_cap, circuit=circuit,
        )
        with open(os.path.join(args.out, "time_to_threshold.csv"), "w") as f:
            f.write("variant,threshold,n_particles,median_score,median_time\n")
            for r in rows:
                f.write(f"{r['variant']},{r['threshold']},{r['n_particles']},{r['median_score']},{r['median_time']}\n")
    _write_run_manifest(args.out, "bench", argv, _collect_files(args.out))
    return 0


def cmd_selftest(args, argv) -> int:
    """Run gen-data / train / sample twice with fixed seeds; compare bytes."""
    os.makedirs(args.out, exist_ok=True)
    failures = 0
    runs = []
    for tag in ("a", "b"):
        root = os.path.join(args.out, tag)
        data = os.path.join(root, "data")
        ck = os.path.join(root, "train")
        sm = os.path.join(root, "sample")
        rc = main(
            ["gen-data", "--program", "chain", "--corpus", "synth:4", "--examples", "3",
             "--particles", "30", "--seed", "11", "--canvas", "48x48", "--depth-cap", "200",
             "--out", data]
        )
        rc |= main(
            ["train", "--dataset", data, "--iterations", "100", "--eval-every", "50",
             "--seed", "11", "--out", ck]
        )
        rc |= main(
            ["sample", "--program", "chain", "--target", "synth:0", "--checkpoint",
             os.path.join(ck, "checkpoint.json"), "--particles", "5", "--seed", "11",
             "--canvas", "48x48", "--depth-cap", "200", "--out", sm]
        )
        if rc != 0:
            print("selftest: FAIL (pipeline error)")
            return 1
        runs.append(root)

    a_files = sorted(os.path.relpath(p, runs[0]) for p in _collect_files(runs[0]))
    b_files = sorted(os.path.relpath(p, runs[1]) for p in _collect_files(runs[1]))
    if a_files != b_files:
        print("selftest: FAIL (artifact sets differ)")
        return 1
    for rel in a_files:
        same = filecmp.cmp(os.path.join(runs[0], rel), os.path.join(runs[1], rel), shallow=False)
        print(f"{'PASS' if same else 'FAIL'} {rel}")
        if not same:
            failures += 1
    print(f"selftest: {'PASS' if failures == 0 else 'FAIL'} ({len(a_files)} artifacts compared)")
    return 0 if failures == 0 else 1


# --- argument plumbing ------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", default="129x97", help="WxH canvas size (default 129x97)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--depth-cap", type=int, default=60)
    p.add_argument("--model-config", default=None, help="key=value model config file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="guidedproc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate training traces with unguided SMC")
    _add_common(g)
    g.add_argument("--program", choices=["chain", "vine"], required=True)
    g.add_argument("--corpus", default="synth:100", help="synth:N, synth-cross:N, or manifest path")
    g.add_argument("--constraint", choices=["shape", "circuit"], default="shape")
    g.add_argument("--examples", type=int, required=True)
    g.add_argument("--particles", type=int, default=600)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--tau", type=float, default=0.5)
    g.add_argument("--die-inset", type=int, default=0)

    t = sub.add_parser("train", help="train guide networks on a dataset")
    _add_common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--iterations", type=int, default=20000)
    t.add_argument("--eval-every", type=int, default=500)
    t.add_argument("--ablation", choices=["constant", "local", "local+target", "all"], default="all")
    t.add_argument("--mixture", type=int, default=4)
    t.add_argument("--limit", type=int, default=None, help="use only the first N examples")
    t.add_argument("--verbose", action="store_true")

    s = sub.add_parser("sample", help="sample one constrained output with SMC")
    _add_common(s)
    s.add_argument("--program", choices=["chain", "vine"], required=True)
    s.add_argument("--constraint", choices=["shape", "circuit"], default="shape")
    s.add_argument("--target", default=None, help="target png or synth:IDX")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--particles", type=int, default=10)
    s.add_argument("--equal-time", type=float, default=None, help="unguided: pick N to match this wall-clock budget (s)")
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--die-inset", type=int, default=0)

    b = sub.add_parser("bench", help="sweep particle counts over variants and targets")
    _add_common(b)
    b.add_argument("--program", choices=["chain", "vine"], required=True)
    b.add_argument("--constraint", choices=["shape", "circuit"], default="shape")
    b.add_argument("--variant", action="append", required=True, help="NAME=checkpoint.json or NAME=unguided")
    b.add_argument("--targets", default="synth:5", help="synth:N, synth-cross:N, or manifest path")
    b.add_argument("--particles", default="1,5,10,20")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--thresholds", default=None, help="comma list for time-to-threshold bisection")
    b.add_argument("--tau", type=float, default=0.5)
    b.add_argument("--die-inset", type=int, default=0)

    st = sub.add_parser("selftest", help="determinism check: rerun the pipeline twice, compare bytes")
    st.add_argument("--out", required=True)
    return ap


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args, argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure contract: exit 1 with a message
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
