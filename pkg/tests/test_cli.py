import json
import math
import os

import numpy as np
import pytest

from guidedproc.bench import BenchRecord, BenchReport, bootstrap_ci, calibrate_equal_time
from guidedproc.cli import main
from guidedproc.raster import read_mask_png


def run_ok(argv):
    rc = main(argv)
    assert rc == 0, f"command failed: {argv}"


def dir_bytes(root):
    out = {}
    for base, _, names in os.walk(root):
        for n in sorted(names):
            if n == "run_manifest.json":
                continue  # records the (differing) --out path by design
            p = os.path.join(base, n)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = f.read()
    return out


GEN = ["gen-data", "--program", "chain", "--corpus", "synth:4", "--examples", "3",
       "--particles", "25", "--seed", "7", "--canvas", "48x48", "--depth-cap", "150"]


class TestGenData:
    def test_count_contract(self, tmp_path):
        out = tmp_path / "data"
        run_ok(GEN + ["--out", str(out)])
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["examples"]) == 3
        assert sorted(os.listdir(out / "traces")) == ["ex00000.trace", "ex00001.trace", "ex00002.trace"]

    def test_byte_identical_reruns(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        run_ok(GEN + ["--out", str(a)])
        run_ok(GEN + ["--out", str(b)])
        assert dir_bytes(a) == dir_bytes(b)

    def test_zero_examples_usage_error(self, tmp_path):
        rc = main(GEN[:8] + ["--examples", "0", "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_unknown_flag_exits_2(self, tmp_path):
        rc = main(GEN + ["--out", str(tmp_path / "x"), "--nonsense"])
        assert rc == 2


class TestTrain:
    @pytest.fixture()
    def dataset(self, tmp_path):
        out = tmp_path / "data"
        run_ok(GEN + ["--out", str(out)])
        return out

    def test_zero_iterations_equals_initialization(self, dataset, tmp_path):
        c1 = tmp_path / "ck1"
        c2 = tmp_path / "ck2"
        run_ok(["train", "--dataset", str(dataset), "--iterations", "0", "--seed", "3", "--out", str(c1)])
        run_ok(["train", "--dataset", str(dataset), "--iterations", "0", "--seed", "3", "--out", str(c2)])
        assert (c1 / "checkpoint.json").read_bytes() == (c2 / "checkpoint.json").read_bytes()
        rows = (c1 / "curve.csv").read_text().strip().splitlines()
        assert rows[0] == "iteration,train_obj,heldout_obj"
        assert len(rows) == 2  # just the iteration-0 row

    def test_constant_ablation_bias_only(self, dataset, tmp_path):
        out = tmp_path / "ck"
        run_ok(["train", "--dataset", str(dataset), "--iterations", "20", "--ablation", "constant", "--out", str(out)])
        doc = json.loads((out / "checkpoint.json").read_text())
        for site, net in doc["sites"].items():
            assert net["n_f"] == 0
            assert net["W1"] == [] and net["W2"] == [] and net["b1"] == []
            assert len(net["b2"]) == net["n_p"]

    def test_heldout_curve_finite(self, tmp_path):
        data = tmp_path / "data50"
        run_ok(["gen-data", "--program", "chain", "--corpus", "synth:20", "--examples", "50",
                "--particles", "20", "--seed", "5", "--canvas", "48x48", "--depth-cap", "150",
                "--out", str(data)])
        out = tmp_path / "ck"
        run_ok(["train", "--dataset", str(data), "--iterations", "200", "--eval-every", "50", "--out", str(out)])
        rows = (out / "curve.csv").read_text().strip().splitlines()[1:]
        assert len(rows) == 5
        for row in rows:
            it, tr, ho = row.split(",")
            assert math.isfinite(float(tr))
            assert math.isfinite(float(ho))

    def test_mixture_flag_controls_k(self, dataset, tmp_path):
        out = tmp_path / "ck"
        run_ok(["train", "--dataset", str(dataset), "--iterations", "0", "--mixture", "1", "--out", str(out)])
        doc = json.loads((out / "checkpoint.json").read_text())
        assert doc["feature_config"]["mixture_k"] == 1
        assert doc["sites"]["turn"]["n_p"] == 3


class TestSample:
    def test_metrics_score_recomputable_from_png(self, tmp_path):
        out = tmp_path / "s"
        run_ok(["sample", "--program", "chain", "--target", "synth:3", "--particles", "8",
                "--seed", "4", "--canvas", "48x48", "--depth-cap", "150", "--out", str(out)])
        metrics = (out / "metrics.txt").read_text().strip()
        score = float(metrics.split("score=")[1])
        from guidedproc.cli import _parse_target
        from guidedproc.constraints import ShapeConstraint

        target = _parse_target("synth:3", 4, (48, 48))
        constraint = ShapeConstraint.from_target(target.mask)
        img = read_mask_png(out / "sample.png")
        assert constraint.normalized_similarity(img) == score

    def test_guided_prior_equivalent_matches_unguided(self, tmp_path):
        from guidedproc.models import chain_program
        from guidedproc.smc import prior_equivalent_guide
        from guidedproc.trace import TurtleState

        ck = tmp_path / "prior_ck.json"
        store = prior_equivalent_guide(chain_program(), (48, 48), TurtleState(24, 24), depth_cap=150)
        store.save(ck)
        a = tmp_path / "a"
        b = tmp_path / "b"
        base = ["sample", "--program", "chain", "--target", "synth:3", "--particles", "6",
                "--seed", "4", "--canvas", "48x48", "--depth-cap", "150"]
        run_ok(base + ["--out", str(a)])
        run_ok(base + ["--checkpoint", str(ck), "--out", str(b)])
        assert (a / "sample.png").read_bytes() == (b / "sample.png").read_bytes()

    def test_equal_time_calibration_within_20_percent(self, tmp_path, capsys):
        budget = 0.4
        out = tmp_path / "s"
        run_ok(["sample", "--program", "chain", "--target", "synth:5", "--equal-time", str(budget),
                "--seed", "6", "--canvas", "48x48", "--depth-cap", "150", "--out", str(out)])
        stdout = capsys.readouterr().out
        seconds = float(stdout.split("seconds=")[1].split()[0])
        assert abs(seconds - budget) <= 0.2 * budget + 0.05

    def test_equal_time_rejects_guided(self, tmp_path):
        rc = main(["sample", "--program", "chain", "--target", "synth:3", "--equal-time", "1",
                   "--checkpoint", "nope.json", "--canvas", "48x48", "--out", str(tmp_path / "x")])
        assert rc == 2


class TestBenchReport:
    def _records(self):
        recs = []
        for i in range(9):
            recs.append(BenchRecord("v", 10, f"t{i % 3}", i, 0.1 + 0.01 * i, 0.5 + 0.04 * i, "h"))
        return recs

    def test_single_record_report(self):
        rep = BenchReport([BenchRecord("v", 5, "t", 1, 0.2, 0.7, "h")])
        rows = rep.summarize()
        assert len(rows) == 1
        assert rows[0]["median_score"] == 0.7
        assert rows[0]["ci_lo"] <= 0.7 <= rows[0]["ci_hi"]

    def test_median_invariant_under_permutation(self):
        recs = self._records()
        a = BenchReport(list(recs)).summarize()
        b = BenchReport(list(reversed(recs))).summarize()
        assert a == b

    def test_bootstrap_bounds_contain_median(self):
        recs = self._records()
        rows = BenchReport(recs).summarize()
        for row in rows:
            assert row["ci_lo"] <= row["median_score"] <= row["ci_hi"]

    def test_bootstrap_ci_orders(self):
        lo, hi = bootstrap_ci([0.2, 0.5, 0.9, 0.4, 0.6])
        assert lo <= hi


class TestBenchCommand:
    def test_sweep_and_report(self, tmp_path):
        out = tmp_path / "b"
        run_ok(["bench", "--program", "chain", "--variant", "unguided=-", "--targets", "synth:2",
                "--particles", "2,4", "--reps", "2", "--seed", "3", "--canvas", "48x48",
                "--depth-cap", "150", "--out", str(out)])
        lines = (out / "report.csv").read_text().strip().splitlines()
        assert lines[0].startswith("variant,n_particles,target_id")
        assert len(lines) == 1 + 2 * 2 * 2
        doc = json.loads((out / "report.json").read_text())
        assert {r["n_particles"] for r in doc["summary"]} == {2, 4}

    def test_record_reproducible_from_seed(self, tmp_path):
        out = tmp_path / "b"
        run_ok(["bench", "--program", "chain", "--variant", "unguided=-", "--targets", "synth:1",
                "--particles", "3", "--reps", "1", "--seed", "3", "--canvas", "48x48",
                "--depth-cap", "150", "--out", str(out)])
        line = (out / "report.csv").read_text().strip().splitlines()[1]
        parts = line.split(",")
        seed, score = int(parts[3]), float(parts[5])
        from guidedproc.bench import run_condition
        from guidedproc.cli import _parse_corpus
        from guidedproc.constraints import ShapeConstraint
        from guidedproc.models import make_program

        target = _parse_corpus("synth:1", 3, (48, 48))[0]
        got, _ = run_condition(make_program("chain"), ShapeConstraint.from_target(target.mask),
                               target, (48, 48), 3, seed, depth_cap=150)
        assert got == score

    def test_missing_checkpoint_skipped_all_fails(self, tmp_path):
        rc = main(["bench", "--program", "chain", "--variant", "g=missing.json", "--targets", "synth:1",
                   "--particles", "2", "--reps", "1", "--canvas", "48x48", "--out", str(tmp_path / "b")])
        assert rc == 1

    def test_missing_variant_skipped_others_run(self, tmp_path, capsys):
        out = tmp_path / "b"
        rc = main(["bench", "--program", "chain", "--variant", "g=missing.json", "--variant", "unguided=-",
                   "--targets", "synth:1", "--particles", "2", "--reps", "1", "--canvas", "48x48",
                   "--depth-cap", "150", "--out", str(out)])
        assert rc == 0
        assert "skipped" in capsys.readouterr().err
        lines = (out / "report.csv").read_text().strip().splitlines()
        assert all(line.startswith("unguided,") for line in lines[1:])


class TestRunManifest:
    def test_outputs_hashed(self, tmp_path):
        import hashlib

        out = tmp_path / "data"
        run_ok(GEN + ["--out", str(out)])
        doc = json.loads((out / "run_manifest.json").read_text())
        assert doc["command"] == "gen-data"
        assert "--seed" in doc["argv"]
        assert "manifest.json" in doc["outputs"]
        digest = hashlib.sha256((out / "manifest.json").read_bytes()).hexdigest()
        assert doc["outputs"]["manifest.json"] == digest


def test_calibrate_equal_time_unit():
    calls = []

    def runner(n):
        calls.append(n)
        return 0.01 * n  # perfectly linear cost

    n = calibrate_equal_time(0.5, runner, n_probe=5)
    assert abs(0.01 * n - 0.5) <= 0.1 * 0.5


@pytest.mark.slow
def test_selftest_roundtrip(tmp_path):
    rc = main(["selftest", "--out", str(tmp_path / "st")])
    assert rc == 0
