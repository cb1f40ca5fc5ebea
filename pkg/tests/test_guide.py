import json
import math

import numpy as np
import pytest

from guidedproc.errors import ContractError, ParameterDomainError
from guidedproc.guide import (
    FeatureConfig,
    GuideNetwork,
    MixtureParams,
    OutputSpec,
    ParameterStore,
    ablation_config,
    assemble_features,
    bound_outputs,
    flip_logpmf_from_logit,
    guide_logpdf_grad,
    make_prior_equivalent_store,
    mlp_forward,
    normalize_args,
)
from guidedproc.raster import Canvas, build_pyramid
from guidedproc.rng import KeyedStream, fold
from guidedproc.trace import FLIP, GAUSSIAN, gaussian_logpdf


def random_net(stream, kind=GAUSSIAN, n_f=6, k=4, scale=0.8):
    spec = OutputSpec(FLIP) if kind == FLIP else OutputSpec("mixture", k)
    prior = (0.5,) if kind == FLIP else (0.0, 0.4)
    net = GuideNetwork("s", kind, n_f, n_f, spec, prior)
    flat = np.array([(stream.uniform() * 2 - 1) * scale for _ in range(net.n_params)])
    net.set_flat(flat)
    return net


class TestFeatures:
    def test_affine_map(self):
        out = normalize_args([(96.75, 0.0, 129.0)])
        assert out[0] == pytest.approx(0.5, abs=1e-12)

    def test_angle_extremes(self):
        out = normalize_args([(math.pi, -math.pi, math.pi), (-math.pi, -math.pi, math.pi)])
        assert out[0] == 1.0
        assert out[1] == -1.0

    def test_out_of_range_clamps(self):
        out = normalize_args([(200.0, 0.0, 100.0), (-5.0, 0.0, 100.0)])
        assert out[0] == 1.0
        assert out[1] == -1.0

    def test_zero_args_constant_canvases(self):
        zero = build_pyramid(Canvas.blank(16, 16))
        f = assemble_features([], zero, zero, (8, 8), FeatureConfig())
        assert f.shape == (72,)
        assert np.all(f == 0.0)

    def test_ablation_lengths(self):
        p = build_pyramid(Canvas.blank(16, 16))
        args = [(1.0, 0.0, 2.0)] * 3
        assert assemble_features(args, p, p, (0, 0), ablation_config("constant")).shape == (0,)
        assert assemble_features(args, None, None, (0, 0), ablation_config("local")).shape == (3,)
        assert assemble_features(args, None, p, (0, 0), ablation_config("local+target")).shape == (39,)
        assert assemble_features(args, p, p, (0, 0), ablation_config("all")).shape == (75,)

    def test_missing_target_rejected(self):
        p = build_pyramid(Canvas.blank(8, 8))
        with pytest.raises(ContractError):
            assemble_features([], p, None, (0, 0), FeatureConfig())


class TestMlpForward:
    def test_zero_net(self):
        net = GuideNetwork("s", FLIP, 4, 4, OutputSpec(FLIP), (0.5,))
        assert np.all(mlp_forward(net, np.zeros(4)) == 0.0)

    def test_one_one_one_identity_at_zero(self):
        net = GuideNetwork("s", FLIP, 2, 2, OutputSpec(FLIP), (0.5,))
        net.W1[:] = 1.0
        net.W2[:] = 1.0
        assert mlp_forward(net, np.zeros(2))[0] == 0.0

    def test_matches_straight_line_oracle(self):
        stream = KeyedStream(fold(41))
        net = random_net(stream, kind=GAUSSIAN, n_f=6, k=1)
        x = np.array([stream.normal() for _ in range(6)])
        want = net.W2 @ np.tanh(net.W1 @ x + net.b1) + net.b2
        got = mlp_forward(net, x)
        assert np.allclose(got, want, atol=1e-12)

    def test_dim_mismatch(self):
        net = GuideNetwork("s", FLIP, 4, 4, OutputSpec(FLIP), (0.5,))
        with pytest.raises(ContractError):
            mlp_forward(net, np.zeros(5))


class TestBoundOutputs:
    def test_flip_raw_zero(self):
        assert bound_outputs(np.zeros(1), OutputSpec(FLIP)) == 0.5

    def test_mixture_all_zero(self):
        p = bound_outputs(np.zeros(12), OutputSpec("mixture", 4))
        assert np.allclose(p.weights, 0.25)
        assert np.all(p.means == 0.0)
        assert np.all(p.stddevs == 1.0)

    def test_stddev_logit_one(self):
        p = bound_outputs(np.array([0.0, 0.0, 1.0]), OutputSpec("mixture", 1))
        assert p.stddevs[0] == pytest.approx(math.e, abs=1e-7)

    def test_overflow_guard(self):
        p = bound_outputs(np.array([0.0, 0.0, 50.0]), OutputSpec("mixture", 1))
        assert p.stddevs[0] == pytest.approx(math.exp(10.0))
        p = bound_outputs(np.array([0.0, 0.0, -50.0]), OutputSpec("mixture", 1))
        assert p.stddevs[0] == pytest.approx(math.exp(-10.0))

    def test_fuzzed_raws_give_valid_params(self):
        stream = KeyedStream(fold(97))
        for _ in range(300):
            raw = np.array([(stream.uniform() * 100 - 50) for _ in range(12)])
            p = bound_outputs(raw, OutputSpec("mixture", 4))
            assert abs(p.weights.sum() - 1.0) <= 1e-9
            assert np.all(p.stddevs > 0)
            raw1 = np.array([stream.uniform() * 100 - 50])
            prob = bound_outputs(raw1, OutputSpec(FLIP))
            assert 0.0 <= prob <= 1.0


class TestMixture:
    def test_single_component_equals_gaussian(self):
        p = MixtureParams([1.0], [0.7], [0.3])
        for v in (-1.0, 0.7, 2.2):
            assert p.logpdf(v) == gaussian_logpdf(v, 0.7, 0.3)

    def test_identical_components_collapse(self):
        p = MixtureParams([0.1, 0.9], [0.5, 0.5], [0.2, 0.2])
        for v in (-0.4, 0.5, 1.9):
            assert p.logpdf(v) == gaussian_logpdf(v, 0.5, 0.2)

    @pytest.mark.parametrize("seed", range(6))
    def test_density_integrates_to_one(self, seed):
        stream = KeyedStream(fold(55, seed))
        k = 4
        means = np.array([stream.normal() * 2 for _ in range(k)])
        stds = np.array([0.05 + stream.uniform() for _ in range(k)])
        w = np.array([stream.uniform() + 0.05 for _ in range(k)])
        w /= w.sum()
        p = MixtureParams(w, means, stds)
        lo = float((means - 8 * stds).min())
        hi = float((means + 8 * stds).max())
        xs = np.linspace(lo, hi, 20001)
        ys = np.exp([p.logpdf(float(x)) for x in xs])
        assert np.trapezoid(ys, xs) == pytest.approx(1.0, abs=1e-3)

    def test_invalid_params(self):
        with pytest.raises(ParameterDomainError):
            MixtureParams([0.5, 0.4], [0, 0], [1, 1])  # weights sum != 1
        with pytest.raises(ParameterDomainError):
            MixtureParams([0.5, 0.5], [0, 0], [1, 0])  # stddev not positive

    def test_sampling_statistics(self):
        p = MixtureParams([0.3, 0.7], [-2.0, 3.0], [0.1, 0.1])

        class D:
            def __init__(self, s):
                self.stream = KeyedStream(fold(12, s))

            def normal(self):
                return self.stream.normal()

            def component_uniform(self):
                return self.stream.uniform()

        vals = np.array([p.sample(D(i))[0] for i in range(4000)])
        near_hi = float(np.mean(vals > 0))
        assert near_hi == pytest.approx(0.7, abs=0.03)
        v, lp = p.sample(D(0))
        assert lp == p.logpdf(v)


def flat_grad_fd(net, x, value, h=1e-5):
    flat = net.flat_params()
    out = np.zeros_like(flat)
    for i in range(len(flat)):
        up = flat.copy()
        up[i] += h
        dn = flat.copy()
        dn[i] -= h
        net.set_flat(up)
        lp_up, _ = guide_logpdf_grad(net, x, value)
        net.set_flat(dn)
        lp_dn, _ = guide_logpdf_grad(net, x, value)
        out[i] = (lp_up - lp_dn) / (2 * h)
    net.set_flat(flat)
    return out


class TestGradients:
    def test_flip_bias_gradient_at_zero(self):
        net = GuideNetwork("s", FLIP, 2, 2, OutputSpec(FLIP), (0.5,))
        logp, grad = guide_logpdf_grad(net, np.zeros(2), 1.0)
        assert logp == pytest.approx(math.log(0.5), abs=1e-12)
        assert grad[-1] == pytest.approx(0.5, abs=1e-12)  # d/db2 = 1 - sigmoid(0)

    def test_weight_and_mean_gradients_vanish_at_symmetric_center(self):
        # symmetric components around the value: the weight-logit and mean
        # blocks are stationary (the stddev block is not, by calculus)
        net = GuideNetwork("s", GAUSSIAN, 0, 0, OutputSpec("mixture", 2), (0.0, 1.0))
        net.b2[:] = np.array([0.0, 0.0, -0.5, 0.5, 0.0, 0.0])
        logp, grad = guide_logpdf_grad(net, np.zeros(0), 0.0)
        k = 2
        da = grad[-3 * k : -2 * k]
        dm = grad[-2 * k : -k]
        assert np.allclose(da, 0.0, atol=1e-12)
        assert dm[0] == pytest.approx(-dm[1], abs=1e-12)
        assert dm.sum() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("kind,value", [(FLIP, 1.0), (FLIP, 0.0), (GAUSSIAN, 0.3), (GAUSSIAN, -1.2)])
    def test_matches_finite_differences(self, kind, value):
        stream = KeyedStream(fold(13, 1 if kind == FLIP else 2, int(value * 10) & 0xFF))
        net = random_net(stream, kind=kind, n_f=5, k=3)
        x = np.array([stream.normal() for _ in range(5)])
        _, grad = guide_logpdf_grad(net, x, value)
        fd = flat_grad_fd(net, x, value)
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grad - fd) / denom) < 1e-4

    def test_stable_flip_logpmf(self):
        assert flip_logpmf_from_logit(1.0, 0.0) == pytest.approx(math.log(0.5), abs=1e-12)
        assert math.isfinite(flip_logpmf_from_logit(0.0, 60.0))
        assert math.isfinite(flip_logpmf_from_logit(1.0, -60.0))


class TestAbsoluteContinuity:
    def test_mixture_logpdf_finite_for_extreme_values(self):
        stream = KeyedStream(fold(71))
        for _ in range(50):
            raw = np.array([(stream.uniform() * 100 - 50) for _ in range(12)])
            p = bound_outputs(raw, OutputSpec("mixture", 4))
            for v in (-1e3, 0.0, 1e3):
                assert math.isfinite(p.logpdf(v))


class TestParameterStore:
    def test_lazy_creation_and_reuse(self):
        store = ParameterStore(FeatureConfig(), seed=5)
        a = store.ensure("turn", GAUSSIAN, (0.0, 0.4), 3)
        b = store.ensure("turn", GAUSSIAN, (0.0, 0.4), 3)
        assert a is b
        assert a.n_f == 3 + 72
        assert a.hidden == a.n_f // 2

    def test_inconsistent_site_rejected(self):
        store = ParameterStore(FeatureConfig(), seed=5)
        store.ensure("turn", GAUSSIAN, (0.0, 0.4), 3)
        with pytest.raises(ContractError):
            store.ensure("turn", FLIP, (0.5,), 3)
        with pytest.raises(ContractError):
            store.ensure("turn", GAUSSIAN, (0.0, 0.4), 4)

    def test_init_biases_imitate_prior(self):
        store = ParameterStore(FeatureConfig(mixture_k=4), seed=5)
        net = store.ensure("turn", GAUSSIAN, (0.25, 0.4), 3)
        k = 4
        assert np.allclose(net.b2[k : 2 * k], 0.25)
        assert np.allclose(np.exp(net.b2[2 * k :]), 0.4, rtol=1e-12)
        fnet = store.ensure("go", FLIP, (0.3,), 3)
        from guidedproc.guide import _sigmoid

        assert _sigmoid(fnet.b2[0]) == pytest.approx(0.3, abs=1e-12)

    def test_init_deterministic_regardless_of_order(self):
        s1 = ParameterStore(FeatureConfig(), seed=5)
        s1.ensure("a", GAUSSIAN, (0.0, 1.0), 2)
        s1.ensure("b", FLIP, (0.5,), 2)
        s2 = ParameterStore(FeatureConfig(), seed=5)
        s2.ensure("b", FLIP, (0.5,), 2)
        s2.ensure("a", GAUSSIAN, (0.0, 1.0), 2)
        assert np.array_equal(s1.nets["a"].flat_params(), s2.nets["a"].flat_params())
        assert np.array_equal(s1.nets["b"].flat_params(), s2.nets["b"].flat_params())

    def test_constant_ablation_is_bias_only(self):
        store = ParameterStore(ablation_config("constant"), seed=1)
        net = store.ensure("turn", GAUSSIAN, (0.0, 0.4), 3)
        assert net.n_f == 0
        assert net.W1.size == 0 and net.W2.size == 0
        raw = mlp_forward(net, np.empty(0))
        assert np.array_equal(raw, net.b2)

    def test_checkpoint_round_trip_binary64_exact(self, tmp_path):
        store = ParameterStore(FeatureConfig(mixture_k=3), seed=11)
        store.ensure("turn", GAUSSIAN, (0.0, math.pi / 8), 3)
        store.ensure("continue", FLIP, (0.5,), 3)
        path = tmp_path / "ck.json"
        store.save(path)
        back = ParameterStore.load(path)
        assert back.feature_config == store.feature_config
        for site in store.nets:
            for attr in ("W1", "b1", "W2", "b2"):
                assert np.array_equal(getattr(back.nets[site], attr), getattr(store.nets[site], attr))
        # document self-description
        doc = json.loads(path.read_text())
        assert doc["sites"]["turn"]["n_p"] == 9
        assert doc["sites"]["turn"]["hidden"] == doc["sites"]["turn"]["n_f"] // 2


class TestPriorEquivalentStore:
    def test_exact_match_to_prior(self):
        info = {
            "turn": (GAUSSIAN, (0.0, math.pi / 8), 3),
            "fork": (GAUSSIAN, (math.pi / 5, math.pi / 10), 3),
            "continue": (FLIP, (0.5,), 3),
            "leaf": (FLIP, (0.35,), 3),
        }
        store = make_prior_equivalent_store(info, FeatureConfig(), channels=1)
        zero_pyr = build_pyramid(Canvas.blank(16, 16))
        for site, (kind, prior, n_a) in info.items():
            net = store.nets[site]
            x = assemble_features([(0.0, -1.0, 1.0)] * n_a, zero_pyr, zero_pyr, (8, 8), store.feature_config)
            raw = mlp_forward(net, x)
            params = bound_outputs(raw, net.output_spec)
            if kind == FLIP:
                if prior[0] == 0.5:
                    assert params == 0.5  # bitwise: sigmoid(0) is exact
                else:
                    # double rounding can skip the exact value; nearest ulp
                    assert params == pytest.approx(prior[0], abs=2e-16)
            else:
                assert np.all(params.means == prior[0])
                assert np.all(params.stddevs == prior[1])
                for v in (-0.3, 0.0, 1.1):
                    assert params.logpdf(v) == gaussian_logpdf(v, prior[0], prior[1])
