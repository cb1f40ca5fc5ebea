"""Neural guidance: per-site MLPs that produce proposal distributions.

Each lexical random-choice site owns one tiny MLP (one tanh hidden layer
of half the input width). Inputs concatenate normalized scalar arguments
of the choice's enclosing call, multi-resolution 3x3 windows of the
partial output around the current position, and the same windows of the
target image when the constraint has one. Outputs are remapped through
bounding transforms: logistic sigmoid for a flip probability, softmax /
identity / exp for mixture weights, means and stddevs of a Gaussian
mixture. Gradients of the guided log density with respect to all weights
are computed analytically (no autodiff dependency).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterDomainError
from .raster import Pyramid, extract_windows
from .rng import TAG_INIT, KeyedStream, fold, site_key
from .trace import FLIP, GAUSSIAN, gaussian_logpdf

_LOG_2PI = math.log(2.0 * math.pi)
STDDEV_LOGIT_CLAMP = 10.0
WINDOW_FEATURES = 36  # 3x3 windows at 4 pyramid levels, per channel


@dataclass(frozen=True)
class FeatureConfig:
    """Which feature groups feed the networks, and the mixture size K."""

    use_local: bool = True
    use_partial: bool = True
    use_target: bool = True
    mixture_k: int = 4

    def n_features(self, n_args: int, channels: int) -> int:
        n = 0
        if self.use_local:
            n += n_args
        if self.use_partial:
            n += WINDOW_FEATURES * channels
        if self.use_target:
            n += WINDOW_FEATURES * channels
        return n


def ablation_config(name: str, mixture_k: int = 4) -> FeatureConfig:
    """Feature subsets for the standard ablation ladder."""
    table = {
        "constant": (False, False, False),
        "local": (True, False, False),
        "local+target": (True, False, True),
        "all": (True, True, True),
    }
    if name not in table:
        raise ContractError(f"unknown ablation {name!r}; expected one of {sorted(table)}")
    local, partial, target = table[name]
    return FeatureConfig(local, partial, target, mixture_k)


def normalize_args(args) -> np.ndarray:
    """Affine-map (value, lo, hi) tuples into [-1, 1], clamping overshoot."""
    out = np.empty(len(args), dtype=np.float64)
    for i, (v, lo, hi) in enumerate(args):
        if not hi > lo:
            raise ContractError(f"argument range must satisfy hi > lo, got ({lo}, {hi})")
        t = 2.0 * (float(v) - lo) / (hi - lo) - 1.0
        out[i] = -1.0 if t < -1.0 else (1.0 if t > 1.0 else t)
    return out


def assemble_features(args, partial: Pyramid | None, target: Pyramid | None, position, config: FeatureConfig) -> np.ndarray:
    """Concatenate local-state, partial-output and target windows per config."""
    parts = []
    if config.use_local:
        parts.append(normalize_args(args))
    if config.use_partial:
        if partial is None:
            raise ContractError("feature config expects partial-output windows")
        parts.append(extract_windows(partial, position))
    if config.use_target:
        if target is None:
            raise ContractError("feature config expects target windows but no target is present")
        parts.append(extract_windows(target, position))
    if not parts:
        return np.empty(0, dtype=np.float64)
    return np.concatenate(parts)


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def flip_logpmf_from_logit(value: float, logit: float) -> float:
    """log Bernoulli mass computed from the pre-sigmoid logit.

    Finite for every finite logit, unlike log(p)/log(1-p) once the sigmoid
    saturates in float; keeps guided flips absolutely continuous.
    """
    return -_softplus(-logit) if value == 1.0 else -_softplus(logit)


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    if m == -math.inf:
        return -math.inf
    return m + math.log(float(np.sum(np.exp(x - m))))


class MixtureParams:
    """Gaussian mixture proposal: K weights on the simplex, K means, K stddevs.

    A mixture whose components are all bitwise identical evaluates and
    samples through the single-Gaussian path, so a guide configured to
    mirror the prior reproduces it exactly.
    """

    __slots__ = ("weights", "means", "stddevs", "_degenerate", "_cum")

    def __init__(self, weights, means, stddevs):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.stddevs = np.asarray(stddevs, dtype=np.float64)
        if not (self.weights.shape == self.means.shape == self.stddevs.shape):
            raise ParameterDomainError("mixture parameter arrays must share a shape")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ParameterDomainError("mixture weights must sum to 1")
        if np.any(self.weights < 0.0):
            raise ParameterDomainError("mixture weights must be non-negative")
        if not np.all(self.stddevs > 0.0):
            raise ParameterDomainError("mixture stddevs must be > 0")
        self._degenerate = bool(np.all(self.means == self.means[0]) and np.all(self.stddevs == self.stddevs[0]))
        self._cum = None

    @property
    def k(self) -> int:
        return len(self.weights)

    def logpdf(self, value: float) -> float:
        if self._degenerate:
            return gaussian_logpdf(value, float(self.means[0]), float(self.stddevs[0]))
        z = (value - self.means) / self.stddevs
        with np.errstate(divide="ignore"):
            joint = np.log(self.weights) - 0.5 * z * z - np.log(self.stddevs) - 0.5 * _LOG_2PI
        return _logsumexp(joint)

    def sample(self, draw):
        """Draw a value; returns (value, logpdf at the value)."""
        if self._degenerate:
            mu = float(self.means[0])
            sd = float(self.stddevs[0])
            v = mu + sd * draw.normal()
            return v, gaussian_logpdf(v, mu, sd)
        if self._cum is None:
            self._cum = np.cumsum(self.weights)
        u = draw.component_uniform()
        c = min(int(np.searchsorted(self._cum, u, side="right")), self.k - 1)
        v = float(self.means[c]) + float(self.stddevs[c]) * draw.normal()
        return v, self.logpdf(v)


@dataclass(frozen=True)
class OutputSpec:
    """Bounding transforms applied to the raw MLP outputs."""

    kind: str  # "flip" (sigmoid) or "mixture" (softmax / identity / exp)
    k: int = 1

    @property
    def n_outputs(self) -> int:
        return 1 if self.kind == FLIP else 3 * self.k


def bound_outputs(raw: np.ndarray, spec: OutputSpec):
    """Remap raw MLP outputs into valid distribution parameters."""
    if len(raw) != spec.n_outputs:
        raise ContractError(f"expected {spec.n_outputs} raw outputs, got {len(raw)}")
    if spec.kind == FLIP:
        return _sigmoid(float(raw[0]))
    k = spec.k
    a = raw[:k]
    m = raw[k : 2 * k]
    s = np.clip(raw[2 * k :], -STDDEV_LOGIT_CLAMP, STDDEV_LOGIT_CLAMP)
    e = np.exp(a - np.max(a))
    return MixtureParams(e / e.sum(), m.copy(), np.exp(s))


class GuideNetwork:
    """MLP for one choice site: n_f inputs, one tanh hidden layer of n_f//2.

    With no features configured the network degenerates to its output
    biases, which implements the constant-parameters (mean-field) variant.
    """

    __slots__ = ("site_id", "kind", "n_a", "n_f", "output_spec", "prior_params", "W1", "b1", "W2", "b2")

    def __init__(self, site_id, kind, n_a, n_f, output_spec, prior_params):
        self.site_id = site_id
        self.kind = kind
        self.n_a = n_a
        self.n_f = n_f
        self.output_spec = output_spec
        self.prior_params = tuple(prior_params)
        hidden = n_f // 2
        n_p = output_spec.n_outputs
        self.W1 = np.zeros((hidden, n_f), dtype=np.float64)
        self.b1 = np.zeros(hidden, dtype=np.float64)
        self.W2 = np.zeros((n_p, hidden), dtype=np.float64)
        self.b2 = np.zeros(n_p, dtype=np.float64)

    @property
    def hidden(self) -> int:
        return self.n_f // 2

    @property
    def n_p(self) -> int:
        return self.output_spec.n_outputs

    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_flat(self, vec: np.ndarray) -> None:
        if len(vec) != self.n_params:
            raise ContractError(f"flat vector length {len(vec)} != {self.n_params}")
        i = 0
        for arr in (self.W1, self.b1, self.W2, self.b2):
            arr.flat[:] = vec[i : i + arr.size]
            i += arr.size

    def init_weights(self, stream: KeyedStream) -> None:
        """Uniform +-1/sqrt(fan_in) weights; output biases imitate the prior."""
        if self.n_f > 0:
            s1 = 1.0 / math.sqrt(self.n_f)
            for i in range(self.W1.shape[0]):
                for j in range(self.W1.shape[1]):
                    self.W1[i, j] = (2.0 * stream.uniform() - 1.0) * s1
            s2 = 1.0 / math.sqrt(self.hidden)
            for i in range(self.W2.shape[0]):
                for j in range(self.W2.shape[1]):
                    self.W2[i, j] = (2.0 * stream.uniform() - 1.0) * s2
        self.b2[:] = _prior_biases(self.kind, self.output_spec, self.prior_params)


def _prior_biases(kind, output_spec, prior_params) -> np.ndarray:
    """Output biases that make the untrained guide roughly match the prior."""
    if kind == FLIP:
        p = min(max(prior_params[0], 1e-6), 1.0 - 1e-6)
        return np.array([math.log(p / (1.0 - p))])
    k = output_spec.k
    mean, sd = prior_params
    b = np.zeros(3 * k)
    b[k : 2 * k] = mean
    b[2 * k :] = max(-STDDEV_LOGIT_CLAMP, min(STDDEV_LOGIT_CLAMP, math.log(sd)))
    return b


def mlp_forward(net: GuideNetwork, x: np.ndarray) -> np.ndarray:
    if len(x) != net.n_f:
        raise ContractError(f"feature length {len(x)} != network n_f {net.n_f}")
    h = np.tanh(net.W1 @ x + net.b1)
    return net.W2 @ h + net.b2


def _dist_logp_and_raw_grad(net: GuideNetwork, raw: np.ndarray, value: float):
    """Log density of value under bound(raw) and its gradient wrt raw."""
    if net.kind == FLIP:
        z = float(raw[0])
        if value == 1.0:
            logp = -_softplus(-z)
            dz = _sigmoid(-z)
        else:
            logp = -_softplus(z)
            dz = -_sigmoid(z)
        return logp, np.array([dz])
    k = net.output_spec.k
    a = raw[:k]
    m = raw[k : 2 * k]
    s = raw[2 * k :]
    sc = np.clip(s, -STDDEV_LOGIT_CLAMP, STDDEV_LOGIT_CLAMP)
    sig = np.exp(sc)
    wlog = a - _logsumexp(a)
    z = (value - m) / sig
    comp = -0.5 * z * z - sc - 0.5 * _LOG_2PI
    joint = wlog + comp
    logp = _logsumexp(joint)
    r = np.exp(joint - logp)
    da = r - np.exp(wlog)
    dm = r * z / sig
    ds = r * (z * z - 1.0)
    ds = np.where(s == sc, ds, 0.0)  # clamped stddev logits get zero gradient
    return logp, np.concatenate([da, dm, ds])


def guide_logpdf(net: GuideNetwork, x: np.ndarray, value: float) -> float:
    raw = mlp_forward(net, x)
    logp, _ = _dist_logp_and_raw_grad(net, raw, value)
    return logp


def guide_logpdf_grad(net: GuideNetwork, x: np.ndarray, value: float):
    """Exact backprop: returns (logp, flat gradient over W1, b1, W2, b2)."""
    pre = net.W1 @ x + net.b1
    h = np.tanh(pre)
    raw = net.W2 @ h + net.b2
    logp, draw = _dist_logp_and_raw_grad(net, raw, value)
    gb2 = draw
    gW2 = np.outer(draw, h)
    dh = net.W2.T @ draw
    dpre = (1.0 - h * h) * dh
    gb1 = dpre
    gW1 = np.outer(dpre, x)
    return logp, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


class ParameterStore:
    """site_id -> GuideNetwork, created lazily on first encounter."""

    def __init__(self, feature_config: FeatureConfig = FeatureConfig(), seed: int = 0, channels: int = 1):
        self.feature_config = feature_config
        self.seed = seed
        self.channels = channels
        self.nets: dict[str, GuideNetwork] = {}

    def ensure(self, site_id: str, kind: str, prior_params, n_a: int) -> GuideNetwork:
        net = self.nets.get(site_id)
        if net is not None:
            if net.kind != kind or net.n_a != n_a:
                raise ContractError(
                    f"site {site_id!r} previously seen with kind={net.kind}, n_a={net.n_a}; "
                    f"now kind={kind}, n_a={n_a}"
                )
            return net
        n_f = self.feature_config.n_features(n_a, self.channels)
        spec = OutputSpec(FLIP) if kind == FLIP else OutputSpec("mixture", self.feature_config.mixture_k)
        net = GuideNetwork(site_id, kind, n_a, n_f, spec, prior_params)
        net.init_weights(KeyedStream(fold(self.seed, TAG_INIT, site_key(site_id))))
        self.nets[site_id] = net
        return net

    # --- checkpoint io (JSON keeps binary64 exactly via repr round-trip) ---

    def to_json(self) -> str:
        doc = {
            "format": "guidedproc-checkpoint",
            "version": 1,
            "seed": self.seed,
            "channels": self.channels,
            "feature_config": {
                "use_local": self.feature_config.use_local,
                "use_partial": self.feature_config.use_partial,
                "use_target": self.feature_config.use_target,
                "mixture_k": self.feature_config.mixture_k,
            },
            "sites": {},
        }
        for site, net in sorted(self.nets.items()):
            doc["sites"][site] = {
                "kind": net.kind,
                "n_a": net.n_a,
                "n_f": net.n_f,
                "hidden": net.hidden,
                "n_p": net.n_p,
                "k": net.output_spec.k,
                "prior_params": list(net.prior_params),
                "W1": net.W1.ravel().tolist(),
                "b1": net.b1.tolist(),
                "W2": net.W2.ravel().tolist(),
                "b2": net.b2.tolist(),
            }
        return json.dumps(doc, indent=1)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "ParameterStore":
        doc = json.loads(text)
        if doc.get("format") != "guidedproc-checkpoint":
            raise ContractError("not a guide checkpoint document")
        fc = doc["feature_config"]
        store = cls(
            FeatureConfig(fc["use_local"], fc["use_partial"], fc["use_target"], fc["mixture_k"]),
            seed=doc["seed"],
            channels=doc["channels"],
        )
        for site, d in doc["sites"].items():
            spec = OutputSpec(FLIP) if d["kind"] == FLIP else OutputSpec("mixture", d["k"])
            net = GuideNetwork(site, d["kind"], d["n_a"], d["n_f"], spec, tuple(d["prior_params"]))
            net.W1 = np.array(d["W1"], dtype=np.float64).reshape(net.hidden, net.n_f)
            net.b1 = np.array(d["b1"], dtype=np.float64)
            net.W2 = np.array(d["W2"], dtype=np.float64).reshape(net.n_p, net.hidden)
            net.b2 = np.array(d["b2"], dtype=np.float64)
            store.nets[site] = net
        return store

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path) as f:
            return cls.from_json(f.read())


def _invert_monotone(f, target: float, x0: float, max_ulps: int = 64) -> float:
    """x near x0 with f(x) == target, exactly when a binary64 preimage
    exists (it usually does; double rounding occasionally skips the value,
    in which case the nearest neighbor is returned)."""
    best = x0
    best_err = abs(f(x0) - target)
    if best_err == 0.0:
        return x0
    lo = hi = x0
    for _ in range(max_ulps):
        for x in (lo := math.nextafter(lo, -math.inf), hi := math.nextafter(hi, math.inf)):
            err = abs(f(x) - target)
            if err == 0.0:
                return x
            if err < best_err:
                best, best_err = x, err
    return best


def make_prior_equivalent_store(site_info, config: FeatureConfig = FeatureConfig(), channels: int = 1) -> ParameterStore:
    """A checkpoint whose proposals equal the prior bit-for-bit.

    site_info maps site_id -> (kind, prior_params, n_a). Weights are zero;
    output biases invert the bounding transforms exactly (searching a few
    ulps where exp/sigmoid round trips are inexact).
    """
    store = ParameterStore(config, seed=0, channels=channels)
    for site_id, (kind, prior_params, n_a) in site_info.items():
        n_f = config.n_features(n_a, channels)
        spec = OutputSpec(FLIP) if kind == FLIP else OutputSpec("mixture", config.mixture_k)
        net = GuideNetwork(site_id, kind, n_a, n_f, spec, prior_params)
        if kind == FLIP:
            p = prior_params[0]
            if not 0.0 < p < 1.0:
                raise ContractError(f"cannot build a prior-equivalent sigmoid for p={p}")
            net.b2[0] = _invert_monotone(_sigmoid, p, math.log(p / (1.0 - p)))
        else:
            mean, sd = prior_params
            k = spec.k
            net.b2[k : 2 * k] = mean
            net.b2[2 * k :] = _invert_monotone(math.exp, sd, math.log(sd))
        store.nets[site_id] = net
    return store
