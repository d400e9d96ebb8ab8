"""
Conditional temporal sigmoid belief network: generative model p(V, H | Y)
Parameter layout, per-step conditionals, log-joint, gradients and ancestral sampling
"""
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from engine.cond_weight import CondWeight, DenseWeight, make_cond_weight
from engine.errors import ConfigError, ShapeError
from engine.rng import child_streams

LOG_2PI = float(np.log(2.0 * np.pi))
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class ObsKind(str, Enum):
    """Observation family of the visible units"""

    REAL = "real"
    BINARY = "binary"
    COUNT = "count"

    @classmethod
    def parse(cls, value: Union[str, "ObsKind"]) -> "ObsKind":
        if isinstance(value, ObsKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown observation kind '{value}'", ["obs_kind"])


@dataclass(frozen=True)
class Dims:
    """
    Model dimensions

    M: visible size, S: side-information size, layer_sizes: hidden size per
    layer (bottom first), order: lag depth n, factors: F for factored weights
    """

    M: int
    S: int
    layer_sizes: Tuple[int, ...]
    order: int = 1
    factors: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(j) for j in self.layer_sizes))
        bad = []
        for name in ("M", "S", "order"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                bad.append(name)
        if not self.layer_sizes or any(j < 1 for j in self.layer_sizes):
            bad.append("layer_sizes")
        if self.factors is not None and self.factors < 1:
            bad.append("factors")
        if bad:
            raise ConfigError("dimensions must be positive integers", bad)

    @property
    def J(self) -> int:
        return self.layer_sizes[0]

    @property
    def L(self) -> int:
        return len(self.layer_sizes)

    @property
    def n(self) -> int:
        return self.order

    def to_dict(self) -> Dict:
        return {
            "M": self.M,
            "S": self.S,
            "layer_sizes": list(self.layer_sizes),
            "order": self.order,
            "factors": self.factors,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Dims":
        return cls(
            M=int(data["M"]),
            S=int(data["S"]),
            layer_sizes=tuple(data["layer_sizes"]),
            order=int(data.get("order", 1)),
            factors=None if data.get("factors") is None else int(data["factors"]),
        )


ENCODINGS = ("one_hot", "convex", "real")


@dataclass
class StyleSchedule:
    """
    Side information over time, T x S, with its encoding tag
    """

    Y: np.ndarray
    encoding: str = "one_hot"

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"unknown schedule encoding '{self.encoding}'", ["encoding"])
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("side information must be finite")
        if self.encoding == "one_hot":
            ones = self.Y == 1.0
            zeros = self.Y == 0.0
            if not (np.all(ones | zeros) and np.all(ones.sum(axis=1) == 1)):
                raise ValueError("one-hot schedule rows must contain exactly one 1")
        elif self.encoding == "convex":
            if np.any(self.Y < 0) or not np.allclose(self.Y.sum(axis=1), 1.0, rtol=0, atol=1e-9):
                raise ValueError("convex schedule rows must be nonnegative and sum to 1")

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    @property
    def S(self) -> int:
        return self.Y.shape[1]

    @classmethod
    def constant(cls, style: int, T: int, S: int) -> "StyleSchedule":
        Y = np.zeros((T, S))
        Y[:, style] = 1.0
        return cls(Y, "one_hot")

    @classmethod
    def from_indices(cls, indices: Sequence[int], S: int) -> "StyleSchedule":
        indices = np.asarray(indices, dtype=int)
        if np.any(indices < 0) or np.any(indices >= S):
            raise ValueError(f"style index out of range for {S} styles")
        return cls(np.eye(S)[indices], "one_hot")


def infer_encoding(Y: np.ndarray) -> str:
    """Pick the tightest encoding tag a side-information matrix satisfies"""
    Y = np.asarray(Y, dtype=np.float64)
    if np.all((Y == 0.0) | (Y == 1.0)) and np.all(Y.sum(axis=1) == 1.0):
        return "one_hot"
    if np.all(Y >= 0) and np.allclose(Y.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        return "convex"
    return "real"


@dataclass
class HiddenStates:
    """
    Binary hidden states per layer, each T x J_l (time-major)
    """

    layers: List[np.ndarray]

    def __post_init__(self):
        self.layers = [np.asarray(h, dtype=np.float64) for h in self.layers]

    @property
    def T(self) -> int:
        return self.layers[0].shape[-2]

    def validate(self):
        for h in self.layers:
            if not np.all((h == 0.0) | (h == 1.0)):
                raise ValueError("hidden states must be binary")
            if h.shape[-2] != self.T:
                raise ShapeError("hidden layers have different lengths", ["T"])


def layer_roles(index: int) -> Tuple[str, str, str, str]:
    """Names of (self-lag, lower-lag, top-down, bias) weights for a 0-based layer index"""
    if index == 0:
        return "W1", "W3", "W5", "B"
    return "W7", "W6", "W5", "A"


@dataclass
class HiddenLayerParams:
    """
    Prior for one hidden layer

    W_self: own lags (W1 / W7), W_below: lags of the layer below or of the
    visibles (W3 / W6), W_above: the layer above at the same step (W5),
    bias: J x S map (B / A)
    """

    W_self: CondWeight
    W_below: Optional[CondWeight]
    W_above: Optional[CondWeight]
    bias: np.ndarray

    def tensors(self, prefix: str, index: int) -> Dict[str, np.ndarray]:
        s, b, a, bias = layer_roles(index)
        out = dict(self.W_self.tensors(f"{prefix}/{s}"))
        if self.W_below is not None:
            out.update(self.W_below.tensors(f"{prefix}/{b}"))
        if self.W_above is not None:
            out.update(self.W_above.tensors(f"{prefix}/{a}"))
        out[f"{prefix}/{bias}"] = self.bias
        return out

    def copy(self) -> "HiddenLayerParams":
        return HiddenLayerParams(
            self.W_self.copy(),
            None if self.W_below is None else self.W_below.copy(),
            None if self.W_above is None else self.W_above.copy(),
            self.bias.copy(),
        )


@dataclass
class EmissionParams:
    """
    Visible layer: W2 (always dense), W4 (visible lags), C; primed copies for log-variances
    """

    W2: DenseWeight
    W4: Optional[CondWeight]
    C: np.ndarray
    W2p: Optional[DenseWeight] = None
    W4p: Optional[CondWeight] = None
    Cp: Optional[np.ndarray] = None

    def tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = dict(self.W2.tensors(f"{prefix}/W2"))
        if self.W4 is not None:
            out.update(self.W4.tensors(f"{prefix}/W4"))
        out[f"{prefix}/C"] = self.C
        if self.W2p is not None:
            out.update(self.W2p.tensors(f"{prefix}/W2p"))
        if self.W4p is not None:
            out.update(self.W4p.tensors(f"{prefix}/W4p"))
        if self.Cp is not None:
            out[f"{prefix}/Cp"] = self.Cp
        return out

    def copy(self) -> "EmissionParams":
        def cp(x):
            return None if x is None else x.copy()

        return EmissionParams(self.W2.copy(), cp(self.W4), self.C.copy(), cp(self.W2p), cp(self.W4p), cp(self.Cp))


@dataclass
class GenerativeParams:
    """
    All generative parameters theta of a (possibly deep) conditional TSBN
    """

    dims: Dims
    obs_kind: ObsKind
    factored: bool
    hidden_markov: bool
    layers: List[HiddenLayerParams]
    emission: EmissionParams

    @classmethod
    def initialize(cls, dims: Dims, obs_kind: Union[str, ObsKind] = ObsKind.REAL, factored: bool = True,
                   hidden_markov: bool = False, rng: Optional[np.random.Generator] = None,
                   dense_scale: float = 1e-3, factor_scale: float = 1e-2) -> "GenerativeParams":
        """
        Build parameters; weights drawn from N(0, dense_scale^2) / N(0, factor_scale^2)
        when rng is given, all zeros otherwise. Biases start at zero.

        Args:
            dims: Model dimensions
            obs_kind: Observation family
            factored: Factor every conditional weight except W2 / W2p
            hidden_markov: Drop the visible-lag weights W3, W4, W4p
            rng: Generator for the random draws

        Returns:
            GenerativeParams
        """
        obs_kind = ObsKind.parse(obs_kind)
        if factored and not dims.factors:
            raise ConfigError("factored model needs a factor count", ["factors"])
        n, S, M = dims.order, dims.S, dims.M

        def cw(out_dim, in_dim):
            return make_cond_weight(out_dim, in_dim, S, factored, dims.factors, rng, dense_scale, factor_scale)

        def dense(out_dim, in_dim):
            if rng is None:
                return DenseWeight.zeros(out_dim, in_dim, S)
            return DenseWeight.random(out_dim, in_dim, S, rng, dense_scale)

        layers = []
        for i, J in enumerate(dims.layer_sizes):
            below_dim = M if i == 0 else dims.layer_sizes[i - 1]
            W_self = cw(J, J * n)
            W_below = None if (i == 0 and hidden_markov) else cw(J, below_dim * n)
            W_above = cw(J, dims.layer_sizes[i + 1]) if i + 1 < dims.L else None
            layers.append(HiddenLayerParams(W_self, W_below, W_above, np.zeros((J, S))))

        real = obs_kind == ObsKind.REAL
        emission = EmissionParams(
            W2=dense(M, dims.J),
            W4=None if hidden_markov else cw(M, M * n),
            C=np.zeros((M, S)),
            W2p=dense(M, dims.J) if real else None,
            W4p=(None if hidden_markov else cw(M, M * n)) if real else None,
            Cp=np.zeros((M, S)) if real else None,
        )
        return cls(dims, obs_kind, bool(factored), bool(hidden_markov), layers, emission)

    @classmethod
    def zeros(cls, dims: Dims, obs_kind: Union[str, ObsKind] = ObsKind.REAL, factored: bool = True,
              hidden_markov: bool = False) -> "GenerativeParams":
        return cls.initialize(dims, obs_kind, factored, hidden_markov, rng=None)

    def named_tensors(self) -> Dict[str, np.ndarray]:
        """Every stored array by checkpoint name; the arrays are live references"""
        out: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.tensors(f"layer{i + 1}", i))
        out.update(self.emission.tensors("layer1"))
        return out

    @property
    def num_params(self) -> int:
        return int(sum(a.size for a in self.named_tensors().values()))

    def copy(self) -> "GenerativeParams":
        return GenerativeParams(
            self.dims, self.obs_kind, self.factored, self.hidden_markov,
            [layer.copy() for layer in self.layers], self.emission.copy(),
        )


# ---------------------------------------------------------------------------
# lag windows and shape checks
# ---------------------------------------------------------------------------

def lag_windows(X: np.ndarray, n: int) -> np.ndarray:
    """
    Concatenate the previous n rows along the time axis, newest first.

    Rows before the start are zeros.

    Args:
        X: Array of shape (..., T, D)
        n: Order

    Returns:
        Array of shape (..., T, n * D)
    """
    X = np.asarray(X, dtype=np.float64)
    T, D = X.shape[-2], X.shape[-1]
    buf = np.concatenate([np.zeros(X.shape[:-2] + (n, D)), X], axis=-2)
    return np.concatenate([buf[..., n - k:n - k + T, :] for k in range(1, n + 1)], axis=-1)


def _check_sequence(theta: GenerativeParams, V: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    V = np.asarray(V, dtype=np.float64)
    Y = np.asarray(Y.Y if isinstance(Y, StyleSchedule) else Y, dtype=np.float64)
    if V.shape[-1] != theta.dims.M:
        raise ShapeError(f"observations have {V.shape[-1]} columns, model expects {theta.dims.M}", ["M"])
    if Y.shape[-1] != theta.dims.S:
        raise ShapeError(f"side information has {Y.shape[-1]} columns, model expects {theta.dims.S}", ["S"])
    if V.shape[:-1] != Y.shape[:-1]:
        raise ShapeError(f"observations and side information differ in length: {V.shape[:-1]} vs {Y.shape[:-1]}", ["T"])
    return V, Y


def _hidden_list(theta: GenerativeParams, H, lead: tuple) -> List[np.ndarray]:
    layers = H.layers if isinstance(H, HiddenStates) else (H if isinstance(H, (list, tuple)) else [H])
    layers = [np.asarray(h, dtype=np.float64) for h in layers]
    if len(layers) != theta.dims.L:
        raise ShapeError(f"got {len(layers)} hidden layers, model has {theta.dims.L}", ["layers"])
    for i, (h, J) in enumerate(zip(layers, theta.dims.layer_sizes)):
        if h.shape != lead + (J,):
            raise ShapeError(f"layer {i + 1} hidden states have shape {h.shape}, expected {lead + (J,)}", ["T", "J"])
        if not np.all((h == 0.0) | (h == 1.0)):
            raise ValueError("hidden states must be binary")
    return layers


def _bias_term(bias: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return Y @ bias.T


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow"""
    return np.logaddexp(0.0, x)


def bernoulli_log_terms(H: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Per-step Bernoulli log-pmf summed over units"""
    return np.sum(H * logits - softplus(logits), axis=-1)


# ---------------------------------------------------------------------------
# vectorized conditionals, shared by every entry point
# ---------------------------------------------------------------------------

def layer_logits(theta: GenerativeParams, index: int, V: np.ndarray, H: List[np.ndarray],
                 Y: np.ndarray) -> np.ndarray:
    """
    Prior logits of hidden layer `index` at every step.

    Arrays are (..., T, dim); H holds all layers.
    """
    n = theta.dims.order
    layer = theta.layers[index]
    logits = layer.W_self.apply(lag_windows(H[index], n), Y)
    if layer.W_below is not None:
        below = V if index == 0 else H[index - 1]
        logits = logits + layer.W_below.apply(lag_windows(below, n), Y)
    if layer.W_above is not None:
        logits = logits + layer.W_above.apply(H[index + 1], Y)
    return logits + _bias_term(layer.bias, Y)


def emission_preactivations(theta: GenerativeParams, V: np.ndarray, H1: np.ndarray,
                            Y: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Emission mean/logit preactivation and, for Real, the unclipped log-variance
    """
    em = theta.emission
    vlags = lag_windows(V, theta.dims.order) if em.W4 is not None or em.W4p is not None else None
    pre = em.W2.apply(H1, Y)
    if em.W4 is not None:
        pre = pre + em.W4.apply(vlags, Y)
    pre = pre + _bias_term(em.C, Y)
    if theta.obs_kind != ObsKind.REAL:
        return pre, None
    raw = em.W2p.apply(H1, Y)
    if em.W4p is not None:
        raw = raw + em.W4p.apply(vlags, Y)
    raw = raw + _bias_term(em.Cp, Y)
    return pre, raw


def emission_log_terms(obs_kind: ObsKind, V: np.ndarray, pre: np.ndarray,
                       logvar_raw: Optional[np.ndarray]) -> np.ndarray:
    """Per-step observation log-density summed over visible dimensions"""
    if obs_kind == ObsKind.REAL:
        a = np.clip(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)
        return np.sum(-0.5 * LOG_2PI - 0.5 * a - 0.5 * (V - pre) ** 2 * np.exp(-a), axis=-1)
    if obs_kind == ObsKind.BINARY:
        return bernoulli_log_terms(V, pre)
    return np.sum(V * log_softmax(pre, axis=-1), axis=-1)


def stack_log_terms(theta: GenerativeParams, V: np.ndarray, H: List[np.ndarray],
                    Y: np.ndarray) -> np.ndarray:
    """
    log p(v_t, h_t | past, y_t) for every step; arrays (..., T, dim), result (..., T)
    """
    total = np.zeros(V.shape[:-1])
    for i in range(theta.dims.L):
        total = total + bernoulli_log_terms(H[i], layer_logits(theta, i, V, H, Y))
    pre, raw = emission_preactivations(theta, V, H[0], Y)
    return total + emission_log_terms(theta.obs_kind, V, pre, raw)


def emission_errors(theta: GenerativeParams, V: np.ndarray, pre: np.ndarray,
                    logvar_raw: Optional[np.ndarray]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Derivative of the observation log-density with respect to the mean
    preactivation and, for Real, the log-variance preactivation
    """
    if theta.obs_kind == ObsKind.REAL:
        a = np.clip(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)
        inv_var = np.exp(-a)
        resid = V - pre
        xi_mu = resid * inv_var
        xi_a = 0.5 * (resid ** 2 * inv_var - 1.0)
        xi_a = np.where((logvar_raw > LOGVAR_MIN) & (logvar_raw < LOGVAR_MAX), xi_a, 0.0)
        return xi_mu, xi_a
    if theta.obs_kind == ObsKind.BINARY:
        return V - expit(pre), None
    return V - V.sum(axis=-1, keepdims=True) * softmax(pre, axis=-1), None


def stack_model_gradients(theta: GenerativeParams, V: np.ndarray, H: List[np.ndarray],
                          Y: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Gradient of sum_t log p(v_t, h_t | past, y_t) over all leading axes, keyed like named_tensors
    """
    n = theta.dims.order
    grads: Dict[str, np.ndarray] = {}
    for i, layer in enumerate(theta.layers):
        prefix = f"layer{i + 1}"
        s, b, a, bias = layer_roles(i)
        xi = H[i] - expit(layer_logits(theta, i, V, H, Y))
        grads.update(layer.W_self.gradients(xi, lag_windows(H[i], n), Y, f"{prefix}/{s}"))
        if layer.W_below is not None:
            below = V if i == 0 else H[i - 1]
            grads.update(layer.W_below.gradients(xi, lag_windows(below, n), Y, f"{prefix}/{b}"))
        if layer.W_above is not None:
            grads.update(layer.W_above.gradients(xi, H[i + 1], Y, f"{prefix}/{a}"))
        grads[f"{prefix}/{bias}"] = np.einsum("nj,ns->js", xi.reshape(-1, xi.shape[-1]), Y.reshape(-1, Y.shape[-1]))

    em = theta.emission
    pre, raw = emission_preactivations(theta, V, H[0], Y)
    xi_mu, xi_a = emission_errors(theta, V, pre, raw)
    vlags = lag_windows(V, n) if em.W4 is not None or em.W4p is not None else None
    grads.update(em.W2.gradients(xi_mu, H[0], Y, "layer1/W2"))
    if em.W4 is not None:
        grads.update(em.W4.gradients(xi_mu, vlags, Y, "layer1/W4"))
    grads["layer1/C"] = np.einsum("nm,ns->ms", xi_mu.reshape(-1, xi_mu.shape[-1]), Y.reshape(-1, Y.shape[-1]))
    if xi_a is not None:
        grads.update(em.W2p.gradients(xi_a, H[0], Y, "layer1/W2p"))
        if em.W4p is not None:
            grads.update(em.W4p.gradients(xi_a, vlags, Y, "layer1/W4p"))
        grads["layer1/Cp"] = np.einsum("nm,ns->ms", xi_a.reshape(-1, xi_a.shape[-1]), Y.reshape(-1, Y.shape[-1]))
    return grads


# ---------------------------------------------------------------------------
# single-step API
# ---------------------------------------------------------------------------

def _step_inputs(theta: GenerativeParams, y, *vectors):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != theta.dims.S:
        raise ShapeError(f"side vector has {y.shape[0]} entries, model expects {theta.dims.S}", ["S"])
    return [y[None, :]] + [np.asarray(v, dtype=np.float64).reshape(1, -1) for v in vectors]


def hidden_prior_logits(theta: GenerativeParams, h_lags: np.ndarray, v_lags: np.ndarray, y: np.ndarray,
                        layer: int = 1, h_above: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Prior logits of one hidden layer at one step

    Args:
        theta: Generative parameters
        h_lags: The layer's previous n states, newest first (n x J or flat)
        v_lags: Previous n states of the layer below (visibles for layer 1)
        y: Side vector
        layer: 1-based layer index
        h_above: State of the layer above at this step (deep models)

    Returns:
        J-vector of logits
    """
    p = theta.layers[layer - 1]
    y2, hl, vl = _step_inputs(theta, y, h_lags, v_lags)
    logits = p.W_self.apply(hl, y2)
    if p.W_below is not None:
        logits = logits + p.W_below.apply(vl, y2)
    if p.W_above is not None:
        if h_above is None:
            raise ShapeError("deep layer needs the state of the layer above", ["layers"])
        logits = logits + p.W_above.apply(np.asarray(h_above, dtype=np.float64).reshape(1, -1), y2)
    return (logits + _bias_term(p.bias, y2))[0]


def emission_step(theta, h_t, v_lags, y):
    y2, h2, vl = _step_inputs(theta, y, h_t, v_lags)
    em = theta.emission
    pre = em.W2.apply(h2, y2)
    if em.W4 is not None:
        pre = pre + em.W4.apply(vl, y2)
    pre = pre + _bias_term(em.C, y2)
    raw = None
    if theta.obs_kind == ObsKind.REAL:
        raw = em.W2p.apply(h2, y2)
        if em.W4p is not None:
            raw = raw + em.W4p.apply(vl, y2)
        raw = raw + _bias_term(em.Cp, y2)
    return pre[0], None if raw is None else raw[0]


def _require_kind(theta: GenerativeParams, kind: ObsKind):
    if theta.obs_kind != kind:
        raise ValueError(f"model observes {theta.obs_kind.value} data, not {kind.value}")


def emission_gaussian(theta: GenerativeParams, h_t, v_lags, y) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and clamped log-variance of the Gaussian emission at one step"""
    _require_kind(theta, ObsKind.REAL)
    mu, raw = emission_step(theta, h_t, v_lags, y)
    return mu, np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)


def emission_binary(theta: GenerativeParams, h_t, v_lags, y) -> np.ndarray:
    """Bernoulli probabilities of the visible units at one step"""
    _require_kind(theta, ObsKind.BINARY)
    pre, _ = emission_step(theta, h_t, v_lags, y)
    return expit(pre)


def emission_count(theta: GenerativeParams, h_t, v_lags, y) -> np.ndarray:
    """Softmax rates over visible dimensions at one step"""
    _require_kind(theta, ObsKind.COUNT)
    pre, _ = emission_step(theta, h_t, v_lags, y)
    return softmax(pre)


def log_joint(theta: GenerativeParams, V: np.ndarray, H, Y) -> float:
    """
    log p(V, H | Y) summed over time

    Args:
        theta: Generative parameters
        V: T x M observations
        H: HiddenStates, a T x J array, or a list of per-layer arrays
        Y: T x S side information or a StyleSchedule

    Returns:
        Scalar log-density
    """
    V, Y = _check_sequence(theta, V, Y)
    layers = _hidden_list(theta, H, V.shape[:-1])
    return float(np.sum(stack_log_terms(theta, V, layers, Y)))


# ---------------------------------------------------------------------------
# ancestral sampling
# ---------------------------------------------------------------------------

def _seed_buffer(frames: Optional[np.ndarray], n: int, width: int, T: int, what: str) -> np.ndarray:
    buf = np.zeros((n + T, width))
    if frames is None:
        return buf
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] != width:
        raise ShapeError(f"{what} seed frames have {frames.shape[1]} columns, expected {width}", ["M"])
    if frames.shape[0] < n:
        warnings.warn(f"{frames.shape[0]} {what} seed frames given for order {n}; zero-padding the rest")
    frames = frames[-n:]
    buf[n - frames.shape[0]:n] = frames
    return buf


def _lag_row(buf: np.ndarray, t: int, n: int) -> np.ndarray:
    return buf[t:t + n][::-1].reshape(1, -1)


def generate(theta: GenerativeParams, seed_frames: Optional[np.ndarray], schedule, T: int,
             rng: np.random.Generator, count_total: int = 1,
             hidden_seeds: Optional[Sequence[np.ndarray]] = None) -> Tuple[np.ndarray, HiddenStates]:
    """
    Ancestral sampling of T frames.

    At each step the top hidden layer is drawn first, then each layer below,
    then the visibles. Stream 0 feeds the visibles and stream l feeds hidden
    layer l.

    Args:
        theta: Generative parameters
        seed_frames: Initial visible frames in chronological order (n x M)
        schedule: StyleSchedule or array with at least T rows
        T: Number of frames to generate
        rng: Generator
        count_total: Events per frame for count observations
        hidden_seeds: Optional initial hidden frames per layer

    Returns:
        (V, HiddenStates)
    """
    if rng is None:
        raise ValueError("rng required")
    Y = np.asarray(schedule.Y if isinstance(schedule, StyleSchedule) else schedule, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != theta.dims.S:
        raise ShapeError(f"schedule has shape {Y.shape}, expected (T, {theta.dims.S})", ["S"])
    if Y.shape[0] < T:
        raise ValueError(f"schedule has {Y.shape[0]} rows, fewer than T={T}")
    Y = Y[:T]
    dims, n = theta.dims, theta.dims.order
    sizes = dims.layer_sizes

    vbuf = _seed_buffer(seed_frames, n, dims.M, T, "visible")
    hseeds = list(hidden_seeds) if hidden_seeds is not None else [None] * dims.L
    if len(hseeds) != dims.L:
        raise ShapeError(f"got {len(hseeds)} hidden seeds, model has {dims.L} layers", ["layers"])
    hbufs = [_seed_buffer(hseeds[i], n, sizes[i], T, f"layer {i + 1}") for i in range(dims.L)]

    streams = child_streams(rng, dims.L + 1)
    uniforms = [streams[i + 1].random((T, sizes[i])) for i in range(dims.L)]
    if theta.obs_kind == ObsKind.REAL:
        noise = streams[0].standard_normal((T, dims.M))
    elif theta.obs_kind == ObsKind.BINARY:
        noise = streams[0].random((T, dims.M))

    em = theta.emission
    for t in range(T):
        y = Y[t:t + 1]
        for i in reversed(range(dims.L)):
            layer = theta.layers[i]
            logits = layer.W_self.apply(_lag_row(hbufs[i], t, n), y)
            if layer.W_below is not None:
                below = vbuf if i == 0 else hbufs[i - 1]
                logits = logits + layer.W_below.apply(_lag_row(below, t, n), y)
            if layer.W_above is not None:
                logits = logits + layer.W_above.apply(hbufs[i + 1][n + t:n + t + 1], y)
            logits = logits + _bias_term(layer.bias, y)
            hbufs[i][n + t] = (uniforms[i][t] < expit(logits[0])).astype(np.float64)

        h1 = hbufs[0][n + t:n + t + 1]
        vl = _lag_row(vbuf, t, n)
        pre = em.W2.apply(h1, y)
        if em.W4 is not None:
            pre = pre + em.W4.apply(vl, y)
        pre = (pre + _bias_term(em.C, y))[0]
        if theta.obs_kind == ObsKind.REAL:
            raw = em.W2p.apply(h1, y)
            if em.W4p is not None:
                raw = raw + em.W4p.apply(vl, y)
            a = np.clip((raw + _bias_term(em.Cp, y))[0], LOGVAR_MIN, LOGVAR_MAX)
            vbuf[n + t] = pre + np.exp(0.5 * a) * noise[t]
        elif theta.obs_kind == ObsKind.BINARY:
            vbuf[n + t] = (noise[t] < expit(pre)).astype(np.float64)
        else:
            s = softmax(pre)
            vbuf[n + t] = streams[0].multinomial(int(count_total), s / s.sum())

    return vbuf[n:].copy(), HiddenStates([h[n:].copy() for h in hbufs])
