"""
Factored multiplicative recognition network q(H | V, Y)
One forward sweep per sequence; layers are sampled bottom-up
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from engine.cond_weight import CondWeight, make_cond_weight
from engine.errors import ShapeError
from engine.model_core import (
    Dims,
    HiddenStates,
    StyleSchedule,
    bernoulli_log_terms,
    lag_windows,
)
from engine.rng import child_streams


def recognition_roles(index: int) -> Tuple[str, str, str, str]:
    """Names of (self-lag, current-below, lagged-below, bias) for a 0-based layer index"""
    if index == 0:
        return "U1", "U2", "U3", "D"
    return "U4", "U5", "U6", "E"


@dataclass
class RecognitionLayerParams:
    """
    Posterior logits of one layer: U_self on own lags, U_current on the layer
    below at the same step, U_lagged on its lags, plus a J x S bias map
    """

    U_self: CondWeight
    U_current: CondWeight
    U_lagged: CondWeight
    bias: np.ndarray

    def tensors(self, prefix: str, index: int) -> Dict[str, np.ndarray]:
        s, c, l, b = recognition_roles(index)
        out = dict(self.U_self.tensors(f"{prefix}/{s}"))
        out.update(self.U_current.tensors(f"{prefix}/{c}"))
        out.update(self.U_lagged.tensors(f"{prefix}/{l}"))
        out[f"{prefix}/{b}"] = self.bias
        return out

    def copy(self) -> "RecognitionLayerParams":
        return RecognitionLayerParams(self.U_self.copy(), self.U_current.copy(), self.U_lagged.copy(), self.bias.copy())


@dataclass
class RecognitionParams:
    """
    Recognition parameters phi for every hidden layer
    """

    dims: Dims
    factored: bool
    layers: List[RecognitionLayerParams]

    @classmethod
    def initialize(cls, dims: Dims, factored: bool = True, rng: Optional[np.random.Generator] = None,
                   dense_scale: float = 1e-3, factor_scale: float = 1e-2) -> "RecognitionParams":
        n, S = dims.order, dims.S
        layers = []
        for i, J in enumerate(dims.layer_sizes):
            below = dims.M if i == 0 else dims.layer_sizes[i - 1]

            def cw(in_dim):
                return make_cond_weight(J, in_dim, S, factored, dims.factors, rng, dense_scale, factor_scale)

            layers.append(RecognitionLayerParams(cw(J * n), cw(below), cw(below * n), np.zeros((J, S))))
        return cls(dims, bool(factored), layers)

    @classmethod
    def zeros(cls, dims: Dims, factored: bool = True) -> "RecognitionParams":
        return cls.initialize(dims, factored, rng=None)

    def named_tensors(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.tensors(f"recognition/layer{i + 1}", i))
        return out

    @property
    def num_params(self) -> int:
        return int(sum(a.size for a in self.named_tensors().values()))

    def copy(self) -> "RecognitionParams":
        return RecognitionParams(self.dims, self.factored, [layer.copy() for layer in self.layers])


def _static_logits(phi: RecognitionParams, index: int, below: np.ndarray, Y: np.ndarray) -> np.ndarray:
    layer = phi.layers[index]
    out = layer.U_current.apply(below, Y)
    out = out + layer.U_lagged.apply(lag_windows(below, phi.dims.order), Y)
    return out + Y @ layer.bias.T


def stack_posterior_logits(phi: RecognitionParams, V: np.ndarray, H: List[np.ndarray],
                           Y: np.ndarray) -> List[np.ndarray]:
    """Posterior logits of every layer given already-sampled states; arrays (..., T, dim)"""
    out = []
    for i, layer in enumerate(phi.layers):
        below = V if i == 0 else H[i - 1]
        static = _static_logits(phi, i, below, Y)
        out.append(static + layer.U_self.apply(lag_windows(H[i], phi.dims.order), Y))
    return out


def stack_log_q_terms(phi: RecognitionParams, V: np.ndarray, H: List[np.ndarray], Y: np.ndarray) -> np.ndarray:
    """log q(h_t | ...) for every step summed over layers, shape (..., T)"""
    logits = stack_posterior_logits(phi, V, H, Y)
    total = np.zeros(V.shape[:-1])
    for h, x in zip(H, logits):
        total = total + bernoulli_log_terms(h, x)
    return total


def stack_score_gradients(phi: RecognitionParams, V: np.ndarray, H: List[np.ndarray], Y: np.ndarray,
                          weights: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """
    Gradient of sum_t w_t log q(h_t | ...) over all leading axes

    Args:
        phi: Recognition parameters
        V, H, Y: Arrays of shape (..., T, dim)
        weights: Per-step weights (..., T); ones when omitted

    Returns:
        Gradients keyed like phi.named_tensors()
    """
    n = phi.dims.order
    logits = stack_posterior_logits(phi, V, H, Y)
    grads: Dict[str, np.ndarray] = {}
    for i, layer in enumerate(phi.layers):
        prefix = f"recognition/layer{i + 1}"
        s, c, l, b = recognition_roles(i)
        xi = H[i] - expit(logits[i])
        if weights is not None:
            xi = xi * np.asarray(weights, dtype=np.float64)[..., None]
        below = V if i == 0 else H[i - 1]
        grads.update(layer.U_self.gradients(xi, lag_windows(H[i], n), Y, f"{prefix}/{s}"))
        grads.update(layer.U_current.gradients(xi, below, Y, f"{prefix}/{c}"))
        grads.update(layer.U_lagged.gradients(xi, lag_windows(below, n), Y, f"{prefix}/{l}"))
        grads[f"{prefix}/{b}"] = np.einsum("nj,ns->js", xi.reshape(-1, xi.shape[-1]), Y.reshape(-1, Y.shape[-1]))
    return grads


def posterior_uniforms(dims: Dims, T: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Uniform draws for one sequence; layer l uses stream l"""
    if rng is None:
        raise ValueError("rng required")
    streams = child_streams(rng, dims.L + 1)
    return [streams[i + 1].random((T, J)) for i, J in enumerate(dims.layer_sizes)]


def stack_sample(phi: RecognitionParams, V: np.ndarray, Y: np.ndarray,
                 uniforms: List[np.ndarray]) -> List[np.ndarray]:
    """
    Forward sweep over a batch.

    Args:
        phi: Recognition parameters
        V: (B, T, M) observations
        Y: (B, T, S) side information
        uniforms: Per layer (B, T, J) uniforms

    Returns:
        Per layer (B, T, J) binary states
    """
    n = phi.dims.order
    B, T = V.shape[0], V.shape[1]
    H: List[np.ndarray] = []
    for i, layer in enumerate(phi.layers):
        J = phi.dims.layer_sizes[i]
        below = V if i == 0 else H[i - 1]
        static = _static_logits(phi, i, below, Y)
        buf = np.zeros((B, T + n, J))
        for t in range(T):
            lag = buf[:, t:t + n][:, ::-1].reshape(B, n * J)
            logits = static[:, t] + layer.U_self.apply(lag, Y[:, t])
            buf[:, n + t] = (uniforms[i][:, t] < expit(logits)).astype(np.float64)
        H.append(buf[:, n:])
    return H


def _check(phi: RecognitionParams, V, Y) -> Tuple[np.ndarray, np.ndarray]:
    V = np.asarray(V, dtype=np.float64)
    Y = np.asarray(Y.Y if isinstance(Y, StyleSchedule) else Y, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != phi.dims.M:
        raise ShapeError(f"observations have shape {V.shape}, expected (T, {phi.dims.M})", ["M"])
    if Y.shape != (V.shape[0], phi.dims.S):
        raise ShapeError(f"side information has shape {Y.shape}, expected ({V.shape[0]}, {phi.dims.S})", ["T", "S"])
    return V, Y


def posterior_logits(phi: RecognitionParams, h_lags, v_t, v_lags, y, layer: int = 1) -> np.ndarray:
    """
    Posterior logits of one layer at one step

    Args:
        phi: Recognition parameters
        h_lags: The layer's previous n states, newest first
        v_t: Current state of the layer below (visibles for layer 1)
        v_lags: Previous n states of the layer below, newest first
        y: Side vector
        layer: 1-based layer index

    Returns:
        J-vector of logits
    """
    p = phi.layers[layer - 1]
    y2 = np.asarray(y, dtype=np.float64).reshape(1, -1)
    out = p.U_self.apply(np.asarray(h_lags, dtype=np.float64).reshape(1, -1), y2)
    out = out + p.U_current.apply(np.asarray(v_t, dtype=np.float64).reshape(1, -1), y2)
    out = out + p.U_lagged.apply(np.asarray(v_lags, dtype=np.float64).reshape(1, -1), y2)
    return (out + y2 @ p.bias.T)[0]


def sample_posterior(phi: RecognitionParams, V, Y, rng: np.random.Generator) -> HiddenStates:
    """
    Draw H ~ q(H | V, Y) in one forward sweep

    Args:
        phi: Recognition parameters
        V: T x M observations
        Y: T x S side information
        rng: Generator

    Returns:
        HiddenStates
    """
    V, Y = _check(phi, V, Y)
    uniforms = posterior_uniforms(phi.dims, V.shape[0], rng)
    H = stack_sample(phi, V[None], Y[None], [u[None] for u in uniforms])
    return HiddenStates([h[0] for h in H])


def log_q(phi: RecognitionParams, V, H, Y) -> float:
    """
    log q(H | V, Y) summed over time and layers
    """
    V, Y = _check(phi, V, Y)
    layers = H.layers if isinstance(H, HiddenStates) else (H if isinstance(H, (list, tuple)) else [H])
    layers = [np.asarray(h, dtype=np.float64) for h in layers]
    if len(layers) != phi.dims.L:
        raise ShapeError(f"got {len(layers)} hidden layers, recognition has {phi.dims.L}", ["layers"])
    for h, J in zip(layers, phi.dims.layer_sizes):
        if h.shape != (V.shape[0], J):
            raise ShapeError(f"hidden states have shape {h.shape}, expected ({V.shape[0]}, {J})", ["T", "J"])
        if not np.all((h == 0.0) | (h == 1.0)):
            raise ValueError("hidden states must be binary")
    return float(np.sum(stack_log_q_terms(phi, V, layers, Y)))
