"""
One-step-ahead prediction API
Cached checkpoint loading for repeated CLI and library calls
"""
import os
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax
from sklearn.metrics import mean_absolute_error

from engine.errors import ShapeError
from engine.model_core import (
    GenerativeParams,
    ObsKind,
    emission_preactivations,
    layer_logits,
)
from engine.recognition import RecognitionParams, stack_sample
from engine.rng import child_streams


# Loaded checkpoints keyed by absolute path
_checkpoint_cache: Dict[str, object] = {}


def get_checkpoint(path: str):
    """
    Load a checkpoint once and reuse it

    Args:
        path: Path to a .fctsbn file

    Returns:
        Checkpoint with theta, phi, baseline, classifier and manifest
    """
    from utils.checkpoint import load_checkpoint

    key = os.path.abspath(path)
    if key not in _checkpoint_cache:
        if not os.path.exists(key):
            print(f"⚠ No checkpoint found at {path}")
            raise FileNotFoundError(f"checkpoint not found: {path}")
        _checkpoint_cache[key] = load_checkpoint(key)
        print(f"✓ Loaded checkpoint {os.path.basename(path)}")
    return _checkpoint_cache[key]


def clear_checkpoint_cache():
    _checkpoint_cache.clear()


def predict_sequence(theta: GenerativeParams, phi: RecognitionParams, V: np.ndarray, Y: np.ndarray,
                     num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """
    Expected emission at every step given the frames before it.

    Each sample draws h_{1:T} from q in one sweep; since q is causal, its
    prefix h_{1:t-1} only depends on v_{1:t-1}. The prior for h_t is then
    applied top-down. For Real data the bottom layer enters through its
    probabilities, which is exact because the mean is linear in h_t.

    Args:
        theta: Generative parameters
        phi: Recognition parameters
        V: T x M observations
        Y: T x S side information
        num_samples: Number of posterior samples (>= 1)
        rng: Generator

    Returns:
        T x M predictions; row t uses frames before t only
    """
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    if rng is None:
        raise ValueError("rng required")
    V = np.asarray(V, dtype=np.float64)
    Y = np.asarray(getattr(Y, "Y", Y), dtype=np.float64)
    dims = theta.dims
    if V.ndim != 2 or V.shape[1] != dims.M or Y.shape != (V.shape[0], dims.S):
        raise ShapeError(f"expected V (T, {dims.M}) and Y (T, {dims.S}), got {V.shape} and {Y.shape}", ["M", "S"])
    K, T = int(num_samples), V.shape[0]
    q_rng, prior_rng = child_streams(rng, 2)

    Vb = np.broadcast_to(V, (K, T, dims.M)).copy()
    Yb = np.broadcast_to(Y, (K, T, dims.S)).copy()
    uniforms = [q_rng.random((K, T, J)) for J in dims.layer_sizes]
    Hq = stack_sample(phi, Vb, Yb, uniforms)

    above = None
    for i in reversed(range(dims.L)):
        # lags come from q, the layer above at step t from the prior
        H_in = list(Hq)
        if above is not None:
            H_in[i + 1] = above
        probs = expit(layer_logits(theta, i, Vb, H_in, Yb))
        draws = prior_rng.random(probs.shape)
        if i == 0 and theta.obs_kind == ObsKind.REAL:
            above = probs
        else:
            above = (draws < probs).astype(np.float64)
    H1 = above

    pre, _ = emission_preactivations(theta, Vb, H1, Yb)
    if theta.obs_kind == ObsKind.REAL:
        means = pre
    elif theta.obs_kind == ObsKind.BINARY:
        means = expit(pre)
    else:
        means = softmax(pre, axis=-1)
    return means.mean(axis=0)


def predict_next(theta: GenerativeParams, phi: RecognitionParams, v_history: np.ndarray, y_history: np.ndarray,
                 y_t: np.ndarray, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """
    Expected next frame after a history

    Args:
        theta: Generative parameters
        phi: Recognition parameters
        v_history: (t-1) x M frames, at least one
        y_history: (t-1) x S side information
        y_t: Side vector for the predicted frame
        num_samples: Posterior samples to average
        rng: Generator

    Returns:
        M-vector prediction
    """
    v_history = np.atleast_2d(np.asarray(v_history, dtype=np.float64))
    y_history = np.atleast_2d(np.asarray(y_history, dtype=np.float64))
    if v_history.shape[0] < 1 or v_history.size == 0:
        raise ValueError("history must contain at least one frame")
    V = np.vstack([v_history, np.zeros((1, v_history.shape[1]))])
    Y = np.vstack([y_history, np.asarray(y_t, dtype=np.float64).reshape(1, -1)])
    return predict_sequence(theta, phi, V, Y, num_samples, rng)[-1]


def prediction_error(theta: GenerativeParams, phi: RecognitionParams,
                     sequences: Sequence[Tuple[np.ndarray, np.ndarray]], num_samples: int,
                     rng: np.random.Generator) -> Optional[float]:
    """
    Mean absolute one-step-ahead error per dimension per frame, skipping each first frame

    Args:
        sequences: (V, Y) pairs

    Returns:
        MAE, or None when no sequence has two frames
    """
    truth, preds = [], []
    for V, Y in sequences:
        if V.shape[0] < 2:
            continue
        P = predict_sequence(theta, phi, V, Y, num_samples, rng)
        truth.append(V[1:])
        preds.append(P[1:])
    if not truth:
        return None
    return float(mean_absolute_error(np.vstack(truth), np.vstack(preds)))
