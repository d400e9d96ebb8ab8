"""
Exact oracles for small models: exhaustive enumeration of hidden configurations,
the forward algorithm over 2^J states, and lower-bound audits
"""
import itertools
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from engine.model_core import (
    Dims,
    GenerativeParams,
    ObsKind,
    StyleSchedule,
    bernoulli_log_terms,
    emission_log_terms,
    emission_preactivations,
    generate,
    layer_logits,
    stack_log_terms,
)
from engine.recognition import RecognitionParams, stack_log_q_terms, stack_sample
from engine.rng import child_streams, make_rng

MAX_BITS = 20


def _as_arrays(V, Y) -> Tuple[np.ndarray, np.ndarray]:
    return np.asarray(V, dtype=np.float64), np.asarray(getattr(Y, "Y", Y), dtype=np.float64)


def enumerate_hidden(layer_sizes, T: int) -> List[np.ndarray]:
    """
    Every hidden configuration of a stack

    Args:
        layer_sizes: J per layer (an int for one layer)
        T: Sequence length

    Returns:
        Per layer an (N, T, J) array, N = 2^(T * sum J)
    """
    sizes = [int(layer_sizes)] if np.isscalar(layer_sizes) else [int(j) for j in layer_sizes]
    bits = T * sum(sizes)
    if bits > MAX_BITS:
        raise ValueError(f"{bits} hidden bits is too many to enumerate (limit {MAX_BITS})")
    table = np.array(list(itertools.product((0.0, 1.0), repeat=bits))).reshape(-1, bits)
    out, start = [], 0
    for J in sizes:
        out.append(table[:, start:start + T * J].reshape(-1, T, J))
        start += T * J
    return out


def _broadcast(V: np.ndarray, Y: np.ndarray, N: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.broadcast_to(V, (N,) + V.shape), np.broadcast_to(Y, (N,) + Y.shape)


def joint_table(theta: GenerativeParams, V, Y) -> np.ndarray:
    """log p(V, H | Y) for every hidden configuration, in enumerate_hidden order"""
    V, Y = _as_arrays(V, Y)
    H = enumerate_hidden(theta.dims.layer_sizes, V.shape[0])
    Vb, Yb = _broadcast(V, Y, H[0].shape[0])
    return stack_log_terms(theta, Vb, H, Yb).sum(axis=-1)


def q_table(phi: RecognitionParams, V, Y) -> np.ndarray:
    """log q(H | V, Y) for every hidden configuration"""
    V, Y = _as_arrays(V, Y)
    H = enumerate_hidden(phi.dims.layer_sizes, V.shape[0])
    Vb, Yb = _broadcast(V, Y, H[0].shape[0])
    return stack_log_q_terms(phi, Vb, H, Yb).sum(axis=-1)


def exact_log_marginal(theta: GenerativeParams, V, Y) -> float:
    """log p(V | Y) by summing the joint over all hidden configurations"""
    return float(logsumexp(joint_table(theta, V, Y)))


def log_q_normalizer(phi: RecognitionParams, V, Y) -> float:
    """log of the total mass of q(. | V, Y); zero for a normalized posterior"""
    return float(logsumexp(q_table(phi, V, Y)))


def exact_elbo(theta: GenerativeParams, phi: RecognitionParams, V, Y) -> float:
    """E_q[log p(V, H | Y) - log q(H | V, Y)] computed exactly"""
    log_q = q_table(phi, V, Y)
    return float(np.sum(np.exp(log_q) * (joint_table(theta, V, Y) - log_q)))


def forward_log_marginal(theta: GenerativeParams, V, Y) -> float:
    """
    log p(V | Y) by the forward algorithm for one-layer, order-1 models.

    With n = 1 the hidden chain given V is a hidden Markov model over 2^J
    states, so this is independent of exhaustive enumeration over time.
    """
    if theta.dims.L != 1 or theta.dims.order != 1:
        raise ValueError("forward algorithm needs a one-layer order-1 model")
    V, Y = _as_arrays(V, Y)
    J, T = theta.dims.J, V.shape[0]
    states = enumerate_hidden(J, 1)[0][:, 0]
    K = states.shape[0]

    def local_terms(v_prev, y_prev, v_t, y_t):
        # position 1 of a two-frame window: lags from position 0, current state = every state
        V2 = np.broadcast_to(np.stack([v_prev, v_t]), (K, 2, V.shape[1]))
        Y2 = np.broadcast_to(np.stack([y_prev, y_t]), (K, 2, Y.shape[1]))
        H2 = np.stack([states, states], axis=1)
        logits = layer_logits(theta, 0, V2, [H2], Y2)[:, 1]
        pre, raw = emission_preactivations(theta, V2, H2, Y2)
        emit = emission_log_terms(theta.obs_kind, V2[:, 1], pre[:, 1], None if raw is None else raw[:, 1])
        trans = logits @ states.T - np.logaddexp(0.0, logits).sum(axis=-1, keepdims=True)
        return trans, emit

    V1, Y1 = np.broadcast_to(V[:1], (K, 1, V.shape[1])), np.broadcast_to(Y[:1], (K, 1, Y.shape[1]))
    H1 = states[:, None, :]
    prior0 = bernoulli_log_terms(H1, layer_logits(theta, 0, V1, [H1], Y1))[:, 0]
    pre, raw = emission_preactivations(theta, V1, H1, Y1)
    alpha = prior0 + emission_log_terms(theta.obs_kind, V1, pre, raw)[:, 0]
    for t in range(1, T):
        trans, emit = local_terms(V[t - 1], Y[t - 1], V[t], Y[t])
        alpha = logsumexp(alpha[:, None] + trans, axis=0) + emit
    return float(logsumexp(alpha))


def elbo_samples(theta: GenerativeParams, phi: RecognitionParams, V, Y, num_samples: int,
                 rng: np.random.Generator, chunk: int = 20000) -> np.ndarray:
    """Single-sample ELBO estimates log p(V, H) - log q(H) for H ~ q, vectorized in chunks"""
    V, Y = _as_arrays(V, Y)
    out = []
    remaining = int(num_samples)
    while remaining > 0:
        k = min(chunk, remaining)
        Vb = np.broadcast_to(V, (k,) + V.shape).copy()
        Yb = np.broadcast_to(Y, (k,) + Y.shape).copy()
        uniforms = [rng.random((k,) + (V.shape[0], J)) for J in phi.dims.layer_sizes]
        H = stack_sample(phi, Vb, Yb, uniforms)
        out.append((stack_log_terms(theta, Vb, H, Yb) - stack_log_q_terms(phi, Vb, H, Yb)).sum(axis=-1))
        remaining -= k
    return np.concatenate(out)


def factorized_posterior_toy(M: int, J: int, T: int, rng: np.random.Generator,
                             bias_scale: float = 0.5) -> Tuple[GenerativeParams, RecognitionParams, np.ndarray, np.ndarray]:
    """
    A one-layer model whose exact posterior is a recognition model.

    Hidden units have no temporal weights and the emission columns are
    orthogonal with unit noise, so the posterior factorizes over time and
    units with logits B + W2^T (v_t - W4 v_{t-1} - C) - diag(W2^T W2) / 2.

    Returns:
        (theta, phi set to the exact posterior, V, Y)
    """
    if J > M:
        raise ValueError("orthogonal emission columns need J <= M")
    dims = Dims(M=M, S=1, layer_sizes=(J,), order=1)
    g_rng, v_rng = child_streams(rng, 2)
    theta = GenerativeParams.zeros(dims, ObsKind.REAL, factored=False)
    q, _ = np.linalg.qr(g_rng.standard_normal((M, M)))
    W2 = q[:, :J] * g_rng.uniform(0.5, 1.5, J)
    W4 = g_rng.normal(0.0, 0.3, (M, M))
    theta.emission.W2.tensor[:, :, 0] = W2
    theta.emission.W4.tensor[:, :, 0] = W4
    theta.emission.C[:, 0] = g_rng.normal(0.0, bias_scale, M)
    theta.layers[0].bias[:, 0] = g_rng.normal(0.0, bias_scale, J)

    phi = RecognitionParams.zeros(dims, factored=False)
    post = phi.layers[0]
    post.U_current.tensor[:, :, 0] = W2.T
    post.U_lagged.tensor[:, :, 0] = -W2.T @ W4
    post.bias[:, 0] = theta.layers[0].bias[:, 0] - W2.T @ theta.emission.C[:, 0] - 0.5 * np.sum(W2 ** 2, axis=0)

    Y = np.ones((T, 1))
    V, _ = generate(theta, None, Y, T, v_rng)
    return theta, phi, V, Y


def random_instance(rng: np.random.Generator, obs_kind: ObsKind, factored: bool, order: int,
                    layer_sizes=(2,), T: int = 3, M: int = 2, S: int = 2,
                    scale: float = 0.5) -> Tuple[GenerativeParams, RecognitionParams, np.ndarray, np.ndarray]:
    """Random small model, recognition network and data for audits and gradient checks"""
    p_rng, q_rng, d_rng = child_streams(rng, 3)
    dims = Dims(M=M, S=S, layer_sizes=tuple(layer_sizes), order=order, factors=2 if factored else None)
    theta = GenerativeParams.initialize(dims, obs_kind, factored, rng=p_rng, dense_scale=scale, factor_scale=scale)
    for tensor in theta.named_tensors().values():
        if tensor.ndim == 2 and not tensor.any():
            tensor[...] = p_rng.normal(0.0, scale, tensor.shape)
    phi = RecognitionParams.initialize(dims, factored, q_rng, dense_scale=scale, factor_scale=scale)
    for tensor in phi.named_tensors().values():
        if not tensor.any():
            tensor[...] = q_rng.normal(0.0, scale, tensor.shape)
    Y = StyleSchedule.from_indices(d_rng.integers(0, S, T), S).Y
    V, _ = generate(theta, None, Y, T, d_rng, count_total=3)
    return theta, phi, V, Y


def audit_instance(theta: GenerativeParams, phi: RecognitionParams, V, Y, rng: np.random.Generator,
                   num_samples: int = 100000, exact_posterior: bool = False) -> Dict:
    """
    Check one instance against its exact quantities

    Returns:
        Report with the q mass, exact log marginal, forward-algorithm value
        (order-1, one-layer only), Monte Carlo ELBO mean and standard error,
        and pass flags
    """
    log_marginal = exact_log_marginal(theta, V, Y)
    q_mass = float(np.exp(log_q_normalizer(phi, V, Y)))
    samples = elbo_samples(theta, phi, V, Y, num_samples, rng)
    mean = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    forward: Optional[float] = None
    if theta.dims.L == 1 and theta.dims.order == 1:
        forward = forward_log_marginal(theta, V, Y)
    slack = 3.0 * stderr + 1e-9
    report = {
        "hidden_bits": int(np.asarray(V).shape[0] * sum(theta.dims.layer_sizes)),
        "q_mass": q_mass,
        "log_marginal": log_marginal,
        "forward_log_marginal": forward,
        "elbo_mean": mean,
        "elbo_stderr": stderr,
        "q_normalized": abs(q_mass - 1.0) <= 1e-9,
        "forward_agrees": forward is None or abs(forward - log_marginal) <= 1e-9 * max(1.0, abs(log_marginal)),
        "bound_holds": mean <= log_marginal + slack,
    }
    if exact_posterior:
        report["tight"] = abs(mean - log_marginal) <= slack
    report["passed"] = all(v for k, v in report.items() if k in ("q_normalized", "forward_agrees", "bound_holds", "tight"))
    return report


def run_audit(seed: int, instances: int = 10, num_samples: int = 100000) -> List[Dict]:
    """
    Enumeration audit over random small instances plus one exact-posterior toy

    Instances cycle through observation families, dense and factored
    weights, orders 1 and 2, and one- and two-layer stacks, keeping
    T * sum(J) <= 12.
    """
    rng = make_rng(seed)
    kinds = [ObsKind.REAL, ObsKind.BINARY, ObsKind.COUNT]
    shapes = [((2,), 3, 1), ((3,), 4, 1), ((2,), 3, 2), ((2, 1), 4, 1), ((2, 2), 3, 2)]
    reports = []
    streams = child_streams(rng, instances + 1)
    for i in range(instances):
        sizes, T, order = shapes[i % len(shapes)]
        kind = kinds[i % len(kinds)]
        factored = bool(i % 2)
        inst_rng, mc_rng = child_streams(streams[i], 2)
        theta, phi, V, Y = random_instance(inst_rng, kind, factored, order, sizes, T)
        report = audit_instance(theta, phi, V, Y, mc_rng, num_samples)
        report.update({"instance": i, "obs_kind": kind.value, "factored": factored, "order": order,
                       "layer_sizes": list(sizes)})
        reports.append(report)
    toy_rng, mc_rng = child_streams(streams[instances], 2)
    theta, phi, V, Y = factorized_posterior_toy(M=4, J=3, T=4, rng=toy_rng)
    report = audit_instance(theta, phi, V, Y, mc_rng, num_samples, exact_posterior=True)
    report.update({"instance": "exact_posterior", "obs_kind": "real", "factored": False, "order": 1,
                   "layer_sizes": [3]})
    reports.append(report)
    return reports
