"""
NVIL training for conditional temporal sigmoid belief networks
Learning-signal baselines, closed-form gradients, RMSprop ascent and the epoch loop
"""
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from engine.cond_weight import FactoredWeight, factored_gradients
from engine.errors import CheckpointError, NumericAbort, ShapeError
from engine.model_core import (
    Dims,
    GenerativeParams,
    ObsKind,
    bernoulli_log_terms,
    emission_log_terms,
    emission_step,
    hidden_prior_logits,
    lag_windows,
    stack_log_terms,
    stack_model_gradients,
)
from engine.predictor import prediction_error
from engine.recognition import (
    RecognitionParams,
    posterior_logits,
    posterior_uniforms,
    stack_log_q_terms,
    stack_sample,
    stack_score_gradients,
)
from engine.rng import child_streams, draw_seed, make_rng


# ---------------------------------------------------------------------------
# trainer state
# ---------------------------------------------------------------------------

@dataclass
class BaselineParams:
    """
    Learning-signal baseline C(x) = w_out . tanh(W_in x + b_in) + c0

    x is the visible window at t (current frame and n lags) followed by y_t;
    c0 is the data-independent part.
    """

    W_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    c0: np.ndarray

    @classmethod
    def initialize(cls, input_dim: int, hidden: int = 100,
                   rng: Optional[np.random.Generator] = None) -> "BaselineParams":
        W_in = np.zeros((hidden, input_dim))
        if rng is not None:
            W_in = rng.standard_normal((hidden, input_dim)) / math.sqrt(input_dim)
        return cls(W_in, np.zeros(hidden), np.zeros(hidden), np.zeros(1))

    @classmethod
    def for_dims(cls, dims: Dims, hidden: int = 100, rng: Optional[np.random.Generator] = None) -> "BaselineParams":
        return cls.initialize(baseline_input_dim(dims), hidden, rng)

    @property
    def input_dim(self) -> int:
        return self.W_in.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_in.shape[0]

    def named_tensors(self) -> Dict[str, np.ndarray]:
        return {
            "baseline/W_in": self.W_in,
            "baseline/b_in": self.b_in,
            "baseline/w_out": self.w_out,
            "baseline/c0": self.c0,
        }

    def copy(self) -> "BaselineParams":
        return BaselineParams(self.W_in.copy(), self.b_in.copy(), self.w_out.copy(), self.c0.copy())


@dataclass(frozen=True)
class SignalStats:
    """Running mean (kappa) and variance (tau) of the centered learning signal"""

    kappa: float = 0.0
    tau: float = 0.0
    rho: float = 0.9

    def update(self, batch_mean: float, batch_var: float) -> "SignalStats":
        return replace(
            self,
            kappa=self.rho * self.kappa + (1.0 - self.rho) * float(batch_mean),
            tau=self.rho * self.tau + (1.0 - self.rho) * float(batch_var),
        )

    @property
    def divisor(self) -> float:
        return max(1.0, math.sqrt(max(self.tau, 0.0)))


@dataclass
class OptState:
    """RMSprop state: per-tensor accumulators plus the skipped-step counter"""

    lr: float = 3e-3
    decay: float = 0.9
    eps: float = 1e-6
    accumulators: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0
    steps: int = 0


class GradientSet(dict):
    """
    Gradients keyed by tensor name
    """

    def norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(g)) for name, g in self.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.values())

    def group_norms(self) -> Dict[str, float]:
        groups: Dict[str, float] = {}
        for name, g in self.items():
            group = "phi" if name.startswith("recognition/") else name.split("/")[0]
            if group.startswith("layer"):
                group = "theta"
            groups[group] = groups.get(group, 0.0) + float(np.sum(g * g))
        return {k: math.sqrt(v) for k, v in groups.items()}

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet({k: v * factor for k, v in self.items()})

    def select(self, prefix: str) -> "GradientSet":
        return GradientSet({k: v for k, v in self.items() if k.startswith(prefix)})


def _sum_gradients(parts: Sequence[Dict[str, np.ndarray]]) -> GradientSet:
    out = GradientSet()
    for part in parts:
        for name, g in part.items():
            if name in out:
                out[name] = out[name] + g
            else:
                out[name] = g.copy()
    return out


# ---------------------------------------------------------------------------
# baseline network
# ---------------------------------------------------------------------------

def baseline_input_dim(dims: Dims) -> int:
    return dims.M * (dims.order + 1) + dims.S


def baseline_features(V: np.ndarray, Y: np.ndarray, order: int) -> np.ndarray:
    """Baseline inputs for every step: [v_t, v_{t-1..t-n}, y_t]"""
    return np.concatenate([V, lag_windows(V, order), Y], axis=-1)


def baseline_values(lam: BaselineParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != lam.input_dim:
        raise ShapeError(f"baseline input has {X.shape[-1]} columns, expected {lam.input_dim}", ["baseline_input"])
    return np.tanh(X @ lam.W_in.T + lam.b_in) @ lam.w_out + lam.c0[0]


def baseline_eval(lam: BaselineParams, v_window: np.ndarray, y_t: np.ndarray) -> float:
    """
    Baseline value for one step

    Args:
        lam: Baseline parameters
        v_window: v_t followed by its n lags, newest first (flat or (n+1) x M)
        y_t: Side vector

    Returns:
        Scalar prediction of the learning signal
    """
    x = np.concatenate([np.ravel(v_window), np.ravel(y_t)])
    return float(baseline_values(lam, x[None, :])[0])


def baseline_gradients(lam: BaselineParams, X: np.ndarray, signals: np.ndarray) -> GradientSet:
    """
    sum_t l_t * grad C(x_t) for inputs X (..., D) and signals (...)
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, lam.input_dim)
    s = np.asarray(signals, dtype=np.float64).reshape(-1)
    Z = np.tanh(X @ lam.W_in.T + lam.b_in)
    back = (s[:, None] * (1.0 - Z ** 2)) * lam.w_out
    return GradientSet({
        "baseline/W_in": back.T @ X,
        "baseline/b_in": back.sum(axis=0),
        "baseline/w_out": Z.T @ s,
        "baseline/c0": np.array([s.sum()]),
    })


# ---------------------------------------------------------------------------
# per-step objective and closed-form gradients
# ---------------------------------------------------------------------------

def elbo_term(theta: GenerativeParams, phi: RecognitionParams, v_t, h_t, lags, y_t) -> float:
    """
    l_t = log p(v_t, h_t | lags, y_t) - log q(h_t | lags, v_t, y_t) for a one-layer model

    Args:
        theta: Generative parameters
        phi: Recognition parameters
        v_t: Current frame
        h_t: Current hidden state, drawn from q
        lags: (h_lags, v_lags), previous n states newest first
        y_t: Side vector

    Returns:
        Scalar l_t
    """
    if theta.dims.L != 1:
        raise ValueError("elbo_term covers one-layer models; use deep_elbo_and_grads for stacks")
    h_lags, v_lags = lags
    h_t = np.asarray(h_t, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    prior = hidden_prior_logits(theta, h_lags, v_lags, y_t)
    pre, raw = emission_step(theta, h_t, v_lags, y_t)
    log_p = bernoulli_log_terms(h_t, prior) + emission_log_terms(theta.obs_kind, v_t, pre, raw)
    post = posterior_logits(phi, h_lags, v_t, v_lags, y_t)
    return float(log_p - bernoulli_log_terms(h_t, post))


def _as_layers(H) -> List[np.ndarray]:
    if hasattr(H, "layers"):
        return [np.asarray(h, dtype=np.float64) for h in H.layers]
    if isinstance(H, (list, tuple)):
        return [np.asarray(h, dtype=np.float64) for h in H]
    return [np.asarray(H, dtype=np.float64)]


def model_gradients(theta: GenerativeParams, H, V, Y) -> GradientSet:
    """
    Gradient of log p(V, H | Y) with H fixed (unweighted, as in the single-sample estimator)
    """
    V = np.asarray(V, dtype=np.float64)
    Y = np.asarray(getattr(Y, "Y", Y), dtype=np.float64)
    return GradientSet(stack_model_gradients(theta, V, _as_layers(H), Y))


def factored_weight_gradients(w: FactoredWeight, xi: np.ndarray, eta: np.ndarray,
                              y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Factor gradients of f(W(y) eta + chi) given xi = f'(.)

    Args:
        w: Factored weight
        xi: Downstream error (out_dim,) or (N, out_dim)
        eta: Input (in_dim,) or (N, in_dim)
        y: Side vector (S,) or (N, S)

    Returns:
        (dWa, dWb, dWc)
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    eta = np.atleast_2d(np.asarray(eta, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if xi.shape[1] != w.out_dim or eta.shape[1] != w.in_dim or y.shape[1] != w.styles:
        raise ShapeError("factored gradient inputs do not match the weight", ["out_dim", "in_dim", "styles"])
    g = factored_gradients(w, xi, eta, y, "W")
    return g["W/Wa"], g["W/Wb"], g["W/Wc"]


def recognition_gradients(phi: RecognitionParams, H, V, Y, signal: np.ndarray) -> GradientSet:
    """
    Score-function gradient sum_t l_t grad log q(h_t | ...) with per-step signals l_t
    """
    V = np.asarray(V, dtype=np.float64)
    Y = np.asarray(getattr(Y, "Y", Y), dtype=np.float64)
    return GradientSet(stack_score_gradients(phi, V, _as_layers(H), Y, np.asarray(signal, dtype=np.float64)))


# ---------------------------------------------------------------------------
# minibatch estimator
# ---------------------------------------------------------------------------

def worker_count(requested: Optional[int] = None) -> int:
    """Workers for per-sequence work, capped by FCTSBN_THREADS"""
    count = requested or os.cpu_count() or 1
    cap = os.environ.get("FCTSBN_THREADS")
    if cap:
        try:
            count = min(count, max(1, int(cap)))
        except ValueError:
            warnings.warn(f"ignoring non-integer FCTSBN_THREADS={cap!r}")
    return max(1, int(count))


def _shards(B: int, workers: int, deterministic: bool) -> List[np.ndarray]:
    if deterministic:
        return [np.array([b]) for b in range(B)]
    return [s for s in np.array_split(np.arange(B), min(workers, B)) if len(s)]


def _run(fn, shards, workers):
    if workers <= 1 or len(shards) <= 1:
        return [fn(s) for s in shards]
    return Parallel(n_jobs=workers, prefer="threads")(delayed(fn)(s) for s in shards)


@dataclass
class MinibatchResult:
    """Everything one NVIL minibatch produces"""

    grads: GradientSet
    stats: SignalStats
    elbo: float
    signal_mean: float
    signal_var: float
    H: List[np.ndarray]
    step_elbo: np.ndarray
    signals: np.ndarray


def nvil_batch_estimate(theta: GenerativeParams, phi: RecognitionParams, lam: Optional[BaselineParams],
                        stats: SignalStats, V: np.ndarray, Y: np.ndarray, rng: np.random.Generator,
                        use_baseline: bool = True, use_centering: bool = True,
                        use_normalization: bool = True, update_stats: bool = True,
                        workers: Optional[int] = None, deterministic: bool = False) -> MinibatchResult:
    """
    Full NVIL estimator on a (B, T, .) batch; see nvil_minibatch
    """
    V = np.asarray(V, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if V.ndim != 3 or V.shape[0] == 0:
        raise ValueError("empty batch")
    if rng is None:
        raise ValueError("rng required")
    B, T = V.shape[0], V.shape[1]
    dims = theta.dims
    if Y.shape != (B, T, dims.S):
        raise ShapeError(f"side information has shape {Y.shape}, expected {(B, T, dims.S)}", ["S"])
    use_baseline = use_baseline and lam is not None

    step_seed = draw_seed(rng)
    per_seq = [posterior_uniforms(dims, T, make_rng(step_seed, b)) for b in range(B)]
    uniforms = [np.stack([u[i] for u in per_seq]) for i in range(dims.L)]
    X = baseline_features(V, Y, dims.order) if use_baseline else None

    workers = worker_count(workers)
    shards = _shards(B, workers, deterministic)

    def forward(idx):
        H = stack_sample(phi, V[idx], Y[idx], [u[idx] for u in uniforms])
        raw = stack_log_terms(theta, V[idx], H, Y[idx]) - stack_log_q_terms(phi, V[idx], H, Y[idx])
        base = baseline_values(lam, X[idx]) if use_baseline else np.zeros_like(raw)
        return H, raw, base

    parts = _run(forward, shards, workers)
    H = [np.concatenate([p[0][i] for p in parts]) for i in range(dims.L)]
    raw = np.concatenate([p[1] for p in parts])
    base = np.concatenate([p[2] for p in parts])
    centered = raw - base
    batch_mean, batch_var = float(centered.mean()), float(centered.var())
    if update_stats:
        stats = stats.update(batch_mean, batch_var)
    signal = centered
    if use_centering:
        signal = signal - stats.kappa
    if use_normalization:
        signal = signal / stats.divisor

    def backward(idx):
        Hs = [h[idx] for h in H]
        g = dict(stack_model_gradients(theta, V[idx], Hs, Y[idx]))
        g.update(stack_score_gradients(phi, V[idx], Hs, Y[idx], signal[idx]))
        if use_baseline:
            g.update(baseline_gradients(lam, X[idx], signal[idx]))
        return g

    grads = _sum_gradients(_run(backward, shards, workers)).scaled(1.0 / B)
    return MinibatchResult(
        grads=grads,
        stats=stats,
        elbo=float(raw.sum() / B),
        signal_mean=batch_mean,
        signal_var=batch_var,
        H=H,
        step_elbo=raw,
        signals=signal,
    )


def nvil_minibatch(theta: GenerativeParams, phi: RecognitionParams, lam: Optional[BaselineParams],
                   stats: SignalStats, batch, rng: np.random.Generator,
                   **options) -> Tuple[GradientSet, SignalStats, float]:
    """
    One NVIL gradient estimate over a minibatch of equal-length subsequences.

    Samples H from q, forms per-step signals l_t = log p - log q, subtracts
    the baseline, updates kappa and tau from the batch, then centers and
    divides by max(1, sqrt(tau)). Gradients are averaged over sequences.

    Args:
        theta: Generative parameters
        phi: Recognition parameters
        lam: Baseline parameters (None disables the data-dependent baseline)
        stats: Running signal statistics
        batch: (V, Y) arrays of shape (B, T, .) or a list of (V, Y) pairs
        rng: Generator
        **options: use_baseline, use_centering, use_normalization,
            update_stats, workers, deterministic

    Returns:
        (GradientSet, updated SignalStats, mean raw ELBO per sequence)
    """
    V, Y = stack_batch(batch)
    result = nvil_batch_estimate(theta, phi, lam, stats, V, Y, rng, **options)
    return result.grads, result.stats, result.elbo


def stack_batch(batch) -> Tuple[np.ndarray, np.ndarray]:
    """Turn a list of (V, Y) pairs or a (V, Y) tuple of 3-D arrays into stacked arrays"""
    if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[0]) == 3:
        return np.asarray(batch[0], dtype=np.float64), np.asarray(batch[1], dtype=np.float64)
    pairs = list(batch)
    if not pairs:
        raise ValueError("empty batch")
    lengths = {np.shape(v)[0] for v, _ in pairs}
    if len(lengths) != 1:
        raise ShapeError(f"batch sequences differ in length: {sorted(lengths)}", ["T"])
    return (np.stack([np.asarray(v, dtype=np.float64) for v, _ in pairs]),
            np.stack([np.asarray(y, dtype=np.float64) for _, y in pairs]))


def rmsprop_step(opt: OptState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    RMSprop ascent, in place on the named arrays:
    acc = decay * acc + (1 - decay) * g^2; p += lr * g / sqrt(acc + eps)

    A step with any non-finite gradient is skipped and counted.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown tensor '{name}'")
        if params[name].shape != np.shape(g):
            raise ShapeError(f"gradient for '{name}' has shape {np.shape(g)}, tensor has {params[name].shape}", [name])
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        opt.skipped += 1
        warnings.warn(f"skipping RMSprop step with non-finite gradient ({opt.skipped} skipped so far)")
        return params
    for name, g in grads.items():
        acc = opt.accumulators.get(name)
        if acc is None:
            acc = np.zeros_like(params[name])
            opt.accumulators[name] = acc
        acc *= opt.decay
        acc += (1.0 - opt.decay) * g ** 2
        params[name] += opt.lr * g / np.sqrt(acc + opt.eps)
    opt.steps += 1
    return params


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """
    Model shape and optimisation settings for one training run
    """

    layer_sizes: Tuple[int, ...] = (8,)
    order: int = 1
    factors: Optional[int] = 4
    factored: bool = True
    hidden_markov: bool = False
    epochs: int = 200
    batch_size: int = 20
    subsequence_length: int = 50
    learning_rate: float = 3e-3
    decay: float = 0.9
    eps: float = 1e-6
    rho: float = 0.9
    baseline_hidden: int = 100
    use_baseline: bool = True
    use_centering: bool = True
    use_normalization: bool = True
    holdout_fraction: float = 0.1
    prediction_samples: int = 10
    smoothing: float = 0.9
    dense_scale: float = 1e-3
    factor_scale: float = 1e-2
    deterministic: bool = False
    threads: Optional[int] = None
    verbose: bool = True
    out_dir: Optional[str] = None
    checkpoint_name: str = "model"
    resume: Optional[str] = None

    def dims_for(self, M: int, S: int) -> Dims:
        return Dims(M=M, S=S, layer_sizes=tuple(self.layer_sizes), order=self.order,
                    factors=self.factors if self.factored else None)


def make_chunks(sequences: Sequence[Tuple[np.ndarray, np.ndarray]], length: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Cut sequences into subsequences of a fixed length; a trailing remainder
    becomes one extra chunk aligned to the sequence end
    """
    chunks = []
    for V, Y in sequences:
        T = V.shape[0]
        starts = list(range(0, T - length + 1, length))
        if starts and starts[-1] + length < T:
            starts.append(T - length)
        for s in starts:
            chunks.append((V[s:s + length], Y[s:s + length]))
    return chunks


def split_holdout(records: Sequence, fraction: float) -> Tuple[list, list]:
    """Hold out the last ceil(fraction * N) records in id order (none when N < 2)"""
    records = list(records)
    if fraction <= 0 or len(records) < 2:
        return records, []
    k = min(len(records) - 1, max(1, int(math.ceil(fraction * len(records)))))
    return records[:-k], records[-k:]


@dataclass
class TrainResult:
    theta: GenerativeParams
    phi: RecognitionParams
    baseline: BaselineParams
    stats: SignalStats
    opt: OptState
    history: List[Dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None


class NVILTrainer:
    """
    Owns theta, phi, the baseline and the optimiser state for one run
    """

    log_files = ("metrics.jsonl",)

    def __init__(self, config: TrainConfig, dims: Dims, obs_kind, rng: np.random.Generator):
        """
        Initialize parameters and random streams

        Args:
            config: Training configuration
            dims: Model dimensions
            obs_kind: Observation family
            rng: Run generator
        """
        self.config = config
        self.dims = dims
        self.obs_kind = ObsKind.parse(obs_kind)
        self.streams = child_streams(rng, self.num_streams())
        init_rng, self.batch_rng, self.sample_rng, self.eval_rng = self.streams[:4]

        self.theta = GenerativeParams.initialize(
            dims, self.obs_kind, config.factored, config.hidden_markov, init_rng,
            config.dense_scale, config.factor_scale,
        )
        self.phi = RecognitionParams.initialize(dims, config.factored, init_rng, config.dense_scale, config.factor_scale)
        self.baseline = BaselineParams.for_dims(dims, config.baseline_hidden, init_rng)
        self.stats = SignalStats(rho=config.rho)
        self.opt = OptState(lr=config.learning_rate, decay=config.decay, eps=config.eps)
        self.history: List[Dict] = []
        self.meta: Dict = {}

        if config.verbose:
            print("🤖 Initializing FCTSBN trainer...")
            print(f"   Layers: {list(dims.layer_sizes)} | M={dims.M} S={dims.S} order={dims.order}"
                  f" | {'factored' if config.factored else 'dense'} | {self.obs_kind.value}")
            print(f"   Parameters: theta={self.theta.num_params:,} phi={self.phi.num_params:,}")

    def num_streams(self) -> int:
        return 4

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live references to every trainable tensor"""
        out = dict(self.theta.named_tensors())
        out.update(self.phi.named_tensors())
        out.update(self.baseline.named_tensors())
        return out

    def minibatch(self, V: np.ndarray, Y: np.ndarray) -> MinibatchResult:
        cfg = self.config
        result = nvil_batch_estimate(
            self.theta, self.phi, self.baseline, self.stats, V, Y, self.sample_rng,
            use_baseline=cfg.use_baseline, use_centering=cfg.use_centering,
            use_normalization=cfg.use_normalization, workers=cfg.threads,
            deterministic=cfg.deterministic,
        )
        self.stats = result.stats
        return result

    def step(self, V: np.ndarray, Y: np.ndarray) -> MinibatchResult:
        """One minibatch estimate followed by one RMSprop step"""
        result = self.minibatch(V, Y)
        rmsprop_step(self.opt, self.parameters(), result.grads)
        return result

    def epoch_batches(self, chunks: Sequence) -> List[List[int]]:
        order = self.batch_rng.permutation(len(chunks))
        size = max(1, self.config.batch_size)
        return [list(order[i:i + size]) for i in range(0, len(order), size)]

    def evaluate(self, holdout: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Optional[float]:
        if not holdout:
            return None
        return prediction_error(self.theta, self.phi, holdout, self.config.prediction_samples, self.eval_rng)

    def run_epoch(self, epoch: int, chunks: Sequence, holdout: Sequence) -> Dict:
        """
        One pass over the training chunks

        Returns:
            Metrics record for the epoch
        """
        total, frames = 0.0, 0
        means, variances, norms = [], [], {}
        for batch in self.epoch_batches(chunks):
            V = np.stack([chunks[i][0] for i in batch])
            Y = np.stack([chunks[i][1] for i in batch])
            result = self.step(V, Y)
            total += result.elbo * len(batch)
            frames += V.shape[0] * V.shape[1]
            means.append(result.signal_mean)
            variances.append(result.signal_var)
            for k, v in result.grads.group_norms().items():
                norms.setdefault(k, []).append(v)
        return self.record(epoch, total / max(frames, 1), means, variances, norms, holdout)

    def record(self, epoch: int, elbo: float, means, variances, norms, holdout) -> Dict:
        previous = self.history[-1]["elbo_smoothed"] if self.history else None
        if previous is None or not np.isfinite(previous):
            smoothed = elbo
        else:
            smoothed = self.config.smoothing * previous + (1.0 - self.config.smoothing) * elbo
        rec = {
            "epoch": epoch,
            "elbo": float(elbo),
            "elbo_smoothed": float(smoothed),
            "loss": float(-elbo),
            "pred_error": self.evaluate(holdout),
            "signal_mean": float(np.mean(means)) if means else 0.0,
            "signal_var": float(np.mean(variances)) if variances else 0.0,
            "grad_norms": {k: float(np.mean(v)) for k, v in norms.items()},
            "skipped_steps": self.opt.skipped,
        }
        self.history.append(rec)
        return rec

    def check_finite(self, nan_streak: int, elbo: float) -> int:
        if np.isfinite(elbo):
            return 0
        nan_streak += 1
        if nan_streak >= 2:
            raise NumericAbort("lower bound was NaN for two consecutive epochs", self.dump_diagnostics())
        if self.config.verbose:
            print("⚠ Non-finite lower bound this epoch")
        return nan_streak

    def dump_diagnostics(self) -> Optional[str]:
        if not self.config.out_dir:
            return None
        os.makedirs(self.config.out_dir, exist_ok=True)
        path = os.path.join(self.config.out_dir, "diagnostic.json")
        payload = {
            "history": self.history[-5:],
            "signal_stats": asdict(self.stats),
            "skipped_steps": self.opt.skipped,
            "tensor_norms": {k: float(np.linalg.norm(v)) for k, v in self.parameters().items()},
            "non_finite_tensors": [k for k, v in self.parameters().items() if not np.all(np.isfinite(v))],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, default=str)
        return path

    def fit(self, train_seqs: Sequence[Tuple[np.ndarray, np.ndarray]],
            holdout: Sequence[Tuple[np.ndarray, np.ndarray]] = ()) -> List[Dict]:
        """
        Train for config.epochs epochs

        Args:
            train_seqs: (V, Y) pairs for training
            holdout: (V, Y) pairs for prediction-error monitoring

        Returns:
            Metrics history
        """
        length = self.chunk_length(train_seqs)
        chunks = make_chunks(train_seqs, length)
        if self.config.verbose:
            print(f"\n🎓 Training on {len(train_seqs)} sequences ({len(chunks)} chunks of {length} frames)")
        return self.train_loop(chunks, holdout)

    def chunk_length(self, sequences: Sequence[Tuple[np.ndarray, np.ndarray]]) -> int:
        return min([self.config.subsequence_length] + [v.shape[0] for v, _ in sequences])

    def train_loop(self, chunks, holdout: Sequence[Tuple[np.ndarray, np.ndarray]]) -> List[Dict]:
        """Epoch loop shared by the trainers; chunks are whatever run_epoch expects"""
        cfg = self.config
        nan_streak = 0
        self.reset_logs()
        epochs = range(1, cfg.epochs + 1)
        if cfg.verbose and cfg.epochs > 0:
            epochs = tqdm(epochs, desc="Epochs")
        for epoch in epochs:
            rec = self.run_epoch(epoch, chunks, holdout)
            self.write_metrics(rec)
            nan_streak = self.check_finite(nan_streak, rec["elbo"])
            if cfg.verbose and hasattr(epochs, "set_postfix"):
                epochs.set_postfix(elbo=f"{rec['elbo']:.3f}")

        if cfg.verbose:
            if self.history:
                print(f"✓ Training complete! Final ELBO per frame: {self.history[-1]['elbo']:.4f}")
            else:
                print("✓ No epochs requested; parameters left at initialization")
        return self.history

    def reset_logs(self):
        """Start each run with empty metric logs"""
        if not self.config.out_dir:
            return
        for name in self.log_files:
            path = os.path.join(self.config.out_dir, name)
            if os.path.exists(path):
                os.remove(path)

    def write_metrics(self, rec: Dict, filename: str = "metrics.jsonl"):
        if not self.config.out_dir:
            return
        os.makedirs(self.config.out_dir, exist_ok=True)
        with open(os.path.join(self.config.out_dir, filename), "a", encoding="utf-8") as f:
            f.write(json.dumps(rec) + "\n")

    def checkpoint_parts(self) -> Dict:
        """Keyword arguments for save_checkpoint beyond theta"""
        return {"phi": self.phi, "baseline": self.baseline, "meta": self.meta,
                "stats": self.stats, "opt": self.opt}

    def save(self, path: Optional[str] = None) -> str:
        """Write a checkpoint, training state included, and return its path"""
        from utils.checkpoint import save_checkpoint

        if path is None:
            path = os.path.join(self.config.out_dir or ".", f"{self.config.checkpoint_name}.fctsbn")
        save_checkpoint(path, self.theta, **self.checkpoint_parts())
        if self.config.verbose:
            print(f"💾 Checkpoint saved to {path}")
        return path

    def restore(self, checkpoint) -> None:
        """
        Continue from a checkpoint: parameter values, signal statistics and RMSprop accumulators.

        Learning rate, decay and eps stay as configured for this run.

        Args:
            checkpoint: Checkpoint from utils.checkpoint.load_checkpoint
        """
        stored = checkpoint.parameters()
        for name, target in NVILTrainer.parameters(self).items():
            value = stored.get(name)
            if value is None or value.shape != target.shape:
                raise CheckpointError(f"checkpoint does not fit this model at tensor '{name}'")
            target[...] = value
        if checkpoint.stats is not None:
            self.stats = replace(checkpoint.stats, rho=self.config.rho)
        if checkpoint.opt is not None:
            live = self.parameters()
            self.opt = OptState(
                lr=self.config.learning_rate, decay=self.config.decay, eps=self.config.eps,
                accumulators={k: v.copy() for k, v in checkpoint.opt.accumulators.items() if k in live},
                skipped=checkpoint.opt.skipped, steps=checkpoint.opt.steps,
            )
        if self.config.verbose:
            print(f"📂 Resumed from checkpoint ({self.opt.steps} optimizer steps so far)")

    def resume_if_requested(self):
        if not self.config.resume:
            return
        from utils.checkpoint import load_checkpoint

        self.restore(load_checkpoint(self.config.resume))


def train(config: TrainConfig, dataset, rng: np.random.Generator, meta: Optional[Dict] = None) -> TrainResult:
    """
    Train a (deep) FCTSBN with NVIL and RMSprop

    Args:
        config: Training configuration
        dataset: SequenceDataset
        rng: Run generator
        meta: Extra entries for the checkpoint manifest

    Returns:
        TrainResult; the checkpoint and metrics log are written when config.out_dir is set
    """
    if rng is None:
        raise ValueError("rng required")
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    dims = config.dims_for(dataset.M, dataset.S)
    trainer = NVILTrainer(config, dims, dataset.obs_kind, rng)
    trainer.meta.update(meta or {})
    trainer.resume_if_requested()
    train_records, holdout_records = split_holdout(dataset.records, config.holdout_fraction)
    trainer.fit([dataset.pair(r) for r in train_records], [dataset.pair(r) for r in holdout_records])
    path = trainer.save() if config.out_dir else None
    return TrainResult(trainer.theta, trainer.phi, trainer.baseline, trainer.stats, trainer.opt,
                       trainer.history, path)
