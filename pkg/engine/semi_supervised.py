"""
Semi-supervised FCTSBN: the side information doubles as a class label
A softmax classifier over visible windows is trained jointly with the generative and recognition models
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score

from engine.errors import ConfigError, ShapeError
from engine.model_core import Dims, GenerativeParams, stack_log_terms
from engine.nvil_trainer import (
    BaselineParams,
    GradientSet,
    MinibatchResult,
    NVILTrainer,
    OptState,
    SignalStats,
    TrainConfig,
    baseline_features,
    baseline_values,
    make_chunks,
    nvil_batch_estimate,
    rmsprop_step,
    split_holdout,
)
from engine.recognition import RecognitionParams, stack_log_q_terms, stack_sample
from engine.rng import child_streams


@dataclass
class ClassifierParams:
    """
    Softmax map from a window of w frames (flattened, oldest first) to S class probabilities
    """

    W: np.ndarray
    b: np.ndarray
    window: int

    @classmethod
    def zeros(cls, S: int, M: int, window: int) -> "ClassifierParams":
        return cls(np.zeros((S, window * M)), np.zeros(S), int(window))

    @classmethod
    def initialize(cls, S: int, M: int, window: int, rng: Optional[np.random.Generator] = None,
                   scale: float = 1e-2) -> "ClassifierParams":
        psi = cls.zeros(S, M, window)
        if rng is not None:
            psi.W[...] = rng.normal(0.0, scale, psi.W.shape)
        return psi

    @property
    def S(self) -> int:
        return self.W.shape[0]

    @property
    def M(self) -> int:
        return self.W.shape[1] // self.window

    def named_tensors(self) -> Dict[str, np.ndarray]:
        return {"classifier/W": self.W, "classifier/b": self.b}

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.W.copy(), self.b.copy(), self.window)


@dataclass
class SemiConfig:
    """
    alpha: weight of the classification term (default 2 * subsequence length)
    window: frames per classifier window (default order + 1)
    labeled_ratio: probability of drawing a labeled batch (default: share of labeled chunks)
    """

    alpha: Optional[float] = None
    window: Optional[int] = None
    labeled_ratio: Optional[float] = None

    def resolved(self, subsequence_length: int, order: int) -> "SemiConfig":
        alpha = 2.0 * subsequence_length if self.alpha is None else float(self.alpha)
        window = order + 1 if self.window is None else int(self.window)
        bad = []
        if not alpha > 0:
            bad.append("semi.alpha")
        if window < 1:
            bad.append("semi.window")
        if self.labeled_ratio is not None and not 0.0 <= self.labeled_ratio <= 1.0:
            bad.append("semi.labeled_ratio")
        if bad:
            raise ConfigError("invalid semi-supervised settings", bad)
        return SemiConfig(alpha, window, self.labeled_ratio)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def classify(psi: ClassifierParams, v_window: np.ndarray) -> np.ndarray:
    """
    Class probabilities for one window (w x M or flat) or a batch (..., w * M)
    """
    x = np.asarray(v_window, dtype=np.float64)
    D = psi.W.shape[1]
    if x.ndim == 2 and x.shape == (psi.window, psi.M):
        x = x.reshape(-1)
    if x.shape[-1] != D:
        raise ShapeError(f"classifier window has {x.shape[-1]} values, expected {D}", ["window"])
    return softmax(x @ psi.W.T + psi.b, axis=-1)


def _log_probs(psi: ClassifierParams, X: np.ndarray) -> np.ndarray:
    return log_softmax(X @ psi.W.T + psi.b, axis=-1)


def window_starts(T: int, window: int) -> np.ndarray:
    return np.arange(0, T, window)


def classifier_windows(V: np.ndarray, window: int) -> np.ndarray:
    """
    Classifier inputs for each segment [k w, min((k+1) w, T)) of a sequence

    The input for a segment is the w frames ending at its last frame,
    zero-padded in front, flattened oldest first.

    Args:
        V: (..., T, M) observations
        window: w

    Returns:
        (..., K, w * M) with K = ceil(T / w)
    """
    V = np.asarray(V, dtype=np.float64)
    T, M = V.shape[-2], V.shape[-1]
    padded = np.concatenate([np.zeros(V.shape[:-2] + (window - 1, M)), V], axis=-2)
    ends = np.minimum(window_starts(T, window) + window, T)
    return np.stack([padded[..., e - 1:e - 1 + window, :].reshape(V.shape[:-2] + (window * M,)) for e in ends],
                    axis=-2)


def window_labels(Y: np.ndarray, window: int) -> np.ndarray:
    """Style index of each segment, read from its first frame"""
    Y = np.asarray(Y, dtype=np.float64)
    return np.argmax(Y[..., window_starts(Y.shape[-2], window), :], axis=-1)


def expand_windows(labels: np.ndarray, T: int, window: int, S: int) -> np.ndarray:
    """One-hot (..., T, S) schedule holding each segment's label over its frames"""
    frame_labels = np.repeat(labels, window, axis=-1)[..., :T]
    return np.eye(S)[frame_labels]


def _segment_sums(values: np.ndarray, window: int) -> np.ndarray:
    return np.add.reduceat(values, window_starts(values.shape[-1], window), axis=-1)


def classifier_gradients(psi: ClassifierParams, X: np.ndarray, labels: np.ndarray,
                         weights: Optional[np.ndarray] = None) -> GradientSet:
    """
    Gradient of sum_k w_k log q(labels_k | X_k) over all leading axes
    """
    X2 = X.reshape(-1, X.shape[-1])
    err = np.eye(psi.S)[labels.reshape(-1)] - softmax(X2 @ psi.W.T + psi.b, axis=-1)
    if weights is not None:
        err = err * np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return GradientSet({"classifier/W": err.T @ X2, "classifier/b": err.sum(axis=0)})


def classification_log_likelihood(psi: ClassifierParams, V: np.ndarray, Y: np.ndarray) -> float:
    """sum over windows of log q(y_k | window k)"""
    X = classifier_windows(V, psi.window)
    labels = window_labels(Y, psi.window)
    return float(np.take_along_axis(_log_probs(psi, X), labels[..., None], axis=-1).sum())


def sample_window_labels(psi: ClassifierParams, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one style per window from the classifier by inverting its CDF"""
    cdf = np.cumsum(classify(psi, X), axis=-1)
    u = rng.random(X.shape[:-1])
    return np.minimum((u[..., None] >= cdf).sum(axis=-1), psi.S - 1)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

@dataclass
class SemiEstimate:
    """Objective value per sequence, gradients, and the updated signal statistics"""

    value: float
    grads: GradientSet
    stats: SignalStats
    y_stats: Optional[SignalStats] = None
    labels: Optional[np.ndarray] = None


def _batch(V, Y=None):
    V = np.asarray(V, dtype=np.float64)
    if Y is not None:
        Y = np.asarray(Y, dtype=np.float64)
    if V.ndim == 2:
        return V[None], None if Y is None else Y[None]
    return V, Y


def labeled_objective(theta: GenerativeParams, phi: RecognitionParams, psi: ClassifierParams,
                      V: np.ndarray, Y: Optional[np.ndarray], rng: np.random.Generator, alpha: float = 1.0,
                      lam: Optional[BaselineParams] = None, stats: Optional[SignalStats] = None,
                      **options) -> SemiEstimate:
    """
    ELBO(V | Y) + alpha * log q(Y | V) with its NVIL gradient.

    The label prior is constant and omitted. Stream 0 of rng drives the
    posterior samples, matching unlabeled_objective.

    Args:
        theta, phi, psi: Generative, recognition and classifier parameters
        V: (T, M) or (B, T, M) observations
        Y: Matching one-hot labels per frame
        rng: Generator
        alpha: Classification weight (>= 0)
        lam: Baseline parameters
        stats: Signal statistics; fresh when omitted
        **options: Forwarded to the NVIL estimator

    Returns:
        SemiEstimate averaged over sequences
    """
    if Y is None:
        raise ValueError("missing labels")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    V, Y = _batch(V, Y)
    stats = stats or SignalStats()
    nvil_rng, _ = child_streams(rng, 2)
    result = nvil_batch_estimate(theta, phi, lam, stats, V, Y, nvil_rng, **options)
    grads, value = add_classification_term(psi, result, V, Y, alpha)
    return SemiEstimate(value, grads, result.stats)


def add_classification_term(psi: ClassifierParams, result: MinibatchResult, V: np.ndarray, Y: np.ndarray,
                            alpha: float) -> Tuple[GradientSet, float]:
    B = V.shape[0]
    X = classifier_windows(V, psi.window)
    labels = window_labels(Y, psi.window)
    grads = GradientSet(result.grads)
    grads.update(classifier_gradients(psi, X, labels).scaled(alpha / B))
    value = result.elbo + alpha * classification_log_likelihood(psi, V, Y) / B
    return grads, value


def unlabeled_objective(theta: GenerativeParams, phi: RecognitionParams, psi: ClassifierParams,
                        V: np.ndarray, rng: np.random.Generator, lam: Optional[BaselineParams] = None,
                        stats: Optional[SignalStats] = None, y_stats: Optional[SignalStats] = None,
                        use_centering: bool = True, use_normalization: bool = True,
                        update_stats: bool = True, **options) -> SemiEstimate:
    """
    Bound on log p(V) with the window labels treated as latent.

    Labels are drawn from the classifier (stream 1), then the NVIL estimator
    runs with those labels (stream 0). The classifier gets a score-function
    gradient whose signal for window k is the window's summed centered
    signal minus log q(y_k | V), centered and scaled by its own running
    statistics.

    Returns:
        SemiEstimate averaged over sequences, with the sampled labels
    """
    V, _ = _batch(V)
    B, T = V.shape[0], V.shape[1]
    S = theta.dims.S
    stats = stats or SignalStats()
    y_stats = y_stats or SignalStats(rho=stats.rho)
    nvil_rng, y_rng = child_streams(rng, 2)

    X = classifier_windows(V, psi.window)
    labels = sample_window_labels(psi, X, y_rng)
    Y = expand_windows(labels, T, psi.window, S)
    result = nvil_batch_estimate(theta, phi, lam, stats, V, Y, nvil_rng, use_centering=use_centering,
                                 use_normalization=use_normalization, update_stats=update_stats, **options)

    log_qy = np.take_along_axis(_log_probs(psi, X), labels[..., None], axis=-1)[..., 0]
    centered = result.step_elbo
    if lam is not None and options.get("use_baseline", True):
        centered = centered - baseline_values(lam, baseline_features(V, Y, theta.dims.order))
    window_signal = _segment_sums(centered, psi.window) - log_qy
    if update_stats:
        y_stats = y_stats.update(float(window_signal.mean()), float(window_signal.var()))
    if use_centering:
        window_signal = window_signal - y_stats.kappa
    if use_normalization:
        window_signal = window_signal / y_stats.divisor

    grads = GradientSet(result.grads)
    grads.update(classifier_gradients(psi, X, labels, window_signal).scaled(1.0 / B))
    value = result.elbo - float(log_qy.sum()) / B
    return SemiEstimate(value, grads, result.stats, y_stats, labels)


def estimate_unlabeled_bound(theta: GenerativeParams, phi: RecognitionParams, psi: ClassifierParams,
                             V: np.ndarray, rng: np.random.Generator, num_samples: int) -> np.ndarray:
    """
    Monte Carlo samples of sum_t l_t - sum_k log q(y_k | V) for one sequence

    Args:
        V: T x M observations
        num_samples: Number of joint (y, H) draws

    Returns:
        Array of num_samples values; their mean estimates the unlabeled bound
    """
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    V = np.asarray(V, dtype=np.float64)
    T = V.shape[0]
    y_rng, h_rng = child_streams(rng, 2)
    windows = classifier_windows(V, psi.window)
    X = np.broadcast_to(windows, (num_samples,) + windows.shape)
    labels = sample_window_labels(psi, X, y_rng)
    Y = expand_windows(labels, T, psi.window, theta.dims.S)
    Vb = np.broadcast_to(V, (num_samples,) + V.shape).copy()
    uniforms = [h_rng.random((num_samples, T, J)) for J in theta.dims.layer_sizes]
    H = stack_sample(phi, Vb, Y, uniforms)
    signal = stack_log_terms(theta, Vb, H, Y) - stack_log_q_terms(phi, Vb, H, Y)
    log_qy = np.take_along_axis(_log_probs(psi, X), labels[..., None], axis=-1)[..., 0]
    return signal.sum(axis=-1) - log_qy.sum(axis=-1)


# ---------------------------------------------------------------------------
# reference classifier and accuracy
# ---------------------------------------------------------------------------

def window_dataset(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], window: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stack classifier windows and their labels over labeled (V, Y) pairs"""
    if not pairs:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    X = np.vstack([classifier_windows(V, window) for V, _ in pairs])
    labels = np.concatenate([window_labels(Y, window) for _, Y in pairs])
    return X, labels


def accuracy(psi: ClassifierParams, pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Optional[float]:
    """Fraction of windows whose most probable class matches the label"""
    X, labels = window_dataset(pairs, psi.window)
    if labels.size == 0:
        return None
    return float(accuracy_score(labels, np.argmax(classify(psi, X), axis=-1)))


def fit_softmax_baseline(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], S: int, window: int,
                         C: float = 1.0) -> ClassifierParams:
    """
    Softmax classifier fitted on labeled windows alone

    Args:
        pairs: Labeled (V, Y) pairs
        S: Number of classes
        window: Frames per window
        C: Inverse regularization strength

    Returns:
        ClassifierParams with the fitted weights
    """
    X, labels = window_dataset(pairs, window)
    if labels.size == 0:
        raise ValueError("no labeled windows to fit")
    psi = ClassifierParams.zeros(S, X.shape[1] // window, window)
    classes = np.unique(labels)
    if classes.size == 1:
        psi.b[...] = -30.0
        psi.b[classes[0]] = 0.0
        return psi
    model = LogisticRegression(C=C, max_iter=1000)
    model.fit(X, labels)
    if classes.size == 2:
        psi.W[classes[1]] = model.coef_[0]
        psi.b[classes[1]] = model.intercept_[0]
        absent = [s for s in range(S) if s not in classes]
    else:
        for row, cls in enumerate(model.classes_):
            psi.W[cls] = model.coef_[row]
            psi.b[cls] = model.intercept_[row]
        absent = [s for s in range(S) if s not in model.classes_]
    psi.b[absent] = -30.0
    return psi


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class SemiSupervisedTrainer(NVILTrainer):
    """
    NVILTrainer plus a classifier; each step draws a labeled or an unlabeled batch
    """

    log_files = ("metrics.jsonl", "accuracy.jsonl")

    def __init__(self, config: TrainConfig, semi: SemiConfig, dims: Dims, obs_kind, rng: np.random.Generator):
        super().__init__(config, dims, obs_kind, rng)
        self.semi = semi.resolved(config.subsequence_length, dims.order)
        self.class_rng, self.coin_rng = self.streams[4:6]
        self.psi = ClassifierParams.initialize(dims.S, dims.M, self.semi.window, self.class_rng)
        self.y_stats = SignalStats(rho=config.rho)
        self.accuracy_log: List[Dict] = []
        if config.verbose:
            print(f"   Classifier: window={self.semi.window} alpha={self.semi.alpha:g}")

    def num_streams(self) -> int:
        return 6

    def parameters(self) -> Dict[str, np.ndarray]:
        out = super().parameters()
        out.update(self.psi.named_tensors())
        return out

    def labeled_step(self, V: np.ndarray, Y: np.ndarray) -> Tuple[MinibatchResult, float]:
        result = self.minibatch(V, Y)
        grads, value = add_classification_term(self.psi, result, V, Y, self.semi.alpha)
        self.apply(grads)
        return result, value

    def unlabeled_step(self, V: np.ndarray) -> SemiEstimate:
        cfg = self.config
        est = unlabeled_objective(
            self.theta, self.phi, self.psi, V, self.sample_rng, lam=self.baseline, stats=self.stats,
            y_stats=self.y_stats, use_centering=cfg.use_centering, use_normalization=cfg.use_normalization,
            use_baseline=cfg.use_baseline, workers=cfg.threads, deterministic=cfg.deterministic,
        )
        self.stats, self.y_stats = est.stats, est.y_stats
        self.apply(est.grads)
        return est

    def apply(self, grads: GradientSet):
        rmsprop_step(self.opt, self.parameters(), grads)

    def checkpoint_parts(self) -> Dict:
        parts = super().checkpoint_parts()
        parts.update(classifier=self.psi, y_stats=self.y_stats)
        return parts

    def restore(self, checkpoint) -> None:
        """NVILTrainer.restore plus the classifier and its signal statistics when stored"""
        psi = checkpoint.classifier
        if psi is not None:
            if psi.window != self.psi.window:
                raise ConfigError(f"checkpoint classifier window is {psi.window}, this run uses {self.psi.window}",
                                  ["semi.window"])
            for name, target in self.psi.named_tensors().items():
                target[...] = psi.named_tensors()[name]
        if checkpoint.y_stats is not None:
            self.y_stats = replace(checkpoint.y_stats, rho=self.config.rho)
        super().restore(checkpoint)

    def labeled_probability(self, n_labeled: int, n_unlabeled: int) -> float:
        if self.semi.labeled_ratio is not None:
            return self.semi.labeled_ratio
        return n_labeled / max(1, n_labeled + n_unlabeled)

    def run_epoch(self, epoch: int, chunks, holdout: Sequence) -> Dict:
        labeled, unlabeled = chunks
        lq = self.epoch_batches(labeled) if labeled else []
        uq = self.epoch_batches(unlabeled) if unlabeled else []
        p_labeled = self.labeled_probability(len(labeled), len(unlabeled))
        total, frames = 0.0, 0
        means, variances, norms = [], [], {}
        while lq or uq:
            take_labeled = (self.coin_rng.random() < p_labeled) if (lq and uq) else bool(lq)
            if take_labeled:
                idx = lq.pop(0)
                V = np.stack([labeled[i][0] for i in idx])
                Y = np.stack([labeled[i][1] for i in idx])
                result, _ = self.labeled_step(V, Y)
                total += result.elbo * len(idx)
                means.append(result.signal_mean)
                variances.append(result.signal_var)
                grads = result.grads
            else:
                idx = uq.pop(0)
                V = np.stack([unlabeled[i][0] for i in idx])
                est = self.unlabeled_step(V)
                total += est.value * len(idx)
                grads = est.grads
            frames += V.shape[0] * V.shape[1]
            for k, v in grads.group_norms().items():
                norms.setdefault(k, []).append(v)
        rec = self.record(epoch, total / max(frames, 1), means, variances, norms, holdout)
        acc = {"epoch": epoch, "accuracy": accuracy(self.psi, holdout)}
        self.accuracy_log.append(acc)
        self.write_metrics(acc, "accuracy.jsonl")
        return rec

    def fit_semi(self, labeled_seqs: Sequence[Tuple[np.ndarray, np.ndarray]], unlabeled_seqs: Sequence[np.ndarray],
                 holdout: Sequence[Tuple[np.ndarray, np.ndarray]] = ()) -> List[Dict]:
        """
        Train on labeled (V, Y) pairs and unlabeled V arrays

        Returns:
            Metrics history; per-epoch held-out accuracy is in accuracy_log
        """
        S = self.dims.S
        placeholder = [(V, np.ones((V.shape[0], S)) / S) for V in unlabeled_seqs]
        length = self.chunk_length(list(labeled_seqs) + placeholder)
        chunks = (make_chunks(labeled_seqs, length), make_chunks(placeholder, length))
        if self.config.verbose:
            print(f"\n🎓 Semi-supervised training: {len(labeled_seqs)} labeled, "
                  f"{len(unlabeled_seqs)} unlabeled sequences ({length}-frame chunks)")
        return self.train_loop(chunks, holdout)


@dataclass
class SemiResult:
    theta: GenerativeParams
    phi: RecognitionParams
    psi: ClassifierParams
    baseline: BaselineParams
    opt: OptState
    history: List[Dict] = field(default_factory=list)
    accuracy_log: List[Dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None


def semi_train(config: TrainConfig, semi: SemiConfig, labeled_set, unlabeled_set, rng: np.random.Generator,
               meta: Optional[Dict] = None) -> SemiResult:
    """
    Joint training on labeled and unlabeled sequences.

    The labeled set is split like train() splits a dataset; its held-out part
    is used for prediction error and classification accuracy every epoch.

    Args:
        config: Training configuration
        semi: Semi-supervised settings
        labeled_set: SequenceDataset whose records all carry labels or side information
        unlabeled_set: SequenceDataset (or None) whose labels are ignored
        rng: Run generator
        meta: Extra entries for the checkpoint manifest

    Returns:
        SemiResult
    """
    if rng is None:
        raise ValueError("rng required")
    if labeled_set is None or len(labeled_set) == 0:
        raise ValueError("semi-supervised training needs at least one labeled sequence")
    dims = config.dims_for(labeled_set.M, labeled_set.S)
    if unlabeled_set is not None and len(unlabeled_set) and unlabeled_set.M != dims.M:
        raise ShapeError(f"unlabeled sequences have {unlabeled_set.M} dimensions, labeled have {dims.M}", ["M"])
    trainer = SemiSupervisedTrainer(config, semi, dims, labeled_set.obs_kind, rng)
    trainer.meta.update(meta or {})
    trainer.resume_if_requested()
    train_records, holdout_records = split_holdout(labeled_set.records, config.holdout_fraction)
    unlabeled = [r.V for r in unlabeled_set.records] if unlabeled_set is not None else []
    trainer.fit_semi([labeled_set.pair(r) for r in train_records], unlabeled,
                     [labeled_set.pair(r) for r in holdout_records])
    path = trainer.save() if config.out_dir else None
    return SemiResult(trainer.theta, trainer.phi, trainer.psi, trainer.baseline, trainer.opt,
                      trainer.history, trainer.accuracy_log, path)
