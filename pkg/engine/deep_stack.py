"""
Deep FCTSBN: stochastic hidden layers stacked above the visible layer
Layer l at step t reads layer l+1 at t, its own lags, and the lags of layer l-1
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from engine.errors import ShapeError
from engine.model_core import (
    GenerativeParams,
    HiddenStates,
    bernoulli_log_terms,
    emission_log_terms,
    emission_preactivations,
    generate,
    layer_logits,
    log_joint,
)
from engine.nvil_trainer import (
    BaselineParams,
    GradientSet,
    SignalStats,
    nvil_batch_estimate,
    stack_batch,
)
from engine.recognition import RecognitionParams, stack_posterior_logits


@dataclass(frozen=True)
class DeepWiring:
    """
    Which states feed each hidden layer
    """

    M: int
    layer_sizes: Tuple[int, ...]
    order: int

    @classmethod
    def from_params(cls, theta: GenerativeParams) -> "DeepWiring":
        return cls(theta.dims.M, theta.dims.layer_sizes, theta.dims.order)

    @property
    def L(self) -> int:
        return len(self.layer_sizes)

    def parents(self, layer: int) -> Dict[str, Optional[str]]:
        """
        Inputs of a 1-based hidden layer

        Returns:
            Mapping of role to source: 'lagged_self', 'lagged_below', 'current_above'
        """
        if not 1 <= layer <= self.L:
            raise ShapeError(f"layer {layer} outside 1..{self.L}", ["layers"])
        return {
            "lagged_self": f"layer{layer}",
            "lagged_below": "visible" if layer == 1 else f"layer{layer - 1}",
            "current_above": f"layer{layer + 1}" if layer < self.L else None,
        }

    def validate(self, theta: GenerativeParams, phi: Optional[RecognitionParams] = None):
        if theta.dims.layer_sizes != self.layer_sizes or len(theta.layers) != self.L:
            raise ShapeError(f"generative model has layers {theta.dims.layer_sizes}, wiring {self.layer_sizes}", ["layers"])
        for i, layer in enumerate(theta.layers):
            if (layer.W_above is None) != (i == self.L - 1):
                raise ShapeError(f"layer {i + 1} top-down weight does not match the stack depth", ["layers"])
        if phi is not None and phi.dims.layer_sizes != self.layer_sizes:
            raise ShapeError(f"recognition model has layers {phi.dims.layer_sizes}, wiring {self.layer_sizes}", ["layers"])


def _layer_list(theta: GenerativeParams, H_layers) -> List[np.ndarray]:
    layers = H_layers.layers if isinstance(H_layers, HiddenStates) else list(H_layers)
    if len(layers) != theta.dims.L:
        raise ShapeError(f"got {len(layers)} hidden layers, model has {theta.dims.L}", ["layers"])
    return layers


def deep_log_joint(theta: GenerativeParams, V, H_layers, Y) -> float:
    """
    log p(V, H^(1..L) | Y) summed over layers and time
    """
    DeepWiring.from_params(theta).validate(theta)
    return log_joint(theta, V, _layer_list(theta, H_layers), Y)


def layer_elbo_terms(theta: GenerativeParams, phi: RecognitionParams, V: np.ndarray,
                     H: List[np.ndarray], Y: np.ndarray) -> List[np.ndarray]:
    """
    Per-layer split of the per-step signal.

    Entry l is log p(h^l_t | .) - log q(h^l_t | .); the observation term is
    added to the first entry. The entries sum to the per-step l_t.
    """
    posts = stack_posterior_logits(phi, V, H, Y)
    terms = []
    for i in range(theta.dims.L):
        prior = layer_logits(theta, i, V, H, Y)
        terms.append(bernoulli_log_terms(H[i], prior) - bernoulli_log_terms(H[i], posts[i]))
    pre, raw = emission_preactivations(theta, V, H[0], Y)
    terms[0] = terms[0] + emission_log_terms(theta.obs_kind, V, pre, raw)
    return terms


@dataclass
class DeepEstimate:
    per_layer: Dict[str, GradientSet]
    grads: GradientSet
    stats: SignalStats
    elbo: float


def split_by_layer(grads: GradientSet, L: int) -> Dict[str, GradientSet]:
    """Group generative and recognition gradients by layer; other tensors keep their prefix"""
    out: Dict[str, GradientSet] = {f"layer{i + 1}": GradientSet() for i in range(L)}
    for name, g in grads.items():
        parts = name.split("/")
        key = parts[1] if parts[0] == "recognition" else parts[0]
        out.setdefault(key, GradientSet())[name] = g
    return out


def deep_elbo_and_grads(theta: GenerativeParams, phi: RecognitionParams, lam: Optional[BaselineParams],
                        stats: SignalStats, batch, rng: np.random.Generator, **options) -> DeepEstimate:
    """
    NVIL estimate for a stack, with gradients grouped per layer.

    Every layer shares the per-step signal; each layer's tensors only
    receive gradient from that layer's own conditionals.

    Args:
        theta: Generative parameters
        phi: Recognition parameters
        lam: Baseline parameters
        stats: Running signal statistics
        batch: Batch accepted by nvil_minibatch
        rng: Generator
        **options: Forwarded to the minibatch estimator

    Returns:
        DeepEstimate
    """
    DeepWiring.from_params(theta).validate(theta, phi)
    V, Y = stack_batch(batch)
    result = nvil_batch_estimate(theta, phi, lam, stats, V, Y, rng, **options)
    return DeepEstimate(split_by_layer(result.grads, theta.dims.L), result.grads, result.stats, result.elbo)


def deep_generate(theta: GenerativeParams, seeds: Optional[Sequence[Optional[np.ndarray]]], schedule, T: int,
                  rng: np.random.Generator, count_total: int = 1) -> Tuple[np.ndarray, HiddenStates]:
    """
    Ancestral sampling through the stack

    Args:
        theta: Generative parameters
        seeds: [visible seed, layer-1 seed, ..., layer-L seed]; entries may be None
        schedule: StyleSchedule or T x S array
        T: Frames to generate
        rng: Generator

    Returns:
        (V, HiddenStates)
    """
    DeepWiring.from_params(theta).validate(theta)
    if seeds is None:
        seeds = [None] * (theta.dims.L + 1)
    seeds = list(seeds)
    if len(seeds) != theta.dims.L + 1:
        raise ShapeError(f"expected {theta.dims.L + 1} seed blocks, got {len(seeds)}", ["layers"])
    return generate(theta, seeds[0], schedule, T, rng, count_total, hidden_seeds=seeds[1:])
