"""
Finite-difference checks of every closed-form gradient
Central differences on random small instances; one report row per tensor
"""
import itertools
from typing import Callable, Dict, List, Optional

import numpy as np

from engine.enumeration import random_instance
from engine.model_core import ObsKind, stack_log_terms, stack_model_gradients
from engine.nvil_trainer import BaselineParams, baseline_features, baseline_gradients, baseline_values
from engine.recognition import stack_log_q_terms, stack_sample, stack_score_gradients
from engine.rng import child_streams, make_rng
from engine.semi_supervised import (
    ClassifierParams,
    classification_log_likelihood,
    classifier_gradients,
    classifier_windows,
    window_labels,
)

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-7
PROBES = 7


def combinations() -> List[Dict]:
    """Observation family x dense/factored x order {1, 3} x depth {1, 2}"""
    out = []
    for kind, factored, order, depth in itertools.product(list(ObsKind), (False, True), (1, 3), (1, 2)):
        out.append({"obs_kind": kind, "factored": factored, "order": order,
                    "layer_sizes": (3,) if depth == 1 else (3, 2)})
    return out


def check_tensors(objective: Callable[[], float], tensors: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray],
                  rng: np.random.Generator, probes: int = PROBES, step: float = STEP,
                  rtol: float = RTOL, atol: float = ATOL) -> List[Dict]:
    """
    Compare analytic gradients with central differences at random entries

    Args:
        objective: Scalar function of the live tensors
        tensors: Name -> live array, perturbed in place and restored
        analytic: Name -> claimed gradient
        rng: Generator for choosing probe entries

    Returns:
        One row per tensor with the largest relative error over its probes;
        the error is |a - n| / max(|n|, atol / rtol)
    """
    rows = []
    for name in sorted(analytic):
        array, grad = tensors[name], analytic[name]
        count = min(probes, array.size)
        picks = rng.choice(array.size, size=count, replace=False)
        worst = 0.0
        for flat in picks:
            idx = np.unravel_index(int(flat), array.shape)
            original = array[idx]
            array[idx] = original + step
            up = objective()
            array[idx] = original - step
            down = objective()
            array[idx] = original
            numeric = (up - down) / (2.0 * step)
            err = abs(grad[idx] - numeric) / max(abs(numeric), atol / rtol)
            worst = max(worst, float(err))
        rows.append({"tensor": name, "max_rel_error": worst, "passed": worst <= rtol})
    return rows


def _corrupt(grads: Dict[str, np.ndarray], name: Optional[str]) -> Dict[str, np.ndarray]:
    if name is not None and name in grads:
        grads = dict(grads)
        grads[name] = grads[name] + 0.1
    return grads


def check_model(combo: Dict, rng: np.random.Generator, corrupt: Optional[str] = None, T: int = 5) -> List[Dict]:
    """Generative and recognition gradients for one configuration"""
    inst_rng, h_rng, w_rng, probe_rng = child_streams(rng, 4)
    theta, phi, V, Y = random_instance(inst_rng, combo["obs_kind"], combo["factored"], combo["order"],
                                       combo["layer_sizes"], T)
    uniforms = [h_rng.random((1, T, J)) for J in theta.dims.layer_sizes]
    H = [h[0] for h in stack_sample(phi, V[None], Y[None], uniforms)]
    weights = w_rng.normal(0.0, 1.0, T)

    def model_objective():
        return float(stack_log_terms(theta, V, H, Y).sum())

    def recognition_objective():
        return float((weights * stack_log_q_terms(phi, V, H, Y)).sum())

    rows = check_tensors(model_objective, theta.named_tensors(),
                         _corrupt(stack_model_gradients(theta, V, H, Y), corrupt), probe_rng)
    rows += check_tensors(recognition_objective, phi.named_tensors(),
                          _corrupt(stack_score_gradients(phi, V, H, Y, weights), corrupt), probe_rng)
    label = (f"{combo['obs_kind'].value}/{'factored' if combo['factored'] else 'dense'}"
             f"/n={combo['order']}/L={len(combo['layer_sizes'])}")
    for row in rows:
        row["config"] = label
    return rows


def check_auxiliary(rng: np.random.Generator, corrupt: Optional[str] = None, T: int = 6) -> List[Dict]:
    """Baseline network and classifier gradients"""
    inst_rng, lam_rng, s_rng, psi_rng, probe_rng = child_streams(rng, 5)
    theta, _, V, Y = random_instance(inst_rng, ObsKind.REAL, True, 2, (3,), T)
    lam = BaselineParams.for_dims(theta.dims, hidden=5, rng=lam_rng)
    lam.w_out[...] = lam_rng.normal(0.0, 1.0, lam.w_out.shape)
    lam.b_in[...] = lam_rng.normal(0.0, 0.5, lam.b_in.shape)
    X = baseline_features(V, Y, theta.dims.order)
    signals = s_rng.normal(0.0, 1.0, T)

    def baseline_objective():
        return float((signals * baseline_values(lam, X)).sum())

    rows = check_tensors(baseline_objective, lam.named_tensors(),
                         _corrupt(baseline_gradients(lam, X, signals), corrupt), probe_rng)

    psi = ClassifierParams.initialize(theta.dims.S, theta.dims.M, 2, psi_rng, scale=0.5)
    psi.b[...] = psi_rng.normal(0.0, 0.5, psi.b.shape)
    alpha = 2.0 * T

    def classifier_objective():
        return alpha * classification_log_likelihood(psi, V, Y)

    grads = classifier_gradients(psi, classifier_windows(V, psi.window), window_labels(Y, psi.window)).scaled(alpha)
    rows += check_tensors(classifier_objective, psi.named_tensors(), _corrupt(grads, corrupt), probe_rng)
    for row in rows:
        row["config"] = "auxiliary"
    return rows


def run_gradcheck(seed: int, corrupt: Optional[str] = None) -> Dict:
    """
    Full suite over every configuration plus the auxiliary networks

    Args:
        seed: Run seed
        corrupt: Tensor name whose analytic gradient gets 0.1 added (fault injection)

    Returns:
        {'passed': bool, 'failures': sorted failing tensor names, 'rows': per-tensor rows}
    """
    rng = make_rng(seed)
    combos = combinations()
    streams = child_streams(rng, len(combos) + 1)
    rows: List[Dict] = []
    for combo, stream in zip(combos, streams):
        rows += check_model(combo, stream, corrupt)
    rows += check_auxiliary(streams[-1], corrupt)
    failures = sorted({r["tensor"] for r in rows if not r["passed"]})
    return {"passed": not failures, "failures": failures, "rows": rows}
