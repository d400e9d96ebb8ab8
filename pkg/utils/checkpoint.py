"""
Checkpoint persistence: one JSON manifest line followed by a little-endian float64 blob
Every tensor is listed in the manifest by name, shape, dtype and offset into the blob
"""
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from engine.errors import CheckpointError
from engine.model_core import Dims, GenerativeParams, ObsKind
from engine.nvil_trainer import BaselineParams, OptState, SignalStats
from engine.recognition import RecognitionParams
from engine.semi_supervised import ClassifierParams

FORMAT_VERSION = 1
DTYPE = "f64"
BLOB_DTYPE = np.dtype("<f8")

SIGNAL_STATS = "training/signal_stats"
Y_SIGNAL_STATS = "training/y_signal_stats"
OPTIMIZER = "training/optimizer"
ACCUMULATOR_PREFIX = "optimizer/"


@dataclass
class Checkpoint:
    """
    Everything restored from a .fctsbn file; optional parts are None when absent
    """

    theta: GenerativeParams
    phi: Optional[RecognitionParams] = None
    baseline: Optional[BaselineParams] = None
    classifier: Optional[ClassifierParams] = None
    meta: Dict = field(default_factory=dict)
    stats: Optional[SignalStats] = None
    y_stats: Optional[SignalStats] = None
    opt: Optional[OptState] = None

    @property
    def dims(self) -> Dims:
        return self.theta.dims

    @property
    def obs_kind(self) -> ObsKind:
        return self.theta.obs_kind

    def parameters(self) -> Dict[str, np.ndarray]:
        """Every stored parameter tensor by name"""
        return _named(self.theta, self.phi, self.baseline, self.classifier)


def _named(theta, phi, baseline, classifier) -> Dict[str, np.ndarray]:
    tensors = dict(theta.named_tensors())
    for part in (phi, baseline, classifier):
        if part is not None:
            tensors.update(part.named_tensors())
    return tensors


def _stats_array(stats: SignalStats) -> np.ndarray:
    return np.array([stats.kappa, stats.tau, stats.rho], dtype=np.float64)


def _stats_from(values: np.ndarray) -> SignalStats:
    return SignalStats(kappa=float(values[0]), tau=float(values[1]), rho=float(values[2]))


def _optimizer_array(opt: OptState) -> np.ndarray:
    return np.array([opt.lr, opt.decay, opt.eps, opt.steps, opt.skipped], dtype=np.float64)


def _training_tensors(params: Dict[str, np.ndarray], stats: Optional[SignalStats],
                      y_stats: Optional[SignalStats], opt: Optional[OptState]) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    if stats is not None:
        out[SIGNAL_STATS] = _stats_array(stats)
    if y_stats is not None:
        out[Y_SIGNAL_STATS] = _stats_array(y_stats)
    if opt is not None:
        out[OPTIMIZER] = _optimizer_array(opt)
        for name, acc in sorted(opt.accumulators.items()):
            if name not in params:
                raise CheckpointError(f"optimizer accumulator for unknown tensor '{name}'")
            out[ACCUMULATOR_PREFIX + name] = acc
    return out


def save_checkpoint(path: str, theta: GenerativeParams, phi: Optional[RecognitionParams] = None,
                    baseline: Optional[BaselineParams] = None, classifier: Optional[ClassifierParams] = None,
                    meta: Optional[Dict] = None, stats: Optional[SignalStats] = None,
                    y_stats: Optional[SignalStats] = None, opt: Optional[OptState] = None) -> str:
    """
    Write parameters to disk

    Args:
        path: Output file, conventionally <name>.fctsbn
        theta: Generative parameters
        phi: Recognition parameters
        baseline: Baseline network
        classifier: Semi-supervised classifier
        meta: JSON-serializable extras (normalization stats, config, ...)
        stats: Running learning-signal statistics
        y_stats: Running statistics of the classifier signal (semi-supervised runs)
        opt: RMSprop state; its accumulators are stored as optimizer/<tensor>

    Returns:
        The path written
    """
    tensors = _named(theta, phi, baseline, classifier)
    tensors.update(_training_tensors(tensors, stats, y_stats, opt))
    entries, offset = [], 0
    for name, array in tensors.items():
        entries.append({"name": name, "shape": list(np.shape(array)), "dtype": DTYPE, "offset": offset})
        offset += int(np.size(array))
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": theta.dims.to_dict(),
        "obs_kind": theta.obs_kind.value,
        "factored": theta.factored,
        "hidden_markov": theta.hidden_markov,
        "has_recognition": phi is not None,
        "baseline_hidden": None if baseline is None else baseline.hidden,
        "classifier_window": None if classifier is None else classifier.window,
        "tensors": entries,
        "values": offset,
        "meta": meta or {},
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(a, dtype=BLOB_DTYPE).tobytes() for a in tensors.values())
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)
    return path


def _read_manifest(raw: bytes, path: str):
    head, sep, blob = raw.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})")
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise CheckpointError(f"{path}: manifest has no format_version; not a checkpoint")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {manifest['format_version']} is incompatible "
                              f"with this build (version {FORMAT_VERSION})")
    return manifest, blob


def _target_shape(name: str, targets: Dict[str, np.ndarray], path: str):
    if name in targets:
        return targets[name].shape
    if name in (SIGNAL_STATS, Y_SIGNAL_STATS):
        return (3,)
    if name == OPTIMIZER:
        return (5,)
    if name.startswith(ACCUMULATOR_PREFIX) and name[len(ACCUMULATOR_PREFIX):] in targets:
        return targets[name[len(ACCUMULATOR_PREFIX):]].shape
    raise CheckpointError(f"{path}: unknown tensor '{name}'")


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint

    Args:
        path: .fctsbn file

    Returns:
        Checkpoint; values are bit-identical to what was saved
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    manifest, blob = _read_manifest(raw, path)

    try:
        dims = Dims.from_dict(manifest["dims"])
        theta = GenerativeParams.zeros(dims, manifest["obs_kind"], manifest["factored"], manifest["hidden_markov"])
        phi = RecognitionParams.zeros(dims, manifest["factored"]) if manifest.get("has_recognition") else None
        baseline = None
        if manifest.get("baseline_hidden"):
            baseline = BaselineParams.for_dims(dims, int(manifest["baseline_hidden"]))
        classifier = None
        if manifest.get("classifier_window"):
            classifier = ClassifierParams.zeros(dims.S, dims.M, int(manifest["classifier_window"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid model description in manifest ({e})")

    if len(blob) % BLOB_DTYPE.itemsize:
        raise CheckpointError(f"{path}: truncated blob ({len(blob)} bytes)")
    values = np.frombuffer(blob, dtype=BLOB_DTYPE)
    expected = manifest.get("values")
    if expected is not None and values.size != expected:
        raise CheckpointError(f"{path}: truncated blob ({values.size} of {expected} values)")

    targets = _named(theta, phi, baseline, classifier)
    extras: Dict[str, np.ndarray] = {}
    filled = set()
    for entry in manifest.get("tensors", []):
        name = entry.get("name")
        if entry.get("dtype") != DTYPE:
            raise CheckpointError(f"{path}: tensor '{name}' has dtype {entry.get('dtype')!r}, expected '{DTYPE}'")
        expected_shape = _target_shape(name, targets, path)
        shape = tuple(entry.get("shape", ()))
        if shape != expected_shape:
            raise CheckpointError(f"{path}: tensor '{name}' has shape {shape} in the manifest, "
                                  f"model expects {expected_shape}")
        start = int(entry.get("offset", 0))
        stop = start + int(np.prod(shape, dtype=np.int64))
        if start < 0 or stop > values.size:
            raise CheckpointError(f"{path}: truncated blob while reading tensor '{name}'")
        if name in targets:
            targets[name][...] = values[start:stop].reshape(shape)
            filled.add(name)
        else:
            extras[name] = values[start:stop].reshape(shape).copy()
    missing = sorted(set(targets) - filled)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")

    stats = _stats_from(extras[SIGNAL_STATS]) if SIGNAL_STATS in extras else None
    y_stats = _stats_from(extras[Y_SIGNAL_STATS]) if Y_SIGNAL_STATS in extras else None
    opt = None
    if OPTIMIZER in extras:
        lr, decay, eps, steps, skipped = extras[OPTIMIZER]
        accumulators = {name[len(ACCUMULATOR_PREFIX):]: value for name, value in extras.items()
                        if name.startswith(ACCUMULATOR_PREFIX)}
        opt = OptState(lr=float(lr), decay=float(decay), eps=float(eps), accumulators=accumulators,
                       skipped=int(skipped), steps=int(steps))
    return Checkpoint(theta, phi, baseline, classifier, manifest.get("meta", {}), stats, y_stats, opt)
