"""
Command-line front end: train, generate, predict, classify, gradcheck, audit-enum
Every command prints newline-delimited JSON records on stdout; status lines go to stderr
"""
import argparse
import contextlib
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import numpy as np
import pandas as pd

from engine.deep_stack import deep_generate
from engine.enumeration import run_audit
from engine.errors import CheckpointError, ConfigError, DatasetError, NumericAbort, ShapeError
from engine.gradcheck import run_gradcheck
from engine.model_core import ObsKind, StyleSchedule
from engine.nvil_trainer import TrainConfig, split_holdout, train
from engine.predictor import get_checkpoint, prediction_error
from engine.rng import make_rng
from engine.semi_supervised import ClassifierParams, SemiConfig, accuracy, semi_train
from utils.data_io import NormStats, SequenceDataset, _read_matrix, load_dataset, normalize

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

# 10% -> 90% of a logistic ramp spans 2 * width * ln 9 frames; this makes it 60
DEFAULT_RAMP_WIDTH = 30.0 / math.log(9.0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelSection:
    layer_sizes: Tuple[int, ...] = (8,)
    order: int = 1
    factors: Optional[int] = 4
    factored: bool = True
    hidden_markov: bool = False
    obs_kind: str = "real"


@dataclass
class TrainSection:
    mode: str = "nvil"
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
    resume: Optional[str] = None


@dataclass
class SemiSection:
    alpha: Optional[float] = None
    window: Optional[int] = None
    labeled_ratio: Optional[float] = None
    unlabeled_path: Optional[str] = None


@dataclass
class DataSection:
    path: Optional[str] = None
    header: bool = False
    normalize: bool = True
    num_styles: Optional[int] = None
    obs_kind: Optional[str] = None


@dataclass
class TransitionSpec:
    """
    Side-information schedule for generation.

    Either a logistic ramp from one style to another,
    y_to(t) = sigmoid((t - center_frame) / width_frames), or fixed blend
    weights per style. width_frames = 0 switches hard at center_frame.
    """

    from_style: Optional[int] = None
    to_style: Optional[int] = None
    center_frame: Optional[float] = None
    width_frames: Optional[float] = None
    blend: Optional[List[float]] = None

    def validate(self, S: int, path: str = "generate.transition"):
        bad = []
        if self.blend is not None:
            w = np.asarray(self.blend, dtype=np.float64)
            if w.shape != (S,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                bad.append(f"{path}.blend")
        else:
            for name in ("from_style", "to_style"):
                value = getattr(self, name)
                if value is None or not 0 <= value < S:
                    bad.append(f"{path}.{name}")
        if self.width_frames is not None and self.width_frames < 0:
            bad.append(f"{path}.width_frames")
        if bad:
            raise ConfigError(f"transition does not fit a model with {S} styles", bad)

    def schedule(self, T: int, S: int) -> StyleSchedule:
        """T x S convex-mixture schedule"""
        self.validate(S)
        if self.blend is not None:
            return StyleSchedule(np.tile(np.asarray(self.blend, dtype=np.float64), (T, 1)), "convex")
        center = T / 2.0 if self.center_frame is None else float(self.center_frame)
        width = DEFAULT_RAMP_WIDTH if self.width_frames is None else float(self.width_frames)
        t = np.arange(T, dtype=np.float64)
        if width == 0:
            post = (t >= center).astype(np.float64)
        else:
            post = 1.0 / (1.0 + np.exp(-(t - center) / width))
        Y = np.zeros((T, S))
        Y[:, self.from_style] += 1.0 - post
        Y[:, self.to_style] += post
        return StyleSchedule(Y, "convex")


@dataclass
class GenerateSection:
    T: int = 200
    style: Optional[int] = None
    transition: Optional[TransitionSpec] = None
    count_total: int = 1
    seed_frames: Optional[str] = None


@dataclass
class PredictSection:
    num_samples: int = 10


@dataclass
class RunConfig:
    """
    Everything one CLI invocation needs; read from JSON and validated before any compute
    """

    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    semi: SemiSection = field(default_factory=SemiSection)
    data: DataSection = field(default_factory=DataSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    predict: PredictSection = field(default_factory=PredictSection)
    seed: int = 0
    deterministic: bool = False
    out: str = "runs"
    threads: Optional[int] = None
    checkpoint: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        errors: List[str] = []
        config = _build(cls, data, "", errors)
        if errors:
            raise ConfigError("invalid configuration (" + "; ".join(errors) + ")",
                              [e.split(":")[0] for e in errors])
        config.check()
        return config

    def check(self):
        """Value ranges that types alone do not catch"""
        bad = []
        m, t = self.model, self.train
        if not m.layer_sizes or any(j < 1 for j in m.layer_sizes):
            bad.append("model.layer_sizes")
        if m.order < 1:
            bad.append("model.order")
        if m.factored and (m.factors is None or m.factors < 1):
            bad.append("model.factors")
        if m.obs_kind not in [k.value for k in ObsKind]:
            bad.append("model.obs_kind")
        if self.data.obs_kind is not None and self.data.obs_kind not in [k.value for k in ObsKind]:
            bad.append("data.obs_kind")
        if t.mode not in ("nvil", "semi"):
            bad.append("train.mode")
        for name in ("batch_size", "subsequence_length", "baseline_hidden", "prediction_samples"):
            if getattr(t, name) < 1:
                bad.append(f"train.{name}")
        if t.epochs < 0:
            bad.append("train.epochs")
        if not t.learning_rate > 0:
            bad.append("train.learning_rate")
        if not 0 <= t.decay < 1:
            bad.append("train.decay")
        if not 0 <= t.rho < 1:
            bad.append("train.rho")
        if not 0 <= t.holdout_fraction < 1:
            bad.append("train.holdout_fraction")
        if self.semi.alpha is not None and not self.semi.alpha > 0:
            bad.append("semi.alpha")
        if self.generate.T < 1:
            bad.append("generate.T")
        if self.generate.count_total < 1:
            bad.append("generate.count_total")
        if self.predict.num_samples < 1:
            bad.append("predict.num_samples")
        if self.threads is not None and self.threads < 1:
            bad.append("threads")
        if bad:
            raise ConfigError("configuration values out of range", bad)

    def train_config(self, verbose: bool = True) -> TrainConfig:
        m, t = self.model, self.train
        return TrainConfig(
            layer_sizes=tuple(m.layer_sizes), order=m.order, factors=m.factors, factored=m.factored,
            hidden_markov=m.hidden_markov, epochs=t.epochs, batch_size=t.batch_size,
            subsequence_length=t.subsequence_length, learning_rate=t.learning_rate, decay=t.decay,
            eps=t.eps, rho=t.rho, baseline_hidden=t.baseline_hidden, use_baseline=t.use_baseline,
            use_centering=t.use_centering, use_normalization=t.use_normalization,
            holdout_fraction=t.holdout_fraction, prediction_samples=t.prediction_samples,
            deterministic=self.deterministic, threads=self.threads, verbose=verbose, out_dir=self.out,
            resume=t.resume,
        )

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


def _check_value(value, hint, path: str, errors: List[str]):
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(value, inner[0], path, errors)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            errors.append(f"{path}: expected an object")
            return None
        return _build(hint, value, path + ".", errors)
    if origin in (tuple, list):
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list")
            return None
        items = [_check_value(v, args[0], f"{path}[{i}]", errors) for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if hint is bool:
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number")
            return value
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string")
        return value
    return value


def _build(cls, data: Dict, prefix: str, errors: List[str]):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            errors.append(f"{prefix}{key}: unknown key")
            continue
        kwargs[key] = _check_value(value, hints[key], f"{prefix}{key}", errors)
    for f in dataclasses.fields(cls):
        if f.name not in kwargs and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            errors.append(f"{prefix}{f.name}: missing required key")
    if errors:
        return None
    return cls(**kwargs)


def load_config(path: Optional[str]) -> RunConfig:
    """Read a JSON RunConfig; no path gives the defaults"""
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON ({e})", ["config"])
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object", ["config"])
    return RunConfig.from_dict(data)


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags win over the config file"""
    simple = {"seed": "seed", "out": "out", "threads": "threads", "checkpoint": "checkpoint"}
    for attr, key in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            setattr(config, key, value)
    if getattr(args, "deterministic", False):
        config.deterministic = True
    if getattr(args, "data", None) is not None:
        config.data.path = args.data
    if getattr(args, "obs_kind", None) is not None:
        config.data.obs_kind = args.obs_kind
    if getattr(args, "epochs", None) is not None:
        config.train.epochs = args.epochs
    if getattr(args, "resume", None) is not None:
        config.train.resume = args.resume
    if getattr(args, "num_samples", None) is not None:
        config.predict.num_samples = args.num_samples
    gen = config.generate
    if getattr(args, "T", None) is not None:
        gen.T = args.T
    if getattr(args, "style", None) is not None:
        gen.style = args.style
    if getattr(args, "count_total", None) is not None:
        gen.count_total = args.count_total
    if getattr(args, "blend", None) is not None:
        gen.transition = TransitionSpec(blend=[float(w) for w in args.blend.split(",")])
    elif getattr(args, "from_style", None) is not None or getattr(args, "to_style", None) is not None:
        gen.transition = TransitionSpec(args.from_style, args.to_style, args.center, args.width)
    config.check()
    return config


def _require(value, path: str):
    if value is None:
        raise ConfigError("required setting is missing", [path])
    return value


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

Emit = Callable[[Dict], None]


def _load_data(config: RunConfig, obs_kind, path: Optional[str] = None,
               num_styles: Optional[int] = None) -> SequenceDataset:
    path = path or _require(config.data.path, "data.path")
    return load_dataset(path, obs_kind, header=config.data.header,
                        num_styles=num_styles or config.data.num_styles, verbose=True)


def _check_kind(data_kind: Optional[str], checkpoint_kind: ObsKind):
    if data_kind is not None and ObsKind.parse(data_kind) != checkpoint_kind:
        raise ConfigError(f"data are {data_kind} but the checkpoint models {checkpoint_kind.value} observations",
                          ["data.obs_kind"])


def cmd_train(config: RunConfig, emit: Emit) -> int:
    """Train per config.train.mode and write the checkpoint plus metrics log"""
    dataset = _load_data(config, config.data.obs_kind or config.model.obs_kind)
    if len(dataset) == 0:
        raise DatasetError(f"no sequences found in {config.data.path}")
    meta: Dict = {"config": config.to_dict()}
    tc = config.train_config()
    if dataset.obs_kind == ObsKind.REAL and config.data.normalize:
        train_records, _ = split_holdout(dataset.records, tc.holdout_fraction)
        dataset, stats = normalize(dataset, train_records=train_records)
        meta["norm"] = stats.to_dict()
    rng = make_rng(config.seed)

    if config.train.mode == "semi":
        labeled = dataset.subset(dataset.labeled)
        if not len(labeled):
            raise DatasetError(f"semi-supervised training found no labeled sequences in {config.data.path}")
        unlabeled = dataset.subset(dataset.unlabeled)
        if config.semi.unlabeled_path:
            extra = _load_data(config, dataset.obs_kind, config.semi.unlabeled_path, dataset.S)
            if "norm" in meta:
                extra, _ = normalize(extra, NormStats.from_dict(meta["norm"]))
            unlabeled = dataset.subset(unlabeled.records + extra.records)
        semi = SemiConfig(config.semi.alpha, config.semi.window, config.semi.labeled_ratio)
        result = semi_train(tc, semi, labeled, unlabeled, rng, meta=meta)
        for rec, acc in zip(result.history, result.accuracy_log):
            emit({"command": "train", **rec, "accuracy": acc["accuracy"]})
    else:
        result = train(tc, dataset, rng, meta=meta)
        for rec in result.history:
            emit({"command": "train", **rec})
    emit({
        "command": "train",
        "status": "ok",
        "checkpoint": result.checkpoint_path,
        "epochs": len(result.history),
        "final_elbo": result.history[-1]["elbo"] if result.history else None,
        "skipped_steps": result.opt.skipped,
    })
    return EXIT_OK


def _seed_frames(path: Optional[str], header: bool, norm: Optional[NormStats]) -> Optional[np.ndarray]:
    if path is None:
        return None
    frames = _read_matrix(path, header)
    return norm.apply(frames) if norm is not None else frames


def cmd_generate(config: RunConfig, emit: Emit) -> int:
    """Sample a sequence under a constant, ramped or blended schedule and write it as CSV"""
    ckpt = get_checkpoint(_require(config.checkpoint, "checkpoint"))
    dims, gen = ckpt.dims, config.generate
    if gen.transition is not None:
        schedule = gen.transition.schedule(gen.T, dims.S)
    else:
        style = 0 if gen.style is None else gen.style
        if not 0 <= style < dims.S:
            raise ConfigError(f"style {style} out of range for {dims.S} styles", ["generate.style"])
        schedule = StyleSchedule.constant(style, gen.T, dims.S)
    norm = None
    if "norm" in ckpt.meta and ckpt.obs_kind == ObsKind.REAL:
        norm = NormStats.from_dict(ckpt.meta["norm"])
    seeds = [_seed_frames(gen.seed_frames, config.data.header, norm)] + [None] * dims.L
    V, _ = deep_generate(ckpt.theta, seeds, schedule, gen.T, make_rng(config.seed), count_total=gen.count_total)
    if norm is not None:
        V = norm.invert(V)

    os.makedirs(config.out, exist_ok=True)
    v_path = os.path.join(config.out, "generated.csv")
    y_path = os.path.join(config.out, "generated.y.csv")
    pd.DataFrame(V).to_csv(v_path, header=False, index=False, float_format="%.17g")
    pd.DataFrame(schedule.Y).to_csv(y_path, header=False, index=False, float_format="%.17g")
    emit({"command": "generate", "status": "ok", "T": gen.T, "observations": v_path, "side_info": y_path,
          "frame_mean": V.mean(axis=0).tolist()})
    return EXIT_OK


def _eval_dataset(config: RunConfig, ckpt) -> SequenceDataset:
    _check_kind(config.data.obs_kind, ckpt.obs_kind)
    dataset = _load_data(config, ckpt.obs_kind, num_styles=ckpt.dims.S)
    if dataset.M != ckpt.dims.M and len(dataset):
        raise DatasetError(f"data have {dataset.M} dimensions, checkpoint expects {ckpt.dims.M}")
    if "norm" in ckpt.meta and ckpt.obs_kind == ObsKind.REAL:
        dataset, _ = normalize(dataset, NormStats.from_dict(ckpt.meta["norm"]))
    return dataset


def cmd_predict(config: RunConfig, emit: Emit) -> int:
    """One-step-ahead mean absolute error on a dataset"""
    ckpt = get_checkpoint(_require(config.checkpoint, "checkpoint"))
    if ckpt.phi is None:
        raise CheckpointError("checkpoint has no recognition parameters; prediction needs them")
    dataset = _eval_dataset(config, ckpt)
    mae = prediction_error(ckpt.theta, ckpt.phi, dataset.pairs(), config.predict.num_samples,
                           make_rng(config.seed))
    emit({"command": "predict", "status": "ok", "mae": mae, "sequences": len(dataset),
          "num_samples": config.predict.num_samples})
    return EXIT_OK


def cmd_classify(config: RunConfig, emit: Emit) -> int:
    """Window classification accuracy on the labeled sequences of a dataset"""
    ckpt = get_checkpoint(_require(config.checkpoint, "checkpoint"))
    dataset = _eval_dataset(config, ckpt)
    psi = ckpt.classifier
    if psi is None:
        print("⚠ Checkpoint has no classifier; using an untrained one")
        window = config.semi.window or ckpt.dims.order + 1
        psi = ClassifierParams.zeros(ckpt.dims.S, ckpt.dims.M, window)
    pairs = dataset.pairs(dataset.labeled)
    if not pairs:
        raise DatasetError(f"no labeled sequences in {config.data.path}")
    emit({"command": "classify", "status": "ok", "accuracy": accuracy(psi, pairs), "sequences": len(pairs),
          "window": psi.window})
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, emit: Emit, corrupt: Optional[str] = None) -> int:
    """Finite-difference suite; nonzero exit when any tensor fails"""
    report = run_gradcheck(config.seed, corrupt)
    for row in report["rows"]:
        emit({"command": "gradcheck", **row})
    emit({"command": "gradcheck", "status": "ok" if report["passed"] else "failed",
          "failures": report["failures"]})
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def cmd_audit_enum(config: RunConfig, emit: Emit, instances: int = 10, samples: int = 100000) -> int:
    """Enumeration audit; nonzero exit when any instance fails"""
    reports = run_audit(config.seed, instances, samples)
    for report in reports:
        emit({"command": "audit-enum", **report})
    passed = all(r["passed"] for r in reports)
    emit({"command": "audit-enum", "status": "ok" if passed else "failed",
          "failures": [r["instance"] for r in reports if not r["passed"]]})
    return EXIT_OK if passed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fctsbn", description="Factored conditional temporal sigmoid belief networks")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="64-bit run seed")
    common.add_argument("--deterministic", action="store_true", help="reduce per sequence in fixed order")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue training from")

    p = sub.add_parser("generate", parents=[common], help="generate a sequence")
    p.add_argument("--checkpoint")
    p.add_argument("--T", type=int)
    p.add_argument("--style", type=int)
    p.add_argument("--from-style", dest="from_style", type=int)
    p.add_argument("--to-style", dest="to_style", type=int)
    p.add_argument("--center", type=float)
    p.add_argument("--width", type=float)
    p.add_argument("--blend", help="comma-separated weights per style")
    p.add_argument("--count-total", dest="count_total", type=int)

    for name, text in (("predict", "one-step-ahead prediction error"), ("classify", "window classification")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--num-samples", dest="num_samples", type=int)
        p.add_argument("--obs-kind", dest="obs_kind", choices=[k.value for k in ObsKind],
                       help="observation family of the data; must match the checkpoint")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--corrupt", help="tensor whose analytic gradient is perturbed")

    p = sub.add_parser("audit-enum", parents=[common], help="exact enumeration audit")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--samples", type=int, default=100000)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    stdout = sys.stdout

    def emit(record: Dict):
        stdout.write(json.dumps(record, default=float) + "\n")
        stdout.flush()

    try:
        with contextlib.redirect_stdout(sys.stderr):
            config = apply_overrides(load_config(args.config), args)
            if args.command == "train":
                return cmd_train(config, emit)
            if args.command == "generate":
                return cmd_generate(config, emit)
            if args.command == "predict":
                return cmd_predict(config, emit)
            if args.command == "classify":
                return cmd_classify(config, emit)
            if args.command == "gradcheck":
                return cmd_gradcheck(config, emit, args.corrupt)
            return cmd_audit_enum(config, emit, args.instances, args.samples)
    except (ConfigError, ShapeError) as e:
        print(f"✗ Configuration error: {e}", file=sys.stderr)
        emit({"command": args.command, "status": "error", "kind": "config", "message": str(e),
              "paths": getattr(e, "paths", None) or getattr(e, "axes", [])})
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"✗ Numeric abort: {e}", file=sys.stderr)
        emit({"command": args.command, "status": "error", "kind": "numeric", "message": str(e),
              "diagnostics": e.dump_path})
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"✗ I/O error: {e}", file=sys.stderr)
        emit({"command": args.command, "status": "error", "kind": "io", "message": str(e)})
        return EXIT_IO
    except ValueError as e:
        print(f"⚠ Invalid value: {e}", file=sys.stderr)
        emit({"command": args.command, "status": "error", "kind": "config", "message": str(e), "paths": []})
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
