"""
Sequence datasets on disk: loading, saving, normalization and planted data
One <id>.csv per sequence (rows = frames), optional <id>.y.csv side information and labels.csv
"""
import os
import re
import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from engine.cond_weight import DenseWeight, FactoredWeight
from engine.errors import DatasetError
from engine.model_core import (
    Dims,
    GenerativeParams,
    ObsKind,
    StyleSchedule,
    generate,
    infer_encoding,
)
from engine.rng import child_streams, draw_seed, make_rng

LABELS_FILE = "labels.csv"
SIDE_SUFFIX = ".y.csv"
LABEL_COLUMNS = ["sequence_id", "start_frame", "style_index"]


@dataclass
class SequenceRecord:
    """
    One observed sequence with optional side information and label windows
    """

    id: str
    V: np.ndarray
    Y: Optional[np.ndarray] = None
    labels: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.V.shape[0]


@dataclass
class SequenceDataset:
    """
    Records sorted by id plus the observation family and side-information width
    """

    records: List[SequenceRecord]
    obs_kind: ObsKind = ObsKind.REAL
    num_styles: Optional[int] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def M(self) -> int:
        return self.records[0].V.shape[1] if self.records else 0

    @property
    def S(self) -> int:
        if self.num_styles is not None:
            return self.num_styles
        for r in self.records:
            if r.Y is not None:
                return r.Y.shape[1]
        styles = [s for r in self.records for _, s in r.labels]
        return max(styles) + 1 if styles else 1

    @property
    def labeled(self) -> List[SequenceRecord]:
        return [r for r in self.records if r.labels]

    @property
    def unlabeled(self) -> List[SequenceRecord]:
        return [r for r in self.records if not r.labels]

    def side_info(self, record: SequenceRecord) -> np.ndarray:
        """T x S side information: stored Y, else the label schedule, else a constant column"""
        if record.Y is not None:
            return record.Y
        if record.labels:
            return labels_to_schedule(record.labels, record.T, self.S).Y
        if self.S != 1:
            raise DatasetError(f"sequence '{record.id}' has no side information or labels")
        return np.ones((record.T, 1))

    def pair(self, record: SequenceRecord) -> Tuple[np.ndarray, np.ndarray]:
        return record.V, self.side_info(record)

    def pairs(self, records: Optional[Sequence[SequenceRecord]] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [self.pair(r) for r in (self.records if records is None else records)]

    def subset(self, records: Sequence[SequenceRecord]) -> "SequenceDataset":
        return SequenceDataset(list(records), self.obs_kind, self.S if self.records else self.num_styles)


def labels_to_schedule(labels: Sequence[Tuple[int, int]], T: int, S: int) -> StyleSchedule:
    """
    One-hot schedule where each frame takes the style of the last window starting at or before it

    Args:
        labels: (start_frame, style_index) pairs
        T: Sequence length
        S: Number of styles

    Returns:
        StyleSchedule
    """
    if not labels:
        raise ValueError("missing labels")
    labels = sorted((int(a), int(b)) for a, b in labels)
    if labels[0][0] != 0:
        raise ValueError(f"first label window starts at frame {labels[0][0]}, not 0")
    indices = np.empty(T, dtype=int)
    for k, (start, style) in enumerate(labels):
        end = labels[k + 1][0] if k + 1 < len(labels) else T
        indices[start:end] = style
    return StyleSchedule.from_indices(indices, S)


# ---------------------------------------------------------------------------
# CSV parsing
# ---------------------------------------------------------------------------

def _line_from_parser_error(message: str) -> Optional[int]:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else None


def _read_matrix(path: str, header: bool = False) -> np.ndarray:
    """
    Parse a numeric CSV as float64, naming the file and line on any problem
    """
    first_row = 2 if header else 1
    try:
        df = pd.read_csv(path, header=0 if header else None, dtype=str, keep_default_na=False,
                         skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise DatasetError(f"{path}: file is empty")
    except pd.errors.ParserError as e:
        line = _line_from_parser_error(str(e))
        where = f" line {line}" if line is not None else ""
        raise DatasetError(f"{path}:{where} ragged row ({e})")
    if df.shape[0] == 0:
        raise DatasetError(f"{path}: file has no rows")

    cells = df.to_numpy(dtype=object)
    width = cells.shape[1]
    for r in range(cells.shape[0]):
        filled = sum(isinstance(c, str) and c.strip() != "" for c in cells[r])
        if filled != width:
            raise DatasetError(f"{path}: line {r + first_row} has {filled} columns, expected {width}")
    try:
        values = cells.astype(np.float64)
    except ValueError:
        for (r, c), cell in np.ndenumerate(cells):
            try:
                float(cell)
            except ValueError:
                raise DatasetError(f"{path}: line {r + first_row} column {c + 1} is not a number: '{cell}'")
        raise
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = bad[0]
        raise DatasetError(f"{path}: line {r + first_row} column {c + 1} is not finite")
    return values


def _check_kind(path: str, V: np.ndarray, obs_kind: ObsKind):
    if obs_kind == ObsKind.BINARY and not np.all((V == 0.0) | (V == 1.0)):
        r = int(np.argwhere((V != 0.0) & (V != 1.0))[0][0])
        raise DatasetError(f"{path}: line {r + 1} has non-binary values")
    if obs_kind == ObsKind.COUNT and not np.all((V >= 0) & (V == np.floor(V))):
        r = int(np.argwhere((V < 0) | (V != np.floor(V)))[0][0])
        raise DatasetError(f"{path}: line {r + 1} has values that are not nonnegative integers")


def _read_labels(path: str) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=LABEL_COLUMNS)
    except pd.errors.ParserError as e:
        raise DatasetError(f"{path}: {e}")
    missing = [c for c in LABEL_COLUMNS if c not in df.columns]
    if missing:
        raise DatasetError(f"{path}: missing columns {missing}")
    for col in ("start_frame", "style_index"):
        parsed = pd.to_numeric(df[col], errors="coerce")
        if parsed.isna().any():
            line = int(np.flatnonzero(parsed.isna().to_numpy())[0]) + 2
            raise DatasetError(f"{path}: line {line} has a non-integer {col}")
        df[col] = parsed.astype(int)
    return df


def load_dataset(path: str, obs_kind: Union[str, ObsKind] = ObsKind.REAL, header: bool = False,
                 num_styles: Optional[int] = None, verbose: bool = False) -> SequenceDataset:
    """
    Load every sequence in a directory

    Args:
        path: Directory of <id>.csv files, optional <id>.y.csv and labels.csv
        obs_kind: Observation family the values must satisfy
        header: Whether the sequence files carry a header row
        num_styles: Side-information width when it cannot be read from the files
        verbose: Print a status line

    Returns:
        SequenceDataset ordered by id
    """
    obs_kind = ObsKind.parse(obs_kind)
    if not os.path.isdir(path):
        raise DatasetError(f"dataset directory not found: {path}")

    names = sorted(f for f in os.listdir(path)
                   if f.endswith(".csv") and f != LABELS_FILE and not f.endswith(SIDE_SUFFIX))
    records: List[SequenceRecord] = []
    M = S = None
    for name in names:
        seq_id = name[:-len(".csv")]
        file = os.path.join(path, name)
        V = _read_matrix(file, header)
        _check_kind(file, V, obs_kind)
        if M is None:
            M = V.shape[1]
        elif V.shape[1] != M:
            raise DatasetError(f"{file}: {V.shape[1]} columns, earlier sequences have {M}")

        Y = None
        side = os.path.join(path, seq_id + SIDE_SUFFIX)
        if os.path.exists(side):
            Y = _read_matrix(side, header)
            if Y.shape[0] != V.shape[0]:
                raise DatasetError(f"{side}: {Y.shape[0]} rows, observations have {V.shape[0]}")
            if S is None:
                S = Y.shape[1]
            elif Y.shape[1] != S:
                raise DatasetError(f"{side}: {Y.shape[1]} columns, earlier side information has {S}")
            try:
                StyleSchedule(Y, infer_encoding(Y))
            except ValueError as e:
                raise DatasetError(f"{side}: {e}")
        records.append(SequenceRecord(seq_id, V, Y))

    by_id = {r.id: r for r in records}
    labels_path = os.path.join(path, LABELS_FILE)
    if os.path.exists(labels_path):
        df = _read_labels(labels_path)
        for i, row in enumerate(df.itertuples(index=False)):
            record = by_id.get(row.sequence_id)
            if record is None:
                raise DatasetError(f"{labels_path}: line {i + 2} names unknown sequence '{row.sequence_id}'")
            if not 0 <= row.start_frame < record.T or row.style_index < 0:
                raise DatasetError(f"{labels_path}: line {i + 2} is out of range for '{row.sequence_id}'")
            record.labels.append((int(row.start_frame), int(row.style_index)))
        for record in records:
            record.labels.sort()

    dataset = SequenceDataset(records, obs_kind, num_styles if num_styles is not None else S)
    for record in dataset.labeled:
        if max(s for _, s in record.labels) >= dataset.S:
            raise DatasetError(f"{labels_path}: style index out of range for {dataset.S} styles")
    if verbose:
        print(f"✓ Loaded {len(records)} sequences from {path} ({obs_kind.value}, M={dataset.M}, S={dataset.S})")
    return dataset


def save_dataset(dataset: SequenceDataset, path: str, header: bool = False):
    """
    Write a dataset in the on-disk layout; values use %.17g so reloading is bit-exact
    """
    os.makedirs(path, exist_ok=True)
    for r in dataset.records:
        columns = [f"v{m}" for m in range(r.V.shape[1])]
        pd.DataFrame(r.V, columns=columns).to_csv(
            os.path.join(path, f"{r.id}.csv"), header=header, index=False, float_format="%.17g")
        if r.Y is not None:
            columns = [f"y{s}" for s in range(r.Y.shape[1])]
            pd.DataFrame(r.Y, columns=columns).to_csv(
                os.path.join(path, r.id + SIDE_SUFFIX), header=header, index=False, float_format="%.17g")
    rows = [(r.id, a, b) for r in dataset.records for a, b in r.labels]
    if rows:
        pd.DataFrame(rows, columns=LABEL_COLUMNS).to_csv(os.path.join(path, LABELS_FILE), index=False)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """
    Per-dimension mean and scale; constant dimensions keep scale 1 and are flagged
    """

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, records: Sequence[SequenceRecord]) -> "NormStats":
        if not records:
            raise ValueError("cannot compute normalization statistics of an empty split")
        frames = np.vstack([r.V for r in records])
        mean = frames.mean(axis=0)
        std = np.sqrt(((frames - mean) ** 2).mean(axis=0))
        constant = std == 0.0
        if np.any(constant):
            warnings.warn(f"dimensions {np.flatnonzero(constant).tolist()} are constant; passed through unscaled")
        return cls(mean, np.where(constant, 1.0, std), constant)

    def apply(self, V: np.ndarray) -> np.ndarray:
        return np.where(self.constant, V, (V - self.mean) / self.std)

    def invert(self, V: np.ndarray) -> np.ndarray:
        return np.where(self.constant, V, V * self.std + self.mean)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64),
                   np.asarray(data["constant"], dtype=bool))


def _require_real(dataset: SequenceDataset):
    if dataset.obs_kind != ObsKind.REAL:
        raise ValueError(f"normalization applies to real observations, not {dataset.obs_kind.value}")


def normalize(dataset: SequenceDataset, stats: Optional[NormStats] = None,
              train_records: Optional[Sequence[SequenceRecord]] = None) -> Tuple[SequenceDataset, NormStats]:
    """
    Scale to zero mean and unit variance per dimension

    Args:
        dataset: Real-valued dataset
        stats: Reuse existing statistics instead of fitting
        train_records: Records to fit on; the whole dataset when omitted

    Returns:
        (normalized dataset, NormStats)
    """
    _require_real(dataset)
    if stats is None:
        stats = NormStats.fit(dataset.records if train_records is None else train_records)
    records = [replace(r, V=stats.apply(r.V), labels=list(r.labels)) for r in dataset.records]
    return SequenceDataset(records, dataset.obs_kind, dataset.num_styles), stats


def denormalize(dataset: SequenceDataset, stats: NormStats) -> SequenceDataset:
    _require_real(dataset)
    records = [replace(r, V=stats.invert(r.V), labels=list(r.labels)) for r in dataset.records]
    return SequenceDataset(records, dataset.obs_kind, dataset.num_styles)


# ---------------------------------------------------------------------------
# planted ground truth
# ---------------------------------------------------------------------------

def _shared_weight(w, matrix: np.ndarray, rng_factors: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Fill a conditional weight so that every style sees the same matrix"""
    if isinstance(w, DenseWeight):
        w.tensor[...] = matrix[:, :, None]
    else:
        Wa, Wc = rng_factors
        w.Wa[...] = Wa
        w.Wb[...] = 1.0
        w.Wc[...] = Wc


def plant_model(dims: Dims, style_separation: float, rng: np.random.Generator, num_sequences: int = 20,
                T: int = 50, obs_kind: Union[str, ObsKind] = ObsKind.REAL, emission_scale: float = 0.5,
                transition_scale: float = 0.7) -> Tuple[GenerativeParams, SequenceDataset]:
    """
    Draw a ground-truth model whose styles differ only in their emission bias, then sample from it.

    Hidden dynamics are shared across styles and centred so each unit is on
    half the time. Style s shifts every visible mean by
    style_separation * (1/2 - s / (S - 1)); with two styles and unit noise a
    separation of 6 puts the styles at +3 and -3. Sequence i uses style i mod S.

    Args:
        dims: Model dimensions; factored when dims.factors is set
        style_separation: Distance between the first and last style means
        rng: Generator
        num_sequences: Number of sequences
        T: Frames per sequence
        obs_kind: Observation family
        emission_scale: Std of the hidden-to-visible weights
        transition_scale: Std of the hidden-transition factors

    Returns:
        (GenerativeParams, SequenceDataset with one label window per sequence)
    """
    if rng is None:
        raise ValueError("rng required")
    obs_kind = ObsKind.parse(obs_kind)
    factored = dims.factors is not None
    theta_rng, data_rng = child_streams(rng, 2)
    theta = GenerativeParams.zeros(dims, obs_kind, factored)
    J, M, S, n = dims.J, dims.M, dims.S, dims.order

    F = dims.factors if factored else J
    Wa = theta_rng.normal(0.0, transition_scale, (J, F))
    Wc = theta_rng.normal(0.0, transition_scale, (F, J * n))
    layer = theta.layers[0]
    _shared_weight(layer.W_self, Wa @ Wc, (Wa, Wc))
    layer.bias[...] = (-0.5 * (Wa @ Wc).sum(axis=1))[:, None]

    W2 = theta_rng.normal(0.0, emission_scale, (M, J))
    theta.emission.W2.tensor[...] = W2[:, :, None]
    offsets = np.array([0.5 - s / (S - 1) for s in range(S)]) if S > 1 else np.zeros(1)
    theta.emission.C[...] = style_separation * offsets[None, :] - 0.5 * W2.sum(axis=1)[:, None]

    seed = draw_seed(data_rng)
    records = []
    for i in range(num_sequences):
        style = i % S
        V, _ = generate(theta, None, StyleSchedule.constant(style, T, S), T, make_rng(seed, i))
        records.append(SequenceRecord(f"seq{i:04d}", V, StyleSchedule.constant(style, T, S).Y, [(0, style)]))
    return theta, SequenceDataset(records, obs_kind, S)
