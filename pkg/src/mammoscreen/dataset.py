"""Example assembly, patient-grouped splits, stratified batching and resampling.

An example is a 1002-d vector: 1000 image features from an external encoder,
followed by min-max normalized age and the implant flag.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import MammoscreenError, SingleClassDataset, WidthMismatch

N_IMAGE_FEATURES = 1000
N_FEATURES = N_IMAGE_FEATURES + 2
AGE_COLUMN = 1000
IMPLANT_COLUMN = 1001

METADATA_COLUMNS = ("patient_id", "image_id", "laterality", "view", "age", "implant", "cancer")
MMFV_MAGIC = b"MMFV"


class MissingColumn(MammoscreenError, ValueError):
    pass


class BadValue(MammoscreenError, ValueError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"row {row}: bad value {value!r} for column {column!r}")
        self.row = row
        self.column = column


class DuplicateImageId(MammoscreenError, ValueError):
    pass


class UnmatchedImageId(MammoscreenError, KeyError):
    pass


class TooFewPatients(MammoscreenError, ValueError):
    pass


class TooFewMinority(MammoscreenError, ValueError):
    pass


class Laterality(str, enum.Enum):
    L = "L"
    R = "R"


class View(str, enum.Enum):
    MLO = "MLO"
    CC = "CC"


@dataclass(frozen=True)
class CaseRecord:
    patient_id: str
    image_id: str
    laterality: Laterality
    view: View
    age: float | None
    implant: int
    cancer: int


@dataclass
class FeatureTable:
    image_ids: list[str]
    vectors: np.ndarray  # (n, 1000)

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: int
    patient_id: str
    image_id: str


@dataclass
class ExampleSet:
    """Column-oriented collection of examples; indexing yields :class:`Example`."""

    X: np.ndarray
    y: np.ndarray
    patient_ids: np.ndarray
    image_ids: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.patient_ids = np.asarray(self.patient_ids, dtype=object)
        self.image_ids = np.asarray(self.image_ids, dtype=object)
        n = len(self.y)
        if self.X.ndim != 2 or self.X.shape[0] != n or len(self.patient_ids) != n or len(self.image_ids) != n:
            raise ValueError("ExampleSet columns have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Example:
        return Example(self.X[i], int(self.y[i]), self.patient_ids[i], self.image_ids[i])

    def __iter__(self) -> Iterator[Example]:
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> ExampleSet:
        return ExampleSet(self.X[index], self.y[index], self.patient_ids[index], self.image_ids[index])

    @classmethod
    def concat(cls, parts: Sequence[ExampleSet]) -> ExampleSet:
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.patient_ids for p in parts]),
            np.concatenate([p.image_ids for p in parts]),
        )

    def class_counts(self) -> tuple[int, int]:
        positives = int(self.y.sum())
        return len(self) - positives, positives


@dataclass(frozen=True)
class AgeStats:
    min: float
    max: float

    def scale(self, age: float | None) -> float:
        if age is None:
            return 0.5
        if self.max == self.min:
            return 0.0
        return float(min(1.0, max(0.0, (age - self.min) / (self.max - self.min))))


# Loading


def _binary(value: str, row: int, column: str) -> int:
    text = value.strip()
    lowered = text.lower()
    if lowered in ("0", "false", "0.0"):
        return 0
    if lowered in ("1", "true", "1.0"):
        return 1
    raise BadValue(row, column, value)


def load_metadata(path: str | Path) -> list[CaseRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for name in METADATA_COLUMNS:
            if name not in header:
                raise MissingColumn(f"metadata is missing column {name!r}")
        records = []
        seen: set[str] = set()
        for row_number, row in enumerate(reader, start=1):
            patient_id = (row["patient_id"] or "").strip()
            image_id = (row["image_id"] or "").strip()
            if not patient_id:
                raise BadValue(row_number, "patient_id", row["patient_id"])
            if not image_id:
                raise BadValue(row_number, "image_id", row["image_id"])
            if image_id in seen:
                raise DuplicateImageId(image_id)
            seen.add(image_id)
            try:
                laterality = Laterality(row["laterality"].strip())
            except (ValueError, AttributeError):
                raise BadValue(row_number, "laterality", row["laterality"]) from None
            try:
                view = View(row["view"].strip())
            except (ValueError, AttributeError):
                raise BadValue(row_number, "view", row["view"]) from None
            age_text = (row["age"] or "").strip()
            age = None
            if age_text:
                try:
                    age = float(age_text)
                except ValueError:
                    raise BadValue(row_number, "age", row["age"]) from None
                if not 0 < age < 130:
                    raise BadValue(row_number, "age", row["age"])
            records.append(
                CaseRecord(
                    patient_id=patient_id,
                    image_id=image_id,
                    laterality=laterality,
                    view=view,
                    age=age,
                    implant=_binary(row["implant"] or "", row_number, "implant"),
                    cancer=_binary(row["cancer"] or "", row_number, "cancer"),
                )
            )
    return records


def write_metadata(path: str | Path, records: Sequence[CaseRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METADATA_COLUMNS)
        for r in records:
            age = "" if r.age is None else f"{r.age:g}"
            writer.writerow([r.patient_id, r.image_id, r.laterality.value, r.view.value, age, r.implant, r.cancer])


def _check_table(image_ids: list[str], vectors: list[np.ndarray]) -> FeatureTable:
    seen: set[str] = set()
    for image_id, vec in zip(image_ids, vectors):
        if len(vec) != N_IMAGE_FEATURES:
            raise WidthMismatch(f"image {image_id}: {len(vec)} features, expected {N_IMAGE_FEATURES}")
        if image_id in seen:
            raise DuplicateImageId(image_id)
        seen.add(image_id)
    matrix = np.vstack(vectors) if vectors else np.zeros((0, N_IMAGE_FEATURES))
    return FeatureTable(list(image_ids), matrix.astype(np.float64))


def load_features(path: str | Path) -> FeatureTable:
    """Read a feature CSV (``image_id,f0..f999``) or an MMFV binary file."""
    data = Path(path).read_bytes()
    if data[:4] == MMFV_MAGIC:
        return _parse_mmfv(data)
    reader = csv.reader(io.StringIO(data.decode("utf-8")))
    header = next(reader, None)
    if not header or header[0].strip() != "image_id":
        raise MissingColumn("feature file must start with an 'image_id' column")
    image_ids, vectors = [], []
    for row_number, row in enumerate(reader, start=1):
        if not row:
            continue
        try:
            vec = np.array(row[1:], dtype=np.float64)
        except ValueError:
            raise BadValue(row_number, "features", ",".join(row[1:4]) + ",...") from None
        image_ids.append(row[0].strip())
        vectors.append(vec)
    return _check_table(image_ids, vectors)


def _parse_mmfv(data: bytes) -> FeatureTable:
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        image_ids, vectors = [], []
        row_bytes = 4 * N_IMAGE_FEATURES
        for _ in range(count):
            (id_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + id_len + row_bytes > len(data):
                raise ValueError("truncated MMFV row")
            image_ids.append(data[pos : pos + id_len].decode("utf-8"))
            pos += id_len
            vectors.append(np.frombuffer(data, dtype="<f4", count=N_IMAGE_FEATURES, offset=pos))
            pos += row_bytes
    except struct.error:
        raise ValueError("truncated MMFV file") from None
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes after {count} MMFV rows")
    return _check_table(image_ids, vectors)


def write_features(path: str | Path, table: FeatureTable, fmt: str = "mmfv") -> None:
    if fmt == "mmfv":
        parts = [MMFV_MAGIC, struct.pack("<I", len(table))]
        for image_id, vec in zip(table.image_ids, table.vectors):
            raw = image_id.encode("utf-8")
            parts += [struct.pack("<I", len(raw)), raw, np.asarray(vec, dtype="<f4").tobytes()]
        Path(path).write_bytes(b"".join(parts))
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image_id", *(f"f{i}" for i in range(N_IMAGE_FEATURES))])
            for image_id, vec in zip(table.image_ids, table.vectors):
                writer.writerow([image_id, *(repr(float(v)) for v in vec)])
    else:
        raise ValueError(f"unknown feature format {fmt!r}")


# Assembly


def fit_age_stats(records: Sequence[CaseRecord]) -> AgeStats | None:
    ages = [r.age for r in records if r.age is not None]
    if not ages:
        return None
    return AgeStats(min(ages), max(ages))


def assemble_examples(
    meta: Sequence[CaseRecord],
    features: FeatureTable,
    age_stats: AgeStats | None = None,
) -> tuple[ExampleSet, AgeStats | None]:
    """Join features with metadata into 1002-d examples.

    Age scaling is fitted on ``meta`` unless ``age_stats`` is given (pass the
    training split's stats when assembling validation data). Missing ages map
    to 0.5.
    """
    by_image = {r.image_id: r for r in meta}
    if age_stats is None:
        age_stats = fit_age_stats(meta)
    n = len(features)
    X = np.empty((n, N_FEATURES))
    y = np.empty(n, dtype=np.int64)
    patients, images = [], []
    for i, (image_id, vec) in enumerate(zip(features.image_ids, features.vectors)):
        record = by_image.get(image_id)
        if record is None:
            raise UnmatchedImageId(image_id)
        X[i, :N_IMAGE_FEATURES] = vec
        X[i, AGE_COLUMN] = 0.5 if age_stats is None else age_stats.scale(record.age)
        X[i, IMPLANT_COLUMN] = record.implant
        y[i] = record.cancer
        patients.append(record.patient_id)
        images.append(image_id)
    return ExampleSet(X, y, patients, images), age_stats


# Splitting


def split_patients(
    patient_ids: Sequence[str], labels: Sequence[int], val_fraction: float, seed: int
) -> tuple[set[str], set[str]]:
    """Partition patients into (train, validation) sets, stratified by whether
    the patient has any positive image."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    positive: dict[str, bool] = {}
    for pid, label in zip(patient_ids, labels):
        positive[pid] = positive.get(pid, False) or bool(label)
    patients = sorted(positive)
    if len(patients) < 2:
        raise TooFewPatients(f"need at least 2 patients, got {len(patients)}")
    pos = [p for p in patients if positive[p]]
    neg = [p for p in patients if not positive[p]]
    n_val = min(max(round(val_fraction * len(patients)), 1), len(patients) - 1)
    n_val_pos = round(n_val * len(pos) / len(patients))
    if len(pos) >= 2:
        n_val_pos = min(max(n_val_pos, 1), len(pos) - 1)
    n_val_pos = max(min(n_val_pos, n_val), n_val - len(neg))
    n_val_neg = n_val - n_val_pos

    rng = np.random.default_rng(seed)
    pos_order = rng.permutation(len(pos))
    neg_order = rng.permutation(len(neg))
    val = {pos[i] for i in pos_order[:n_val_pos]} | {neg[i] for i in neg_order[:n_val_neg]}
    return set(patients) - val, val


def split_by_patient(examples: ExampleSet, val_fraction: float, seed: int) -> tuple[ExampleSet, ExampleSet]:
    _, val = split_patients(examples.patient_ids, examples.y, val_fraction, seed)
    in_val = np.array([p in val for p in examples.patient_ids], dtype=bool)
    return examples.subset(~in_val), examples.subset(in_val)


# Sampling


def _labels(data) -> np.ndarray:
    return np.asarray(data.y if isinstance(data, ExampleSet) else data, dtype=np.int64)


def sbs_quotas(class_counts: Sequence[int], batch_size: int) -> list[int]:
    """Per-class slots in a batch: batch_size * class_count / N, rounded by
    largest remainder, with at least one slot for every represented class."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    total = sum(class_counts)
    present = [i for i, c in enumerate(class_counts) if c > 0]
    if len(present) > batch_size:
        raise ValueError("batch too small to hold every class")
    raw = [batch_size * c / total for c in class_counts]
    quotas = [max(math.floor(r), 1) if c > 0 else 0 for r, c in zip(raw, class_counts)]
    remainders = sorted(present, key=lambda i: (-(raw[i] - math.floor(raw[i])), i))
    k = 0
    while sum(quotas) < batch_size:
        quotas[remainders[k % len(remainders)]] += 1
        k += 1
    # The floor guard can overshoot; take slots back from the largest classes.
    while sum(quotas) > batch_size:
        donor = max((i for i in present if quotas[i] > 1), key=lambda i: (quotas[i], -i))
        quotas[donor] -= 1
    return quotas


def stratified_batches(
    data: ExampleSet | Sequence[int],
    batch_size: int,
    seed: int,
    epochs: int | None = None,
) -> Iterator[np.ndarray]:
    """Yield index arrays of stratified batches.

    An epoch is ``ceil(N / batch_size)`` batches. Each class draws its quota
    from its own permutation, reshuffled at every epoch start and whenever it
    runs out mid-epoch. ``epochs=None`` iterates forever.
    """
    y = _labels(data)
    classes = [np.flatnonzero(y == 0), np.flatnonzero(y == 1)]
    if min(len(c) for c in classes) == 0:
        raise SingleClassDataset("stratified batches need both classes")
    quotas = sbs_quotas([len(c) for c in classes], batch_size)
    batches_per_epoch = math.ceil(len(y) / batch_size)
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        orders = [rng.permutation(members) for members in classes]
        cursors = [0, 0]
        for _ in range(batches_per_epoch):
            parts = []
            for c, quota in enumerate(quotas):
                need = quota
                while need:
                    if cursors[c] == len(orders[c]):
                        orders[c] = rng.permutation(classes[c])
                        cursors[c] = 0
                    take = min(need, len(orders[c]) - cursors[c])
                    parts.append(orders[c][cursors[c] : cursors[c] + take])
                    cursors[c] += take
                    need -= take
            yield rng.permutation(np.concatenate(parts))
        epoch += 1


def shuffled_batches(n: int, batch_size: int, seed: int, epochs: int | None = None) -> Iterator[np.ndarray]:
    """Plain shuffled mini-batches; the last batch of an epoch may be short."""
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]
        epoch += 1


def _minority_majority(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassDataset("resampling needs both classes")
    return (pos, neg) if len(pos) <= len(neg) else (neg, pos)


def _check_ratio(ratio: float) -> None:
    if not ratio > 0:
        raise ValueError(f"ratio must be positive, got {ratio}")


def random_undersample(examples: ExampleSet, ratio: float, seed: int) -> ExampleSet:
    """Drop majority examples until minority:majority == ratio."""
    _check_ratio(ratio)
    minority, majority = _minority_majority(examples.y)
    keep_major = min(len(majority), max(1, round(len(minority) / ratio)))
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(majority, size=keep_major, replace=False))
    return examples.subset(np.sort(np.concatenate([minority, kept])))


def random_oversample(examples: ExampleSet, ratio: float, seed: int) -> ExampleSet:
    """Duplicate minority examples (with replacement) until minority:majority == ratio."""
    _check_ratio(ratio)
    minority, majority = _minority_majority(examples.y)
    extra = max(0, round(ratio * len(majority)) - len(minority))
    rng = np.random.default_rng(seed)
    duplicates = rng.choice(minority, size=extra, replace=True)
    return examples.subset(np.concatenate([np.arange(len(examples)), duplicates]))


def smote_interpolate(examples: ExampleSet, k: int, n_new: int, seed: int) -> ExampleSet:
    """Synthetic minority examples on segments towards k nearest minority neighbours."""
    if k < 1:
        raise ValueError("k must be at least 1")
    minority, _ = _minority_majority(examples.y)
    if len(minority) <= k:
        raise TooFewMinority(f"{len(minority)} minority examples, need more than k={k}")
    label = int(examples.y[minority[0]])
    pts = examples.X[minority]
    sq = (pts * pts).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T
    np.fill_diagonal(dist, np.inf)
    neighbours = np.argsort(dist, axis=1, kind="stable")[:, :k]

    rng = np.random.default_rng(seed)
    base = rng.integers(len(minority), size=n_new)
    pick = neighbours[base, rng.integers(k, size=n_new)]
    u = rng.random((n_new, 1))
    X = pts[base] + u * (pts[pick] - pts[base])
    if X.shape[1] == N_FEATURES:
        X[:, IMPLANT_COLUMN] = (X[:, IMPLANT_COLUMN] >= 0.5).astype(np.float64)
    ids = [f"smote-{i}" for i in range(n_new)]
    return ExampleSet(X, np.full(n_new, label), ids, ids)


def class_weights(y: np.ndarray) -> tuple[float, float]:
    """Inverse-frequency weights N / (2 * N_class) for (negative, positive)."""
    y = np.asarray(y)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassDataset("class weights need both classes")
    return len(y) / (2.0 * n_neg), len(y) / (2.0 * n_pos)
