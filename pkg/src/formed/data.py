"""Datasets with heterogeneous channel counts, lengths and class counts.

On disk a dataset is a directory::

    manifest.ini   [dataset] name, channels, length, classes, task_kind,
                   sampling_rate, samples, format_version, record_bytes
    subjects.txt   one subject id per line (the subject table)
    samples.bin    ``samples`` fixed-width little-endian records

Each record is ``int32 label | int32 subject index | float64 values[C*T] |
uint8 mask[C*T]`` with values and mask in row-major (channel, time) order.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
NAME_PATTERN = re.compile(r"[A-Za-z0-9][A-Za-z0-9_.+-]*")

__all__ = [
    "DataError",
    "DatasetSpec",
    "Sample",
    "Dataset",
    "SplitSpec",
    "record_dtype",
    "save_dataset",
    "load_dataset",
    "import_csv",
    "split_by_subject",
    "make_synthetic_cohort",
    "class_frequencies",
    "make_sinusoid_corpus",
    "subsample_ratio",
    "stratified_indices",
    "normalize",
    "name_seed",
    "COHORT_SHAPES",
]

# (channels, length, classes, sampling rate) of the clinical cohort the synthetic stand-ins mirror
COHORT_SHAPES = {
    "PTB": (15, 300, 2, 250),
    "PTB-XL": (12, 250, 5, 250),
    "TDBrain": (33, 256, 2, 256),
    "APAVA": (16, 256, 2, 256),
    "ADFTD": (19, 256, 3, 256),
}


class DataError(ValueError):
    pass


def name_seed(seed: int, name: str) -> list[int]:
    """Seed sequence entropy that depends on a name but not on Python's hash salt."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int(seed), int.from_bytes(digest[:8], "little")]


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    channels: int
    length: int
    classes: int
    task_kind: str = "multiclass"
    sampling_rate: float | None = None

    def __post_init__(self):
        if not NAME_PATTERN.fullmatch(self.name):
            raise DataError(f"invalid dataset name {self.name!r}; use letters, digits and _.+-")
        if self.channels < 1 or self.length < 1:
            raise DataError(f"{self.name}: channels and length must be positive")
        if self.classes < 2:
            raise DataError(f"{self.name}: need at least two classes")
        if self.task_kind not in ("multiclass", "binary"):
            raise DataError(f"{self.name}: unknown task kind {self.task_kind!r}")


@dataclass
class Sample:
    values: np.ndarray  # (C, T)
    mask: np.ndarray  # (C, T), 1 = missing
    label: int
    subject_id: str


@dataclass
class Dataset:
    spec: DatasetSpec
    values: np.ndarray  # (n, C, T)
    mask: np.ndarray  # (n, C, T) uint8
    labels: np.ndarray  # (n,)
    subjects: np.ndarray  # (n,) str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=str)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.values[i], self.mask[i], int(self.labels[i]), str(self.subjects[i]))

    @property
    def name(self) -> str:
        return self.spec.name

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.spec, self.values[idx], self.mask[idx], self.labels[idx], self.subjects[idx])

    def validate(self) -> None:
        s = self.spec
        n = len(self.labels)
        if self.values.shape != (n, s.channels, s.length) or self.mask.shape != self.values.shape:
            raise DataError(
                f"{s.name}: arrays {self.values.shape}/{self.mask.shape} do not match "
                f"({n}, {s.channels}, {s.length})"
            )
        if len(self.subjects) != n:
            raise DataError(f"{s.name}: {len(self.subjects)} subject ids for {n} samples")
        for i in range(n):
            if not 0 <= self.labels[i] < s.classes:
                raise DataError(f"{s.name}: sample {i} has label {self.labels[i]} outside [0, {s.classes})")
            if self.mask[i].max(initial=0) > 1:
                raise DataError(f"{s.name}: sample {i} has mask values other than 0/1")
            if (self.mask[i] == 1).all(axis=-1).any():
                raise DataError(f"{s.name}: sample {i} has a channel with no observed values")
            if not np.isfinite(self.values[i]).all():
                raise DataError(f"{s.name}: sample {i} contains non-finite values")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.values, self.mask, self.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\n".join(self.subjects.tolist()).encode())
        return h.hexdigest()


def record_dtype(channels: int, length: int) -> np.dtype:
    return np.dtype(
        [
            ("label", "<i4"),
            ("subject", "<i4"),
            ("values", "<f8", (channels, length)),
            ("mask", "u1", (channels, length)),
        ]
    )


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ds.validate()
    s = ds.spec
    table = list(dict.fromkeys(ds.subjects.tolist()))
    for sid in table:
        if not sid or "\n" in sid or sid.strip() != sid:
            raise DataError(f"{s.name}: subject id {sid!r} cannot be stored")
    index = {sid: i for i, sid in enumerate(table)}
    dt = record_dtype(s.channels, s.length)
    records = np.zeros(len(ds), dtype=dt)
    records["label"] = ds.labels
    records["subject"] = [index[sid] for sid in ds.subjects]
    records["values"] = ds.values
    records["mask"] = ds.mask

    manifest = configparser.ConfigParser(interpolation=None)
    manifest["dataset"] = {
        "format_version": str(FORMAT_VERSION),
        "name": s.name,
        "channels": str(s.channels),
        "length": str(s.length),
        "classes": str(s.classes),
        "task_kind": s.task_kind,
        "sampling_rate": "" if s.sampling_rate is None else repr(float(s.sampling_rate)),
        "samples": str(len(ds)),
        "record_bytes": str(dt.itemsize),
    }
    with open(path / "manifest.ini", "w") as fh:
        manifest.write(fh)
    (path / "subjects.txt").write_text("".join(f"{sid}\n" for sid in table))
    (path / "samples.bin").write_bytes(records.tobytes())
    return path


def _manifest_int(section, key: str, where: str) -> int:
    try:
        return int(section[key])
    except KeyError:
        raise DataError(f"{where}: manifest is missing {key!r}") from None
    except ValueError:
        raise DataError(f"{where}: manifest field {key!r} is not an integer") from None


def load_dataset(path) -> Dataset:
    path = Path(path)
    where = str(path)
    manifest = configparser.ConfigParser(interpolation=None)
    if not manifest.read(path / "manifest.ini"):
        raise DataError(f"{where}: no manifest.ini")
    if "dataset" not in manifest:
        raise DataError(f"{where}: manifest has no [dataset] section")
    sec = manifest["dataset"]
    version = _manifest_int(sec, "format_version", where)
    if version != FORMAT_VERSION:
        raise DataError(f"{where}: unsupported format version {version}")
    rate = sec.get("sampling_rate", "")
    try:
        spec = DatasetSpec(
            name=sec.get("name", ""),
            channels=_manifest_int(sec, "channels", where),
            length=_manifest_int(sec, "length", where),
            classes=_manifest_int(sec, "classes", where),
            task_kind=sec.get("task_kind", "multiclass"),
            sampling_rate=float(rate) if rate else None,
        )
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None
    n = _manifest_int(sec, "samples", where)
    dt = record_dtype(spec.channels, spec.length)
    if _manifest_int(sec, "record_bytes", where) != dt.itemsize:
        raise DataError(f"{where}: record_bytes disagrees with the declared shape")
    raw = (path / "samples.bin").read_bytes() if (path / "samples.bin").exists() else None
    if raw is None:
        raise DataError(f"{where}: samples.bin is missing")
    if len(raw) != n * dt.itemsize:
        raise DataError(f"{where}: samples.bin holds {len(raw)} bytes, expected {n} records of {dt.itemsize}")
    table = (path / "subjects.txt").read_text().splitlines() if (path / "subjects.txt").exists() else []
    records = np.frombuffer(raw, dtype=dt)
    bad = np.flatnonzero((records["subject"] < 0) | (records["subject"] >= len(table)))
    if bad.size:
        raise DataError(f"{where}: sample {bad[0]} refers to an unknown subject")
    subjects = np.array(table, dtype=str)[records["subject"]] if n else np.array([], dtype=str)
    ds = Dataset(spec, records["values"].copy(), records["mask"].copy(), records["label"].astype(np.int64), subjects)
    ds.validate()
    return ds


def import_csv(
    directory,
    name: str,
    classes: int,
    length: int | None = None,
    task_kind: str = "multiclass",
    sampling_rate: float | None = None,
    labels_file: str = "labels.csv",
) -> Dataset:
    """Build a dataset from one CSV per sample plus a label sidecar.

    Each sample CSV has one row per time step and one column per channel (an
    optional non-numeric header row is skipped); empty or ``nan`` cells are
    missing.  The sidecar has columns ``file,label,subject``.  Samples shorter
    than ``length`` are right-padded as missing.
    """
    directory = Path(directory)
    with open(directory / labels_file, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{directory / labels_file}: no samples listed")
    arrays, labels, subjects = [], [], []
    for i, row in enumerate(rows):
        try:
            fname, label, subject = row["file"], int(row["label"]), row["subject"]
        except (KeyError, ValueError, TypeError):
            raise DataError(f"{labels_file} row {i}: expected file,label,subject columns") from None
        with open(directory / fname, newline="") as fh:
            table = [r for r in csv.reader(fh) if r]
        if table and not _is_numeric_row(table[0]):
            table = table[1:]
        try:
            arr = np.array([[float(c) if c.strip() else np.nan for c in r] for r in table], dtype=np.float64)
        except ValueError:
            raise DataError(f"sample {i} ({fname}): non-numeric cell") from None
        if arr.ndim != 2 or arr.size == 0:
            raise DataError(f"sample {i} ({fname}): ragged or empty table")
        arrays.append(arr.T)
        labels.append(label)
        subjects.append(subject)
    channels = {a.shape[0] for a in arrays}
    if len(channels) != 1:
        raise DataError(f"samples disagree on channel count: {sorted(channels)}")
    t = length or max(a.shape[1] for a in arrays)
    c = channels.pop()
    values = np.zeros((len(arrays), c, t))
    mask = np.ones((len(arrays), c, t), dtype=np.uint8)
    for i, a in enumerate(arrays):
        if a.shape[1] > t:
            raise DataError(f"sample {i} is longer ({a.shape[1]}) than length {t}")
        missing = np.isnan(a)
        values[i, :, : a.shape[1]] = np.where(missing, 0.0, a)
        mask[i, :, : a.shape[1]] = missing
    ds = Dataset(DatasetSpec(name, c, t, classes, task_kind, sampling_rate), values, mask, labels, subjects)
    ds.validate()
    return ds


def _is_numeric_row(row: Sequence[str]) -> bool:
    for cell in row:
        cell = cell.strip()
        if not cell:
            continue
        try:
            float(cell)
        except ValueError:
            return False
    return True


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset
    val: frozenset
    test: frozenset
    fractions: tuple[float, float, float]

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise DataError("subject sets overlap between splits")
        if not (self.train and self.val and self.test):
            raise DataError("every split needs at least one subject")

    def indices(self, subjects) -> dict[str, np.ndarray]:
        subjects = np.asarray(subjects)
        return {
            name: np.flatnonzero(np.isin(subjects, sorted(group)))
            for name, group in (("train", self.train), ("val", self.val), ("test", self.test))
        }

    def apply(self, ds: Dataset) -> dict[str, Dataset]:
        return {name: ds.subset(idx) for name, idx in self.indices(ds.subjects).items()}


def split_by_subject(subjects, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> SplitSpec:
    """Patient-independent split: shuffle the distinct subjects, then cut by fractions."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise DataError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    unique = sorted(set(np.asarray(subjects).tolist()))
    n = len(unique)
    if n < 3:
        raise DataError(f"need at least 3 distinct subjects to split, got {n}")
    order = [unique[i] for i in np.random.default_rng(seed).permutation(n)]
    n_val = max(1, round(fractions[1] * n))
    n_test = max(1, round(fractions[2] * n))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train = 1
        n_val = max(1, n - 1 - n_test)
        n_test = n - n_train - n_val
    return SplitSpec(
        frozenset(order[:n_train]),
        frozenset(order[n_train : n_train + n_val]),
        frozenset(order[n_train + n_val :]),
        fractions,
    )


def class_frequencies(classes: int, rng: np.random.Generator, low: float = 0.02, high: float = 0.2) -> np.ndarray:
    """Well separated per-class frequencies in cycles per time step."""
    width = (high - low) / classes
    jitter = rng.uniform(0.25, 0.75, size=classes)
    return low + width * (np.arange(classes) + jitter)


def _as_spec(item) -> DatasetSpec:
    if isinstance(item, DatasetSpec):
        return item
    name, c, t, k, *rest = item
    return DatasetSpec(name, int(c), int(t), int(k), *rest)


def make_synthetic_cohort(
    specs: Iterable,
    snr: float = 10.0,
    subjects_per_dataset: int = 30,
    samples_per_subject: int = 20,
    seed: int = 0,
) -> dict[str, Dataset]:
    """Synthetic stand-ins for a multi-dataset clinical cohort.

    Class ``k`` of a dataset is a sinusoid at a class frequency with a fixed
    per-channel amplitude and phase pattern.  Every sample gets a random time
    shift, each subject scales and offsets every channel, and Gaussian noise
    is added at power ratio ``snr`` (``inf`` for none).  Each dataset draws
    from its own name-keyed stream, so datasets do not depend on each other.
    """
    specs = [_as_spec(s) for s in specs]
    if not specs:
        raise DataError("no dataset specs given")
    if subjects_per_dataset < 3 or samples_per_subject < 1:
        raise DataError("need at least 3 subjects and 1 sample per subject")
    if not snr > 0:
        raise DataError("snr must be positive")
    cohort = {}
    for spec in specs:
        if spec.name in cohort:
            raise DataError(f"duplicate dataset name {spec.name!r}")
        rng = np.random.default_rng(name_seed(seed, spec.name))
        c, t, k = spec.channels, spec.length, spec.classes
        freqs = class_frequencies(k, rng)
        amp = rng.normal(size=(k, c))
        amp = np.sign(amp) * (0.5 + np.abs(amp))
        phase = rng.uniform(0, 2 * np.pi, size=(k, c))
        n = subjects_per_dataset * samples_per_subject
        labels = np.arange(n) % k
        rng.shuffle(labels)
        subject_idx = np.repeat(np.arange(subjects_per_dataset), samples_per_subject)
        gain = np.exp(0.3 * rng.normal(size=(subjects_per_dataset, c)))
        offset = 0.5 * rng.normal(size=(subjects_per_dataset, c))
        shift = rng.uniform(0, 2 * np.pi, size=n)
        time = np.arange(t)
        angle = 2 * np.pi * freqs[labels][:, None, None] * time + phase[labels][:, :, None] + shift[:, None, None]
        clean = (amp[labels] * gain[subject_idx])[:, :, None] * np.sin(angle)
        noise = rng.normal(size=clean.shape)
        if math.isinf(snr):
            noise[...] = 0.0
        else:
            power = np.mean(clean**2, axis=-1, keepdims=True)
            noise *= np.sqrt(power / snr)
        values = clean + noise + offset[subject_idx][:, :, None]
        subjects = np.array([f"{spec.name}-s{i:03d}" for i in subject_idx])
        ds = Dataset(spec, values, np.zeros(values.shape, dtype=np.uint8), labels, subjects)
        cohort[spec.name] = ds
    return cohort


def make_sinusoid_corpus(
    n_series: int,
    length: int,
    seed: int = 0,
    low: float = 0.005,
    high: float = 0.05,
    components: int = 2,
) -> list[np.ndarray]:
    """Univariate sums of sinusoids with random frequency, phase and amplitude."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    corpus = []
    for _ in range(n_series):
        k = rng.integers(1, components + 1)
        f = rng.uniform(low, high, size=k)
        a = rng.uniform(0.3, 1.0, size=k)
        p = rng.uniform(0, 2 * np.pi, size=k)
        corpus.append((a[:, None] * np.sin(2 * np.pi * f[:, None] * t + p[:, None])).sum(axis=0))
    return corpus


def stratified_indices(labels, ratio: float, seed: int = 0) -> np.ndarray:
    """Sorted indices keeping ``ceil(ratio * n_k)`` samples of every class ``k``."""
    if not 0 < ratio <= 1:
        raise DataError(f"ratio must lie in (0, 1], got {ratio}")
    labels = np.asarray(labels)
    if ratio == 1:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    keep = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        count = math.ceil(round(ratio * len(idx), 9))
        keep.append(rng.permutation(idx)[:count])
    return np.sort(np.concatenate(keep))


def subsample_ratio(ds: Dataset, ratio: float, seed: int = 0) -> Dataset:
    """Stratified few-shot subsample of a training split; ratio 1 keeps everything."""
    return ds.subset(stratified_indices(ds.labels, ratio, seed))


def normalize(ds: Dataset) -> Dataset:
    """Per-sample, per-channel z-score over observed positions; missing positions become 0."""
    observed = ds.mask == 0
    count = observed.sum(axis=-1, keepdims=True)
    if (count == 0).any():
        raise DataError(f"{ds.name}: a channel has no observed positions")
    vals = np.where(observed, ds.values, 0.0)
    mean = vals.sum(axis=-1, keepdims=True) / count
    centered = np.where(observed, ds.values - mean, 0.0)
    std = np.sqrt((centered**2).sum(axis=-1, keepdims=True) / count)
    scale = np.where(std > 0, std, 1.0)
    return replace(ds, values=centered / scale)
