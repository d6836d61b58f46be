"""Embedding containers, label tables, and their on-disk formats.

The binary embedding format (".femb") is fixed little-endian:

    bytes 0-3    magic ``FEMB``
    bytes 4-7    format version, u32 (currently 1)
    bytes 8-15   row count N, u64
    bytes 16-23  dimension d, u64
    payload      N*d float32 values, row-major
    sample ids   N strings, each u16 byte length + UTF-8 bytes
    identity ids N strings, same encoding; length 0 means "no identity"

Label tables are CSV with the fixed header
``sample_id,race,gender,age_score,quality_score,divergence_score,source``;
absent values are empty fields.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    DataError,
    DegenerateEmbeddingError,
    DegenerateMeanError,
    FormatError,
    ParameterError,
)

FEMB_MAGIC = b"FEMB"
FEMB_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

RACES = ("Caucasian", "Asian", "Indian", "African")
GENDERS = ("Male", "Female")
AGE_LABELS = ("Young", "Old")
LABEL_SOURCES = ("clip", "clip_frc", "external", "computed")

LABEL_CSV_HEADER = [
    "sample_id",
    "race",
    "gender",
    "age_score",
    "quality_score",
    "divergence_score",
    "source",
]


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Immutable batch of row embeddings with per-row ids.

    ``identity_ids`` entries may be empty strings; such rows have no
    identity of their own and fall back to their sample id wherever an
    identity is required.
    """

    data: np.ndarray
    sample_ids: tuple[str, ...]
    identity_ids: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data), dtype=np.float32)
        if data.ndim != 2:
            raise DataError(f"embedding data must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise DataError("embedding dimension must be >= 1")
        if data.size and not np.all(np.isfinite(data)):
            raise DataError("embedding data contains NaN or Inf")
        sample_ids = tuple(str(s) for s in self.sample_ids)
        if len(sample_ids) != data.shape[0]:
            raise DataError(
                f"got {len(sample_ids)} sample ids for {data.shape[0]} rows"
            )
        if len(set(sample_ids)) != len(sample_ids):
            raise DataError("sample_ids contain duplicates")
        identity_ids = tuple(str(s) for s in self.identity_ids)
        if not identity_ids:
            identity_ids = ("",) * data.shape[0]
        elif len(identity_ids) != data.shape[0]:
            raise DataError(
                f"got {len(identity_ids)} identity ids for {data.shape[0]} rows"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "identity_ids", identity_ids)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.identity_ids == other.identity_ids
            and self.data.shape == other.data.shape
            and np.array_equal(
                self.data.view(np.uint32), other.data.view(np.uint32)
            )
        )

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def effective_identities(self) -> tuple[str, ...]:
        """Identity per row, falling back to the sample id when unset."""
        return tuple(
            iid if iid else sid
            for iid, sid in zip(self.identity_ids, self.sample_ids)
        )

    def is_normalized(self, atol: float = 1e-6) -> bool:
        if len(self) == 0:
            return True
        norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= atol))

    def select(self, keep: list[str] | set[str]) -> "EmbeddingSet":
        """Subset by sample id, preserving row order."""
        keep = set(keep)
        unknown = keep - set(self.sample_ids)
        if unknown:
            raise DataError(f"unknown sample ids in selection: {sorted(unknown)[:5]}")
        idx = [i for i, sid in enumerate(self.sample_ids) if sid in keep]
        return EmbeddingSet(
            self.data[idx],
            tuple(self.sample_ids[i] for i in idx),
            tuple(self.identity_ids[i] for i in idx),
        )


@dataclass(frozen=True)
class MeanEmbeddingTable:
    """Unit-normalized per-identity mean embeddings with group sizes."""

    identity_ids: tuple[str, ...]
    means: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        means = np.ascontiguousarray(np.asarray(self.means), dtype=np.float32)
        counts = np.asarray(self.counts, dtype=np.int64)
        ids = tuple(str(s) for s in self.identity_ids)
        if means.ndim != 2 or means.shape[0] != len(ids) or counts.shape != (len(ids),):
            raise DataError("inconsistent mean-table shapes")
        if np.any(counts < 1):
            raise DataError("mean-table counts must be positive")
        if len(set(ids)) != len(ids):
            raise DataError("mean-table identity ids contain duplicates")
        if means.size:
            norms = np.linalg.norm(means.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise DataError("mean-table rows must be unit-normalized")
        means.setflags(write=False)
        object.__setattr__(self, "identity_ids", ids)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "counts", counts)

    def __len__(self) -> int:
        return len(self.identity_ids)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def index_of(self) -> dict[str, int]:
        return {iid: i for i, iid in enumerate(self.identity_ids)}

    def to_embedding_set(self) -> EmbeddingSet:
        """Expose the means as an embedding set (e.g. for .femb export)."""
        return EmbeddingSet(self.means, self.identity_ids, self.identity_ids)


def _nan_array(n: int) -> np.ndarray:
    return np.full(n, np.nan, dtype=np.float64)


@dataclass
class LabelTable:
    """Per-sample categorical labels and continuous scores.

    Categorical entries are ``None`` when absent; continuous scores are
    NaN when absent. ``source`` records where each row's labels came from.
    """

    sample_ids: list[str]
    race: list[str | None] = field(default_factory=list)
    gender: list[str | None] = field(default_factory=list)
    age_score: np.ndarray = None
    quality_score: np.ndarray = None
    divergence_score: np.ndarray = None
    source: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.sample_ids)
        self.sample_ids = [str(s) for s in self.sample_ids]
        if len(set(self.sample_ids)) != n:
            raise DataError("label table sample_ids contain duplicates")
        if not self.race:
            self.race = [None] * n
        if not self.gender:
            self.gender = [None] * n
        if self.age_score is None:
            self.age_score = _nan_array(n)
        if self.quality_score is None:
            self.quality_score = _nan_array(n)
        if self.divergence_score is None:
            self.divergence_score = _nan_array(n)
        if not self.source:
            self.source = ["external"] * n
        self.age_score = np.asarray(self.age_score, dtype=np.float64)
        self.quality_score = np.asarray(self.quality_score, dtype=np.float64)
        self.divergence_score = np.asarray(self.divergence_score, dtype=np.float64)
        for name, col in (
            ("race", self.race),
            ("gender", self.gender),
            ("source", self.source),
        ):
            if len(col) != n:
                raise DataError(f"label column {name} has {len(col)} entries for {n} rows")
        for name, arr in (
            ("age_score", self.age_score),
            ("quality_score", self.quality_score),
            ("divergence_score", self.divergence_score),
        ):
            if arr.shape != (n,):
                raise DataError(f"label column {name} has shape {arr.shape} for {n} rows")
        for v in self.race:
            if v is not None and v not in RACES:
                raise DataError(f"unknown race label {v!r}")
        for v in self.gender:
            if v is not None and v not in GENDERS:
                raise DataError(f"unknown gender label {v!r}")
        for v in self.source:
            if v not in LABEL_SOURCES:
                raise DataError(f"unknown label source {v!r}")
        self._check_range("age_score", self.age_score, 0.0, 1.0)
        self._check_range("quality_score", self.quality_score, 0.0, 1.0)
        self._check_range("divergence_score", self.divergence_score, -1.0, 1.0)

    @staticmethod
    def _check_range(name: str, arr: np.ndarray, lo: float, hi: float) -> None:
        present = arr[~np.isnan(arr)]
        if present.size and (np.any(present < lo) or np.any(present > hi)):
            raise DataError(f"{name} values must lie in [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @classmethod
    def empty(cls, sample_ids, source: str = "external") -> "LabelTable":
        sample_ids = list(sample_ids)
        return cls(sample_ids=sample_ids, source=[source] * len(sample_ids))

    def align(self, sample_ids) -> "LabelTable":
        """Reorder rows to match ``sample_ids``; ids must match one-to-one."""
        wanted = [str(s) for s in sample_ids]
        index = {sid: i for i, sid in enumerate(self.sample_ids)}
        if len(wanted) != len(self.sample_ids) or any(s not in index for s in wanted):
            raise AlignmentError(
                "label table and embedding set do not share the same sample ids"
            )
        order = [index[s] for s in wanted]
        return LabelTable(
            sample_ids=[self.sample_ids[i] for i in order],
            race=[self.race[i] for i in order],
            gender=[self.gender[i] for i in order],
            age_score=self.age_score[order],
            quality_score=self.quality_score[order],
            divergence_score=self.divergence_score[order],
            source=[self.source[i] for i in order],
        )

    def select(self, keep) -> "LabelTable":
        keep = set(keep)
        idx = [i for i, sid in enumerate(self.sample_ids) if sid in keep]
        return LabelTable(
            sample_ids=[self.sample_ids[i] for i in idx],
            race=[self.race[i] for i in idx],
            gender=[self.gender[i] for i in idx],
            age_score=self.age_score[idx],
            quality_score=self.quality_score[idx],
            divergence_score=self.divergence_score[idx],
            source=[self.source[i] for i in idx],
        )

    def merged_with(self, other: "LabelTable") -> "LabelTable":
        """Overlay non-absent columns of ``other`` onto this table, by sample id."""
        other = other.align(self.sample_ids)
        out = replace(
            self,
            race=list(self.race),
            gender=list(self.gender),
            age_score=self.age_score.copy(),
            quality_score=self.quality_score.copy(),
            divergence_score=self.divergence_score.copy(),
            source=list(self.source),
        )
        for i in range(len(out)):
            if other.race[i] is not None:
                out.race[i] = other.race[i]
            if other.gender[i] is not None:
                out.gender[i] = other.gender[i]
        for name in ("age_score", "quality_score", "divergence_score"):
            src = getattr(other, name)
            dst = getattr(out, name)
            mask = ~np.isnan(src)
            dst[mask] = src[mask]
        return out


def normalize(es: EmbeddingSet) -> EmbeddingSet:
    """Rescale every row to unit Euclidean norm, preserving direction.

    Raises DegenerateEmbeddingError naming the first offending sample when
    a row is the zero vector.
    """
    if len(es) == 0:
        return es
    data = es.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise DegenerateEmbeddingError(
            f"cannot normalize zero embedding for sample {es.sample_ids[zero[0]]!r}"
        )
    return EmbeddingSet(data / norms[:, None], es.sample_ids, es.identity_ids)


def mean_by_identity(es: EmbeddingSet) -> MeanEmbeddingTable:
    """Per-identity mean embedding, renormalized to the unit sphere.

    Rows must be unit-normalized. Identities are emitted in lexicographic
    order, and within an identity rows are summed in sample-id order, so
    the result is bit-identical under any permutation of the input rows.
    Rows without an identity id count as their own singleton identity.
    """
    from ._validation import check_unit_rows

    check_unit_rows(es.data, "embedding set")
    groups: dict[str, list[int]] = {}
    for i, iid in enumerate(es.effective_identities):
        groups.setdefault(iid, []).append(i)
    identity_ids = sorted(groups)
    data = es.data.astype(np.float64)
    means = np.empty((len(identity_ids), es.dim), dtype=np.float64)
    counts = np.empty(len(identity_ids), dtype=np.int64)
    degenerate = []
    for m, iid in enumerate(identity_ids):
        rows = sorted(groups[iid], key=lambda i: es.sample_ids[i])
        if len(rows) == 1:
            # A singleton's prototype is the sample itself; keep it bitwise.
            means[m] = data[rows[0]]
            counts[m] = 1
            continue
        mean = data[rows].sum(axis=0) / len(rows)
        nrm = np.linalg.norm(mean)
        if nrm < 1e-8:
            degenerate.append(iid)
            counts[m] = len(rows)
            continue
        means[m] = mean / nrm
        counts[m] = len(rows)
    if degenerate:
        raise DegenerateMeanError(
            f"identity means cancel to zero for: {degenerate}"
        )
    singles = np.asarray([len(groups[iid]) == 1 for iid in identity_ids])
    means32 = means.astype(np.float32)
    if singles.any():
        # Preserve the exact stored bytes for singleton rows.
        src = np.asarray([groups[iid][0] for iid in identity_ids])
        means32[singles] = es.data[src[singles]]
    return MeanEmbeddingTable(tuple(identity_ids), means32, counts)


def _encode_strings(items) -> bytes:
    parts = []
    for s in items:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"id too long to encode: {s[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def save_embeddings(es: EmbeddingSet, path) -> None:
    """Write an embedding set to ``path`` in the .femb format.

    Output bytes are a pure function of the set's contents.
    """
    payload = es.data.astype("<f4", copy=False).tobytes(order="C")
    blob = b"".join(
        [
            _HEADER.pack(FEMB_MAGIC, FEMB_VERSION, len(es), es.dim),
            payload,
            _encode_strings(es.sample_ids),
            _encode_strings(es.identity_ids),
        ]
    )
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def strings(self, n: int) -> tuple[str, ...]:
        out = []
        for _ in range(n):
            (length,) = struct.unpack("<H", self.take(2))
            raw = self.take(length)
            try:
                out.append(raw.decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise FormatError(f"{self.path}: invalid UTF-8 in id block") from exc
        return tuple(out)


def load_embeddings(path) -> EmbeddingSet:
    """Read a .femb file, validating format and payload.

    Malformed headers, truncation and trailing bytes raise FormatError;
    non-finite payloads and duplicate sample ids raise DataError.
    """
    blob = Path(path).read_bytes()
    reader = _Reader(blob, path)
    magic, version, n, dim = _HEADER.unpack(reader.take(_HEADER.size))
    if magic != FEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEMB_MAGIC!r}")
    if version != FEMB_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if dim < 1:
        raise FormatError(f"{path}: dimension must be >= 1, header says {dim}")
    payload = reader.take(int(n) * int(dim) * 4)
    data = np.frombuffer(payload, dtype="<f4").reshape(int(n), int(dim))
    sample_ids = reader.strings(int(n))
    identity_ids = reader.strings(int(n))
    if reader.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - reader.pos} trailing bytes")
    if data.size and not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains NaN or Inf")
    if len(set(sample_ids)) != len(sample_ids):
        raise DataError(f"{path}: duplicate sample ids")
    return EmbeddingSet(data, sample_ids, identity_ids)


def _fmt(value: float) -> str:
    return "" if np.isnan(value) else repr(float(value))


def save_labels(table: LabelTable, path) -> None:
    """Write a label table as CSV with the documented fixed header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_CSV_HEADER)
        for i, sid in enumerate(table.sample_ids):
            writer.writerow(
                [
                    sid,
                    table.race[i] or "",
                    table.gender[i] or "",
                    _fmt(table.age_score[i]),
                    _fmt(table.quality_score[i]),
                    _fmt(table.divergence_score[i]),
                    table.source[i],
                ]
            )


def load_labels(path) -> LabelTable:
    """Read a label table CSV; empty fields become absent values."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty label file") from None
        if header != LABEL_CSV_HEADER:
            raise FormatError(
                f"{path}: bad label CSV header {header!r}"
            )
        rows = list(reader)
    sample_ids, race, gender, source = [], [], [], []
    age = np.full(len(rows), np.nan)
    quality = np.full(len(rows), np.nan)
    divergence = np.full(len(rows), np.nan)
    for i, row in enumerate(rows):
        if len(row) != len(LABEL_CSV_HEADER):
            raise FormatError(f"{path}: row {i + 2} has {len(row)} fields")
        sample_ids.append(row[0])
        race.append(row[1] or None)
        gender.append(row[2] or None)
        try:
            if row[3]:
                age[i] = float(row[3])
            if row[4]:
                quality[i] = float(row[4])
            if row[5]:
                divergence[i] = float(row[5])
        except ValueError as exc:
            raise FormatError(f"{path}: row {i + 2} has a non-numeric score") from exc
        source.append(row[6] or "external")
    try:
        return LabelTable(
            sample_ids=sample_ids,
            race=race,
            gender=gender,
            age_score=age,
            quality_score=quality,
            divergence_score=divergence,
            source=source,
        )
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def matrix_to_embedding_set(
    matrix: np.ndarray,
    sample_ids=None,
    identity_ids=None,
) -> EmbeddingSet:
    """Wrap a plain numeric matrix as an embedding set, generating row ids."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.ndim != 2:
        raise ParameterError(f"expected a matrix, got shape {matrix.shape}")
    n = matrix.shape[0]
    if sample_ids is None:
        sample_ids = tuple(f"row{i:06d}" for i in range(n))
    return EmbeddingSet(matrix, tuple(sample_ids), tuple(identity_ids or ()))
