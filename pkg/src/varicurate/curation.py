"""Divergence scoring, threshold filters, and balanced sampling plans.

A sample's divergence score (DS) is the cosine similarity between its
embedding and its identity's renormalized mean embedding: low DS marks
label noise or identity loss, high DS marks low within-identity
variation. Filters keep at the boundary (score >= threshold stays).
Plans enumerate balanced race-by-gender cells with per-image uniform
draws of an age condition in [0,1] and a DS condition in a configured
range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._validation import check_positive_int, check_unit_rows
from .data import GENDERS, RACES, EmbeddingSet, LabelTable, MeanEmbeddingTable
from .errors import DataError, ParameterError

FILTER_STAGES = ("stage1_quality", "stage1_demographic", "stage2_identity", "ds_noise")

DEFAULT_QUALITY_THRESHOLD = 0.7
DEFAULT_IDENTITY_THRESHOLD = 0.3


@dataclass(frozen=True)
class DivergenceConfig:
    """DS conditioning range plus the audit floor/ceiling marks."""

    low: float = 0.5
    high: float = 0.8
    noise_floor: float = 0.3
    collapse_ceiling: float = 0.9

    def __post_init__(self):
        if not (-1.0 <= self.low < self.high <= 1.0):
            raise ParameterError(
                f"need -1 <= low < high <= 1, got [{self.low}, {self.high}]"
            )
        if not self.noise_floor < self.low:
            raise ParameterError(
                f"noise_floor {self.noise_floor} must lie below low {self.low}"
            )


@dataclass(frozen=True)
class FilterReport:
    """Partition of the input sample ids at one threshold."""

    stage: str
    kept: tuple[str, ...]
    removed: tuple[str, ...]
    threshold: float

    def __post_init__(self):
        if self.stage not in FILTER_STAGES:
            raise ParameterError(f"unknown filter stage {self.stage!r}")
        object.__setattr__(self, "kept", tuple(self.kept))
        object.__setattr__(self, "removed", tuple(self.removed))
        if set(self.kept) & set(self.removed):
            raise DataError("filter report kept/removed overlap")

    @property
    def total(self) -> int:
        return len(self.kept) + len(self.removed)


def divergence_scores(es: EmbeddingSet, means: MeanEmbeddingTable) -> LabelTable:
    """Per-sample DS against the sample identity's mean embedding.

    Embeddings must be unit-normalized and every identity present in
    ``means``. A sample that bitwise equals its mean row (singletons by
    construction) scores exactly 1.0. Output carries source "computed".
    """
    check_unit_rows(es.data, "embedding set")
    index = means.index_of()
    rows = []
    for iid in es.effective_identities:
        if iid not in index:
            raise DataError(f"identity {iid!r} has no mean embedding")
        rows.append(index[iid])
    scores = np.ones(len(es), dtype=np.float64)
    if len(es):
        sample64 = es.data.astype(np.float64)
        mean_rows = means.means[rows]
        mean64 = mean_rows.astype(np.float64)
        dots = np.einsum("ij,ij->i", sample64, mean64)
        norms = np.linalg.norm(sample64, axis=1) * np.linalg.norm(mean64, axis=1)
        scores = np.clip(dots / norms, -1.0, 1.0)
        exact = np.all(
            es.data.view(np.uint32) == mean_rows.view(np.uint32), axis=1
        )
        scores[exact] = 1.0
    return LabelTable(
        sample_ids=list(es.sample_ids),
        divergence_score=scores,
        source=["computed"] * len(es),
    )


def _split(sample_ids, keep_mask, stage: str, threshold: float) -> FilterReport:
    kept = tuple(sid for sid, k in zip(sample_ids, keep_mask) if k)
    removed = tuple(sid for sid, k in zip(sample_ids, keep_mask) if not k)
    return FilterReport(stage=stage, kept=kept, removed=removed, threshold=threshold)


def stage1_quality_filter(
    labels: LabelTable, threshold: float = DEFAULT_QUALITY_THRESHOLD
) -> FilterReport:
    """Keep samples whose quality score is at least ``threshold``."""
    missing = np.isnan(labels.quality_score)
    if missing.any():
        bad = [labels.sample_ids[i] for i in np.nonzero(missing)[0][:10]]
        raise DataError(f"samples missing quality_score: {bad}")
    return _split(
        labels.sample_ids,
        labels.quality_score >= threshold,
        "stage1_quality",
        threshold,
    )


def _base_vectors(base) -> tuple[dict[str, int], np.ndarray]:
    if isinstance(base, MeanEmbeddingTable):
        return base.index_of(), base.means.astype(np.float64)
    if isinstance(base, EmbeddingSet):
        ids = base.effective_identities
        if len(set(ids)) != len(ids):
            raise DataError("base embedding set has duplicate identities")
        return {iid: i for i, iid in enumerate(ids)}, base.data.astype(np.float64)
    raise ParameterError(
        f"base must be a MeanEmbeddingTable or EmbeddingSet, got {type(base).__name__}"
    )


def stage2_identity_filter(
    base,
    generated: EmbeddingSet,
    threshold: float = DEFAULT_IDENTITY_THRESHOLD,
) -> FilterReport:
    """Keep generated samples that stay cosine-close to their base identity.

    ``base`` maps each identity to its reference embedding: either a mean
    table or an embedding set with one row per identity.
    """
    index, vectors = _base_vectors(base)
    if len(generated) and vectors.shape[1] != generated.dim:
        raise DataError(
            f"base dimension {vectors.shape[1]} != generated dimension {generated.dim}"
        )
    rows = []
    for iid in generated.effective_identities:
        if iid not in index:
            raise DataError(f"identity {iid!r} has no base embedding")
        rows.append(index[iid])
    keep = np.ones(len(generated), dtype=bool)
    if len(generated):
        gen = generated.data.astype(np.float64)
        ref = vectors[rows]
        norms = np.linalg.norm(gen, axis=1) * np.linalg.norm(ref, axis=1)
        zero = np.nonzero(norms == 0.0)[0]
        if zero.size:
            raise DataError(
                f"zero embedding for sample {generated.sample_ids[zero[0]]!r}"
            )
        cos = np.einsum("ij,ij->i", gen, ref) / norms
        keep = cos >= threshold
    return _split(generated.sample_ids, keep, "stage2_identity", threshold)


def ds_noise_detect(
    labels: LabelTable, cfg: DivergenceConfig = DivergenceConfig()
) -> FilterReport:
    """Flag samples whose DS falls below the noise floor."""
    missing = np.isnan(labels.divergence_score)
    if missing.any():
        bad = [labels.sample_ids[i] for i in np.nonzero(missing)[0][:10]]
        raise DataError(f"samples missing divergence_score: {bad}")
    return _split(
        labels.sample_ids,
        labels.divergence_score >= cfg.noise_floor,
        "ds_noise",
        cfg.noise_floor,
    )


@dataclass(frozen=True)
class CurationPlan:
    """Balanced generation plan: cells, per-image age and DS conditions."""

    cells: tuple[tuple[str, str, int], ...]
    images_per_id: int
    age_draws: np.ndarray
    ds_draws: np.ndarray
    seed: int
    ds_low: float = 0.5
    ds_high: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(tuple(c) for c in self.cells))
        total = self.total_images
        for name, arr in (("age_draws", self.age_draws), ("ds_draws", self.ds_draws)):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (total,):
                raise DataError(f"{name} has shape {arr.shape}, expected ({total},)")
            object.__setattr__(self, name, arr)
        if self.age_draws.size and (
            self.age_draws.min() < 0.0 or self.age_draws.max() > 1.0
        ):
            raise DataError("age draws must lie in [0, 1]")
        if self.ds_draws.size and (
            self.ds_draws.min() < self.ds_low or self.ds_draws.max() > self.ds_high
        ):
            raise DataError("DS draws must lie in the configured range")

    @property
    def total_identities(self) -> int:
        return sum(c[2] for c in self.cells)

    @property
    def total_images(self) -> int:
        return self.total_identities * self.images_per_id

    def iter_records(self):
        """Yield one dict per planned image, in a fixed deterministic order."""
        flat = 0
        for race, gender, id_count in self.cells:
            prefix = f"{race.lower()}-{gender.lower()}"
            for i in range(id_count):
                identity = f"{prefix}-{i:05d}"
                for j in range(self.images_per_id):
                    yield {
                        "sample_id": f"{identity}-img{j:03d}",
                        "identity_id": identity,
                        "race": race,
                        "gender": gender,
                        "age": float(self.age_draws[flat]),
                        "ds": float(self.ds_draws[flat]),
                    }
                    flat += 1


def make_plan(
    ids_per_cell: int,
    images_per_id: int,
    cfg: DivergenceConfig = DivergenceConfig(),
    seed: int = 0,
) -> CurationPlan:
    """Balanced plan over all 8 race-by-gender cells, seeded draws.

    Each planned image gets an independent age condition ~ U(0, 1) and a
    DS condition ~ U(cfg.low, cfg.high).
    """
    check_positive_int(ids_per_cell, "ids_per_cell")
    check_positive_int(images_per_id, "images_per_id")
    cells = tuple(
        (race, gender, ids_per_cell) for race in RACES for gender in GENDERS
    )
    total = len(cells) * ids_per_cell * images_per_id
    rng = np.random.default_rng(seed)
    age = rng.uniform(0.0, 1.0, size=total)
    ds = rng.uniform(cfg.low, cfg.high, size=total)
    return CurationPlan(
        cells=cells,
        images_per_id=images_per_id,
        age_draws=age,
        ds_draws=ds,
        seed=seed,
        ds_low=cfg.low,
        ds_high=cfg.high,
    )


def save_plan(plan: CurationPlan, path) -> None:
    """Serialize a plan as JSON-lines, one image record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in plan.iter_records():
            fh.write(json.dumps(record) + "\n")


def load_plan_records(path) -> list[dict]:
    """Read back the JSONL records written by save_plan."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def apply_filter(
    report: FilterReport,
    es: EmbeddingSet | None = None,
    labels: LabelTable | None = None,
) -> tuple[EmbeddingSet | None, LabelTable | None]:
    """Materialize a report's kept subset of an embedding set and/or table."""
    kept = set(report.kept)
    out_es = es.select(kept) if es is not None else None
    out_labels = labels.select(kept) if labels is not None else None
    return out_es, out_labels
