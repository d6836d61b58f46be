"""Neighborhood label refinement over face-recognition embeddings.

Each sample's categorical label is replaced by the most frequent label
among its top-k most cosine-similar neighbors (the sample itself never
votes). Applied once, not iterated. The same vote, compared against the
labels a batch was *supposed* to have, yields the demographic
consistency removal set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_positive_int, check_unit_rows
from .data import EmbeddingSet, LabelTable
from .errors import DataError, ParameterError
from .labeling import CANONICAL_BANKS
from .similarity import top_k_neighbors

VOTE_ATTRIBUTES = ("race", "gender")
TIE_RULES = ("keep_original", "bank_order")


@dataclass(frozen=True)
class FrcConfig:
    """Vote parameters: neighborhood size, attributes, tie handling."""

    k: int = 50
    attributes: tuple[str, ...] = VOTE_ATTRIBUTES
    tie_rule: str = "keep_original"

    def __post_init__(self):
        check_positive_int(self.k, "k")
        attrs = tuple(self.attributes)
        if not attrs:
            raise ParameterError("at least one attribute must be configured")
        bad = [a for a in attrs if a not in VOTE_ATTRIBUTES]
        if bad:
            raise ParameterError(
                f"unknown vote attributes {bad}; expected subset of {VOTE_ATTRIBUTES}"
            )
        if len(set(attrs)) != len(attrs):
            raise ParameterError("duplicate attributes in config")
        if self.tie_rule not in TIE_RULES:
            raise ParameterError(
                f"tie_rule must be one of {TIE_RULES}, got {self.tie_rule!r}"
            )
        object.__setattr__(self, "attributes", attrs)


@dataclass
class RefinementReport:
    """What the vote changed: counts per attribute plus a full log."""

    changed_count: dict[str, int] = field(default_factory=dict)
    change_log: list[tuple[str, str, str, str]] = field(default_factory=list)


def _attribute_column(labels: LabelTable, attr: str) -> list[str | None]:
    return labels.race if attr == "race" else labels.gender


def _require_complete(labels: LabelTable, attr: str) -> None:
    missing = [
        sid for sid, v in zip(labels.sample_ids, _attribute_column(labels, attr))
        if v is None
    ]
    if missing:
        raise DataError(
            f"samples missing a {attr} label cannot vote: {missing[:10]}"
        )


def _vote(
    codes: np.ndarray,
    neighbor_idx: np.ndarray,
    n_labels: int,
    tie_rule: str,
) -> np.ndarray:
    """Mode of neighbor codes per row; ties per rule.

    Returns the winning code per row; under keep_original a tie returns
    the row's own current code.
    """
    n, k = neighbor_idx.shape
    counts = np.zeros((n, n_labels), dtype=np.int64)
    rows = np.repeat(np.arange(n), k)
    np.add.at(counts, (rows, codes[neighbor_idx.ravel()]), 1)
    best = counts.max(axis=1, keepdims=True)
    winners = np.argmax(counts, axis=1)  # earliest label on ties: bank order
    if tie_rule == "keep_original":
        tied = (counts == best).sum(axis=1) > 1
        winners = np.where(tied, codes, winners)
    return winners


def refine(
    es: EmbeddingSet,
    labels: LabelTable,
    cfg: FrcConfig = FrcConfig(),
) -> tuple[LabelTable, RefinementReport]:
    """Re-vote the configured categorical labels of every sample.

    Embeddings must be unit-normalized and k at most N-1. The returned
    table carries source "clip_frc" on every row; scores pass through
    untouched.
    """
    check_unit_rows(es.data, "embedding set")
    n = len(es)
    if cfg.k >= n:
        raise ParameterError(
            f"k={cfg.k} needs at least k+1 samples, got {n}"
        )
    labels = labels.align(es.sample_ids)
    for attr in cfg.attributes:
        _require_complete(labels, attr)
    neighbor_idx, _ = top_k_neighbors(es.data, cfg.k)
    out = replace(
        labels,
        race=list(labels.race),
        gender=list(labels.gender),
        age_score=labels.age_score.copy(),
        quality_score=labels.quality_score.copy(),
        divergence_score=labels.divergence_score.copy(),
        source=["clip_frc"] * n,
    )
    report = RefinementReport()
    for attr in cfg.attributes:
        bank = CANONICAL_BANKS[attr]
        index = {lab: i for i, lab in enumerate(bank)}
        col = _attribute_column(labels, attr)
        codes = np.asarray([index[v] for v in col], dtype=np.int64)
        winners = _vote(codes, neighbor_idx, len(bank), cfg.tie_rule)
        new_col = [bank[w] for w in winners]
        changed = [
            (es.sample_ids[i], attr, col[i], new_col[i])
            for i in range(n)
            if new_col[i] != col[i]
        ]
        report.changed_count[attr] = len(changed)
        report.change_log.extend(changed)
        if attr == "race":
            out.race = new_col
        else:
            out.gender = new_col
    report.change_log.sort(key=lambda rec: (rec[0], rec[1]))
    return out, report


def demographic_consistency_filter(
    es: EmbeddingSet,
    intended: LabelTable,
    cfg: FrcConfig = FrcConfig(),
) -> list[str]:
    """Sample ids whose neighborhood vote contradicts their intended labels.

    ``intended`` carries the labels each sample was generated to have;
    a sample is flagged when the refined label differs from the intended
    one on any configured attribute. The returned list is sorted.
    """
    refined, _ = refine(es, intended, cfg)
    intended = intended.align(es.sample_ids)
    removed = set()
    for attr in cfg.attributes:
        before = _attribute_column(intended, attr)
        after = _attribute_column(refined, attr)
        for sid, old, new in zip(es.sample_ids, before, after):
            if old != new:
                removed.add(sid)
    return sorted(removed)
