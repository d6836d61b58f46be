"""Dataset characteristics: balance, interclass similarity, DS shape, leakage.

The interclass statistic is the mean off-diagonal cosine over identity
mean embeddings, evaluated in row blocks so the full M-by-M matrix is
never materialized. Leakage against a reference set is the per-identity
maximum cosine over all reference rows; counting how many identities
exceed a threshold quantifies near-duplication risk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .curation import DivergenceConfig
from .data import GENDERS, RACES, EmbeddingSet, LabelTable, MeanEmbeddingTable
from .errors import DataError
from .similarity import max_cross_similarity

DS_HISTOGRAM_BINS = 50


@dataclass(frozen=True)
class AuditReport:
    """Balance counts, similarity summary, and the DS histogram."""

    cell_counts: dict[tuple[str, str], int]
    interclass_mean_cosine: float | None
    ds_bin_edges: np.ndarray
    ds_bin_counts: np.ndarray
    noise_fraction: float
    collapse_fraction: float
    n_samples: int
    n_identities: int

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_identities": self.n_identities,
            "cell_counts": {
                f"{race}/{gender}": self.cell_counts[(race, gender)]
                for race in RACES
                for gender in GENDERS
            },
            "interclass_mean_cosine": self.interclass_mean_cosine,
            "noise_fraction": self.noise_fraction,
            "collapse_fraction": self.collapse_fraction,
            "ds_histogram": {
                "bin_edges": [float(e) for e in self.ds_bin_edges],
                "counts": [int(c) for c in self.ds_bin_counts],
            },
        }


def _interclass_mean_cosine(means: np.ndarray, block: int = 2048) -> float | None:
    m = means.shape[0]
    if m < 2:
        return None
    u = means.astype(np.float64)
    u = u / np.linalg.norm(u, axis=1)[:, None]
    total = 0.0
    for start in range(0, m, block):
        stop = min(start + block, m)
        total += float((u[start:stop] @ u.T).sum())
    return (total - m) / (m * (m - 1))


def audit_dataset(
    es: EmbeddingSet,
    labels: LabelTable,
    means: MeanEmbeddingTable,
    cfg: DivergenceConfig = DivergenceConfig(),
) -> AuditReport:
    """Summarize a labeled, DS-scored dataset.

    Every sample needs race, gender, and a divergence score; every
    identity needs a mean embedding.
    """
    labels = labels.align(es.sample_ids)
    missing_cat = [
        sid
        for sid, r, g in zip(labels.sample_ids, labels.race, labels.gender)
        if r is None or g is None
    ]
    if missing_cat:
        raise DataError(f"samples missing race/gender labels: {missing_cat[:10]}")
    ds = labels.divergence_score
    missing_ds = np.isnan(ds)
    if missing_ds.any():
        bad = [labels.sample_ids[i] for i in np.nonzero(missing_ds)[0][:10]]
        raise DataError(f"samples missing divergence_score: {bad}")
    covered = set(means.identity_ids)
    uncovered = sorted(set(es.effective_identities) - covered)
    if uncovered:
        raise DataError(f"identities without mean embeddings: {uncovered[:10]}")
    cells = {(race, gender): 0 for race in RACES for gender in GENDERS}
    for r, g in zip(labels.race, labels.gender):
        cells[(r, g)] += 1
    counts, edges = np.histogram(ds, bins=DS_HISTOGRAM_BINS, range=(-1.0, 1.0))
    n = len(es)
    return AuditReport(
        cell_counts=cells,
        interclass_mean_cosine=_interclass_mean_cosine(means.means),
        ds_bin_edges=edges,
        ds_bin_counts=counts,
        noise_fraction=float((ds < cfg.noise_floor).mean()) if n else 0.0,
        collapse_fraction=float((ds > cfg.collapse_ceiling).mean()) if n else 0.0,
        n_samples=n,
        n_identities=len(means),
    )


def save_histogram_csv(report: AuditReport, path) -> None:
    """Write the DS histogram as (bin_left, bin_right, count) rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, count in enumerate(report.ds_bin_counts):
            writer.writerow(
                [
                    repr(float(report.ds_bin_edges[i])),
                    repr(float(report.ds_bin_edges[i + 1])),
                    int(count),
                ]
            )


@dataclass(frozen=True)
class LeakageReport:
    """Per probe identity, its closest match in the reference set."""

    identity_ids: tuple[str, ...]
    max_similarity: np.ndarray
    threshold: float

    def exceed_count(self, threshold: float | None = None) -> int:
        """How many identities exceed (strictly) the given threshold."""
        if threshold is None:
            threshold = self.threshold
        return int((self.max_similarity > threshold).sum())

    def to_dict(self) -> dict:
        return {
            "n_identities": len(self.identity_ids),
            "threshold": self.threshold,
            "exceed_count": self.exceed_count(),
            "max_similarity_max": (
                float(self.max_similarity.max()) if len(self.identity_ids) else None
            ),
            "max_similarity_mean": (
                float(self.max_similarity.mean()) if len(self.identity_ids) else None
            ),
        }


def leakage_check(
    probe_means: MeanEmbeddingTable,
    reference: EmbeddingSet,
    threshold: float = 0.3,
) -> LeakageReport:
    """Maximum cosine of each probe identity against all reference rows."""
    if len(reference) == 0:
        raise DataError("leakage check needs a non-empty reference set")
    sims = max_cross_similarity(probe_means.means, reference.data)
    return LeakageReport(
        identity_ids=probe_means.identity_ids,
        max_similarity=sims,
        threshold=threshold,
    )
