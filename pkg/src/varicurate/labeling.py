"""Zero-shot demographic labeling from precomputed text/image embeddings.

A prompt bank holds one unit-normalized text embedding per candidate
label (e.g. the encodings of "A photo of a Caucasian face", ...). A
sample is labeled by cosine-comparing each of its views (the image and
its horizontal flip) against every bank row, softmaxing the similarities
per view, averaging the probabilities across views, and taking the
argmax. No temperature is applied to the similarities.

Banks travel as .femb files whose sample_ids carry the label strings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_vector, check_same_dim
from .data import (
    AGE_LABELS,
    GENDERS,
    RACES,
    EmbeddingSet,
    LabelTable,
)
from .errors import AlignmentError, ParameterError, ShapeError
from .similarity import unit_rows

CANONICAL_BANKS = {
    "race": RACES,
    "gender": GENDERS,
    "age": AGE_LABELS,
}

PROMPT_TEMPLATE = "A photo of a {label} face"


def prompt_strings(attribute: str) -> tuple[str, ...]:
    """The prompt texts an external encoder should embed for ``attribute``."""
    if attribute not in CANONICAL_BANKS:
        raise ParameterError(f"unknown attribute {attribute!r}")
    return tuple(
        PROMPT_TEMPLATE.format(label=lab) for lab in CANONICAL_BANKS[attribute]
    )


@dataclass(frozen=True)
class PromptBank:
    """Label strings paired with their unit-normalized text embeddings."""

    attribute: str
    labels: tuple[str, ...]
    text_embeddings: np.ndarray

    def __post_init__(self):
        if self.attribute not in CANONICAL_BANKS:
            raise ParameterError(
                f"unknown attribute {self.attribute!r}; "
                f"expected one of {sorted(CANONICAL_BANKS)}"
            )
        labels = tuple(str(s) for s in self.labels)
        if len(labels) < 2:
            raise ParameterError("a prompt bank needs at least 2 labels")
        if len(set(labels)) != len(labels):
            raise ParameterError("prompt bank labels must be unique")
        expected = set(CANONICAL_BANKS[self.attribute])
        if set(labels) != expected:
            raise ParameterError(
                f"{self.attribute} bank must carry exactly {sorted(expected)}, "
                f"got {sorted(set(labels))}"
            )
        emb = unit_rows(np.asarray(self.text_embeddings, dtype=np.float64))
        if emb.shape[0] != len(labels):
            raise ParameterError(
                f"bank has {emb.shape[0]} embeddings for {len(labels)} labels"
            )
        emb.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "text_embeddings", emb)

    @classmethod
    def from_embedding_set(cls, attribute: str, es: EmbeddingSet) -> "PromptBank":
        """Build a bank from a .femb whose sample_ids are the labels."""
        return cls(attribute, es.sample_ids, es.data)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.text_embeddings.shape[1]


@dataclass(frozen=True)
class SoftLabel:
    """Flip-averaged label probabilities with the winning label."""

    labels: tuple[str, ...]
    probabilities: np.ndarray
    argmax_label: str
    margin: float


def _softmax_columns(sims: np.ndarray) -> np.ndarray:
    """Column-wise stable softmax of an L-by-V similarity matrix."""
    shifted = sims - sims.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _view_matrix(image_emb, flip_emb, bank: PromptBank) -> np.ndarray:
    image = as_vector(image_emb, "image_emb")
    flip = as_vector(flip_emb, "flip_emb")
    if image.shape[0] != bank.dim or flip.shape[0] != bank.dim:
        raise ShapeError(
            f"view dimension {image.shape[0]} does not match bank dimension {bank.dim}"
        )
    views = unit_rows(np.stack([image, flip]))
    # (L, V): similarity of every bank prompt to every view.
    return bank.text_embeddings @ views.T


def _averaged_probs(sims_lv: np.ndarray) -> np.ndarray:
    return _softmax_columns(sims_lv).mean(axis=1)


def classify(image_emb, flip_emb, bank: PromptBank) -> SoftLabel:
    """Label one sample from its two views against a prompt bank.

    Ties in the averaged probabilities resolve to the earliest bank label.
    """
    probs = _averaged_probs(_view_matrix(image_emb, flip_emb, bank))
    top = int(np.argmax(probs))
    order = np.sort(probs)[::-1]
    return SoftLabel(
        labels=bank.labels,
        probabilities=probs,
        argmax_label=bank.labels[top],
        margin=float(order[0] - order[1]),
    )


def age_score(image_emb, flip_emb, age_bank: PromptBank) -> float:
    """Flip-averaged probability of the "Old" prompt, in [0, 1]."""
    if age_bank.attribute != "age":
        raise ParameterError(
            f"age_score needs the age bank, got a {age_bank.attribute!r} bank"
        )
    probs = _averaged_probs(_view_matrix(image_emb, flip_emb, age_bank))
    return float(probs[age_bank.labels.index("Old")])


def _batch_probs(images: np.ndarray, flips: np.ndarray, bank: PromptBank) -> np.ndarray:
    """(N, L) flip-averaged probabilities for a whole batch."""
    check_same_dim(images, bank.text_embeddings, "images", "prompt bank")
    sims_img = unit_rows(images) @ bank.text_embeddings.T
    sims_flip = unit_rows(flips) @ bank.text_embeddings.T
    # Softmax over labels for each view separately, then average.
    p_img = _softmax_columns(sims_img.T).T
    p_flip = _softmax_columns(sims_flip.T).T
    return 0.5 * (p_img + p_flip)


def label_dataset(
    images: EmbeddingSet,
    flips: EmbeddingSet,
    banks: list[PromptBank],
) -> LabelTable:
    """Label every sample; returns a table with source "clip".

    ``flips`` must carry the same sample ids as ``images`` (it is
    reordered to match); attribute columns not covered by a bank stay
    absent.
    """
    seen = set()
    for bank in banks:
        if bank.attribute in seen:
            raise ParameterError(f"duplicate {bank.attribute!r} bank")
        seen.add(bank.attribute)
    if set(flips.sample_ids) != set(images.sample_ids):
        raise AlignmentError(
            "image and flip embedding sets do not share the same sample ids"
        )
    if flips.sample_ids != images.sample_ids:
        order = {sid: i for i, sid in enumerate(flips.sample_ids)}
        idx = [order[sid] for sid in images.sample_ids]
        flips = EmbeddingSet(
            flips.data[idx],
            images.sample_ids,
            tuple(flips.identity_ids[i] for i in idx),
        )
    table = LabelTable.empty(list(images.sample_ids), source="clip")
    if len(images) == 0:
        return table
    img64 = images.data.astype(np.float64)
    flip64 = flips.data.astype(np.float64)
    for bank in banks:
        probs = _batch_probs(img64, flip64, bank)
        if bank.attribute == "age":
            table.age_score = probs[:, bank.labels.index("Old")].astype(np.float64)
        else:
            winners = np.argmax(probs, axis=1)
            col = [bank.labels[w] for w in winners]
            if bank.attribute == "race":
                table.race = col
            else:
                table.gender = col
    return LabelTable(
        sample_ids=table.sample_ids,
        race=table.race,
        gender=table.gender,
        age_score=table.age_score,
        quality_score=table.quality_score,
        divergence_score=table.divergence_score,
        source=table.source,
    )
