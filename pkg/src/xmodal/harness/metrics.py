"""Retrieval recall, corpus BLEU@4 and accuracy."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from ..errors import ContractError, DegenerateInputError

BLEU_EPS = 1e-9
RECALL_KS = (1, 5, 10)


@dataclass
class RetrievalRanks:
    """1-based rank of the true match for every query, per direction."""

    text_to_image: np.ndarray
    image_to_text: np.ndarray

    def __post_init__(self):
        for r in (self.text_to_image, self.image_to_text):
            if r.size and r.min() < 1:
                raise ContractError("ranks must be >= 1")


def _true_ranks(sim: np.ndarray) -> np.ndarray:
    """Rank of candidate i for query i; ties go to the lower candidate index."""
    true = np.diag(sim)[:, None]
    idx = np.arange(sim.shape[1])[None, :]
    better = (sim > true) | ((sim == true) & (idx < np.arange(sim.shape[0])[:, None]))
    return 1 + better.sum(axis=1)


def rank_retrieval(text_cls, image_cls) -> RetrievalRanks:
    """Rank galleries by dot-product similarity; query i matches candidate i."""
    t = np.asarray(getattr(text_cls, "data", text_cls), dtype=np.float64)
    v = np.asarray(getattr(image_cls, "data", image_cls), dtype=np.float64)
    if t.shape != v.shape or t.ndim != 2:
        raise ContractError(f"expected matching [N, d] embeddings, got {t.shape} and {v.shape}")
    if t.shape[0] < 2:
        raise DegenerateInputError("retrieval needs a gallery of at least two items")
    sim = t @ v.T
    return RetrievalRanks(_true_ranks(sim), _true_ranks(sim.T))


def recall_at(ranks: np.ndarray, k: int) -> float:
    return 100.0 * float(np.mean(ranks <= k))


def recall_table(ranks: RetrievalRanks) -> dict[str, float]:
    out = {}
    for name, r in (("t2i", ranks.text_to_image), ("i2t", ranks.image_to_text)):
        for k in RECALL_KS:
            out[f"{name}_R@{k}"] = recall_at(r, k)
    return out


def mean_recall(ranks: RetrievalRanks) -> float:
    """Mean of R@1, R@5, R@10 over both directions, in percent."""
    t2i, i2t = ranks.text_to_image, ranks.image_to_text
    if t2i.size == 0 or t2i.size != i2t.size:
        raise ContractError("mean_recall needs equal, non-empty rank arrays per direction")
    # integer hit count and a single division: correctly rounded, no summation drift
    hits = sum(int(np.count_nonzero(r <= k)) for r in (t2i, i2t) for k in RECALL_KS)
    return 100.0 * hits / (len(RECALL_KS) * 2 * t2i.size)


def _ngrams(seq: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu4(hypotheses: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]]) -> float:
    """Corpus BLEU over 1-4-grams with a single reference per hypothesis.

    Zero clipped-match counts are replaced by ``BLEU_EPS`` before taking the
    geometric mean; the brevity penalty is ``exp(min(0, 1 - r / c))``.
    """
    if len(hypotheses) == 0:
        raise ContractError("bleu4 of an empty corpus")
    if len(hypotheses) != len(references):
        raise ContractError("bleu4 needs exactly one reference per hypothesis")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        log_p += math.log((m if m > 0 else BLEU_EPS) / max(t, 1))
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return bp * math.exp(log_p / 4)


def accuracy(predictions, labels, label_set=None) -> float:
    pred, y = np.asarray(predictions), np.asarray(labels)
    if pred.shape != y.shape or y.size == 0:
        raise ContractError("accuracy needs equally sized, non-empty predictions and labels")
    if label_set is not None and not np.isin(y, list(label_set)).all():
        raise ContractError("label outside the label set")
    return float(np.mean(pred == y))
