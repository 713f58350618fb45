"""Evaluation pipelines over a trained model and the synthetic corpus."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import model as M
from ..datagen import LANG_A, LANG_B, AmbiguousExample, Corpus
from ..model import CrossModalModel
from ..tasks import collate_decoder, collate_encoder
from ..vocab import EOS
from .classify import LabeledExample, classify_eval, finetune_classifier
from .decoding import beam_search, strip_eos
from .metrics import bleu4, mean_recall, rank_retrieval, recall_table


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def embed_pairs(model: CrossModalModel, corpus: Corpus, n: int | None = None, lang: int = LANG_A,
                chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    exs = corpus.image_text[:n]
    texts, images = [], []
    for sl in _chunks(len(exs), chunk):
        part = exs[sl]
        caps = [e.caption if lang == e.lang else e.translation for e in part]
        texts.append(model.encode_text(collate_encoder(caps), lang).cls.data)
        images.append(model.encode_image(np.stack([e.image for e in part])).cls.data)
    return np.concatenate(texts), np.concatenate(images)


def evaluate_retrieval(model: CrossModalModel, corpus: Corpus, n: int = 256, lang: int = LANG_A) -> dict[str, float]:
    t, v = embed_pairs(model, corpus, n, lang)
    ranks = rank_retrieval(t, v)
    out = recall_table(ranks)
    out["meanRecall"] = mean_recall(ranks)
    return out


def translate(model: CrossModalModel, sources: Sequence[np.ndarray], src_lang: int, tgt_lang: int,
              beam: int = 4, images: np.ndarray | None = None) -> list[list[int]]:
    out = []
    for i, src in enumerate(sources):
        text = model.encode_text(collate_encoder([src]), src_lang)
        image = model.encode_image(images[i:i + 1]) if images is not None else None
        joint = model.fuse(text, image)
        out.append(strip_eos(beam_search(model, joint, tgt_lang, beam, max_len=len(src) + 4)))
    return out


def evaluate_translation(model: CrossModalModel, corpus: Corpus, n: int = 256, beam: int = 4) -> dict[str, float]:
    pairs = corpus.text_pairs[:n]
    hyps = translate(model, [q.src for q in pairs], LANG_A, LANG_B, beam)
    return {"BLEU@4": bleu4(hyps, [list(q.tgt) for q in pairs])}


def evaluate_captioning(model: CrossModalModel, corpus: Corpus, n: int = 256, beam: int = 4) -> dict[str, float]:
    """Caption from the image alone: empty text prefix fused with the image."""
    exs = corpus.image_text[:n]
    hyps = []
    for e in exs:
        text = model.encode_text(collate_encoder([np.zeros(0, np.int64)], eos=False), e.lang)
        joint = model.fuse(text, model.encode_image(e.image[None]))
        hyps.append(strip_eos(beam_search(model, joint, e.lang, beam, max_len=model.config.max_text_len - 1)))
    return {"BLEU@4": bleu4(hyps, [list(e.caption) for e in exs])}


def grounding_accuracy(model: CrossModalModel, probes: Sequence[AmbiguousExample], use_image: bool,
                       chunk: int = 64) -> float:
    """Two-way forced choice at the masked slot under teacher forcing.

    A probe counts as solved when the decoder scores the correct target token
    strictly above the distractor.
    """
    correct = 0
    for sl in _chunks(len(probes), chunk):
        part = probes[sl]
        text = model.encode_text(collate_encoder([q.masked_source for q in part]), LANG_A)
        image = model.encode_image(np.stack([q.example.image for q in part])) if use_image else None
        joint = model.fuse(text, image)
        dec_in, _, _ = collate_decoder([q.example.translation for q in part])
        logits = model.decode(joint, dec_in, LANG_B).data
        for r, q in enumerate(part):
            row = logits[r, q.position]
            correct += bool(row[q.answer] > row[q.distractor])
    return correct / len(probes)


def entailment_examples(corpus: Corpus, lang: int, n: int | None = None, seed: int = 0) -> list[LabeledExample]:
    """Balanced image/caption agreement task in language ``lang``.

    Every image appears once with its own caption (label 1) and once with the
    caption of another random example (label 0).
    """
    exs = corpus.image_text[:n]
    rng = np.random.default_rng([seed, 11, lang])
    out = []
    for i, e in enumerate(exs):
        j = int(rng.integers(len(exs) - 1))
        j += j >= i
        own = e.caption if lang == e.lang else e.translation
        other = exs[j].caption if lang == exs[j].lang else exs[j].translation
        out.append(LabeledExample(e.image, own, lang, 1))
        out.append(LabeledExample(e.image, other, lang, 0))
    return out


@dataclass
class ZeroShotResult:
    accuracy: dict[int, float]
    train_losses: list[float]


def zero_shot_transfer(model: CrossModalModel, train_corpus: Corpus, eval_corpus: Corpus,
                       steps: int = 400, train_lang: int = LANG_A, eval_langs=(LANG_A, LANG_B),
                       n_train: int | None = None, n_eval: int = 256, seed: int = 0, lr: float = 1e-3) -> ZeroShotResult:
    """Fine-tune the [MM_CLS] head on ``train_lang`` only, then score every language."""
    train_set = entailment_examples(train_corpus, train_lang, n_train, seed)
    ft = finetune_classifier(model, train_set, steps=steps, lr=lr, seed=seed)
    eval_set = [x for lang in eval_langs for x in entailment_examples(eval_corpus, lang, n_eval, seed + 1)]
    return ZeroShotResult(classify_eval(ft.model, ft.head, eval_set), ft.losses)
