"""Per-task batch construction and loss evaluation on one tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from . import objectives as O
from .datagen import (
    LANG_A,
    LANG_B,
    Corpus,
    apply_mlm_mask,
    make_itm_batch,
    mask_source_for_mmmt,
    prefix_length,
)
from .objectives import TaskKind, TaskLoss
from .tensor import Tensor
from .vocab import BOS, CLS, EOS, PAD

VL_TASKS = frozenset({TaskKind.CMCL, TaskKind.ITM, TaskKind.VPLM, TaskKind.MMMT})
L_TASKS = frozenset({TaskKind.CLCL, TaskKind.MT, TaskKind.PLM})


def stream_of(task: TaskKind, mlm_image: bool = True) -> str:
    """``"VL"`` for the image-text stream, ``"L"`` for the text-only stream."""
    if task == TaskKind.MLM:
        return "VL" if mlm_image else "L"
    return "VL" if task in VL_TASKS else "L"


@dataclass(frozen=True)
class TaskSettings:
    batch_size: int = 32
    mlm_rate: float = 0.15
    mmmt_mask_rate: float = 0.3
    mlm_weight: float = 1.0
    mlm_image: bool = True


def collate_encoder(seqs: Sequence[np.ndarray], eos: bool = True) -> np.ndarray:
    """[CLS] + tokens (+ [EOS]), right-padded into an [N, L] batch."""
    rows = [np.concatenate([[CLS], s, [EOS]] if eos else [[CLS], s]) for s in seqs]
    L = max(len(r) for r in rows)
    out = np.full((len(rows), L), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def collate_decoder(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs [BOS] + s, targets s + [EOS], and the valid mask."""
    T = max(len(s) for s in seqs) + 1
    N = len(seqs)
    inp = np.full((N, T), PAD, dtype=np.int64)
    tgt = np.full((N, T), PAD, dtype=np.int64)
    valid = np.zeros((N, T), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        inp[i, 0] = BOS
        inp[i, 1:n + 1] = s
        tgt[i, :n] = s
        tgt[i, n] = EOS
        valid[i, :n + 1] = True
    return inp, tgt, valid


def _pick(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.choice(n, size=min(k, n), replace=False)


def _prefix_lm(p, cfg, corpus: Corpus, rng, settings: TaskSettings, with_image: bool):
    if with_image:
        idx = _pick(rng, len(corpus.image_text), settings.batch_size)
        texts = [corpus.image_text[i].caption for i in idx]
        langs = np.array([corpus.image_text[i].lang for i in idx])
    else:
        idx = _pick(rng, len(corpus.text_pairs), settings.batch_size)
        side = rng.integers(2, size=len(idx))
        texts = [corpus.text_pairs[i].src if s == 0 else corpus.text_pairs[i].tgt for i, s in zip(idx, side)]
        langs = np.where(side == 0, LANG_A, LANG_B)
    zero = rng.random(len(texts)) < 0.5
    tps = np.array([prefix_length(len(t), z) for t, z in zip(texts, zero)])
    enc = M.encode_text(p, cfg, collate_encoder([t[:tp] for t, tp in zip(texts, tps)], eos=False), langs)
    image = M.encode_image(p, cfg, np.stack([corpus.image_text[i].image for i in idx])) if with_image else None
    joint = M.fuse(p, cfg, enc, image)
    dec_in, _, _ = collate_decoder([t[tp:] for t, tp in zip(texts, tps)])
    logits = M.decode(p, cfg, joint, dec_in, langs)
    full = [np.concatenate([t, [EOS]]) for t in texts]
    lengths = np.array([len(f) for f in full])
    tokens = np.full((len(full), lengths.max()), PAD, dtype=np.int64)
    for i, f in enumerate(full):
        tokens[i, :len(f)] = f
    loss = O.prefix_lm_loss(logits, tokens, tps, lengths)
    return loss, int((lengths - tps).sum())


def task_loss(task: TaskKind, p: Mapping[str, Tensor], cfg: M.ModelConfig, corpus: Corpus,
              rng: np.random.Generator, settings: TaskSettings = TaskSettings()) -> TaskLoss:
    """Draw one batch for ``task`` from its stream and evaluate its loss."""
    vocab = corpus.vocab
    B = settings.batch_size
    log_tau = p["heads.log_tau"]

    if task == TaskKind.CMCL:
        idx = _pick(rng, len(corpus.image_text), B)
        exs = [corpus.image_text[i] for i in idx]
        text = M.encode_text(p, cfg, collate_encoder([e.caption for e in exs]), [e.lang for e in exs])
        image = M.encode_image(p, cfg, np.stack([e.image for e in exs]))
        return TaskLoss(task, O.contrastive_loss(text.cls, image.cls, log_tau), len(idx))

    if task == TaskKind.CLCL:
        idx = _pick(rng, len(corpus.text_pairs), B)
        prs = [corpus.text_pairs[i] for i in idx]
        a = M.encode_text(p, cfg, collate_encoder([q.src for q in prs]), [q.src_lang for q in prs])
        b = M.encode_text(p, cfg, collate_encoder([q.tgt for q in prs]), [q.tgt_lang for q in prs])
        return TaskLoss(task, O.contrastive_loss(a.cls, b.cls, log_tau), len(idx))

    if task == TaskKind.ITM:
        idx = _pick(rng, len(corpus.image_text), B)
        exs = [corpus.image_text[i] for i in idx]
        batch = make_itm_batch(exs, rng)
        langs = [exs[j].lang for j in batch.text_src]
        text = M.encode_text(p, cfg, collate_encoder(batch.captions), langs)
        image = M.encode_image(p, cfg, batch.images)
        scores = M.match_score(p, M.fuse(p, cfg, text, image))
        return TaskLoss(task, O.itm_loss(scores, batch.labels), len(batch.labels))

    if task == TaskKind.MLM:
        if settings.mlm_image:
            idx = _pick(rng, len(corpus.image_text), B)
            exs = [corpus.image_text[i] for i in idx]
            seqs, langs = [e.caption for e in exs], [e.lang for e in exs]
            image = M.encode_image(p, cfg, np.stack([e.image for e in exs]))
        else:
            idx = _pick(rng, len(corpus.text_pairs), B)
            side = rng.integers(2, size=len(idx))
            seqs = [corpus.text_pairs[i].src if s == 0 else corpus.text_pairs[i].tgt for i, s in zip(idx, side)]
            langs = np.where(side == 0, LANG_A, LANG_B)
            image = None
        mb = apply_mlm_mask(collate_encoder(seqs), settings.mlm_rate, rng, vocab)
        joint = M.fuse(p, cfg, M.encode_text(p, cfg, mb.tokens, langs), image)
        return TaskLoss(task, O.mlm_loss(M.mlm_logits(p, joint), mb.masked, mb.targets), mb.count)

    if task in (TaskKind.PLM, TaskKind.VPLM):
        loss, count = _prefix_lm(p, cfg, corpus, rng, settings, with_image=task == TaskKind.VPLM)
        return TaskLoss(task, loss, count)

    if task == TaskKind.MT:
        idx = _pick(rng, len(corpus.text_pairs), B)
        prs = [corpus.text_pairs[i] for i in idx]
        src = M.encode_text(p, cfg, collate_encoder([q.src for q in prs]), [q.src_lang for q in prs])
        joint = M.fuse(p, cfg, src)
        dec_in, tgt, valid = collate_decoder([q.tgt for q in prs])
        logits = M.decode(p, cfg, joint, dec_in, [q.tgt_lang for q in prs])
        return TaskLoss(task, O.mt_loss(logits, tgt, valid), int(valid.sum()))

    if task == TaskKind.MMMT:
        idx = _pick(rng, len(corpus.image_text), B)
        exs = [corpus.image_text[i] for i in idx]
        mb = mask_source_for_mmmt(collate_encoder([e.caption for e in exs]), settings.mmmt_mask_rate, rng, vocab)
        text = M.encode_text(p, cfg, mb.tokens, [e.lang for e in exs])
        image = M.encode_image(p, cfg, np.stack([e.image for e in exs]))
        joint = M.fuse(p, cfg, text, image)
        dec_in, tgt, valid = collate_decoder([e.translation for e in exs])
        logits = M.decode(p, cfg, joint, dec_in, LANG_B)
        mlm = M.mlm_logits(p, joint) if mb.count else None
        loss = O.mmmt_loss(logits, tgt, valid, mlm, mb.masked, mb.targets, settings.mlm_weight)
        return TaskLoss(task, loss, int(valid.sum()))

    raise ValueError(f"unhandled task {task!r}")
