"""Token id layout of the synthetic bilingual language."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

PAD, BOS, EOS, MASK, CLS, MM_CLS = 0, 1, 2, 3, 4, 5
LANG_BASE = 6


@dataclass(frozen=True)
class Vocab:
    """Special ids plus per-language attribute/object blocks.

    Ids ``[0, LANG_BASE)`` are the fixed specials, followed by one tag id per
    language. Content ids start at :attr:`content_start`; each language owns an
    attribute block of ``n_attr`` ids followed by an object block of ``n_obj``
    ids. Ids past the last block exist in the embedding table but never occur.
    """

    size: int = 1000
    n_langs: int = 2
    n_attr: int = 8
    n_obj: int = 8

    def __post_init__(self):
        if self.n_langs < 1 or self.n_attr < 2 or self.n_obj < 1:
            raise ContractError("vocab needs >= 1 language, >= 2 attributes and >= 1 object")
        if self.content_end > self.size:
            raise ContractError(
                f"vocab size {self.size} too small for {self.content_end} used ids"
            )

    pad = PAD
    bos = BOS
    eos = EOS
    mask = MASK
    cls = CLS
    mm_cls = MM_CLS

    def lang_tag(self, lang: int) -> int:
        if not 0 <= lang < self.n_langs:
            raise ContractError(f"language {lang} out of range")
        return LANG_BASE + lang

    @property
    def specials(self) -> tuple[int, ...]:
        return (PAD, BOS, EOS, MASK, CLS, MM_CLS) + tuple(LANG_BASE + i for i in range(self.n_langs))

    @property
    def content_start(self) -> int:
        return LANG_BASE + self.n_langs

    @property
    def block(self) -> int:
        return self.n_attr + self.n_obj

    @property
    def content_end(self) -> int:
        return self.content_start + self.n_langs * self.block

    def attr_id(self, lang: int, i: int) -> int:
        return self.content_start + lang * self.block + i

    def obj_id(self, lang: int, j: int) -> int:
        return self.content_start + lang * self.block + self.n_attr + j

    def content_ids(self, lang: int | None = None) -> np.ndarray:
        if lang is None:
            return np.arange(self.content_start, self.content_end)
        lo = self.content_start + lang * self.block
        return np.arange(lo, lo + self.block)

    def is_content(self, tokens) -> np.ndarray:
        t = np.asarray(tokens)
        return (t >= self.content_start) & (t < self.content_end)

    def decode_content(self, token: int) -> tuple[int, str, int]:
        """``(lang, "attr" | "obj", index)`` for a content id."""
        off = int(token) - self.content_start
        if not 0 <= off < self.n_langs * self.block:
            raise ContractError(f"{token} is not a content id")
        lang, rem = divmod(off, self.block)
        return (lang, "attr", rem) if rem < self.n_attr else (lang, "obj", rem - self.n_attr)
