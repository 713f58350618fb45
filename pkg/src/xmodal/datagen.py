"""Synthetic bilingual image-caption corpus and the stochastic input corruptions.

A caption is a sequence of K in [2, 5] ``attribute object`` bigrams in
language A. Its language-B translation applies a fixed token permutation to
each token, so translation is exactly learnable. The image is a grid of
``patch``-sized cells; bigram k is drawn in cell k as the object's binary
shape filled with the attribute's color, plus Gaussian pixel noise.

Every function takes an explicit seed (or numpy Generator) and is bitwise
reproducible.
"""

from __future__ import annotations

import colorsys
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ContractError
from .vocab import Vocab

LANG_A, LANG_B = 0, 1
MIN_BIGRAMS, MAX_BIGRAMS = 2, 5
PIXEL_NOISE = 0.02
_SHAPE_SEED = 20220101  # fixed glyph table, independent of corpus seeds


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class TextPair:
    src: np.ndarray
    tgt: np.ndarray
    src_lang: int = LANG_A
    tgt_lang: int = LANG_B

    def __post_init__(self):
        if len(self.src) == 0 or len(self.tgt) == 0:
            raise ContractError("text pair sides must be non-empty")


@dataclass
class ImageTextExample:
    image: np.ndarray  # [C, H, W] float32
    caption: np.ndarray
    lang: int = LANG_A
    translation: np.ndarray | None = None
    content: tuple = ()


@dataclass
class MaskedBatch:
    tokens: np.ndarray  # corrupted copy
    masked: np.ndarray  # bool, same shape
    targets: np.ndarray  # the original tokens

    @property
    def count(self) -> int:
        return int(self.masked.sum())


@dataclass
class PrefixSplit:
    prefix_len: int
    prefix: np.ndarray
    suffix: np.ndarray


@dataclass
class Corpus:
    vocab: Vocab
    text_pairs: list[TextPair]
    image_text: list[ImageTextExample]
    perm: np.ndarray
    inv_perm: np.ndarray
    seed: int = 0
    image_side: int = 32
    patch: int = 8

    def __len__(self) -> int:
        return len(self.image_text)

    def subset(self, idx: Sequence[int]) -> "Corpus":
        idx = list(idx)
        return Corpus(self.vocab, [self.text_pairs[i] for i in idx], [self.image_text[i] for i in idx],
                      self.perm, self.inv_perm, self.seed, self.image_side, self.patch)

    def split(self, n_train: int) -> tuple["Corpus", "Corpus"]:
        n = len(self)
        return self.subset(range(n_train)), self.subset(range(n_train, n))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def attribute_colors(n_attr: int) -> np.ndarray:
    """Distinct saturated RGB colors, one per attribute index."""
    return np.array([colorsys.hsv_to_rgb(i / n_attr, 0.9, 0.95) for i in range(n_attr)], dtype=np.float32)


def object_shapes(n_obj: int, patch: int) -> np.ndarray:
    """Distinct non-empty binary glyphs [n_obj, patch, patch]."""
    rng = np.random.default_rng(_SHAPE_SEED + patch)
    seen: set[bytes] = set()
    out = []
    while len(out) < n_obj:
        g = rng.random((patch, patch)) < 0.5
        if g.sum() < patch or g.tobytes() in seen:
            continue
        seen.add(g.tobytes())
        out.append(g)
    return np.stack(out).astype(np.float32)


def render_image(content: Sequence[tuple[int, int]], rng, n_attr: int, n_obj: int,
                 image_side: int = 32, patch: int = 8, noise: float = PIXEL_NOISE) -> np.ndarray:
    g = image_side // patch
    if len(content) > g * g:
        raise CapacityError(f"{len(content)} bigrams do not fit a {g}x{g} grid")
    colors = attribute_colors(n_attr)
    shapes = object_shapes(n_obj, patch)
    img = np.zeros((3, image_side, image_side), dtype=np.float32)
    for k, (a, o) in enumerate(content):
        r, c = divmod(k, g)
        img[:, r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = colors[a][:, None, None] * shapes[o]
    if noise:
        img += _rng(rng).normal(0.0, noise, size=img.shape).astype(np.float32)
    return img


def make_permutation(vocab: Vocab, seed) -> tuple[np.ndarray, np.ndarray]:
    """Token permutation mapping language-A content to language B and back.

    Attributes map to attributes and objects to objects; all other ids are
    fixed points.
    """
    rng = _rng(seed)
    perm = np.arange(vocab.size)
    sa = rng.permutation(vocab.n_attr)
    so = rng.permutation(vocab.n_obj)
    for i in range(vocab.n_attr):
        a, b = vocab.attr_id(LANG_A, i), vocab.attr_id(LANG_B, sa[i])
        perm[a], perm[b] = b, a
    for j in range(vocab.n_obj):
        a, b = vocab.obj_id(LANG_A, j), vocab.obj_id(LANG_B, so[j])
        perm[a], perm[b] = b, a
    inv = np.empty_like(perm)
    inv[perm] = np.arange(vocab.size)
    return perm, inv


def caption_tokens(content: Sequence[tuple[int, int]], vocab: Vocab, lang: int = LANG_A) -> np.ndarray:
    out = []
    for a, o in content:
        out += [vocab.attr_id(lang, a), vocab.obj_id(lang, o)]
    return np.array(out, dtype=np.int64)


def content_capacity(vocab: Vocab) -> int:
    b = vocab.n_attr * vocab.n_obj
    return sum(b**k for k in range(MIN_BIGRAMS, MAX_BIGRAMS + 1))


def synth_corpus(seed: int, n_pairs: int, vocab: Vocab | None = None, image_side: int = 32,
                 patch: int = 8) -> Corpus:
    """``n_pairs`` distinct captions with translations and rendered images.

    The text-only stream holds the (A, B) caption pairs; the image-text stream
    holds the same contents as (image, A caption, B translation) triples.
    """
    vocab = vocab or Vocab()
    if vocab.n_langs < 2:
        raise ContractError("the synthetic corpus needs two languages")
    if n_pairs < 1:
        raise ContractError("n_pairs must be >= 1")
    cap = content_capacity(vocab)
    if n_pairs > cap:
        raise CapacityError(f"{n_pairs} pairs requested but only {cap} distinct captions exist")
    max_k = min(MAX_BIGRAMS, (image_side // patch) ** 2)
    rng = np.random.default_rng([seed, 0])
    perm, inv = make_permutation(vocab, np.random.default_rng([seed, 1]))
    seen: set[tuple] = set()
    contents: list[tuple] = []
    while len(contents) < n_pairs:
        k = int(rng.integers(MIN_BIGRAMS, max_k + 1))
        c = tuple((int(rng.integers(vocab.n_attr)), int(rng.integers(vocab.n_obj))) for _ in range(k))
        if c not in seen:
            seen.add(c)
            contents.append(c)
    pairs, examples = [], []
    for i, c in enumerate(contents):
        a = caption_tokens(c, vocab, LANG_A)
        b = perm[a]
        img = render_image(c, np.random.default_rng([seed, 2, i]), vocab.n_attr, vocab.n_obj,
                           image_side, patch)
        pairs.append(TextPair(a, b, LANG_A, LANG_B))
        examples.append(ImageTextExample(img, a, LANG_A, b, c))
    return Corpus(vocab, pairs, examples, perm, inv, seed, image_side, patch)


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------


def _maskable(tokens: np.ndarray, vocab: Vocab) -> np.ndarray:
    return vocab.is_content(tokens)


def apply_mlm_mask(tokens, rate: float = 0.15, seed=0, vocab: Vocab | None = None) -> MaskedBatch:
    """BERT-style masking: select each content position with prob ``rate``.

    Selected positions become MASK (80%), a random content token (10%) or stay
    unchanged (10%). Each row with no selection gets one forced position.
    Works on a single sequence or a padded [N, L] batch.
    """
    vocab = vocab or Vocab()
    rng = _rng(seed)
    tok = np.array(tokens, dtype=np.int64, copy=True)
    rows = tok.reshape(-1, tok.shape[-1]) if tok.ndim else tok.reshape(1, 1)
    ok = _maskable(rows, vocab)
    if not ok.any(axis=1).all():
        raise ContractError("apply_mlm_mask: a sequence has no maskable positions")
    sel = (rng.random(rows.shape) < rate) & ok
    for r in np.flatnonzero(~sel.any(axis=1)):
        sel[r, rng.choice(np.flatnonzero(ok[r]))] = True
    roll = rng.random(rows.shape)
    randoms = rng.choice(vocab.content_ids(), size=rows.shape)
    out = rows.copy()
    out[sel & (roll < 0.8)] = vocab.mask
    swap = sel & (roll >= 0.8) & (roll < 0.9)
    out[swap] = randoms[swap]
    shape = tok.shape
    return MaskedBatch(out.reshape(shape), sel.reshape(shape), rows.reshape(shape))


def mask_source_for_mmmt(tokens, rate: float = 0.3, seed=0, vocab: Vocab | None = None) -> MaskedBatch:
    """Replace each content position by MASK with prob ``rate``; no forcing."""
    vocab = vocab or Vocab()
    rng = _rng(seed)
    tok = np.array(tokens, dtype=np.int64, copy=True)
    ok = _maskable(tok, vocab)
    if not ok.any():
        raise ContractError("mask_source_for_mmmt: no maskable positions")
    sel = (rng.random(tok.shape) < rate) & ok
    out = np.where(sel, vocab.mask, tok)
    return MaskedBatch(out, sel, tok)


def prefix_length(T: int, zero_branch: bool) -> int:
    if T < 2:
        raise ContractError("prefix split needs at least two tokens")
    return 0 if zero_branch else max(1, math.floor(0.2 * T))


def split_prefix(tokens, seed=0) -> PrefixSplit:
    """Prefix of length 0 or max(1, floor(0.2 T)), each with probability 1/2."""
    tok = np.asarray(tokens)
    tp = prefix_length(len(tok), bool(_rng(seed).random() < 0.5))
    return PrefixSplit(tp, tok[:tp].copy(), tok[tp:].copy())


@dataclass
class ITMBatch:
    images: np.ndarray  # [2N, C, H, W]
    captions: list[np.ndarray]
    labels: np.ndarray  # [2N]
    image_src: np.ndarray  # example index each image came from
    text_src: np.ndarray


def make_itm_batch(examples: Sequence[ImageTextExample], seed=0) -> ITMBatch:
    """N positives followed by N negatives.

    Negative i keeps one side of pair i and takes the other side from a
    different in-batch example, image or text with equal probability.
    """
    N = len(examples)
    if N < 2:
        raise ContractError("make_itm_batch needs at least two examples to build negatives")
    rng = _rng(seed)
    img_src = list(range(N))
    txt_src = list(range(N))
    for i in range(N):
        j = int(rng.integers(N - 1))
        j += j >= i
        if rng.random() < 0.5:
            img_src.append(j)
            txt_src.append(i)
        else:
            img_src.append(i)
            txt_src.append(j)
    images = np.stack([examples[i].image for i in img_src])
    captions = [examples[i].caption for i in txt_src]
    labels = np.array([1] * N + [0] * N, dtype=np.int64)
    return ITMBatch(images, captions, labels, np.array(img_src), np.array(txt_src))


# ---------------------------------------------------------------------------
# disambiguation subset
# ---------------------------------------------------------------------------


@dataclass
class AmbiguousExample:
    """A source caption whose masked attribute is only recoverable from the image."""

    example: ImageTextExample
    masked_source: np.ndarray
    position: int  # index of the masked token in the caption
    answer: int  # correct target-language token at that position
    distractor: int  # the other candidate


def disambiguation_subset(corpus: Corpus, n: int, seed=0, attrs: tuple[int, int] = (0, 1)) -> list[AmbiguousExample]:
    """Balanced set of 2-way ambiguous translation probes.

    Each base content yields two probes that differ only in the attribute at
    one bigram (``attrs[0]`` vs ``attrs[1]``, rendered in different colors);
    that attribute is masked in the source, so both probes share the same
    masked source and only the image tells them apart.
    """
    vocab = corpus.vocab
    rng = np.random.default_rng([seed, 7])
    a1, a2 = attrs
    if a1 == a2 or max(a1, a2) >= vocab.n_attr:
        raise ContractError("need two distinct attribute indices")
    out: list[AmbiguousExample] = []
    max_k = min(MAX_BIGRAMS, (corpus.image_side // corpus.patch) ** 2)
    i = 0
    while len(out) < n:
        k = int(rng.integers(MIN_BIGRAMS, max_k + 1))
        base = [(int(rng.integers(vocab.n_attr)), int(rng.integers(vocab.n_obj))) for _ in range(k)]
        slot = int(rng.integers(k))
        masked = None
        for attr, other in ((a1, a2), (a2, a1)):
            c = list(base)
            c[slot] = (attr, base[slot][1])
            c = tuple(c)
            src = caption_tokens(c, vocab, LANG_A)
            tgt = corpus.perm[src]
            img = render_image(c, np.random.default_rng([seed, 8, i]), vocab.n_attr, vocab.n_obj,
                               corpus.image_side, corpus.patch)
            i += 1
            if masked is None:
                masked = src.copy()
                masked[2 * slot] = vocab.mask
            out.append(AmbiguousExample(
                ImageTextExample(img, src, LANG_A, tgt, c), masked.copy(), 2 * slot,
                int(tgt[2 * slot]), int(corpus.perm[vocab.attr_id(LANG_A, other)]),
            ))
    return out[:n]


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

EXPORT_VERSION = 1


def write_image(path: Path, image: np.ndarray) -> None:
    """Raw f32 LE tensor behind an 8-byte header: u8 version, u8 rank, u16 C, u16 H, u16 W."""
    C, H, W = image.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<BBHHH", EXPORT_VERSION, 3, C, H, W))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    version, rank, C, H, W = struct.unpack_from("<BBHHH", blob, 0)
    if version != EXPORT_VERSION or rank != 3:
        raise ContractError(f"{path}: unsupported image header (version={version}, rank={rank})")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(C, H, W).astype(np.float32)


def export_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write ``text_pairs.tsv``, ``image_text.tsv`` and ``images/*.f32``.

    Both TSV files carry one record per line with the fields
    ``lang_i, tokens_i, lang_j, tokens_j, image_ref``; tokens are space-joined
    ids and ``image_ref`` is ``-`` for text-only records.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    def ids(a):
        return " ".join(str(int(t)) for t in a)

    with open(out / "text_pairs.tsv", "w") as fh:
        fh.write(f"# xmodal corpus v{EXPORT_VERSION}\n")
        for p in corpus.text_pairs:
            fh.write(f"{p.src_lang}\t{ids(p.src)}\t{p.tgt_lang}\t{ids(p.tgt)}\t-\n")
    with open(out / "image_text.tsv", "w") as fh:
        fh.write(f"# xmodal corpus v{EXPORT_VERSION}\n")
        for i, ex in enumerate(corpus.image_text):
            ref = f"images/{i:06d}.f32"
            write_image(out / ref, ex.image)
            tr = ids(ex.translation) if ex.translation is not None else ""
            fh.write(f"{ex.lang}\t{ids(ex.caption)}\t{LANG_B}\t{tr}\t{ref}\n")
    return out


def read_records(path: str | Path) -> list[tuple[int, np.ndarray, int, np.ndarray, str]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        li, ti, lj, tj, ref = line.split("\t")
        rows.append((int(li), np.array(ti.split(), dtype=np.int64), int(lj),
                     np.array(tj.split(), dtype=np.int64), ref))
    return rows
