import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmodal import datagen as D
from xmodal.errors import CapacityError, ContractError
from xmodal.tasks import collate_encoder
from xmodal.vocab import MASK, Vocab

VOCAB = Vocab()


@pytest.fixture(scope="module")
def corpus():
    return D.synth_corpus(7, 300)


def test_same_seed_gives_identical_corpus(corpus):
    again = D.synth_corpus(7, 300)
    for a, b in zip(corpus.image_text, again.image_text):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.caption.tobytes() == b.caption.tobytes()
        assert a.translation.tobytes() == b.translation.tobytes()
    other = D.synth_corpus(8, 300)
    assert any(a.caption.tobytes() != b.caption.tobytes() for a, b in zip(corpus.image_text, other.image_text))


def test_permutation_is_a_bijection(corpus):
    ids = np.arange(VOCAB.size)
    assert np.array_equal(corpus.perm[corpus.inv_perm[ids]], ids)
    assert np.array_equal(corpus.inv_perm[corpus.perm[ids]], ids)
    assert np.array_equal(np.sort(corpus.perm), ids)
    for t in VOCAB.specials:
        assert corpus.perm[t] == t


def test_caption_structure(corpus):
    a_ids = set(VOCAB.content_ids(D.LANG_A).tolist())
    b_ids = set(VOCAB.content_ids(D.LANG_B).tolist())
    for ex, pair in zip(corpus.image_text, corpus.text_pairs):
        k = len(ex.content)
        assert D.MIN_BIGRAMS <= k <= D.MAX_BIGRAMS
        assert len(ex.caption) == 2 * k
        assert set(ex.caption.tolist()) <= a_ids
        assert set(ex.translation.tolist()) <= b_ids
        assert np.array_equal(ex.translation, corpus.perm[ex.caption])
        assert np.array_equal(pair.src, ex.caption) and np.array_equal(pair.tgt, ex.translation)
        assert ex.image.shape == (3, 32, 32) and ex.image.dtype == np.float32
    assert len({ex.caption.tobytes() for ex in corpus.image_text}) == len(corpus)


def _cell_means(img, patch=8):
    C, H, W = img.shape
    return img.reshape(C, H // patch, patch, W // patch, patch).mean(axis=(2, 4))


def test_distinct_captions_give_distinct_cells(corpus):
    """Exhaustive pairwise check over 100 examples: some 8x8 cell differs beyond noise."""
    exs = corpus.image_text[:100]
    for i in range(len(exs)):
        for j in range(i + 1, len(exs)):
            diff = np.abs(exs[i].image - exs[j].image).reshape(3, 4, 8, 4, 8).mean(axis=(0, 2, 4))
            assert diff.max() > 0.1, (i, j)


def test_image_cells_encode_content(corpus):
    ex = corpus.image_text[0]
    clean = D.render_image(ex.content, np.random.default_rng(0), VOCAB.n_attr, VOCAB.n_obj)
    assert np.std(ex.image - clean) == pytest.approx(np.sqrt(2) * D.PIXEL_NOISE, rel=0.15)
    shapes = D.object_shapes(VOCAB.n_obj, 8)
    assert len({s.tobytes() for s in shapes}) == VOCAB.n_obj
    colors = D.attribute_colors(VOCAB.n_attr)
    assert len({c.tobytes() for c in colors}) == VOCAB.n_attr


def test_capacity_error():
    tiny = Vocab(size=100, n_attr=2, n_obj=1)
    assert D.content_capacity(tiny) == 2**2 + 2**3 + 2**4 + 2**5
    assert len(D.synth_corpus(0, 60, tiny)) == 60
    with pytest.raises(CapacityError):
        D.synth_corpus(0, 61, tiny)


def _batch(corpus, n=64):
    return collate_encoder([e.caption for e in corpus.image_text[:n]])


def test_mlm_mask_extremes(corpus):
    tok = _batch(corpus)
    content = VOCAB.is_content(tok)
    full = D.apply_mlm_mask(tok, rate=1.0, seed=0)
    assert np.array_equal(full.masked, content)
    none = D.apply_mlm_mask(tok, rate=0.0, seed=0)
    assert np.all(none.masked.sum(axis=1) == 1)
    assert np.all(content[none.masked])
    assert np.array_equal(full.targets, tok)
    with pytest.raises(ContractError):
        D.apply_mlm_mask(np.array([[4, 2, 0]]), 0.5)


def test_mlm_mask_rates_monte_carlo():
    rng = np.random.default_rng(0)
    tok = rng.choice(VOCAB.content_ids(), size=(10_000, 20))
    mb = D.apply_mlm_mask(tok, rate=0.15, seed=1)
    assert abs(mb.masked.mean() - 0.15) < 0.02
    sel = mb.masked
    to_mask = (mb.tokens == MASK) & sel
    unchanged = (mb.tokens == tok) & sel
    changed = sel & ~to_mask & ~unchanged
    n = sel.sum()
    assert abs(to_mask.sum() / n - 0.8) < 0.01
    # a random replacement hits the original token with prob 1/|content|
    assert abs(unchanged.sum() / n - 0.1) < 0.01
    assert abs(changed.sum() / n - 0.1) < 0.01
    assert np.array_equal(mb.tokens[~sel], tok[~sel])


def test_mmmt_mask_rates(corpus):
    rng = np.random.default_rng(0)
    tok = rng.choice(VOCAB.content_ids(), size=(10_000, 20))
    mb = D.mask_source_for_mmmt(tok, rate=0.3, seed=2)
    assert abs(mb.masked.mean() - 0.3) < 0.03
    assert np.all(mb.tokens[mb.masked] == MASK)
    batch = _batch(corpus)
    assert D.mask_source_for_mmmt(batch, 0.0, 0).count == 0
    allm = D.mask_source_for_mmmt(batch, 1.0, 0)
    assert np.array_equal(allm.masked, VOCAB.is_content(batch))


def test_prefix_length_examples():
    assert D.prefix_length(10, False) == 2
    assert D.prefix_length(10, True) == 0
    assert D.prefix_length(7, False) == 1
    with pytest.raises(ContractError):
        D.prefix_length(1, False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(8, 999), min_size=2, max_size=30), st.integers(0, 2**32 - 1))
def test_split_prefix_reconstructs(tokens, seed):
    s = D.split_prefix(np.array(tokens), seed)
    assert s.prefix_len in (0, max(1, len(tokens) // 5))
    assert np.concatenate([s.prefix, s.suffix]).tolist() == tokens
    assert len(s.prefix) == s.prefix_len


def test_split_prefix_branches_are_balanced():
    zero = sum(D.split_prefix(np.arange(8, 18), seed).prefix_len == 0 for seed in range(4000))
    assert abs(zero / 4000 - 0.5) < 0.03


def test_itm_batch_construction(corpus):
    exs = corpus.image_text[:16]
    b = D.make_itm_batch(exs, seed=3)
    N = len(exs)
    assert (b.labels == 1).sum() == N and (b.labels == 0).sum() == N
    for i in range(N):
        assert b.image_src[i] == b.text_src[i] == i
        assert np.array_equal(b.images[i], exs[i].image)
    for i in range(N, 2 * N):
        assert (b.image_src[i] != b.text_src[i])
        assert (b.image_src[i] == i - N) != (b.text_src[i] == i - N)
    sides = [b.image_src[i] == i - N for i in range(N, 2 * N)]
    assert 0 < sum(sides) < N
    with pytest.raises(ContractError):
        D.make_itm_batch(exs[:1])


def test_disambiguation_subset(corpus):
    probes = D.disambiguation_subset(corpus, 40, seed=1)
    assert len(probes) == 40
    for a, b in zip(probes[0::2], probes[1::2]):
        assert np.array_equal(a.masked_source, b.masked_source)
        assert a.position == b.position
        assert a.answer == b.distractor and b.answer == a.distractor
        assert a.masked_source[a.position] == MASK
        assert a.example.translation[a.position] == a.answer
        assert np.abs(a.example.image - b.example.image).max() > 0.1


def test_export_round_trip(tmp_path, corpus):
    small = corpus.subset(range(5))
    out = D.export_corpus(small, tmp_path / "c")
    recs = D.read_records(out / "image_text.tsv")
    assert len(recs) == 5
    for (li, ti, lj, tj, ref), ex in zip(recs, small.image_text):
        assert np.array_equal(ti, ex.caption) and np.array_equal(tj, ex.translation)
        assert D.read_image(out / ref).tobytes() == ex.image.tobytes()
    pairs = D.read_records(out / "text_pairs.tsv")
    assert [r[4] for r in pairs] == ["-"] * 5


def test_masking_never_touches_special_positions(corpus):
    rows = [corpus.image_text[i % len(corpus)].caption for i in range(10_000)]
    tok = collate_encoder(rows)
    special = ~VOCAB.is_content(tok)
    assert special.any(axis=1).all()
    for mb in (D.apply_mlm_mask(tok, 0.15, seed=3), D.mask_source_for_mmmt(tok, 0.3, seed=3)):
        assert not mb.masked[special].any()
        assert np.array_equal(mb.tokens[special], tok[special])


def test_disambiguation_subset_exists_for_small_vocab():
    small = D.synth_corpus(0, 20, Vocab(size=100, n_attr=4, n_obj=4))
    assert len(D.disambiguation_subset(small, 10)) == 10
