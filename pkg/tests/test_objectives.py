import math

import numpy as np
import pytest

from xmodal import model as M
from xmodal import objectives as O
from xmodal import tensor as T
from xmodal.errors import ContractError, EmptyReductionError
from xmodal.model import CrossModalModel, ModelConfig
from xmodal.objectives import TaskKind
from xmodal.tasks import collate_decoder, collate_encoder

from oracles import autodiff_and_fd, relative_error

LN4 = math.log(4)


def _check(fn, inputs, seed):
    auto, num = autodiff_and_fd(fn, inputs, seed)
    return max(relative_error(a, n) for a, n in zip(auto, num))


def _gradcheck(make, n=100):
    worst = max(_check(*make(np.random.default_rng([s, 5])), s) for s in range(n))
    assert worst < 1e-4, worst


def test_contrastive_gradients():
    def make(rng):
        N, d = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        fn = lambda a, b, lt: O.contrastive_loss(T.l2_normalize(a), T.l2_normalize(b), lt)
        return fn, [rng.normal(size=(N, d)), rng.normal(size=(N, d)), np.array(rng.uniform(-2, 0))]
    _gradcheck(lambda r: (*make(r),))


def test_itm_gradients():
    def make(rng):
        N = int(rng.integers(1, 7))
        y = rng.integers(2, size=N)
        return (lambda z: O.itm_loss(T.sigmoid(z), y)), [2 * rng.normal(size=N)]
    _gradcheck(make)


def test_mlm_gradients():
    def make(rng):
        N, L, V = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
        masked = rng.random((N, L)) < 0.5
        masked[0, 0] = True
        tgt = rng.integers(V, size=(N, L))
        return (lambda x: O.mlm_loss(x, masked, tgt)), [rng.normal(size=(N, L, V))]
    _gradcheck(make)


def test_prefix_lm_gradients():
    def make(rng):
        N, Tn, V = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        tokens = rng.integers(V, size=(N, Tn))
        lengths = rng.integers(1, Tn + 1, size=N)
        lengths[0] = Tn
        tp = np.array([int(rng.integers(0, ln)) for ln in lengths])
        return (lambda x: O.prefix_lm_loss(x, tokens, tp, lengths)), [rng.normal(size=(N, Tn, V))]
    _gradcheck(make)


def test_mt_gradients():
    def make(rng):
        N, Tn, V = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(2, 6))
        tgt = rng.integers(V, size=(N, Tn))
        valid = rng.random((N, Tn)) < 0.7
        valid[:, 0] = True
        return (lambda x: O.mt_loss(x, tgt, valid)), [rng.normal(size=(N, Tn, V))]
    _gradcheck(make)


def test_mmmt_gradients():
    def make(rng):
        N, Tn, L, V = 2, int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 5))
        tgt = rng.integers(V, size=(N, Tn))
        masked = rng.random((N, L)) < 0.5
        masked[1, 0] = True
        src = rng.integers(V, size=(N, L))
        lam = float(rng.uniform(0.1, 2))
        fn = lambda x, y: O.mmmt_loss(x, tgt, None, y, masked, src, lam)
        return fn, [rng.normal(size=(N, Tn, V)), rng.normal(size=(N, L, V))]
    _gradcheck(make)


# ---------------------------------------------------------------------------
# closed-form identities
# ---------------------------------------------------------------------------

def test_contrastive_examples():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(size=(1, 5))
        w = rng.normal(size=(1, 5))
        v, w = v / np.linalg.norm(v), w / np.linalg.norm(w)
        assert O.contrastive_loss(T.tensor(v), T.tensor(w), rng.normal()).item() == 0.0
    eye = T.tensor(np.eye(2))
    # each row contributes one term per direction, averaged over N rows
    expected = 2 * -math.log(math.e / (math.e + 1))
    assert O.contrastive_loss(eye, eye, 0.0).item() == pytest.approx(expected, abs=1e-12)
    assert O.contrastive_loss(eye, eye, 0.0).item() == pytest.approx(0.6265, abs=1e-4)


def test_contrastive_errors():
    with pytest.raises(EmptyReductionError):
        O.contrastive_loss(T.zeros((0, 3)), T.zeros((0, 3)), 0.0)
    with pytest.raises(ContractError):
        O.contrastive_loss(T.tensor([[1.0, 1.0]]), T.tensor([[1.0, 0.0]]), 0.0)


def test_itm_examples():
    half = T.tensor([0.5])
    assert O.itm_loss(half, [1]).item() == pytest.approx(0.6931, abs=1e-4)
    assert O.itm_loss(half, [0]).item() == O.itm_loss(half, [1]).item()
    assert O.itm_loss(T.tensor([1 - 1e-7], np.float64), [1]).item() == pytest.approx(0, abs=1e-6)
    with pytest.raises(ContractError):
        O.itm_loss(half, [2])


def test_uniform_nll_identities():
    u = lambda *s: T.zeros(s, np.float64)
    one = np.zeros((1, 3), bool)
    one[0, 1] = True
    two = one.copy()
    two[0, 2] = True
    tgt = np.zeros((1, 3), np.int64)
    assert O.mlm_loss(u(1, 3, 4), one, tgt).item() == pytest.approx(1.3863, abs=1e-4)
    assert O.mlm_loss(u(1, 3, 4), two, tgt).item() == pytest.approx(2.7726, abs=1e-4)
    with pytest.raises(EmptyReductionError):
        O.mlm_loss(u(1, 3, 4), np.zeros((1, 3), bool), tgt)

    tokens = np.array([[1, 2, 3, 0, 1, 2]])
    assert O.prefix_lm_loss(u(1, 4, 4), tokens, 2).item() == pytest.approx(4 * LN4, abs=1e-4)
    with pytest.raises(ContractError):
        O.prefix_lm_loss(u(1, 4, 4), tokens, 6)

    assert O.mt_loss(u(1, 2, 4), [[1, 3]]).item() == pytest.approx(2 * LN4, abs=1e-4)
    assert O.mmmt_loss(u(1, 3, 4), [[1, 2, 3]]).item() == pytest.approx(3 * LN4, abs=1e-4)
    with_mlm = O.mmmt_loss(u(1, 3, 4), [[1, 2, 3]], None, u(1, 3, 4), one, tgt, 1.0).item()
    assert with_mlm == pytest.approx(3 * LN4 + LN4, abs=1e-4)
    with pytest.raises(ContractError):
        O.mt_loss(u(1, 0, 4), np.zeros((1, 0), np.int64))


def test_prefix_zero_is_full_sequence_nll():
    rng = np.random.default_rng(1)
    logits = T.tensor(rng.normal(size=(2, 5, 7)))
    tokens = rng.integers(7, size=(2, 5))
    assert O.prefix_lm_loss(logits, tokens, 0).item() == O.sequence_nll(logits, tokens).item()


def test_perfect_predictor_losses_vanish():
    tokens = np.array([[3, 1, 4, 1, 5]])
    oh = np.full((1, 5, 6), -1e3)
    oh[0, np.arange(5), tokens[0]] = 0
    assert O.prefix_lm_loss(T.tensor(oh[:, 2:]), tokens, 2).item() == pytest.approx(0, abs=1e-9)
    assert O.mt_loss(T.tensor(oh), tokens).item() == pytest.approx(0, abs=1e-9)


def test_mmmt_without_mask_or_image_is_mt_loss():
    cfg = ModelConfig(d_model=16, n_heads=2, vocab_size=60, max_text_len=10)
    m = CrossModalModel(cfg, seed=0)
    src = collate_encoder([np.array([10, 11, 12]), np.array([13, 14])])
    dec_in, tgt, valid = collate_decoder([np.array([20, 21, 22]), np.array([23, 24])])
    joint = m.fuse(m.encode_text(src, 0))
    logits = m.decode(joint, dec_in, 1)
    mt = O.mt_loss(logits, tgt, valid).item()
    none = np.zeros(src.shape, bool)
    a = O.mmmt_loss(logits, tgt, valid, M.mlm_logits(m.tensors(), joint), none, src, 1.0).item()
    b = O.mmmt_loss(logits, tgt, valid, M.mlm_logits(m.tensors(), joint), ~none, src, 0.0).item()
    assert a == mt and b == mt


def test_task_kind_labels():
    assert [t.label for t in TaskKind] == ["CMCL", "CLCL", "ITM", "MLM", "PLM", "vPLM", "MT", "mMMT"]
    assert TaskKind.parse("vplm") is TaskKind.VPLM


def test_contrastive_is_invariant_to_joint_permutation():
    rng = np.random.default_rng(4)
    for _ in range(20):
        N = int(rng.integers(2, 9))
        a = rng.normal(size=(N, 6))
        b = rng.normal(size=(N, 6))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        p = rng.permutation(N)
        base = O.contrastive_loss(T.tensor(a), T.tensor(b), -1.0).item()
        perm = O.contrastive_loss(T.tensor(a[p]), T.tensor(b[p]), -1.0).item()
        assert abs(base - perm) < 1e-6


def test_temperature_does_not_change_row_argmax():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6, 4))
    b = rng.normal(size=(6, 4))
    sim = T.matmul(T.l2_normalize(T.tensor(a)), T.transpose(T.l2_normalize(T.tensor(b))))
    ref = np.argmax(sim.data, axis=1)
    for log_tau in (-3.0, -1.0, 0.0, 2.0):
        scaled = T.log_softmax(T.mul(sim, math.exp(-log_tau)), axis=1).data
        assert np.array_equal(np.argmax(scaled, axis=1), ref)
