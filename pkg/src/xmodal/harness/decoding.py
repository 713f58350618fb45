"""Greedy and length-normalized beam-search decoding."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import model as M
from ..errors import ContractError
from ..model import CrossModalModel, JointStates
from ..tensor import Tensor
from ..vocab import BOS, EOS

# prefixes [B, t] (each starting with BOS) -> next-token log-probs [B, V]
StepFn = Callable[[np.ndarray], np.ndarray]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _repeat_joint(joint: JointStates, rows: np.ndarray) -> JointStates:
    return JointStates(Tensor._wrap(joint.states.data[rows]), joint.mask[rows], joint.n_text, joint.n_image)


def decoder_step_fn(model: CrossModalModel, joint: JointStates, lang: int) -> StepFn:
    """Step function over the decoder of ``model`` for a single fused example."""
    if joint.states.shape[0] != 1:
        raise ContractError("decoder_step_fn expects the fused states of one example")
    p = model.tensors()

    def step(prefixes: np.ndarray) -> np.ndarray:
        j = _repeat_joint(joint, np.zeros(len(prefixes), dtype=np.int64))
        logits = M.decode(p, model.config, j, prefixes, lang).data[:, -1, :]
        return _log_softmax(logits)

    return step


def greedy_search(step: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> list[int]:
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    seq = [bos]
    for _ in range(max_len):
        tok = int(np.argmax(step(np.array([seq]))[0]))
        seq.append(tok)
        if tok == eos:
            break
    return seq[1:]


def beam_search_fn(step: StepFn, beam: int = 4, max_len: int = 32, bos: int = BOS, eos: int = EOS) -> list[int]:
    """Beam search with scores normalized by generated length (alpha = 1).

    The ``beam`` best extensions of all live hypotheses are kept each step;
    those ending in ``eos`` retire as finished. The search stops when no live
    hypothesis is left or after ``max_len`` tokens. The returned tokens
    exclude BOS and end with EOS when one was produced.
    """
    if beam < 1:
        raise ContractError("beam must be >= 1")
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    live: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        logp = step(np.array([s for s, _ in live]))
        V = logp.shape[1]
        total = np.array([sc for _, sc in live])[:, None] + logp
        # one live row: rank by logp itself so float rounding of the shared offset cannot create ties
        key = logp if len(live) == 1 else total
        order = np.argsort(-key.reshape(-1), kind="stable")[:beam]
        nxt = []
        for flat in order:
            b, tok = divmod(int(flat), V)
            cand = (live[b][0] + [tok], float(total[b, tok]))
            (finished if tok == eos else nxt).append(cand)
        live = nxt
        if not live:
            break
    pool = finished + live
    best = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))  # max keeps the first on ties
    return best[0][1:]


def beam_search(model: CrossModalModel, joint: JointStates, lang: int, beam: int = 4,
                max_len: int | None = None) -> list[int]:
    max_len = model.config.max_text_len - 1 if max_len is None else max_len
    if max_len >= model.config.max_text_len:
        raise ContractError("max_len + 1 must fit the decoder's max_text_len")
    return beam_search_fn(decoder_step_fn(model, joint, lang), beam, max_len)


def greedy_decode(model: CrossModalModel, joint: JointStates, lang: int, max_len: int | None = None) -> list[int]:
    max_len = model.config.max_text_len - 1 if max_len is None else max_len
    return greedy_search(decoder_step_fn(model, joint, lang), max_len)


def strip_eos(seq, eos: int = EOS) -> list[int]:
    seq = list(seq)
    return seq[:seq.index(eos)] if eos in seq else seq
