"""The eight pre-training losses.

Batch reduction: the contrastive losses carry an explicit 1/N and every other
loss is averaged over batch examples. Token losses inside one sequence are
summed, not averaged.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, EmptyReductionError
from .tensor import Tensor


class TaskKind(enum.IntEnum):
    CMCL = 0
    CLCL = 1
    ITM = 2
    MLM = 3
    PLM = 4
    VPLM = 5
    MT = 6
    MMMT = 7

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        key = name.strip().lower()
        for k, v in _LABELS.items():
            if v.lower() == key:
                return k
        raise ContractError(f"unknown task {name!r}; expected one of {sorted(_LABELS.values())}")


_LABELS = {
    TaskKind.CMCL: "CMCL",
    TaskKind.CLCL: "CLCL",
    TaskKind.ITM: "ITM",
    TaskKind.MLM: "MLM",
    TaskKind.PLM: "PLM",
    TaskKind.VPLM: "vPLM",
    TaskKind.MT: "MT",
    TaskKind.MMMT: "mMMT",
}


@dataclass
class TaskLoss:
    kind: TaskKind
    loss: Tensor
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ContractError("a task loss needs at least one contributing element")

    @property
    def value(self) -> float:
        return self.loss.item()


def _as_log_tau(log_tau, like: Tensor) -> Tensor:
    if isinstance(log_tau, Tensor):
        return log_tau
    return Tensor._wrap(np.asarray(log_tau, dtype=like.dtype))


def contrastive_loss(left: Tensor, right: Tensor, log_tau) -> Tensor:
    """Symmetric in-batch InfoNCE between unit rows of ``left`` and ``right``.

    Row ``a`` of ``left`` is paired with row ``a`` of ``right``; logits are
    dot products divided by ``tau = exp(log_tau)``.
    """
    if left.ndim != 2 or left.shape != right.shape:
        raise ContractError(f"contrastive_loss expects two [N, d] batches, got {left.shape}, {right.shape}")
    N = left.shape[0]
    if N == 0:
        raise EmptyReductionError("contrastive_loss on an empty batch")
    for side, t in (("left", left), ("right", right)):
        norms = np.linalg.norm(t.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ContractError(f"contrastive_loss: {side} rows are not l2-normalized")
    log_tau = _as_log_tau(log_tau, left)
    sim = T.mul(T.matmul(left, T.transpose(right)), T.exp(T.neg(log_tau)))
    eye = np.eye(N, dtype=left.dtype)
    fwd = T.tsum(T.mul(T.log_softmax(sim, axis=1), eye))
    bwd = T.tsum(T.mul(T.log_softmax(sim, axis=0), eye))
    return T.mul(T.add(fwd, bwd), -1.0 / N)


def itm_loss(scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of match probabilities against 0/1 labels."""
    y = np.asarray(labels)
    if y.shape != scores.shape:
        raise ContractError(f"itm_loss: labels {y.shape} vs scores {scores.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("itm_loss: labels must be 0 or 1")
    if np.any((scores.data <= 0) | (scores.data >= 1)):
        raise ContractError("itm_loss: scores must lie strictly inside (0, 1)")
    y = y.astype(scores.dtype)
    pos = T.mul(T.log(scores), y)
    neg = T.mul(T.log(T.sub(1.0, scores)), 1.0 - y)
    return T.mul(T.tsum(T.add(pos, neg)), -1.0 / y.size)


def _batched(logits: Tensor, *arrays):
    """Promote a single-sequence [T, V] call to a batch of one."""
    if logits.ndim == 2:
        logits = T.reshape(logits, (1,) + logits.shape)
        arrays = tuple(None if a is None else np.asarray(a)[None] for a in arrays)
    return (logits,) + tuple(None if a is None else np.asarray(a) for a in arrays)


def sequence_nll(logits: Tensor, targets, valid=None) -> Tensor:
    """Sum of token NLLs over valid positions, averaged over the batch."""
    logits, targets, valid = _batched(logits, targets, valid)
    ignore = None if valid is None else ~valid.astype(bool)
    return T.mul(T.cross_entropy(logits, targets, ignore), 1.0 / logits.shape[0])


def mlm_loss(logits: Tensor, masked, targets) -> Tensor:
    """Reconstruction loss at the masked positions ``masked`` (bool [N, L])."""
    logits, masked, targets = _batched(logits, masked, targets)
    if not masked.any():
        raise EmptyReductionError("mlm_loss: empty mask set")
    return sequence_nll(logits, targets, masked)


def prefix_lm_loss(logits: Tensor, tokens, prefix_len, lengths=None) -> Tensor:
    """Suffix NLL for prefix language modeling.

    ``tokens`` [N, T] holds the whole sequence per row (padded past
    ``lengths``); ``logits`` [N, S, V] are decoder outputs where logits[n, s]
    predicts tokens[n, prefix_len[n] + s]. With ``prefix_len = 0`` the whole
    sequence is generated.
    """
    logits, tokens = _batched(logits, tokens)
    N, Tmax = tokens.shape
    tp = np.broadcast_to(np.asarray(prefix_len, dtype=np.int64), (N,))
    ln = np.full(N, Tmax) if lengths is None else np.broadcast_to(np.asarray(lengths), (N,))
    if np.any(tp < 0) or np.any(tp >= ln):
        raise ContractError("prefix_lm_loss: prefix length must satisfy 0 <= T_p < T")
    S = logits.shape[1]
    if np.any(ln - tp > S):
        raise ContractError(f"prefix_lm_loss: {S} decoder positions cannot cover the suffix")
    targets = np.zeros((N, S), dtype=np.int64)
    valid = np.zeros((N, S), dtype=bool)
    for n in range(N):
        k = int(ln[n] - tp[n])
        targets[n, :k] = tokens[n, tp[n]:ln[n]]
        valid[n, :k] = True
    return sequence_nll(logits, targets, valid)


def mt_loss(logits: Tensor, targets, valid=None) -> Tensor:
    """Teacher-forced translation NLL over the target tokens."""
    logits, targets, valid = _batched(logits, targets, valid)
    if targets.shape[-1] == 0 or (valid is not None and not valid.any()):
        raise ContractError("mt_loss: empty target")
    return sequence_nll(logits, targets, valid)


def mmmt_loss(logits: Tensor, targets, valid=None, mlm_logits: Tensor | None = None,
              masked=None, source_targets=None, mlm_weight: float = 1.0) -> Tensor:
    """Masked multimodal translation: target NLL plus MLM on masked source tokens.

    The MLM term vanishes when nothing was masked or ``mlm_weight`` is 0; the
    result is then computed exactly like :func:`mt_loss`.
    """
    loss = mt_loss(logits, targets, valid)
    if mlm_weight == 0 or masked is None or not np.asarray(masked).any():
        return loss
    if mlm_logits is None or source_targets is None:
        raise ContractError("mmmt_loss: masked source positions need MLM logits and targets")
    return T.add(loss, T.mul(mlm_loss(mlm_logits, masked, source_targets), mlm_weight))
