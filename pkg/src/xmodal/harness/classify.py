"""MLP classification head on the fused [MM_CLS] output, and its fine-tuning loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import model as M
from .. import tensor as T
from ..errors import ContractError
from ..model import CrossModalModel
from ..tasks import collate_encoder
from ..tensor import GradTape, Tensor
from ..trainer import OptimState, adamw_step, clip_global_norm, decays
from .metrics import accuracy


@dataclass
class LabeledExample:
    image: np.ndarray
    tokens: np.ndarray
    lang: int
    label: int


@dataclass
class ClassifierHead:
    n_labels: int
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, d_model: int, n_labels: int = 2, seed: int = 0) -> "ClassifierHead":
        rng = np.random.default_rng(seed)
        p = {
            "cls_head.w1": M._trunc_normal(rng, (d_model, d_model)).astype(np.float32),
            "cls_head.b1": np.zeros(d_model, np.float32),
            "cls_head.w2": M._trunc_normal(rng, (d_model, n_labels)).astype(np.float32),
            "cls_head.b2": np.zeros(n_labels, np.float32),
        }
        return cls(n_labels, p)


def _logits(p, cfg, exs: Sequence[LabeledExample]) -> Tensor:
    text = M.encode_text(p, cfg, collate_encoder([e.tokens for e in exs]), [e.lang for e in exs])
    image = M.encode_image(p, cfg, np.stack([e.image for e in exs]))
    mm = M.fuse(p, cfg, text, image).states[:, 0, :]
    h = T.gelu(T.add(T.matmul(mm, p["cls_head.w1"]), p["cls_head.b1"]))
    return T.add(T.matmul(h, p["cls_head.w2"]), p["cls_head.b2"])


def _check_labels(exs: Sequence[LabeledExample], n_labels: int):
    if any(not 0 <= e.label < n_labels for e in exs):
        raise ContractError(f"label outside the label set [0, {n_labels})")


@dataclass
class FineTuneResult:
    model: CrossModalModel
    head: ClassifierHead
    losses: list[float] = field(default_factory=list)


def finetune_classifier(model: CrossModalModel, examples: Sequence[LabeledExample], steps: int = 400,
                        lr: float = 1e-3, batch_size: int = 32, seed: int = 0, n_labels: int = 2,
                        trainable_prefixes: tuple[str, ...] = ("fusion.",)) -> FineTuneResult:
    """Train the head (plus parameters under ``trainable_prefixes``) on ``examples``.

    The input model is left untouched; the dual encoders stay frozen by
    default so that their pre-trained alignment is what carries over to other
    languages.
    """
    _check_labels(examples, n_labels)
    model = model.copy()
    head = ClassifierHead.init(model.config.d_model, n_labels, seed)
    params = {**model.params, **head.params}
    trainable = {n: a for n, a in params.items()
                 if n.startswith("cls_head.") or n.startswith(trainable_prefixes)}
    state = OptimState()
    rng = np.random.default_rng([seed, 3])
    losses = []
    for step in range(1, steps + 1):
        idx = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
        batch = [examples[i] for i in idx]
        tape = GradTape()
        p = {n: (tape.watch(a) if n in trainable else Tensor._wrap(a)) for n, a in params.items()}
        logits = _logits(p, model.config, batch)
        loss = T.mul(T.cross_entropy(logits, np.array([e.label for e in batch])), 1.0 / len(batch))
        got = tape.backward(loss)
        grads = {n: got[p[n].node].data for n in trainable if p[n].node in got}
        clip_global_norm(grads, 1.0)
        adamw_step(trainable, grads, state, lr, weight_decay=0.01, decay_filter=decays)
        losses.append(loss.item())
    return FineTuneResult(model, head, losses)


def predict(model: CrossModalModel, head: ClassifierHead, examples: Sequence[LabeledExample],
            chunk: int = 128) -> np.ndarray:
    p = {n: Tensor._wrap(a) for n, a in {**model.params, **head.params}.items()}
    out = [np.argmax(_logits(p, model.config, examples[i:i + chunk]).data, axis=1)
           for i in range(0, len(examples), chunk)]
    return np.concatenate(out)


def classify_eval(model: CrossModalModel, head: ClassifierHead,
                  examples: Sequence[LabeledExample]) -> dict[int, float]:
    """Accuracy per language id."""
    _check_labels(examples, head.n_labels)
    pred = predict(model, head, examples)
    langs = np.array([e.lang for e in examples])
    labels = np.array([e.label for e in examples])
    return {int(l): accuracy(pred[langs == l], labels[langs == l], range(head.n_labels))
            for l in np.unique(langs)}
