"""Joint multi-task training with merged gradients and AdamW.

Each update draws ``merge_width`` tasks uniformly from the active set,
evaluates every task's loss on its own tape, averages the resulting gradient
maps, clips the global norm and takes one AdamW step on the shared
parameters. All randomness derives from ``(train.seed, step, draw)`` so a run
resumed from a checkpoint replays exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import container
from .config import RunConfig
from .datagen import Corpus, synth_corpus
from .errors import ConfigError, ContractError, TrainingError
from .model import CrossModalModel
from .objectives import TaskKind
from .tasks import TaskSettings, task_loss
from .tensor import GradTape
from .vocab import Vocab

log = logging.getLogger(__name__)

_TASK_STREAM = 101


# ---------------------------------------------------------------------------
# schedule and sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-4
    warmup_steps: int = 250
    total_steps: int = 5000
    floor_lr: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("schedule needs 0 <= warmup_steps < total_steps")
        if not 0 <= self.floor_lr < self.base_lr:
            raise ConfigError("schedule needs 0 <= floor_lr < base_lr")


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0, then cosine decay to ``floor_lr``; clamped past the end."""
    s = schedule
    if step < 0:
        raise ContractError("step must be >= 0")
    if step > s.total_steps:
        return s.floor_lr
    if step <= s.warmup_steps:
        return s.base_lr * step / s.warmup_steps if s.warmup_steps else s.base_lr
    frac = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.floor_lr + 0.5 * (s.base_lr - s.floor_lr) * (1.0 + math.cos(math.pi * frac))


def sample_tasks(step: int, seed: int, active: Sequence[TaskKind], k: int) -> list[TaskKind]:
    if not active:
        raise ConfigError("the active task set is empty")
    if k < 1:
        raise ContractError("merge width must be >= 1")
    pool = sorted(set(active))
    rng = np.random.default_rng([seed, step, _TASK_STREAM])
    return [pool[i] for i in rng.integers(len(pool), size=k)]


def merge_gradients(maps: Sequence[Mapping[str, np.ndarray]],
                    order: Sequence | None = None) -> dict[str, np.ndarray]:
    """Elementwise mean over ``maps``; a missing entry counts as zero.

    Maps are summed in the order of ``order`` keys (ties keep input order)
    so the floating-point result does not depend on completion order.
    """
    k = len(maps)
    if k == 0:
        raise ContractError("merge_gradients needs at least one map")
    seq = list(maps)
    if order is not None:
        seq = [m for _, _, m in sorted(zip(order, range(k), seq), key=lambda t: (t[0], t[1]))]
    shapes: dict[str, tuple] = {}
    for m in seq:
        for name, g in m.items():
            if shapes.setdefault(name, g.shape) != g.shape:
                raise ContractError(f"gradient shape mismatch for {name}: {shapes[name]} vs {g.shape}")
    out: dict[str, np.ndarray] = {}
    for name in shapes:
        acc = None
        for m in seq:
            g = m.get(name)
            if g is not None:
                acc = g.copy() if acc is None else acc + g
        out[name] = acc / k
    return out


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decays(name: str, arr: np.ndarray) -> bool:
    """Weight decay applies to matrices only (not biases, LN gains or log tau)."""
    return arr.ndim >= 2


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.1,
               decay_filter: Callable[[str, np.ndarray], bool] | None = None) -> OptimState:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}; parameters left untouched")
    state.t += 1
    t = state.t
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and (decay_filter is None or decay_filter(name, w)):
            w -= (lr * weight_decay) * w
        w -= lr * update
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optim: OptimState
    step: int
    config_hash: str
    seed: int
    config_text: str = ""

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        blob = dict(self.params)
        for k, a in self.optim.m.items():
            blob[f"optim.m.{k}"] = a
        for k, a in self.optim.v.items():
            blob[f"optim.v.{k}"] = a
        container.save(d / "state.ux2c", blob)
        meta = {"step": self.step, "optim_t": self.optim.t, "config_hash": self.config_hash,
                "seed": self.seed, "rng": {"scheme": "numpy.default_rng([seed, step, draw])"}}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        (d / "run.cfg").write_text(self.config_text)
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        d = Path(directory)
        try:
            blob = container.load(d / "state.ux2c")
            meta = json.loads((d / "meta.json").read_text())
        except OSError as e:
            raise ConfigError(f"cannot read checkpoint {d}: {e}") from None
        params = {k: v for k, v in blob.items() if not k.startswith("optim.")}
        m = {k[len("optim.m."):]: v for k, v in blob.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v."):]: a for k, a in blob.items() if k.startswith("optim.v.")}
        cfg_text = (d / "run.cfg").read_text() if (d / "run.cfg").exists() else ""
        return cls(params, OptimState(m, v, meta["optim_t"]), meta["step"], meta["config_hash"],
                   meta["seed"], cfg_text)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    step: int
    task: str
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: CrossModalModel
    optim: OptimState
    step: int
    trace: list[TraceRow]
    config: RunConfig

    def losses(self, task: str) -> np.ndarray:
        return np.array([r.loss for r in self.trace if r.task == task])

    def write_csv(self, path: str | Path) -> None:
        write_trace(path, self.trace)


def write_trace(path: str | Path, rows: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task", "loss", "lr"])
        for r in rows:
            w.writerow([r.step, r.task, repr(r.loss), repr(r.lr)])


def corpus_for(cfg: RunConfig) -> tuple[Corpus, Corpus]:
    """Training and held-out splits of the synthetic corpus named by ``cfg``."""
    mc = cfg.model_config()
    vocab = Vocab(size=mc.vocab_size, n_langs=mc.n_langs, n_attr=cfg["data.n_attr"], n_obj=cfg["data.n_obj"])
    full = synth_corpus(cfg["data.seed"], cfg["data.n_pairs"] + cfg["data.n_eval"], vocab,
                        mc.image_side, mc.patch_size)
    return full.split(cfg["data.n_pairs"])


def schedule_for(cfg: RunConfig) -> Schedule:
    return Schedule(cfg["schedule.base_lr"], cfg["schedule.warmup_steps"], cfg["schedule.total_steps"],
                    cfg["schedule.floor_lr"])


def settings_for(cfg: RunConfig) -> TaskSettings:
    return TaskSettings(cfg["train.batch_size"], cfg["tasks.mlm_rate"], cfg["tasks.mmmt_mask_rate"],
                        cfg["tasks.mlm_weight"], cfg["tasks.mlm_image"])


def _task_gradients(model: CrossModalModel, task: TaskKind, corpus: Corpus, settings: TaskSettings,
                    seed: int, step: int, draw: int) -> tuple[float, int, dict[str, np.ndarray]]:
    rng = np.random.default_rng([seed, step, draw])
    tape = GradTape()
    p = model.tensors(tape)
    tl = task_loss(task, p, model.config, corpus, rng, settings)
    value = tl.value
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {task.label} loss at step {step} (batch seed [{seed}, {step}, {draw}])")
    by_node = tape.backward(tl.loss)
    grads = {name: by_node[t.node].data for name, t in p.items() if t.node in by_node}
    return value, tl.count, grads


def train(cfg: RunConfig, corpus: Corpus | None = None, out_dir: str | Path | None = None,
          resume: str | Path | Checkpoint | None = None, model: CrossModalModel | None = None,
          steps: int | None = None, frozen: Callable[[str], bool] | None = None) -> TrainResult:
    """Run the joint training loop described by ``cfg``.

    ``steps`` stops early after that many updates (the schedule still spans
    ``schedule.total_steps``). ``frozen`` names parameters excluded from
    updates. With ``out_dir`` the loss trace CSV and checkpoints are written
    there.
    """
    schedule = schedule_for(cfg)
    settings = settings_for(cfg)
    active = cfg.active_tasks()
    k = cfg["train.merge_width"] or len(active)
    seed = cfg["train.seed"]
    if corpus is None:
        corpus = corpus_for(cfg)[0]

    start = 0
    optim = OptimState()
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if ck.config_hash != cfg.hash:
            raise ConfigError(f"checkpoint config hash {ck.config_hash} does not match run {cfg.hash}")
        model = CrossModalModel(cfg.model_config(), {n: a.copy() for n, a in ck.params.items()})
        optim = OptimState({n: a.copy() for n, a in ck.optim.m.items()},
                           {n: a.copy() for n, a in ck.optim.v.items()}, ck.optim.t)
        start = ck.step
    elif model is None:
        model = CrossModalModel(cfg.model_config(), seed=cfg["model.init_seed"])

    end = schedule.total_steps if steps is None else min(schedule.total_steps, start + steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace: list[TraceRow] = []
    workers = cfg["train.workers"]
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    trainable = {n: a for n, a in model.params.items() if not (frozen and frozen(n))}

    def save(step):
        Checkpoint(model.params, optim, step, cfg.hash, seed, cfg.to_text()).save(out / f"ckpt-{step:06d}")

    try:
        for step in range(start + 1, end + 1):
            tasks = sample_tasks(step, seed, active, k)
            jobs = [(task, j) for j, task in enumerate(tasks)]

            def run(job):
                return _task_gradients(model, job[0], corpus, settings, seed, step, job[1])

            results = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
            merged = merge_gradients([r[2] for r in results], order=[int(t) for t in tasks])
            merged = {n: g for n, g in merged.items() if n in trainable}
            clip_global_norm(merged, cfg["optim.clip_norm"])
            lr = lr_at(step, schedule)
            adamw_step(trainable, merged, optim, lr, cfg["optim.beta1"], cfg["optim.beta2"],
                       cfg["optim.eps"], cfg["optim.weight_decay"], decays)
            if step % cfg["io.log_every"] == 0:
                for task, (value, _, _) in zip(tasks, results):
                    trace.append(TraceRow(step, task.label, value, lr))
            if out is not None and cfg["io.save_every"] and step % cfg["io.save_every"] == 0:
                save(step)
    finally:
        if pool:
            pool.shutdown()

    if out is not None:
        write_trace(out / "loss.csv", trace)
        if not cfg["io.save_every"] or end % cfg["io.save_every"]:
            save(end)
        (out / "last").write_text(f"ckpt-{end:06d}\n")
    return TrainResult(model, optim, end, trace, cfg)


def latest_checkpoint(run_dir: str | Path) -> Path:
    d = Path(run_dir)
    if (d / "state.ux2c").exists():
        return d
    marker = d / "last"
    if marker.exists():
        return d / marker.read_text().strip()
    cands = sorted(d.glob("ckpt-*"))
    if not cands:
        raise ConfigError(f"no checkpoint under {d}")
    return cands[-1]
