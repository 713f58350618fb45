"""Command-line entry points.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on runtime
failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..config import RunConfig, parse_lines
from ..datagen import LANG_A, LANG_B, export_corpus
from ..errors import ConfigError
from ..model import CrossModalModel
from ..trainer import Checkpoint, corpus_for, latest_checkpoint, train
from .experiments import evaluate_captioning, evaluate_retrieval, evaluate_translation, zero_shot_transfer
from .report import MetricsReport, language_average

log = logging.getLogger("xmodal")

LANG_NAMES = {LANG_A: "A", LANG_B: "B"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed = {args.seed}")
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(parse_lines(overrides, origin="override"))


def _load_run(path: str) -> tuple[RunConfig, CrossModalModel, Path]:
    ck_dir = latest_checkpoint(path)
    ck = Checkpoint.load(ck_dir)
    cfg = RunConfig(parse_lines(ck.config_text.splitlines(), origin=str(ck_dir / "run.cfg")))
    return cfg, CrossModalModel(cfg.model_config(), ck.params), ck_dir


def _emit(report: MetricsReport, out: str | None, default: Path) -> None:
    path = report.write(out or default)
    print(report.to_json(), end="")
    log.info("report written to %s", path)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    train_c, held = corpus_for(cfg)
    out = Path(args.out)
    export_corpus(train_c, out / "train")
    export_corpus(held, out / "heldout")
    print(f"wrote {len(train_c)} training and {len(held)} held-out records to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg["io.checkpoint_dir"])
    res = train(cfg, out_dir=out, resume=args.resume, steps=args.steps)
    metrics = {}
    for task in sorted({r.task for r in res.trace}):
        losses = res.losses(task)
        tail = losses[-max(1, len(losses) // 10):]
        metrics[f"loss/{task}"] = float(np.mean(tail))
    _emit(MetricsReport(f"{out.name}:train", cfg.hash, metrics), args.report, out / "train_report.json")
    return 0


def _split(cfg: RunConfig, name: str):
    tr, held = corpus_for(cfg)
    return tr if name == "train" else held


def cmd_eval_retrieval(args) -> int:
    cfg, model, ck = _load_run(args.checkpoint)
    corpus = _split(cfg, args.split)
    per = {LANG_NAMES[l]: evaluate_retrieval(model, corpus, args.n, l) for l in (LANG_A, LANG_B)}
    metrics = {"meanRecall": per["A"]["meanRecall"], "meanRecall_avg": language_average(per, "meanRecall")}
    _emit(MetricsReport(f"{ck.parent.name}:eval-retrieval:{args.split}", cfg.hash, metrics, per),
          args.out, ck.parent / "eval_retrieval.json")
    return 0


def cmd_eval_translate(args) -> int:
    cfg, model, ck = _load_run(args.checkpoint)
    m = evaluate_translation(model, _split(cfg, args.split), args.n, args.beam)
    _emit(MetricsReport(f"{ck.parent.name}:eval-translate", cfg.hash, m, {"A->B": m}),
          args.out, ck.parent / "eval_translate.json")
    return 0


def cmd_eval_caption(args) -> int:
    cfg, model, ck = _load_run(args.checkpoint)
    m = evaluate_captioning(model, _split(cfg, args.split), args.n, args.beam)
    _emit(MetricsReport(f"{ck.parent.name}:eval-caption", cfg.hash, m, {"A": m}),
          args.out, ck.parent / "eval_caption.json")
    return 0


def cmd_eval_zeroshot(args) -> int:
    cfg, model, ck = _load_run(args.checkpoint)
    train_c, held = corpus_for(cfg)
    res = zero_shot_transfer(model, train_c, held, steps=args.steps, n_eval=args.n, seed=args.seed)
    per = {LANG_NAMES[l]: {"accuracy": a} for l, a in res.accuracy.items()}
    metrics = {"accuracy": res.accuracy[LANG_A], "zero_shot_accuracy": res.accuracy[LANG_B]}
    _emit(MetricsReport(f"{ck.parent.name}:eval-zeroshot", cfg.hash, metrics, per),
          args.out, ck.parent / "eval_zeroshot.json")
    return 0


def cmd_report(args) -> int:
    reports = [MetricsReport.read(p) for p in args.inputs]
    width = max(len(r.run_id) for r in reports)
    for r in reports:
        cells = "  ".join(f"{k}={v:.4g}" for k, v in sorted(r.metrics.items()))
        print(f"{r.run_id:<{width}}  [{r.config_hash}]  {cells}")
        for lang, table in sorted(r.per_language.items()):
            print(f"{'':<{width}}    {lang}: " + "  ".join(f"{k}={v:.4g}" for k, v in sorted(table.items())))
    if args.out:
        merged = MetricsReport(
            "merged", ",".join(sorted({r.config_hash for r in reports})),
            {f"{r.run_id}/{k}": v for r in reports for k, v in r.metrics.items()},
        )
        merged.write(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xmodal", description="cross-lingual cross-modal pre-training toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        return p

    def config_args(p):
        p.add_argument("--config", help="key = value run config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = add("gen-data", cmd_gen_data, "export the synthetic corpus")
    config_args(p)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "run joint pre-training")
    config_args(p)
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", help="run directory (default: io.checkpoint_dir)")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--steps", type=int, help="stop after this many updates")
    p.add_argument("--report", help="path of the training report JSON")

    for name, fn, help_ in (
        ("eval-retrieval", cmd_eval_retrieval, "dual-encoder image-text retrieval"),
        ("eval-translate", cmd_eval_translate, "beam-search translation BLEU@4"),
        ("eval-caption", cmd_eval_caption, "image captioning BLEU@4"),
        ("eval-zeroshot", cmd_eval_zeroshot, "zero-shot cross-lingual classification"),
    ):
        p = add(name, fn, help_)
        p.add_argument("--checkpoint", required=True, help="run or checkpoint directory")
        p.add_argument("--split", choices=("train", "heldout"), default="heldout")
        p.add_argument("--n", type=int, default=256)
        p.add_argument("--out", help="report JSON path")
        if name in ("eval-translate", "eval-caption"):
            p.add_argument("--beam", type=int, default=4)
        if name == "eval-zeroshot":
            p.add_argument("--steps", type=int, default=400)
            p.add_argument("--seed", type=int, default=0)

    p = add("report", cmd_report, "summarize report JSON files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "xmodal: error: a subcommand is required")
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
