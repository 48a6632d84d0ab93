"""Command-line front end: ``guirobust {corpus,train,eval,report}``.

Every subcommand accepts ``--config run.json`` (a RunConfig as a JSON
object); explicit flags override config values. Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .model import ModelConfig
from .runner import DataError, RunConfig, errored_counts, merge_reports, run_eval
from .synthgui import Corpus, make_corpus
from .trainer import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="guirobust", description="Robustness harness for a toy GUI grounding model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--seed", type=int, dest="master_seed", help="master seed")
        sp.add_argument("--workers", type=int, help="worker processes")
        sp.add_argument("-v", "--verbose", action="store_true")

    c = sub.add_parser("corpus", help="generate a synthetic screenshot corpus")
    common(c)
    c.add_argument("--n", type=int, dest="corpus_n", help="number of screens")
    c.add_argument("--presets", type=_csv_list, help="comma-separated platform presets")
    c.add_argument("--out", dest="corpus", help="corpus directory")

    t = sub.add_parser("train", help="train the grounding model")
    common(t)
    t.add_argument("--corpus", help="corpus directory")
    t.add_argument("--out", dest="checkpoint", help="checkpoint path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)

    e = sub.add_parser("eval", help="run a noise, untargeted or targeted campaign")
    common(e)
    e.add_argument("--mode", choices=["noise", "untargeted", "targeted"])
    e.add_argument("--corpus")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=["train", "val", "test"])
    e.add_argument("--max-samples", type=int)
    e.add_argument("--budgets", type=lambda s: [int(v) for v in _csv_list(s)],
                   help="comma-separated pixel budgets")
    e.add_argument("--steps", type=int, help="PGD steps")
    e.add_argument("--epsilon", type=float, help="L-inf budget on the [0, 1] scale")
    e.add_argument("--alpha", type=float, help="PGD step size on the [0, 1] scale")
    e.add_argument("--out", dest="out_dir", help="output directory")

    r = sub.add_parser("report", help="merge record files into one report")
    r.add_argument("records", nargs="+", help="records.jsonl files (each with a sibling run.json)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("-v", "--verbose", action="store_true")
    return p


_TOP_LEVEL = ("master_seed", "workers", "corpus_n", "presets", "corpus", "checkpoint", "mode",
              "split", "max_samples", "budgets", "out_dir")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file values, then flag overrides."""
    d = RunConfig.load(args.config).to_dict() if args.config else RunConfig().to_dict()
    for key in _TOP_LEVEL:
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    attack = dict(d["attack"])
    for key in ("steps", "epsilon", "alpha"):
        val = getattr(args, key, None)
        if val is not None:
            attack[key] = val
    d["attack"] = attack
    train_cfg = dict(d["train"])
    for key in ("epochs", "max_steps"):
        val = getattr(args, key, None)
        if val is not None:
            train_cfg[key] = val
    d["train"] = train_cfg
    return RunConfig.from_dict(d)


def cmd_corpus(cfg: RunConfig) -> int:
    root = make_corpus(cfg.corpus_n, cfg.presets, cfg.master_seed, cfg.corpus, workers=cfg.workers)
    corpus = Corpus(root)
    counts = {s: len(corpus.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(corpus.records)} screens to {root} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']}); "
          f"fingerprint {corpus.fingerprint()[:16]}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    try:
        corpus = Corpus(cfg.corpus)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    model_cfg = ModelConfig(**cfg.model)
    hyper = TrainConfig(**cfg.train)

    def progress(step, total, loss, elapsed):
        logging.getLogger("guirobust.train").info("step %d/%d loss %.4f (%.0fs)", step, total, loss, elapsed)

    ckpt = train(corpus, model_cfg, hyper, seed=cfg.master_seed, progress=progress)
    path = ckpt_io.save(ckpt, cfg.checkpoint)
    curve_path = path.with_name(path.name + ".loss.csv")
    with open(curve_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(ckpt.loss_curve):
            w.writerow([i, repr(float(v))])
    val = ckpt.metadata.get("val_sr")
    print(f"checkpoint {path} ({ckpt.metadata['steps']} steps, final loss "
          f"{ckpt.metadata['final_loss']:.4f}); loss curve {curve_path}")
    if val is not None:
        print(f"validation SR {val:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    def progress(i, n):
        if i % 50 == 0 or i == n:
            logging.getLogger("guirobust.eval").info("%d/%d jobs", i, n)

    records, written = run_eval(cfg, progress)
    clean = [r for r in records if r.condition == "clean"]
    sr = sum(r.success for r in clean) / max(1, len(clean))
    print(f"{len(records)} records; clean SR {sr:.4f}")
    for cond, n in sorted(errored_counts(records).items()):
        print(f"errored samples under {cond}: {n}")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_report(records: list[str], out: str) -> int:
    for p in merge_reports(records, out):
        print(f"wrote {p}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"guirobust: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.records, args.out)
        cfg = resolve_config(args)
        return {"corpus": cmd_corpus, "train": cmd_train, "eval": cmd_eval}[args.command](cfg)
    except (ValueError, TypeError, KeyError) as e:
        print(f"guirobust: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"guirobust: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"guirobust: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
