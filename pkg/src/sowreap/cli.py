"""Command line entry point: ``sowreap <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig
from .syntax import FormatError, PermutationError
from .training import NumericalError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("sowreap")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sowreap", description="Syntax-guided paraphrase generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--embeddings", help="GloVe-style text vectors (default: hashed vectors)")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-data", parents=[common], help="filter, align and extract training data")
    b.add_argument("corpus", nargs="?", help="corpus JSONL (default: paths.corpus)")

    t = sub.add_parser("train", parents=[common], help="train the SOW or REAP model")
    t.add_argument("--model", choices=["sow", "reap"], required=True)
    t.add_argument("--data", help="build-data output directory (default: paths.data_dir)")
    t.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint")
    t.add_argument("--max-epochs", type=int)

    for name, helptext in (("generate", "reorder inputs and generate paraphrases"),
                           ("reorder", "propose reorderings with rule provenance")):
        g = sub.add_parser(name, parents=[common], help=helptext)
        g.add_argument("inputs", help="JSONL with id and source_parse")
        g.add_argument("--k", type=int)
        g.add_argument("--beam", type=int)
        g.add_argument("--sow", help="SOW checkpoint (.npz)")
        g.add_argument("--sow-stub", choices=["echo", "swap"], help="use a rule-based stand-in for SOW")
        if name == "generate":
            g.add_argument("--reap", required=True, help="REAP checkpoint (.npz)")
            g.add_argument("--top-k", type=int)
            g.add_argument("--decode", choices=["topk", "greedy", "beam"])

    e = sub.add_parser("evaluate", parents=[common], help="score generations against references")
    e.add_argument("generations")
    e.add_argument("references", help="JSONL with id, target and (for ordering studies) parses")
    e.add_argument("--reap", help="REAP checkpoint for the ordering comparison and compliance curve")
    return p


def effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "embeddings", None):
        cfg.paths.embeddings = args.embeddings
    for flag, attr in (("k", "k"), ("beam", "beam"), ("top_k", "top_k"), ("decode", "decode")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg.engine, attr, value)
    if getattr(args, "max_epochs", None) is not None:
        cfg.train.max_epochs = args.max_epochs
    return cfg


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        if args.command == "build-data":
            corpus = args.corpus or cfg.paths.corpus
            if not corpus:
                raise ConfigError("no corpus given (argument or paths.corpus)")
            stats = pipeline.cmd_build_data(cfg, corpus, args.out or cfg.paths.data_dir)
            print(json.dumps(stats, sort_keys=True))
        elif args.command == "train":
            default_out = cfg.paths.sow_checkpoint_dir if args.model == "sow" else cfg.paths.reap_checkpoint_dir
            best = pipeline.cmd_train(cfg, args.model, args.data or cfg.paths.data_dir,
                                      args.out or default_out, resume=args.resume)
            print(best)
        elif args.command == "reorder":
            out = args.out or str(Path(cfg.paths.out_dir) / "reorderings.jsonl")
            n = pipeline.cmd_reorder(cfg, args.inputs, out, args.sow, args.sow_stub)
            print(f"{n} reorderings -> {out}")
        elif args.command == "generate":
            out = args.out or str(Path(cfg.paths.out_dir) / "generations.jsonl")
            n = pipeline.cmd_generate(cfg, args.inputs, out, args.reap, args.sow, args.sow_stub)
            print(f"{n} records -> {out}")
        elif args.command == "evaluate":
            out = args.out or str(Path(cfg.paths.out_dir) / "eval")
            report = pipeline.cmd_evaluate(cfg, args.generations, args.references, out, args.reap)
            print(json.dumps(report["systems"], indent=2, sort_keys=True))
    except (ConfigError, pipeline.InputError, FormatError, PermutationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
