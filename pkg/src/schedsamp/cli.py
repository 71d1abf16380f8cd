"""Command-line entry points.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, ContractError, DataError, FormatError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="schedsamp", description="Two-pass scheduled sampling for transformers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write metrics/checkpoints")
    p.add_argument("--config", help="TOML-subset config file")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set mix.strategy=gumbel")
    p.add_argument("--resume", help="continue from this checkpoint")

    p = sub.add_parser("evaluate", help="loss, token accuracy and BLEU of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--config", help="defaults to config.toml next to the checkpoint")
    p.add_argument("--vocab", help="defaults to vocab.txt next to the checkpoint")

    p = sub.add_parser("decode", help="greedy-decode a source file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--out", help="hypothesis file (default: stdout)")
    p.add_argument("--max-len", type=int, default=None, help="maximum output length")
    p.add_argument("--config")
    p.add_argument("--vocab")

    p = sub.add_parser("gen-task", help="write a synthetic copy/reverse/sort corpus")
    p.add_argument("--kind", choices=["copy", "reverse", "sort"], default="copy")
    p.add_argument("--vocab", type=int, default=16, help="vocabulary size including 4 reserved ids")
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=200)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for {train,dev,test}.{src,tgt}")

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=100, help="random cases per primitive")
    p.add_argument("--tolerance", type=float, default=None)
    return parser


def _load_trained(args):
    from .config import load_config
    from .data import Vocabulary
    from .trainer import Trainer, build_model

    ckpt = Path(args.checkpoint)
    config = load_config(args.config or ckpt.parent / "config.toml")
    vocab = Vocabulary.load(args.vocab or ckpt.parent / "vocab.txt")
    trainer = Trainer(build_model(config, len(vocab)), config)
    trainer.load_checkpoint(ckpt)
    return trainer, vocab


def cmd_train(args) -> int:
    from .config import load_config, parse_override
    from .trainer import train_loop

    overrides = dict(parse_override(item) for item in args.overrides)
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    config = load_config(args.config, overrides)
    report = train_loop(config, args.out, resume=args.resume)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import load_corpus

    trainer, vocab = _load_trained(args)
    corpus = load_corpus(args.src, args.ref, vocab)
    result = trainer.evaluate(corpus)
    print(json.dumps({"loss": result.loss, "token_acc": result.token_acc, "bleu": result.bleu}, sort_keys=True))
    return EXIT_OK


def cmd_decode(args) -> int:
    from .data import detokenize, read_sentences

    trainer, vocab = _load_trained(args)
    sources = read_sentences(args.src)
    lines = []
    bs = trainer.config.train.eval_batch_size
    for start in range(0, len(sources), bs):
        chunk = [vocab.encode(s) for s in sources[start : start + bs]]
        if any(not s for s in chunk):
            raise DataError(f"{args.src}: empty source line")
        width = max(map(len, chunk))
        src = [s + [trainer.model.config.pad_id] * (width - len(s)) for s in chunk]
        max_len = args.max_len if args.max_len is not None else 2 * width + 10
        lines += [detokenize(vocab.decode(h)) for h in trainer.model.greedy_decode(src, max_len)]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_task(args) -> int:
    from .data import generate_task

    splits = generate_task(args.kind, args.vocab, args.min_len, args.max_len,
                           args.n_train, args.n_dev, args.n_test, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, corpus in zip(("train", "dev", "test"), splits):
        corpus.write(out / f"{name}.src", out / f"{name}.tgt")
        print(f"{name}: {len(corpus)} pairs -> {out / name}.src, {out / name}.tgt")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    tol = args.tolerance if args.tolerance is not None else TOLERANCE
    results = run_suite(range(args.seeds))
    failed = 0
    for name, err in results.items():
        ok = err <= tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {err:.3e}  {name}")
    print(f"max relative error {max(results.values()):.3e} (tolerance {tol:g}), {failed} failing")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "decode": cmd_decode,
    "gen-task": cmd_gen_task,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
