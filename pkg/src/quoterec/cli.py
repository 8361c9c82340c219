"""``quoterec`` command line: synth, train, evaluate, recommend, interpret, gradcheck.

Exit codes: 0 success, 2 config error, 3 training diverged, 4 checkpoint
does not match the corpus, 5 empty conversation, 6 no history for a
quotation, 7 gradient check failed, 8 malformed corpus or checkpoint,
9 missing file, 10 bad command-line usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATIONS, ConfigError, TrainConfig, load_config
from .data import Conversation, CorpusError, load_corpus
from .evaluation import compute_metrics, ranks_from_probabilities
from .interpretation import InterpretationError, heat_report, interpret_corpus
from .model import predict, predict_batches
from .synth import synth_corpus
from .training import DivergenceError, train

EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_EMPTY = 2, 3, 4, 5
EXIT_NO_HISTORY, EXIT_GRADCHECK, EXIT_DATA, EXIT_MISSING, EXIT_USAGE = 6, 7, 8, 9, 10

logger = logging.getLogger("quoterec")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _check_dir(data: str) -> None:
    if not Path(data).is_dir():
        raise CliError(f"no corpus directory at {data}", EXIT_MISSING)


def _load_corpus_for(ckpt, data: str):
    _check_dir(data)
    try:
        corpus = load_corpus(data, vocab=ckpt.vocab)
    except CorpusError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if corpus.quotes.texts != ckpt.quotes.texts:
        raise CliError("corpus quotations differ from the checkpoint's quotation set", EXIT_MISMATCH)
    return corpus


def _load_ckpt(path: str):
    if not Path(path).is_file():
        raise CliError(f"no checkpoint at {path}", EXIT_MISSING)
    try:
        return load_checkpoint(path)
    except (CheckpointError, ConfigError, ValueError) as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_DATA) from exc


def cmd_synth(args) -> int:
    root = synth_corpus(args.out, seed=args.seed, n_q=args.n_q, n_convs=args.n_convs,
                        vocab_size=args.vocab_size, noise=args.noise)
    print(f"wrote synthetic corpus to {root}")
    return 0


def cmd_train(args) -> int:
    try:
        config = load_config(args.config) if args.config else TrainConfig()
        if args.seed is not None:
            config.seed = args.seed
        if args.max_epochs is not None:
            config.max_epochs = args.max_epochs
        for name in args.ablate or ():
            config = config.ablate(name)
        config.validate()
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {exc.filename}", EXIT_MISSING) from exc
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from exc
    _check_dir(args.data)
    try:
        corpus = load_corpus(args.data, min_count=config.min_count)
    except CorpusError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = train(config, corpus, log_path,
                       on_epoch=lambda r: print(json.dumps(r), flush=True) if args.verbose else None)
    except DivergenceError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from exc
    save_checkpoint(out, result.model, corpus.vocab, corpus.quotes,
                    {"best_epoch": result.best_epoch, "valid": result.best_metrics})
    print(f"best epoch {result.best_epoch}  valid MAP {result.best_metrics.get('MAP', 0.0):.4f}")
    print(f"checkpoint: {out}\nlog: {log_path}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    corpus = _load_corpus_for(ckpt, args.data)
    convs = [c for c in corpus.split(args.split) if c.gold is not None]
    if not convs:
        raise CliError(f"split {args.split!r} has no labelled conversations", EXIT_DATA)
    probs = predict_batches(ckpt.model, convs, corpus.quotes)
    ranks = ranks_from_probabilities(probs, [c.gold for c in convs])
    report = compute_metrics(ranks)
    ranks_path = Path(args.ranks_out) if args.ranks_out else Path(args.ckpt).with_name(
        Path(args.ckpt).name + f".{args.split}.ranks.jsonl")
    ranks_path.write_text("".join(json.dumps({"id": c.id, "gold": c.gold, "rank": int(r)}) + "\n"
                                  for c, r in zip(convs, ranks)), encoding="utf-8")
    print(report.table(args.split))
    print(report.to_json())
    return 0


def _read_conversation(path: str, vocab) -> Conversation:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no conversation file at {path}", EXIT_MISSING)
    text = p.read_text(encoding="utf-8")
    turns = None
    try:
        rec = json.loads(text)
        if isinstance(rec, dict):
            turns = rec.get("turns")
        elif isinstance(rec, list):
            turns = rec
    except json.JSONDecodeError:
        turns = [line for line in text.splitlines() if line.strip()]
    if not isinstance(turns, list) or not all(isinstance(t, str) for t in turns):
        raise CliError("conversation file must be a JSON record with 'turns' or one turn per line", EXIT_DATA)
    turns = [t for t in turns if t.strip()]
    if not turns:
        raise CliError("conversation has no turns", EXIT_EMPTY)
    return Conversation(p.stem, [vocab.encode(t) for t in turns], None, turns)


def cmd_recommend(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    conv = _read_conversation(args.conv, ckpt.vocab)
    result = predict(ckpt.model, conv, ckpt.quotes, args.top_n)
    for rank, (qid, p) in enumerate(zip(result.ids, result.probs), 1):
        print(f"{rank:>3}  {p:.6f}  [{qid}] {ckpt.quotes.texts[qid]}")
    return 0


def cmd_interpret(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    corpus = _load_corpus_for(ckpt, args.data)
    ids = None if args.all else [args.quote]
    if ids is not None and not 0 <= args.quote < len(corpus.quotes):
        raise CliError(f"quotation id {args.quote} outside 0..{len(corpus.quotes) - 1}", EXIT_DATA)
    if args.stoplist and not Path(args.stoplist).is_file():
        raise CliError(f"no stoplist at {args.stoplist}", EXIT_MISSING)
    stoplist = Path(args.stoplist).read_text(encoding="utf-8").split() if args.stoplist else ()
    if not -ckpt.config.n_layers <= args.layer < ckpt.config.n_layers:
        raise CliError(f"--layer {args.layer} outside the model's {ckpt.config.n_layers} layers", EXIT_USAGE)
    try:
        results = interpret_corpus(ckpt.model, corpus, ids, args.top_k, transformed=not args.untransformed,
                                   layer=args.layer, heads=args.heads, stoplist=stoplist)
    except InterpretationError as exc:
        raise CliError(str(exc), EXIT_NO_HISTORY) from exc
    records = [r.record(corpus.quotes.texts[r.quote_id]) for r in results]
    if args.json_out:
        Path(args.json_out).write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records),
                                       encoding="utf-8")
    for r in results:
        print(heat_report(r, corpus.quotes.texts[r.quote_id]))
    for rec in records:
        print(json.dumps(rec, ensure_ascii=False))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_gradcheck(args.seed)
    print(gradcheck.format_results(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAILED {r.name}: max relative error {r.max_rel_error:.3e} (tensor {r.worst_tensor})",
              file=sys.stderr)
    return EXIT_GRADCHECK if failed else 0


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quoterec", description="Conversational quotation recommendation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-q", type=int, default=10)
    p.add_argument("--n-convs", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--vocab-size", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write the best checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", action="append", choices=ABLATIONS)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--log", help="per-epoch log path (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MAP, P@1, P@3 and nDCG@5 on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--ranks-out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="rank quotations for one conversation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--conv", required=True)
    p.add_argument("--top-n", type=_positive, default=5)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("interpret", help="indicative words for quotations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--quote", type=int)
    which.add_argument("--all", action="store_true")
    p.add_argument("--top-k", type=_positive, default=8)
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--heads", choices=("mean", "max"), default="mean")
    p.add_argument("--untransformed", action="store_true", help="skip the query mapping in query attention")
    p.add_argument("--stoplist", help="file of whitespace-separated words to drop")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
