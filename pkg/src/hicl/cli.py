"""``hicl`` command line: synth / stats / train / eval / bench.

Every flag may also be given in a ``key = value`` config file (``--config``);
flags win over file values.  Exit codes: 0 ok, 1 usage, 2 config, 3 I/O,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .numerics import NumericalError
from .textproc import DataFormatError
from .training import CheckpointError

log = logging.getLogger("hicl")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class InputError(Exception):
    pass


def _choice(*allowed):
    def convert(text):
        if text not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {text!r}")
        return text
    convert.__name__ = "choice"
    return convert


def _opt_int(text):
    return None if str(text).lower() in ("", "none") else int(text)


# name -> (type, default, help); shared names keep one meaning across subcommands
OPTIONS = {
    "seed": (int, None, "random seed"),
    "pairs": (int, 200, "number of training sentence pairs (corpus gets 2x sentences)"),
    "dev_pairs": (int, 200, "number of dev pairs"),
    "test_pairs": (int, 200, "number of test pairs"),
    "vocab_size": (int, 1000, "synthetic/benchmark vocabulary size"),
    "body_length": (int, 30, "synthetic sentence length without specials"),
    "out_dir": (str, ".", "directory for generated files"),
    "corpus": (str, None, "training corpus, one sentence per line"),
    "dev": (str, None, "dev STS file (TSV: sentence1, sentence2, score)"),
    "data": (str, None, "STS file to evaluate"),
    "checkpoint": (str, None, "checkpoint path"),
    "vocab": (str, None, "vocabulary file path"),
    "log": (str, None, "training log path"),
    "out": (str, None, "write the report to this file as well"),
    "vocab_top_k": (int, 30000, "vocabulary size cap when building from the corpus"),
    "steps": (_opt_int, None, "training steps (overrides epochs)"),
    "epochs": (int, 1, "training epochs when steps is unset"),
    "batch_size": (int, 64, "sequences per batch"),
    "lr": (float, 1e-3, "learning rate"),
    "optimizer": (_choice("adam", "sgd"), "adam", "optimizer"),
    "eval_every": (int, 125, "dev evaluation period in steps"),
    "slice_length": (int, 32, "slicing length L"),
    "pooling": (_choice("weighted", "unweighted"), "weighted", "segment pooling"),
    "tau": (float, 0.05, "InfoNCE temperature"),
    "alpha": (float, 0.05, "local loss weight"),
    "beta": (float, 0.0, "entailment loss weight (hiclv2)"),
    "relationship": (_choice("neither", "negative", "positive"), "neither",
                     "treatment of same-sequence segments in the local loss"),
    "variant": (_choice("hicl", "hiclv2", "global_only", "local_only"), "hicl", "objective"),
    "positive": (_choice("dropout", "repetition"), "dropout", "positive-pair strategy"),
    "repetition_rate": (float, 0.25, "word repetition rate"),
    "queue_size": (int, 0, "negative queue capacity in rows (0 = off)"),
    "d": (int, 64, "model width"),
    "heads": (int, 4, "attention heads"),
    "layers": (int, 2, "transformer layers"),
    "dropout": (float, 0.1, "dropout rate"),
    "seq_len": (int, 256, "benchmark sequence length (specials included)"),
    "n_seqs": (int, 8, "benchmark sequence count"),
    "repetitions": (int, 5, "timed repetitions"),
    "workers": (int, 0, "threads for the extra parallel segmented timing (0 = skip)"),
}

SUBCOMMANDS = {
    "synth": (["seed", "pairs", "dev_pairs", "test_pairs", "vocab_size", "body_length", "out_dir"],
              {"seed": 7}),
    "stats": (["corpus", "slice_length"], {}),
    "train": (["corpus", "dev", "checkpoint", "vocab", "log", "vocab_top_k", "steps", "epochs",
               "batch_size", "lr", "optimizer", "eval_every", "slice_length", "pooling", "tau",
               "alpha", "beta", "relationship", "variant", "positive", "repetition_rate",
               "queue_size", "seed", "d", "heads", "layers", "dropout"],
              {"seed": 42, "checkpoint": "hicl.ckpt", "vocab": "vocab.txt", "log": "train.log"}),
    "eval": (["checkpoint", "vocab", "data", "slice_length", "pooling", "out"], {}),
    "bench": (["checkpoint", "seq_len", "n_seqs", "slice_length", "repetitions", "workers", "seed",
               "vocab_size", "d", "heads", "layers", "out"], {"seed": 0}),
}

REQUIRED = {"stats": ["corpus"], "train": ["corpus"], "eval": ["checkpoint", "vocab", "data"]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hicl", description="Hierarchical contrastive sentence-embedding toolkit")
    parser.add_argument("--version", action="version", version=f"hicl {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}",
                                parser_class=_Parser)
    for name, (keys, overrides) in SUBCOMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        for key in keys:
            typ, default, help_ = OPTIONS[key]
            default = overrides.get(key, default)
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                           help=f"{help_} (default: {default})")
    return parser


def parse_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror or exc}") from None
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def effective_config(command: str, args: argparse.Namespace) -> dict:
    keys, overrides = SUBCOMMANDS[command]
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = {}
    for key in keys:
        typ, default, _ = OPTIONS[key]
        value = overrides.get(key, default)
        if key in file_values:
            try:
                value = typ(file_values[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
        if getattr(args, key) is not None:
            value = getattr(args, key)
        cfg[key] = value
    for key in REQUIRED.get(command, []):
        if cfg[key] is None:
            raise UsageError(f"hicl {command}: --{key.replace('_', '-')} is required")
    return cfg


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p


def _emit(text: str, out: str | None):
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg):
    from .evaluation import generate_synthetic, synthetic_vocab

    vocab = synthetic_vocab(cfg["vocab_size"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    corpus, _ = generate_synthetic(cfg["seed"], cfg["pairs"], cfg["vocab_size"], cfg["body_length"], 0)
    (out / "train.txt").write_text("".join(vocab.decode(s.ids) + "\n" for s in corpus), encoding="utf-8")
    for split, name, n in ((1, "dev.tsv", cfg["dev_pairs"]), (2, "test.tsv", cfg["test_pairs"])):
        _, examples = generate_synthetic(cfg["seed"], n, cfg["vocab_size"], cfg["body_length"], split)
        rows = [f"{vocab.decode(e.s1.ids)}\t{vocab.decode(e.s2.ids)}\t{e.gold}\n" for e in examples]
        (out / name).write_text("".join(rows), encoding="utf-8")
    print(f"wrote {out / 'train.txt'} ({len(corpus)} sentences), {out / 'dev.tsv'}, {out / 'test.tsv'}")


def cmd_stats(cfg):
    from .textproc import Vocab, corpus_stats, load_corpus

    corpus = load_corpus(_require_file(cfg["corpus"]), Vocab())
    if not corpus:
        raise InputError(f"corpus {cfg['corpus']} is empty")
    print(corpus_stats(corpus, cfg["slice_length"]).format_table())


def cmd_train(cfg):
    from .evaluation import StsExample
    from .losses import LossConfig
    from .textproc import Vocab, load_sts, read_corpus_lines, tokenize
    from .training import TrainConfig, format_log, save_checkpoint, train

    lines = read_corpus_lines(_require_file(cfg["corpus"]))
    if not lines:
        raise InputError(f"corpus {cfg['corpus']} is empty")
    try:
        tcfg = TrainConfig(
            batch_size=cfg["batch_size"], steps=cfg["steps"], epochs=cfg["epochs"], lr=cfg["lr"],
            optimizer=cfg["optimizer"], eval_every=cfg["eval_every"], L=cfg["slice_length"],
            pooling=cfg["pooling"], positive=cfg["positive"], repetition_rate=cfg["repetition_rate"],
            queue_size=cfg["queue_size"], seed=cfg["seed"], d=cfg["d"], n_heads=cfg["heads"],
            n_layers=cfg["layers"], dropout=cfg["dropout"],
            loss=LossConfig(cfg["tau"], cfg["alpha"], cfg["beta"], cfg["relationship"], cfg["variant"]))
        if cfg["d"] % cfg["heads"]:
            raise ValueError(f"d={cfg['d']} is not divisible by heads={cfg['heads']}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    vocab = Vocab.build(lines, cfg["vocab_top_k"])
    corpus = [tokenize(line, vocab, n) for n, line in enumerate(lines, start=1)]
    dev = []
    if cfg["dev"]:
        dev = [StsExample(a, b, s) for a, b, s in load_sts(_require_file(cfg["dev"]), vocab)]
    ckpt, entries = train(tcfg, corpus, dev, vocab_size=len(vocab))
    vocab.save(cfg["vocab"])
    save_checkpoint(cfg["checkpoint"], ckpt)
    header = "".join(f"# {k} = {v}\n" for k, v in cfg.items())
    Path(cfg["log"]).write_text(header + format_log(entries), encoding="utf-8")
    metric = "n/a" if ckpt.dev_metric is None else f"{ckpt.dev_metric:.4f}"
    print(f"best step {ckpt.step} dev spearman {metric}; final loss {entries[-1].total:.5f}")
    print(f"wrote {cfg['checkpoint']}, {cfg['vocab']}, {cfg['log']}")


def cmd_eval(cfg):
    from .evaluation import StsExample, evaluate
    from .textproc import Vocab, load_sts
    from .training import load_checkpoint

    ckpt = load_checkpoint(_require_file(cfg["checkpoint"]))
    vocab = Vocab.load(_require_file(cfg["vocab"]))
    if len(vocab) != ckpt.params.config.vocab_size:
        raise InputError(f"vocab has {len(vocab)} ids but checkpoint expects "
                         f"{ckpt.params.config.vocab_size}")
    data = [StsExample(a, b, s) for a, b, s in load_sts(_require_file(cfg["data"]), vocab)]
    report = evaluate(ckpt.params, data, cfg["slice_length"], cfg["pooling"])
    _emit(report.to_tsv([e.gold for e in data]), cfg["out"])


def cmd_bench(cfg):
    import numpy as np

    from .bench import wallclock_bench
    from .encoder import init_params
    from .numerics import RngStream
    from .textproc import TokenSeq
    from .training import load_checkpoint

    if cfg["checkpoint"]:
        params = load_checkpoint(_require_file(cfg["checkpoint"])).params
    else:
        params = init_params(cfg["seed"], cfg["d"], cfg["heads"], cfg["layers"], cfg["vocab_size"] + 5)
    if cfg["seq_len"] < 2 or cfg["seq_len"] > 512:
        raise ConfigError("seq_len must lie in [2, 512]")
    rng = RngStream(cfg["seed"], "data").generator(0)
    V = params.config.vocab_size
    corpus = [TokenSeq.from_body(rng.integers(5, V, size=cfg["seq_len"] - 2).tolist())
              for _ in range(cfg["n_seqs"])]
    report = wallclock_bench(params, corpus, cfg["slice_length"], cfg["repetitions"], cfg["workers"])
    _emit(report.to_keyvalue() + "\n" + report.to_tsv(), cfg["out"])


COMMANDS = {"synth": cmd_synth, "stats": cmd_stats, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        cfg = effective_config(args.command, args)
        for key, value in cfg.items():
            log.info("config %s = %s", key, value)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, DataFormatError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
