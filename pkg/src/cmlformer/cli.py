"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .analysis import attention_profile, export_profile
from .config import ConfigError, build_configs, load_config, parse_objectives
from .corpus import (CmiConfig, HttpTransport, MockTransport, RecordError, augment, load_jsonl,
                     load_labeled_jsonl, save_jsonl)
from .model import CMLFormer, load_checkpoint
from .tokenizer import DEFAULT_VOCAB_SIZE, Vocabulary, train_vocab
from .trainer import Classifier, TrainConfig, ablate_coupling, evaluate, finetune, pretrain

log = logging.getLogger("cmlformer")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DIVERGENCES = [
    "optimizer family not given upstream; plain SGD with clip-norm 1.0 is the default, Adam selectable",
    "batch size, warmup and clipping not given upstream; no warmup is used",
    "WordPiece scoring variant not given upstream; greedy pair-frequency merging is used",
    "positional encoding not given upstream; learned absolute embeddings are used",
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def artifact_version() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                              text=True, timeout=5, cwd=Path(__file__).parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path, command: str, config: dict, seed: int | None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": artifact_version(),
        "divergences": DIVERGENCES,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _corpus_texts(path):
    p = Path(path)
    if p.suffix == ".jsonl":
        for rec in load_jsonl(p, derive_missing=True):
            yield from (rec.cm_text, rec.base_text, rec.mix_text)
    else:
        yield from p.read_text(encoding="utf-8").splitlines()


def _configs(args, base_train: TrainConfig):
    values = load_config(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    for key in ("epochs", "batch_size"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if getattr(args, "lr", None) is not None:
        values["initial_lr"] = args.lr
    if getattr(args, "coupling", None):
        values["coupling_mode"] = args.coupling
    if getattr(args, "objectives", None):
        parse_objectives(args.objectives)
        values["objectives"] = args.objectives
    model_cfg, train_cfg = build_configs(values, base_train)
    return values, model_cfg, train_cfg


def _vocab_for(args, values, records) -> Vocabulary:
    if getattr(args, "vocab", None):
        return Vocabulary.load(args.vocab)
    texts = [t for r in records for t in (r.cm_text, r.base_text, r.mix_text)]
    return train_vocab(texts, values.get("vocab_size", DEFAULT_VOCAB_SIZE), values.get("min_freq", 2))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_tokenizer_train(args) -> int:
    vocab = train_vocab(_corpus_texts(args.corpus), args.vocab_size, args.min_freq)
    vocab.save(args.out)
    write_manifest(f"{args.out}.manifest.json", "tokenizer-train",
                   {"corpus": str(args.corpus), "vocab_size": args.vocab_size, "min_freq": args.min_freq}, None)
    print(f"wrote {len(vocab)} tokens to {args.out}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    cmi = CmiConfig(args.wn, args.wp)
    records = load_jsonl(args.input, derive_missing=True)
    save_jsonl(records, args.out, cmi=cmi)
    write_manifest(f"{args.out}.manifest.json", "annotate", {"in": str(args.input), "wn": args.wn, "wp": args.wp}, None)
    print(f"annotated {len(records)} records -> {args.out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    if bool(args.endpoint) == bool(args.mock):
        raise UsageError("exactly one of --endpoint or --mock is required")
    client = MockTransport() if args.mock else HttpTransport(args.endpoint)
    rows = []
    with open(args.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RecordError(f"{args.input}:{lineno}: {exc}") from exc
                if "hinglish" not in row:
                    raise RecordError(f"{args.input}:{lineno}: missing field 'hinglish'")
                rows.append(row)
    out = augment(rows, client, retries=args.retries, delay=args.delay, temperature=args.temperature)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in out:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    write_manifest(f"{args.out}.manifest.json", "augment",
                   {"in": str(args.input), "mock": args.mock, "endpoint": args.endpoint,
                    "temperature": args.temperature, "retries": args.retries, "delay": args.delay}, None)
    print(f"augmented {len(out)}/{len(rows)} records -> {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    values, model_cfg, train_cfg = _configs(args, TrainConfig.pretrain_defaults())
    records = load_jsonl(args.data, derive_missing=True)
    vocab = _vocab_for(args, values, records)
    model_cfg = model_cfg.with_vocab(len(vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    model = CMLFormer(model_cfg, seed=values.get("model_seed", train_cfg.seed))
    res = pretrain(model, records, vocab, train_cfg, out_dir=out, save_checkpoints=not args.no_epoch_checkpoints)
    write_manifest(out / "manifest.json", "pretrain",
                   {"model": asdict(model_cfg), "train": train_cfg.to_dict(), "data": str(args.data)}, train_cfg.seed)
    print(f"pretrained {len(res.rows)} epochs; final total loss {res.rows[-1]['total']:.6f}; model -> {out / 'model.npz'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    values, _, train_cfg = _configs(args, TrainConfig.finetune_defaults())
    ck = load_checkpoint(args.encoder)
    if ck.vocab_tokens is None:
        raise ConfigError(f"{args.encoder} carries no vocabulary")
    vocab = Vocabulary(ck.vocab_tokens)
    examples = load_labeled_jsonl(args.data)
    clf, history = finetune(args.encoder, examples, vocab, train_cfg)
    clf.save(args.out)
    write_manifest(f"{args.out}.manifest.json", "finetune",
                   {"train": train_cfg.to_dict(), "encoder": str(args.encoder), "data": str(args.data)}, train_cfg.seed)
    print(f"fine-tuned {len(history)} epochs; final loss {history[-1]['loss']:.6f}; classifier -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    clf = Classifier.load(args.model)
    report = evaluate(clf, load_labeled_jsonl(args.data))
    text = json.dumps(report.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        write_manifest(f"{args.out}.manifest.json", "evaluate", {"model": str(args.model), "data": str(args.data)}, None)
    print(text)
    return EXIT_OK


def cmd_attention(args) -> int:
    ck = load_checkpoint(args.model)
    if ck.vocab_tokens is None:
        raise ConfigError(f"{args.model} carries no vocabulary")
    labels = None
    if args.labels:
        try:
            labels = [int(x) for x in args.labels.split(",")]
        except ValueError:
            raise ConfigError(f"--labels must be comma-separated 0/1 values, got {args.labels!r}") from None
    profile = attention_profile(ck.params, ck.config, Vocabulary(ck.vocab_tokens), args.text, labels,
                                args.layer, args.head)
    export_profile(profile, args.out)
    write_manifest(f"{args.out}.manifest.json", "attention",
                   {"model": str(args.model), "text": args.text, "labels": args.labels,
                    "layer": args.layer, "head": args.head}, None)
    print(f"wrote profile of {len(profile.tokens)} tokens -> {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    values, model_cfg, train_cfg = _configs(args, TrainConfig.pretrain_defaults())
    records = load_jsonl(args.data, derive_missing=True)
    vocab = _vocab_for(args, values, records)
    model_cfg = model_cfg.with_vocab(len(vocab))
    report = ablate_coupling(records, vocab, model_cfg, train_cfg, args.out_dir, values.get("model_seed"))
    write_manifest(Path(args.out_dir) / "manifest.json", "ablate",
                   {"model": asdict(model_cfg), "train": train_cfg.to_dict(), "data": str(args.data)}, train_cfg.seed)
    for mode, info in report["modes"].items():
        print(f"{mode:>13}: params {info['parameter_count']}, final total {info['final_total']:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmlformer", description="Code-mixed dual-decoder pre-training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("tokenizer-train", help="train the shared subword vocabulary")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE)
    s.add_argument("--min-freq", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tokenizer_train)

    s = sub.add_parser("annotate", help="validate records, derive switching points, attach CMI")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--wn", type=float, default=0.5)
    s.add_argument("--wp", type=float, default=0.5)
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("augment", help="add English / Roman-Hindi translations via an LLM endpoint")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--endpoint")
    s.add_argument("--mock", action="store_true", help="offline echo transport")
    s.add_argument("--temperature", type=float, default=0.7)
    s.add_argument("--retries", type=int, default=3)
    s.add_argument("--delay", type=float, default=2.0)
    s.set_defaults(func=cmd_augment)

    def train_flags(s):
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--lr", type=float)

    s = sub.add_parser("pretrain", help="joint multi-task pre-training")
    train_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--vocab")
    s.add_argument("--objectives", help="comma list from mlm,spp,btsp,biltm,tlc,cmi")
    s.add_argument("--coupling", choices=["sync", "async", "none", "synchronous", "asynchronous"])
    s.add_argument("--out", required=True)
    s.add_argument("--no-epoch-checkpoints", action="store_true")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune the encoder with a classification head")
    train_flags(s)
    s.add_argument("--encoder", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="precision / recall / accuracy / F1 of a classifier")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("attention", help="export a per-token attention profile")
    s.add_argument("--model", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--labels")
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--head", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attention)

    s = sub.add_parser("ablate", help="compare the three decoder coupling modes")
    train_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--vocab")
    s.add_argument("--objectives")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, RecordError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
