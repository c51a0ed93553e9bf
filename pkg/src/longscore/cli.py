"""Command-line front end: ``longscore {ingest,train,evaluate,bench,report}``.

Every command reads a flat ``key = value`` config file (``--config``),
writes its artifacts plus ``manifest.json`` under ``--out`` and exits 0 on
success, 1 on a runtime error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from threadpoolctl import threadpool_limits

from .errors import ConfigurationError, InputError, LongscoreError

log = logging.getLogger("longscore")

# key -> (type, description); every accepted config key is listed here
CONFIG_KEYS = {
    "seed": (int, "random seed (overridden by --seed)"),
    # corpus
    "corpus_path": (str, "essay file to ingest"),
    "corpus_format": (str, "csv or jsonl"),
    "column_essay_id": (str, "column holding the essay id"),
    "column_full_text": (str, "column holding the essay text"),
    "column_score": (str, "column holding the human score"),
    "column_grade": (str, "column holding the grade level"),
    "column_split": (str, "column holding train/test"),
    "default_split": (str, "split to assign when the file has no split column"),
    "score_min": (int, "lowest rubric score"),
    "score_max": (int, "highest rubric score"),
    "synthetic": (bool, "generate the keyword-density corpus instead of reading a file"),
    "synthetic_train": (int, "synthetic training essays"),
    "synthetic_test": (int, "synthetic test essays"),
    "synthetic_seed": (int, "seed of the synthetic generator"),
    "min_count": (int, "minimum token frequency for the vocabulary"),
    # model
    "architecture": (str, "full-attention, sliding-window, segment-recurrent or ssm"),
    "d_model": (int, "hidden width"),
    "depth": (int, "number of blocks"),
    "n_heads": (int, "attention heads"),
    "d_ff": (int, "feed-forward width"),
    "window_radius": (int, "sliding-window radius"),
    "segment_length": (int, "segment length of the recurrent model"),
    "state_dim": (int, "SSM state size per channel"),
    "d_inner": (int, "SSM channel count"),
    "conv_width": (int, "causal conv kernel width"),
    "scan_chunk": (int, "chunk size of the blocked scan"),
    "max_length": (int, "truncation bound in tokens"),
    "pooling": (str, "first-token or last-token"),
    "rope_base": (float, "rotary embedding base"),
    "lora_rank": (int, "LoRA rank (enables adapters on L_q, L_k, L_v)"),
    "lora_alpha": (float, "LoRA scale numerator"),
    # training
    "lr": (float, "initial learning rate"),
    "epochs": (int, "epoch limit"),
    "batch_size": (int, "essays per optimizer step"),
    "long_threshold": (int, "token length above which batches fall back to size 1"),
    "weight_decay": (float, "decoupled weight decay"),
    "dev_fraction": (float, "share of training essays held out for early stopping"),
    "patience": (int, "epochs without dev QWK improvement before stopping"),
    # evaluation and reporting
    "checkpoint": (str, "model checkpoint, or echo-stub"),
    "vocab": (str, "vocabulary file written by train"),
    "model_name": (str, "row label in reports"),
    "inputs": (str, "comma-separated evaluate report.csv files to merge"),
    # bench
    "mechanisms": (str, "comma-separated subset of full-attention, sliding-window, ssm-scan"),
    "lengths": (str, "comma-separated sequence lengths"),
    "reps": (int, "timed repetitions per length"),
    "bench_d_model": (int, "model width used by the benchmark"),
    "bench_radius": (int, "window radius used by the benchmark"),
}


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"config line {n}: unknown key {key!r}")
        typ = CONFIG_KEYS[key][0]
        try:
            if typ is bool:
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                out[key] = value.lower() in ("true", "1", "yes")
            else:
                out[key] = typ(value)
        except ValueError:
            raise ConfigurationError(f"config line {n}: bad value {value!r} for {key}") from None
    return out


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    def __init__(self, args, cfg: dict, cfg_bytes: bytes):
        self.args = args
        self.cfg = cfg
        self.cfg_bytes = cfg_bytes
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        self.artifacts = {}

    def write(self, name: str, data) -> Path:
        blob = data.encode() if isinstance(data, str) else data
        path = self.out / name
        path.write_bytes(blob)
        self.artifacts[name] = _sha256(blob)
        return path

    def manifest(self):
        m = {"command": self.args.command, "config_sha256": _sha256(self.cfg_bytes),
             "seed": self.seed, "artifacts": dict(sorted(self.artifacts.items()))}
        (self.out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")

    def emit(self, text_body: str, csv_body: str):
        sys.stdout.write(csv_body if self.args.format == "csv" else text_body)


def _load_corpus(cfg: dict):
    from .corpus import ingest, synthetic_corpus

    if cfg.get("synthetic"):
        return synthetic_corpus(cfg.get("synthetic_train", 2000), cfg.get("synthetic_test", 500),
                                seed=cfg.get("synthetic_seed", 0))
    if "corpus_path" not in cfg:
        raise ConfigurationError("config needs corpus_path (or synthetic = true)")
    columns = {f: cfg[f"column_{f}"] for f in ("essay_id", "full_text", "score", "grade", "split")
               if f"column_{f}" in cfg}
    rng = (cfg["score_min"], cfg["score_max"]) if "score_min" in cfg and "score_max" in cfg else None
    return ingest(cfg["corpus_path"], cfg.get("corpus_format", "csv"), columns, rng,
                  cfg.get("default_split"))


def cmd_ingest(run: Run):
    from .corpus import format_length_stats, format_rejects, length_stats, serialize

    corpus = _load_corpus(run.cfg)
    tmp = run.out / "corpus.csv"
    serialize(corpus, tmp)
    run.artifacts["corpus.csv"] = _sha256(tmp.read_bytes())
    stats = length_stats(corpus)
    run.write("stats.txt", format_length_stats(stats, "text"))
    run.write("stats.csv", format_length_stats(stats, "csv"))
    run.write("rejects.txt", format_rejects(corpus.rejects, "text"))
    run.write("rejects.csv", format_rejects(corpus.rejects, "csv"))
    run.emit(format_length_stats(stats, "text") + f"{len(corpus)} records, {len(corpus.rejects)} rejects\n",
             format_length_stats(stats, "csv"))


def _model_config(cfg: dict, vocab_size: int, n_classes: int):
    from .model import ModelConfig

    keys = ("d_model", "depth", "n_heads", "d_ff", "window_radius", "segment_length", "state_dim",
            "d_inner", "conv_width", "scan_chunk", "max_length", "pooling", "rope_base")
    kwargs = {k: cfg[k] for k in keys if k in cfg}
    if "lora_rank" in cfg:
        kwargs["lora"] = (cfg["lora_rank"], cfg.get("lora_alpha", float(cfg["lora_rank"])))
    if "architecture" not in cfg:
        raise ConfigurationError("config needs architecture")
    return ModelConfig(cfg["architecture"], vocab_size, n_classes, **kwargs)


def cmd_train(run: Run):
    from .corpus import Vocab
    from .model import build_classifier, save_checkpoint
    from .training import TrainConfig, train

    cfg = run.cfg
    corpus = _load_corpus(cfg)
    train_part = corpus.split("train")
    vocab = Vocab.from_corpus(train_part, cfg.get("min_count", 2))
    mcfg = _model_config(cfg, len(vocab), corpus.n_classes)
    model = build_classifier(mcfg, run.seed)
    tkeys = ("lr", "epochs", "batch_size", "long_threshold", "weight_decay", "dev_fraction", "patience")
    tcfg = TrainConfig.for_architecture(mcfg.architecture, seed=run.seed,
                                        **{k: cfg[k] for k in tkeys if k in cfg})
    report = train(model, train_part, tcfg, vocab)
    run.write("vocab.txt", vocab.dumps())
    run.write("model.ckpt", save_checkpoint(model, None))
    run.write("train.log", report.to_log())
    run.emit(report.to_log(), report.to_log())


def cmd_evaluate(run: Run):
    from .corpus import Vocab
    from .metrics import format_report_csv, format_report_text
    from .model import load_checkpoint
    from .training import EchoModel, evaluate

    cfg = run.cfg
    corpus = _load_corpus(cfg)
    test = corpus.split("test")
    if not test.records:
        raise InputError("corpus has no test split")
    ckpt = cfg.get("checkpoint")
    if ckpt is None:
        raise ConfigurationError("config needs checkpoint")
    if ckpt == "echo-stub":
        vocab = Vocab.from_corpus(corpus, cfg.get("min_count", 2))
        model, max_len = EchoModel(test, vocab), 8192
    else:
        if "vocab" not in cfg:
            raise ConfigurationError("config needs vocab when evaluating a checkpoint")
        vocab = Vocab.loads(Path(cfg["vocab"]).read_text())
        model = load_checkpoint(ckpt)
        max_len = model.config.max_length
    _, report = evaluate(model, test, vocab, cfg.get("model_name", Path(ckpt).stem), max_len)
    text, csv_ = format_report_text([report]), format_report_csv([report])
    run.write("report.txt", text)
    run.write("report.csv", csv_)
    if report.undefined:
        run.write("undefined.txt", "".join(f"{g}\n" for g in report.undefined))
    run.emit(text, csv_)


def cmd_report(run: Run):
    from .metrics import format_report_csv, format_report_text, parse_report_csv

    paths = list(run.args.inputs)
    if "inputs" in run.cfg:
        paths += [p.strip() for p in run.cfg["inputs"].split(",") if p.strip()]
    if not paths:
        raise InputError("report needs at least one evaluate report.csv")
    reports = []
    for p in paths:
        reports += parse_report_csv(Path(p).read_text())
    text, csv_ = format_report_text(reports), format_report_csv(reports)
    run.write("table.txt", text)
    run.write("table.csv", csv_)
    run.emit(text, csv_)


def cmd_bench(run: Run):
    from .bench import DEFAULT_LENGTHS, MECHANISMS, bench_scaling

    cfg = run.cfg
    mechs = [m.strip() for m in cfg.get("mechanisms", ",".join(MECHANISMS)).split(",")]
    lengths = [int(x) for x in cfg.get("lengths", ",".join(map(str, DEFAULT_LENGTHS))).split(",")]
    report = bench_scaling(mechs, lengths, cfg.get("reps", 5), d_model=cfg.get("bench_d_model", 32),
                           radius=cfg.get("bench_radius", 64), seed=run.seed)
    run.write("scaling.txt", report.to_text())
    run.write("scaling.csv", report.to_csv())
    run.emit(report.to_text(), report.to_csv())


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "evaluate": cmd_evaluate,
            "bench": cmd_bench, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longscore", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("inputs", nargs="*", help="report: evaluate report.csv files to merge")
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="longscore-out", help="output directory")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.inputs and args.command != "report":
        parser.print_usage(sys.stderr)
        print(f"longscore: error: {args.command} takes no positional arguments", file=sys.stderr)
        return 2
    threads: Optional[int] = None
    if os.environ.get("LONGSCORE_THREADS"):
        threads = int(os.environ["LONGSCORE_THREADS"])
    try:
        cfg_bytes = args.config.read_bytes() if args.config else b""
        cfg = parse_config(cfg_bytes.decode())
        r = Run(args, cfg, cfg_bytes)
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](r)
        r.manifest()
    except LongscoreError as exc:
        print(f"error category={exc.category} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error category={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    return 0


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
