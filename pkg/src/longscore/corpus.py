"""Essay corpora: ingestion, tokenization, length statistics, prompt rendering
and a synthetic keyword-density corpus for desk-scale experiments."""

from __future__ import annotations

import csv
import io
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import InputError, SchemaError

GRADES = (6, 8, 9, 10)
SPLITS = ("train", "test")
FIELDS = ("essay_id", "full_text", "score", "grade", "split")

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

_TOKEN = re.compile(r"[^\W_]+|\S")


@dataclass(frozen=True)
class EssayRecord:
    essay_id: str
    full_text: str
    score: int
    grade: int
    split: str


@dataclass
class Corpus:
    records: list
    score_range: tuple
    rejects: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> "Corpus":
        return Corpus([r for r in self.records if r.split == name], self.score_range)

    def subset(self, records: Sequence[EssayRecord]) -> "Corpus":
        return Corpus(list(records), self.score_range)

    @property
    def n_classes(self) -> int:
        return self.score_range[1] - self.score_range[0] + 1


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str


def _read_rows(path: Path, fmt: str):
    """Yield (line number, dict) pairs; line numbers are 1-based file lines."""
    if fmt in ("csv", "comma-separated"):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{path} is empty") from None
            while True:
                line = reader.line_num + 1
                try:
                    row = next(reader)
                except StopIteration:
                    return
                except csv.Error as exc:
                    yield line, exc
                    continue
                if len(row) != len(header):
                    yield line, ValueError(f"expected {len(header)} fields, found {len(row)}")
                else:
                    yield line, dict(zip(header, row)), header
    elif fmt in ("jsonl", "line-delimited"):
        with open(path, encoding="utf-8") as fh:
            for i, raw in enumerate(fh, 1):
                if not raw.strip():
                    continue
                try:
                    obj = json.loads(raw)
                except json.JSONDecodeError as exc:
                    yield i, exc
                    continue
                if not isinstance(obj, dict):
                    yield i, ValueError("record is not an object")
                    continue
                yield i, obj, list(obj)
    else:
        raise InputError(f"unknown corpus format {fmt!r}")


def ingest(path, fmt: str = "csv", columns: Optional[Mapping[str, Optional[str]]] = None,
           score_range: Optional[tuple] = None, default_split: Optional[str] = None) -> Corpus:
    """Load and validate essay records.

    ``columns`` maps field names (essay_id, full_text, score, grade, split)
    to the file's column names. ``default_split`` fills the split when the
    file has no split column. Bad rows land in ``Corpus.rejects`` with their
    line number; a missing required column raises :class:`SchemaError`.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"corpus file {path} does not exist")
    cols = {f: f for f in FIELDS}
    cols.update(columns or {})
    if default_split is not None:
        if default_split not in SPLITS:
            raise InputError(f"default split must be one of {SPLITS}")
        cols["split"] = None
    records, rejects, checked = [], [], False
    lo, hi = score_range if score_range else (None, None)
    for item in _read_rows(path, fmt):
        line, row = item[0], item[1]
        if isinstance(row, Exception):
            rejects.append(Reject(line, f"unparseable row: {row}"))
            continue
        if not checked and fmt in ("csv", "comma-separated"):
            missing = [c for f, c in cols.items() if c is not None and c not in item[2]]
            if missing:
                raise SchemaError(f"missing required columns {missing}")
            checked = True
        try:
            rec = _to_record(row, cols, default_split)
        except (KeyError, ValueError) as exc:
            if isinstance(exc, KeyError) and fmt in ("jsonl", "line-delimited"):
                raise SchemaError(f"line {line}: missing field {exc}") from None
            rejects.append(Reject(line, str(exc)))
            continue
        if lo is not None and not lo <= rec.score <= hi:
            rejects.append(Reject(line, f"score {rec.score} outside range [{lo}, {hi}]"))
            continue
        records.append(rec)
    if not records:
        raise InputError(f"no valid records in {path}")
    if score_range is None:
        scores = [r.score for r in records]
        score_range = (min(scores), max(scores))
    return Corpus(records, tuple(score_range), rejects)


def _to_record(row: Mapping, cols: Mapping, default_split) -> EssayRecord:
    text = str(row[cols["full_text"]])
    if not text.strip():
        raise ValueError("empty essay text")
    raw_score = str(row[cols["score"]]).strip()
    try:
        score = int(raw_score)
    except ValueError:
        raise ValueError(f"unparseable score {raw_score!r}") from None
    raw_grade = str(row[cols["grade"]]).strip()
    try:
        grade = int(float(raw_grade))
    except ValueError:
        raise ValueError(f"unparseable grade {raw_grade!r}") from None
    if grade not in GRADES:
        raise ValueError(f"grade {grade} not in {GRADES}")
    split = default_split if cols.get("split") is None else str(row[cols["split"]]).strip().lower()
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return EssayRecord(str(row[cols["essay_id"]]), text, score, grade, split)


def serialize(corpus: Corpus, path, fmt: str = "csv") -> None:
    path = Path(path)
    if fmt in ("csv", "comma-separated"):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIELDS)
            for r in corpus.records:
                w.writerow([getattr(r, f) for f in FIELDS])
    elif fmt in ("jsonl", "line-delimited"):
        with open(path, "w", encoding="utf-8") as fh:
            for r in corpus.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    else:
        raise InputError(f"unknown corpus format {fmt!r}")


def format_rejects(rejects: Sequence[Reject], fmt: str = "text") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["line", "reason"])
        w.writerows([(r.line, r.reason) for r in rejects])
        return buf.getvalue()
    return "".join(f"line {r.line}: {r.reason}\n" for r in rejects)


# ---------------------------------------------------------------- vocabulary


def split_tokens(text: str) -> list[str]:
    """Lowercased alphanumeric runs; every other non-space character stands alone."""
    return _TOKEN.findall(text.lower())


class Vocab:
    """Token-to-id map with PAD=0, UNK=1, BOS=2, EOS=3 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 2) -> "Vocab":
        """Most frequent first, ties alphabetical; tokens seen fewer than ``min_count`` times drop."""
        counts = Counter()
        for text in texts:
            counts.update(split_tokens(text))
        keep = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                      key=lambda t: (-counts[t], t))
        return cls(keep)

    @classmethod
    def from_corpus(cls, corpus: Corpus, min_count: int = 2) -> "Vocab":
        return cls.build((r.full_text for r in corpus.records if r.split == "train"), min_count)

    def dumps(self) -> str:
        return "".join(t + "\n" for t in self.itos[len(RESERVED):])

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        return cls(line for line in text.split("\n") if line)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [BOS] + [vocab[t] for t in split_tokens(text)] + [EOS]


# ---------------------------------------------------------------- statistics


@dataclass
class LengthRow:
    split: str
    grade: object
    count: int
    mean_words: Optional[float]


def word_count(text: str) -> int:
    return len(text.split())


def length_stats(corpus: Corpus) -> list[LengthRow]:
    """Per split and grade essay counts and mean whitespace word counts, plus totals."""
    if not corpus.records:
        raise InputError("length statistics need a non-empty corpus")
    rows = []
    for split in SPLITS:
        recs = [r for r in corpus.records if r.split == split]
        if not recs:
            continue
        for g in GRADES:
            wc = [word_count(r.full_text) for r in recs if r.grade == g]
            rows.append(LengthRow(split, g, len(wc), float(np.mean(wc)) if wc else None))
        wc = [word_count(r.full_text) for r in recs]
        rows.append(LengthRow(split, "total", len(wc), float(np.mean(wc))))
    return rows


def format_length_stats(rows: Sequence[LengthRow], fmt: str = "text") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "grade", "count", "avg_words"])
        for r in rows:
            w.writerow([r.split, r.grade, r.count, "" if r.mean_words is None else f"{r.mean_words:.1f}"])
        return buf.getvalue()
    lines = [f"{'split':<6} {'grade':>5} {'count':>7} {'avg words':>9}"]
    for r in rows:
        avg = "-" if r.mean_words is None else f"{r.mean_words:.1f}"
        lines.append(f"{r.split:<6} {str(r.grade):>5} {r.count:>7} {avg:>9}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- prompting

PROMPT_HEADER = "Assign a **Score** to the **Essay** using the **Rubric** provided. "


def render_prompt(rubric: str, essay: str, score: Optional[int] = None) -> tuple[str, str]:
    """Return the (user, assistant) pair for instruction-style scoring."""
    if not rubric or not essay:
        raise InputError("rubric and essay must both be non-empty")
    user = f"{PROMPT_HEADER}\n\n**Rubric**: {rubric}\n\n**Essay**: {essay}"
    assistant = "" if score is None else f"**Score**: {score}"
    return user, assistant


# ---------------------------------------------------------------- synthetic data

KEYWORDS = ("evidence", "because", "therefore", "however", "example",
            "argument", "conclusion", "furthermore")
_SYLLABLES = ("ba", "ko", "ri", "tu", "me", "sa", "lo", "ne", "vi", "da", "pe", "gu")


def _filler_words(n: int, rng: np.random.Generator) -> list[str]:
    words = set()
    while len(words) < n:
        k = int(rng.integers(2, 4))
        words.add("".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=k)))
    return sorted(words)


def density_score(density: float, n_scores: int = 4, step: float = 0.05) -> int:
    """Score 1..n_scores from keyword density in buckets of width ``step``."""
    return 1 + min(int(density / step), n_scores - 1)


def synthetic_corpus(n_train: int = 2000, n_test: int = 500, seed: int = 0, n_scores: int = 4,
                     min_words: int = 47, max_words: int = 397, step: float = 0.05,
                     n_filler: int = 300) -> Corpus:
    """Keyword-seeded essays whose score is the bucketed keyword density.

    Keywords are spread one per stratum of the essay so any long enough
    window sees roughly the same density as the whole text.
    """
    rng = np.random.default_rng(seed)
    filler = _filler_words(n_filler, rng)
    records = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        grades = GRADES if split == "train" else (6, 8, 10)
        target = int(rng.integers(1, n_scores + 1))
        lo, hi = (target - 1) * step, target * step
        density = rng.uniform(lo + 0.2 * step, hi - 0.2 * step)
        n = int(rng.integers(min_words, max_words + 1))
        k = int(round(density * n))
        words = [filler[j] for j in rng.integers(0, len(filler), size=n)]
        edges = np.linspace(0, n, k + 1)
        for s in range(k):
            pos = int(rng.integers(int(edges[s]), max(int(edges[s]) + 1, int(edges[s + 1]))))
            words[pos] = KEYWORDS[int(rng.integers(0, len(KEYWORDS)))]
        text = " ".join(words) + "."
        records.append(EssayRecord(f"syn{i:05d}", text, density_score(k / n, n_scores, step),
                                   int(grades[int(rng.integers(0, len(grades)))]), split))
    return Corpus(records, (1, n_scores))
