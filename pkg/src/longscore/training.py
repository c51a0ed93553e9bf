"""Fine-tuning loop: stratified dev split, AdamW with decoupled weight decay,
linear learning-rate decay, and early stopping on development-set QWK."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .corpus import Corpus, EssayRecord, Vocab, tokenize
from .errors import ConfigurationError, InputError, TrainingAborted, UndefinedKappaError
from .metrics import KappaReport, RatingTable, build_matrices, per_group_report, weighted_kappa
from .model import Classifier, predict_score

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-6
    epochs: int = 10
    batch_size: int = 4
    # any batch holding a sequence longer than this is split into singletons
    long_threshold: int = 2048
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    dev_fraction: float = 0.10
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.dev_fraction < 1:
            raise ConfigurationError("dev_fraction must lie in (0, 1)")
        if self.lr <= 0 or self.patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("lr, patience, epochs and batch_size must be positive")

    @classmethod
    def for_architecture(cls, architecture: str, **overrides) -> "TrainConfig":
        """Defaults per architecture; the ssm recipe uses lr 1e-5 and batches of 8."""
        base = cls(lr=1e-5, batch_size=8) if architecture == "ssm" else cls()
        return replace(base, **overrides)


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def linear_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 - step / total_steps), reaching exactly 0 at the final step."""
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps)


def adamw_step(params: Sequence[tuple[str, ag.Tensor]], state: OptimState, lr: float,
               config: TrainConfig) -> None:
    """One AdamW update of every grad-requiring parameter in ``params``.

    Decay is decoupled: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.
    A missing gradient counts as zero; a non-finite one aborts training.
    """
    b1, b2 = config.betas
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params:
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingAborted(f"non-finite gradient in {name} ({bad} entries) at step {state.t}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * ((m / c1) / (np.sqrt(v / c2) + config.eps) + config.weight_decay * p.data)


def split_dev(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Score-stratified train/dev split.

    The dev size is round(fraction * N); per-score quotas use largest
    remainders so each score's dev share is within one record of ``fraction``.
    """
    records = list(corpus.records)
    if len(records) < 10:
        raise InputError("a dev split needs at least 10 records")
    n_dev = int(round(fraction * len(records)))
    if n_dev < 1 or n_dev >= len(records):
        raise ConfigurationError(f"dev fraction {fraction} gives {n_dev} of {len(records)} records")
    rng = np.random.default_rng(seed)
    by_score: dict = {}
    for i, r in enumerate(records):
        by_score.setdefault(r.score, []).append(i)
    scores = sorted(by_score)
    exact = {s: fraction * len(by_score[s]) for s in scores}
    quota = {s: int(math.floor(exact[s])) for s in scores}
    leftover = n_dev - sum(quota.values())
    for s in sorted(scores, key=lambda s: (-(exact[s] - quota[s]), s))[:leftover]:
        quota[s] += 1
    dev_idx = set()
    for s in scores:
        idx = by_score[s]
        perm = rng.permutation(len(idx))
        dev_idx.update(idx[j] for j in perm[:quota[s]])
    train = [r for i, r in enumerate(records) if i not in dev_idx]
    dev = [r for i, r in enumerate(records) if i in dev_idx]
    return corpus.subset(train), corpus.subset(dev)


def make_batches(order: Sequence[int], lengths: Sequence[int], batch_size: int,
                 long_threshold: int) -> list[list[int]]:
    batches = []
    for s in range(0, len(order), batch_size):
        batch = [int(i) for i in order[s:s + batch_size]]
        if any(lengths[i] > long_threshold for i in batch):
            batches += [[i] for i in batch]
        else:
            batches.append(batch)
    return batches


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_qwk: Optional[float]
    lr: float

    def line(self) -> str:
        q = "undefined" if self.dev_qwk is None else repr(self.dev_qwk)
        return f"epoch={self.epoch} train_loss={self.train_loss!r} dev_qwk={q} lr={self.lr!r}"


@dataclass
class TrainReport:
    epochs: list
    best_epoch: Optional[int]
    stopped_epoch: int
    best_state: dict

    @property
    def dev_curve(self) -> list:
        return [e.dev_qwk for e in self.epochs]

    def to_log(self) -> str:
        lines = [e.line() for e in self.epochs]
        lines.append(f"best_epoch={self.best_epoch} stopped_epoch={self.stopped_epoch}")
        return "\n".join(lines) + "\n"


def encode(records: Sequence[EssayRecord], vocab: Vocab, max_length: int) -> list[list[int]]:
    return [tokenize(r.full_text, vocab)[:max_length] for r in records]


def dev_kappa(model, ids: Sequence[Sequence[int]], scores: Sequence[int], score_range) -> Optional[float]:
    preds = [predict_score(model, x, score_range[0]) for x in ids]
    try:
        return weighted_kappa(build_matrices(RatingTable.from_columns(scores, preds, score_range)))
    except UndefinedKappaError:
        return None


def train(model: Classifier, corpus: Corpus, config: TrainConfig, vocab: Vocab,
          dev_metric: Optional[Callable[[Classifier, int], Optional[float]]] = None,
          progress: Optional[Callable[[EpochLog], None]] = None) -> TrainReport:
    """Fine-tune ``model`` on the train split of ``corpus``; return the best-dev-QWK state.

    ``dev_metric(model, epoch)`` replaces the dev QWK computation when given.
    An undefined dev kappa never counts as an improvement.
    """
    lo, hi = corpus.score_range
    if hi - lo + 1 != model.config.n_classes:
        raise ConfigurationError(
            f"corpus has {hi - lo + 1} score classes, model head has {model.config.n_classes}")
    train_part, dev_part = split_dev(corpus, config.dev_fraction, config.seed)
    max_len = model.config.max_length
    X = encode(train_part.records, vocab, max_len)
    y = [r.score - lo for r in train_part.records]
    dev_X = encode(dev_part.records, vocab, max_len)
    dev_y = [r.score for r in dev_part.records]
    lengths = [len(x) for x in X]

    rng = np.random.default_rng(config.seed)
    plans = [make_batches(rng.permutation(len(X)), lengths, config.batch_size, config.long_threshold)
             for _ in range(config.epochs)]
    total_steps = sum(len(p) for p in plans)
    state = OptimState()
    params = model.trainable()
    step = 0
    epochs, best_q, best_epoch, best_state, stale = [], None, None, model.state(), 0

    for epoch, plan in enumerate(plans, 1):
        losses = []
        lr = config.lr
        for batch in plan:
            lr = linear_lr(step, total_steps, config.lr)
            model.zero_grad()
            with ag.Tape() as tape:
                logits = ag.stack([model(X[i]) for i in batch])
                loss = ag.cross_entropy(logits, [y[i] for i in batch])
                ag.backward(loss, tape)
            adamw_step(params, state, lr, config)
            losses.append(loss.item())
            step += 1
        q = dev_metric(model, epoch) if dev_metric else dev_kappa(model, dev_X, dev_y, (lo, hi))
        entry = EpochLog(epoch, float(np.mean(losses)), q, lr)
        epochs.append(entry)
        log.info(entry.line())
        if progress:
            progress(entry)
        if q is not None and (best_q is None or q > best_q):
            best_q, best_epoch, best_state, stale = q, epoch, model.state(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.zero_grad()
    model.load_state(best_state)
    return TrainReport(epochs, best_epoch, epochs[-1].epoch, best_state)


# ---------------------------------------------------------------- evaluation


class EchoModel:
    """Test stub returning one-hot logits at each essay's human score."""

    def __init__(self, corpus: Corpus, vocab: Vocab, max_length: int = 8192):
        self.n_classes = corpus.n_classes
        self.lookup = {tuple(tokenize(r.full_text, vocab)[:max_length]): r.score - corpus.score_range[0]
                       for r in corpus.records}
        self.max_length = max_length

    def __call__(self, token_ids):
        logits = np.zeros(self.n_classes)
        logits[self.lookup[tuple(token_ids)[: self.max_length]]] = 1.0
        return logits


class ConstantModel:
    """Test stub that always predicts class ``index``."""

    def __init__(self, n_classes: int, index: int = 0):
        self.logits = np.zeros(n_classes)
        self.logits[index] = 1.0

    def __call__(self, token_ids):
        return self.logits


def evaluate(model, test: Corpus, vocab: Vocab, name: str = "model",
             max_length: int = 8192) -> tuple[RatingTable, KappaReport]:
    """Score every test essay; rater 1 is the human score, rater 2 the model."""
    if not test.records:
        raise InputError("evaluation corpus is empty")
    lo = test.score_range[0]
    preds = [predict_score(model, ids, lo) for ids in encode(test.records, vocab, max_length)]
    table = RatingTable.from_columns([r.score for r in test.records], preds, test.score_range,
                                     [r.grade for r in test.records])
    report = per_group_report(table, model=name)
    for label in report.undefined:
        log.warning("kappa undefined for %s: degenerate rating distribution", label)
    return table, report
