"""Essay-score classifier: embedding, a block stack of one architecture,
single-position pooling and a randomly initialised classification head."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .attention import (LORA_TARGETS, AttentionConfig, LlamaBlock, LoraAdapter, build_mask,
                        lora_attach, segment_forward)
from .autograd import Tensor
from .errors import ConfigurationError, InputError
from .ssm import MambaBlock, freeze_partition

ARCHITECTURES = ("full-attention", "sliding-window", "segment-recurrent", "ssm")
CAUSAL = {"full-attention": True, "sliding-window": False, "segment-recurrent": True, "ssm": True}


@dataclass
class ModelConfig:
    architecture: str
    vocab_size: int
    n_classes: int
    d_model: int = 32
    depth: int = 1
    n_heads: int = 2
    d_ff: Optional[int] = None
    window_radius: Optional[int] = None
    global_token_ids: tuple = (0,)
    segment_length: Optional[int] = None
    state_dim: int = 8
    d_inner: Optional[int] = None
    conv_width: int = 4
    scan_chunk: Optional[int] = 32
    max_length: int = 8192
    pooling: Optional[str] = None
    rope_base: Optional[float] = 10000.0
    lora: Optional[tuple] = None
    ssm_partial_freeze: bool = True

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if self.max_length < 1 or self.vocab_size < 1 or self.d_model < 1 or self.depth < 1:
            raise ConfigurationError("max_length, vocab_size, d_model and depth must be positive")
        if self.architecture == "sliding-window" and not self.window_radius:
            raise ConfigurationError("sliding-window architecture needs window_radius")
        if self.architecture == "segment-recurrent" and not self.segment_length:
            raise ConfigurationError("segment-recurrent architecture needs segment_length")
        if self.architecture == "ssm" and self.lora:
            raise ConfigurationError("LoRA adapters attach to attention projections; ssm has none")
        if self.pooling is None:
            self.pooling = "last-token" if CAUSAL[self.architecture] else "first-token"
        if self.pooling not in ("first-token", "last-token"):
            raise ConfigurationError(f"unknown pooling {self.pooling!r}")
        self.global_token_ids = tuple(self.global_token_ids)
        if self.lora is not None:
            self.lora = tuple(self.lora)
        if self.architecture != "ssm":
            self.attention_config()  # validates head split

    def attention_config(self) -> AttentionConfig:
        arch = self.architecture
        return AttentionConfig(
            d_model=self.d_model, n_heads=self.n_heads,
            window_radius=self.window_radius if arch == "sliding-window" else None,
            global_token_ids=frozenset(self.global_token_ids) if arch == "sliding-window" else frozenset(),
            causal=CAUSAL[arch], rope_base=self.rope_base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_token_ids"] = list(self.global_token_ids)
        d["lora"] = None if self.lora is None else list(self.lora)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class Classifier:
    def __init__(self, config: ModelConfig, embedding: Tensor, blocks: list, head_w: Tensor, head_b: Tensor,
                 seed: int = 0):
        self.config = config
        self.embedding = embedding
        self.blocks = blocks
        self.head_w = head_w
        self.head_b = head_b
        self.seed = seed

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding)]
        for i, b in enumerate(self.blocks):
            out += b.named_parameters(f"blocks.{i}.")
        out += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state(self) -> dict:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict) -> None:
        for n, t in self.named_parameters():
            t.data = state[n].copy()

    def __call__(self, token_ids) -> Tensor:
        return forward_logits(self, token_ids)


def parameter_census(model: Classifier) -> dict:
    """Parameter counts per component; ``total`` is their sum."""
    census = {"embedding": model.embedding.data.size}
    for i, b in enumerate(model.blocks):
        census[f"block{i}"] = sum(t.data.size for _, t in b.named_parameters())
    census["head"] = model.head_w.data.size + model.head_b.data.size
    census["total"] = sum(census.values())
    return census


def parameter_count(model: Classifier) -> int:
    return sum(t.data.size for t in model.parameters())


def build_classifier(config: ModelConfig, seed: int = 0) -> Classifier:
    """Deterministically initialise a classifier for ``config`` from ``seed``."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    embedding = ag.parameter(rng.normal(0.0, 1.0, size=(config.vocab_size, d)))
    blocks = []
    for _ in range(config.depth):
        if config.architecture == "ssm":
            blocks.append(MambaBlock(d, config.d_inner or 2 * d, config.state_dim,
                                     config.conv_width, rng, chunk=config.scan_chunk))
        else:
            blocks.append(LlamaBlock(config.attention_config(), config.d_ff or 2 * d, rng))
    bound = 1.0 / math.sqrt(d)
    head_w = ag.parameter(rng.uniform(-bound, bound, size=(d, config.n_classes)))
    head_b = ag.parameter(rng.uniform(-bound, bound, size=config.n_classes))
    model = Classifier(config, embedding, blocks, head_w, head_b, seed)
    if config.lora is not None:
        rank, alpha = config.lora
        for t in model.parameters():
            t.requires_grad = False
        for b in blocks:
            for target in LORA_TARGETS:
                lora_attach(b, LoraAdapter.create(d, d, int(rank), float(alpha), target, rng))
        head_w.requires_grad = head_b.requires_grad = True
    if config.architecture == "ssm" and config.ssm_partial_freeze:
        freeze_partition(model)
    return model


def _run_blocks(model: Classifier, h: Tensor) -> Tensor:
    cfg = model.config
    T = h.shape[0]
    if cfg.architecture == "ssm":
        for b in model.blocks:
            h = h + b(h)
        return h
    if cfg.architecture == "segment-recurrent":
        L = cfg.segment_length
        segments = [h[s:s + L] for s in range(0, T, L)]
        outs = segment_forward(segments, model.blocks, L)
        return outs[0] if len(outs) == 1 else ag.concat(outs, axis=0)
    acfg = cfg.attention_config()
    if acfg.global_token_ids:
        acfg = AttentionConfig(acfg.d_model, acfg.n_heads, acfg.window_radius,
                               frozenset(g for g in acfg.global_token_ids if g < T),
                               acfg.causal, acfg.rope_base)
    mask = build_mask(T, acfg)
    for b in model.blocks:
        h = b(h, mask=mask)
    return h


def forward_logits(model: Classifier, token_ids: Sequence[int]) -> Tensor:
    """Class logits [K] for one token sequence (truncated to ``max_length``)."""
    ids = list(token_ids)[: model.config.max_length]
    if not ids:
        raise InputError("cannot score an empty token sequence")
    h = ag.embedding_lookup(model.embedding, ids)
    h = _run_blocks(model, h)
    pooled = h[0:1] if model.config.pooling == "first-token" else h[len(ids) - 1:len(ids)]
    return (pooled @ model.head_w + model.head_b).reshape(model.config.n_classes)


def predict_score(model, token_ids: Sequence[int], score_offset: int) -> int:
    """argmax of the logits plus the minimum rubric score; ties go to the lower class."""
    logits = model(token_ids)
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return int(np.argmax(data)) + int(score_offset)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"LSCK"
VERSION = 1


def save_checkpoint(model: Classifier, path) -> bytes:
    """Write a versioned binary checkpoint and return its bytes.

    Layout (little-endian): magic, u16 version, u32 + JSON config echo,
    i64 seed, u32 tensor count, then per tensor u16 + name, u8 trainable
    flag, u8 ndim, u32 dims, float64 data.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<q", model.seed)]
    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params:
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", int(t.requires_grad), t.ndim),
                  struct.pack(f"<{t.ndim}I", *t.shape), t.data.astype("<f8").tobytes()]
    blob = b"".join(parts)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path) -> Classifier:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise InputError(f"{path} is not a longscore checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", blob, 6)
    off = 10
    cfg = json.loads(blob[off:off + n])
    off += n
    (seed,) = struct.unpack_from("<q", blob, off)
    off += 8
    config = ModelConfig.from_dict(cfg)
    model = build_classifier(config, seed)
    by_name = dict(model.named_parameters())
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + ln].decode()
        off += ln
        flag, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        t = by_name[name]
        if t.shape != tuple(shape):
            raise InputError(f"checkpoint tensor {name} has shape {shape}, model expects {t.shape}")
        t.data = data.astype(np.float64).copy()
        t.requires_grad = bool(flag)
    return model

