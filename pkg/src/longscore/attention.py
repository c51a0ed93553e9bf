"""Attention layers: masks, rotary embeddings, multi-head attention, the
decoder block, segment-level recurrence and low-rank adapters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractError, DimensionError, InputError

LORA_TARGETS = ("L_q", "L_k", "L_v")
_TARGET_WEIGHT = {"L_q": "W_q", "L_k": "W_k", "L_v": "W_v"}


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    window_radius: Optional[int] = None
    global_token_ids: frozenset = field(default_factory=frozenset)
    causal: bool = False
    # None switches rotary embeddings off
    rope_base: Optional[float] = 10000.0

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible into {self.n_heads} heads")
        if self.window_radius is not None and self.window_radius < 1:
            raise ConfigurationError(f"window_radius must be >= 1, got {self.window_radius}")
        if self.rope_base is not None and self.rope_base <= 0:
            raise ConfigurationError("rope_base must be positive")
        object.__setattr__(self, "global_token_ids", frozenset(self.global_token_ids))

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def build_mask(T: int, config: AttentionConfig) -> np.ndarray:
    """Boolean T x T mask; entry (i, j) is True when query i may attend key j.

    In sliding-window mode a pair is allowed when ``|i - j| <= window_radius``
    or either side is a global position; causal mode additionally requires
    ``j <= i``, which turns the window into a backward-only one.
    """
    if T < 1:
        raise InputError("sequence length must be >= 1")
    bad = [g for g in config.global_token_ids if not 0 <= g < T]
    if bad:
        raise ConfigurationError(f"global positions {sorted(bad)} outside sequence of length {T}")
    idx = np.arange(T)
    if config.window_radius is None:
        mask = np.ones((T, T), dtype=bool)
    else:
        mask = np.abs(idx[:, None] - idx[None, :]) <= config.window_radius
        g = np.zeros(T, dtype=bool)
        g[list(config.global_token_ids)] = True
        mask |= g[:, None] | g[None, :]
    if config.causal:
        mask &= idx[None, :] <= idx[:, None]
    return mask


def rope_apply(x: Tensor, positions: Sequence[int], base: float = 10000.0) -> Tensor:
    """Rotary position embedding over the last axis of ``x`` (shape [..., T, d_head])."""
    return ag.rope(x, positions, base)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    T, d = x.shape
    return x.reshape(T, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    H, T, dh = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * dh)


def _rope_heads(x: Tensor, positions, n_heads: int, base: float) -> Tensor:
    return _merge_heads(ag.rope(_split_heads(x, n_heads), positions, base))


def mha(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray], n_heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated.

    ``mask`` is a [T_q, T_k] boolean array (None allows everything). A query
    row with no allowed key is an error rather than a zero vector.
    """
    Tq, d = q.shape
    Tk = k.shape[0]
    if k.shape != (Tk, d) or v.shape != (Tk, d):
        raise DimensionError(f"q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    if d % n_heads:
        raise ConfigurationError(f"d={d} is not divisible into {n_heads} heads")
    if mask is None:
        mask = np.ones((Tq, Tk), dtype=bool)
    elif mask.shape != (Tq, Tk):
        raise DimensionError(f"mask {mask.shape} does not cover {(Tq, Tk)}")
    dh = d // n_heads
    qh = _split_heads(q, n_heads)
    kt = k.reshape(Tk, n_heads, dh).transpose(1, 2, 0)
    scores = (qh @ kt) * (1.0 / math.sqrt(dh))
    weights = ag.masked_softmax(scores, mask)
    return _merge_heads(weights @ _split_heads(v, n_heads))


# ---------------------------------------------------------------- LoRA


@dataclass
class LoraAdapter:
    """Low-rank update ``(alpha / rank) * down @ up`` for one attention projection."""

    rank: int
    alpha: float
    down: Tensor
    up: Tensor
    target: str

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int, alpha: float, target: str,
               rng: np.random.Generator) -> "LoraAdapter":
        if target not in LORA_TARGETS:
            raise ConfigurationError(f"LoRA target must be one of {LORA_TARGETS}, got {target!r}")
        if not 1 <= rank <= min(d_in, d_out):
            raise ConfigurationError(f"LoRA rank {rank} outside [1, {min(d_in, d_out)}]")
        down = ag.parameter(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, rank)))
        up = ag.parameter(np.zeros((rank, d_out)))
        return cls(rank, float(alpha), down, up, target)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def effective_weight(self, W: Tensor) -> Tensor:
        return W + (self.down @ self.up) * self.scale


def lora_attach(layer: "LlamaBlock", adapter: LoraAdapter) -> None:
    """Attach ``adapter`` to one of the layer's query/key/value projections.

    The base weight is frozen; only the adapter's ``down``/``up`` train.
    """
    if adapter.target not in LORA_TARGETS:
        raise ConfigurationError(f"LoRA target must be one of {LORA_TARGETS}")
    if adapter.target in layer.lora:
        raise ConfigurationError(f"a LoRA adapter is already attached to {adapter.target}")
    W = getattr(layer, _TARGET_WEIGHT[adapter.target])
    if adapter.down.shape[0] != W.shape[0] or adapter.up.shape[1] != W.shape[1]:
        raise DimensionError(f"adapter {adapter.down.shape}x{adapter.up.shape} does not fit {W.shape}")
    if adapter.rank > layer.config.d_model:
        raise ConfigurationError("LoRA rank exceeds d_model")
    W.requires_grad = False
    layer.lora[adapter.target] = adapter


# ---------------------------------------------------------------- decoder block


class LlamaBlock:
    """One decoder layer: pre-norm attention and a SwiGLU feed-forward, each residual."""

    def __init__(self, config: AttentionConfig, d_ff: int, rng: np.random.Generator):
        d = config.d_model
        self.config = config
        self.d_ff = d_ff

        def lin(n_in, n_out):
            return ag.parameter(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))

        self.attn_norm = ag.parameter(np.ones(d))
        self.W_q, self.W_k, self.W_v, self.W_o = lin(d, d), lin(d, d), lin(d, d), lin(d, d)
        self.ffn_norm = ag.parameter(np.ones(d))
        self.W_gate, self.W_up, self.W_down = lin(d, d_ff), lin(d, d_ff), lin(d_ff, d)
        self.lora: dict[str, LoraAdapter] = {}

    _WEIGHTS = ("attn_norm", "W_q", "W_k", "W_v", "W_o", "ffn_norm", "W_gate", "W_up", "W_down")

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + name, getattr(self, name)) for name in self._WEIGHTS]
        for target in LORA_TARGETS:
            if target in self.lora:
                a = self.lora[target]
                out += [(f"{prefix}lora.{target}.down", a.down), (f"{prefix}lora.{target}.up", a.up)]
        return out

    def weight(self, target: str) -> Tensor:
        W = getattr(self, _TARGET_WEIGHT[target])
        adapter = self.lora.get(target)
        return W if adapter is None else adapter.effective_weight(W)

    def __call__(self, x, mask=None, positions=None, memory=None, memory_positions=None):
        return llama_block(x, self, mask=mask, positions=positions,
                           memory=memory, memory_positions=memory_positions)


def llama_block(x: Tensor, block: LlamaBlock, mask: Optional[np.ndarray] = None,
                positions: Optional[Sequence[int]] = None, memory: Optional[Tensor] = None,
                memory_positions: Optional[Sequence[int]] = None) -> Tensor:
    """Apply one decoder layer to ``x`` of shape [T, d_model].

    With ``memory`` (cached, gradient-free states of the previous segment) the
    keys and values are computed from ``concat(memory, x)`` while the queries
    come from ``x`` alone; ``mask`` must then be [T, M + T].
    """
    cfg = block.config
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise DimensionError(f"block expects [T, {cfg.d_model}], got {x.shape}")
    T = x.shape[0]
    if positions is None:
        positions = np.arange(T)
    if mask is None:
        if memory is not None:
            raise ContractError("a memory-augmented block call needs an explicit mask")
        mask = build_mask(T, cfg)

    h = ag.rmsnorm(x, block.attn_norm)
    q = h @ block.weight("L_q")
    if memory is None:
        kv_in, kv_pos = h, positions
    else:
        if memory.shape[1] != cfg.d_model:
            raise DimensionError(f"memory {memory.shape} does not match d_model {cfg.d_model}")
        kv_in = ag.concat([ag.rmsnorm(memory, block.attn_norm), h], axis=0)
        kv_pos = np.concatenate([np.asarray(memory_positions), np.asarray(positions)])
    k = kv_in @ block.weight("L_k")
    v = kv_in @ block.weight("L_v")
    if cfg.rope_base is not None:
        q = _rope_heads(q, positions, cfg.n_heads, cfg.rope_base)
        k = _rope_heads(k, kv_pos, cfg.n_heads, cfg.rope_base)
    y = x + mha(q, k, v, mask, cfg.n_heads) @ block.W_o

    z = ag.rmsnorm(y, block.ffn_norm)
    ffn = (ag.silu(z @ block.W_gate) * (z @ block.W_up)) @ block.W_down
    return y + ffn


# ---------------------------------------------------------------- segment recurrence


def receptive_field_bound(segment_length: int, depth: int) -> int:
    """How many earlier tokens a segment-recurrent stack can reach back."""
    return segment_length * depth


@dataclass
class SegmentMemory:
    """Per-layer hidden states of the previous segment, stored without gradients."""

    segment_length: int
    depth: int
    states: list = field(default_factory=list)
    positions: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.segment_length < 1 or self.depth < 1:
            raise ConfigurationError("segment_length and depth must be >= 1")
        if not self.states:
            self.states = [None] * self.depth

    @property
    def empty(self) -> bool:
        return self.positions is None

    def update(self, layer_inputs: Sequence[Tensor], positions: np.ndarray) -> None:
        self.states = [h.detach() for h in layer_inputs]
        self.positions = np.asarray(positions)


def segment_mask(query_pos: np.ndarray, key_pos: np.ndarray, segment_length: int) -> np.ndarray:
    """Query at absolute position p sees keys at positions p - L .. p."""
    diff = query_pos[:, None] - key_pos[None, :]
    return (diff >= 0) & (diff <= segment_length)


def segment_forward(segments: Sequence[Tensor], layers: Sequence[LlamaBlock],
                    segment_length: Optional[int] = None,
                    memory: Optional[SegmentMemory] = None) -> list[Tensor]:
    """Run a stack of decoder layers over consecutive segments with recurrence.

    For layer n and segment tau+1 the keys and values come from the
    concatenation of the stop-gradient layer-(n-1) states of segment tau and
    the current layer-(n-1) states. Each query looks back at most
    ``segment_length`` positions per layer, so the stack reaches at most
    ``segment_length * depth`` earlier tokens.
    """
    if not segments:
        raise InputError("segment_forward needs at least one segment")
    L = segment_length if segment_length is not None else segments[0].shape[0]
    if memory is None:
        memory = SegmentMemory(L, len(layers))
    outputs = []
    start = 0 if memory.empty else int(memory.positions[-1]) + 1
    for seg in segments:
        T = seg.shape[0]
        if T < 1 or T > L:
            raise InputError(f"segment length {T} outside [1, {L}]")
        pos = np.arange(start, start + T)
        key_pos = pos if memory.empty else np.concatenate([memory.positions, pos])
        mask = segment_mask(pos, key_pos, L)
        h = seg
        inputs = []
        for n, layer in enumerate(layers):
            inputs.append(h)
            h = llama_block(h, layer, mask=mask, positions=pos,
                            memory=memory.states[n], memory_positions=memory.positions)
        memory.update(inputs, pos)
        outputs.append(h)
        start += T
    return outputs


# ---------------------------------------------------------------- forward-only kernels


def full_attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int = 1,
                           causal: bool = False, block: int = 512) -> np.ndarray:
    """Dense attention on raw arrays, processed in query blocks to bound memory."""
    T, d = q.shape
    dh = d // n_heads
    qh = q.reshape(T, n_heads, dh).transpose(1, 0, 2) / math.sqrt(dh)
    kh = k.reshape(-1, n_heads, dh).transpose(1, 2, 0)
    vh = v.reshape(-1, n_heads, dh).transpose(1, 0, 2)
    out = np.empty((n_heads, T, dh))
    cols = np.arange(k.shape[0])
    for s in range(0, T, block):
        sc = qh[:, s:s + block] @ kh
        if causal:
            rows = np.arange(s, min(s + block, T))
            sc = np.where(cols[None, :] <= rows[:, None], sc, -np.inf)
        sc = np.exp(sc - sc.max(axis=-1, keepdims=True))
        sc /= sc.sum(axis=-1, keepdims=True)
        out[:, s:s + block] = sc @ vh
    return out.transpose(1, 0, 2).reshape(T, d)


def sliding_window_attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                                     radius: int, global_ids: Iterable[int] = (),
                                     n_heads: int = 1, causal: bool = False,
                                     block: int = 512) -> np.ndarray:
    """Banded attention in O(T * radius) work; agrees with ``mha`` under ``build_mask``.

    Queries are processed in fixed-size blocks so the working set does not
    grow with T.
    """
    T, d = q.shape
    dh = d // n_heads
    W = 2 * radius + 1
    G = np.array(sorted(set(global_ids)), dtype=np.int64)
    qh = q.reshape(T, n_heads, dh) / math.sqrt(dh)
    kh = k.reshape(T, n_heads, dh)
    vh = v.reshape(T, n_heads, dh)
    pad = np.zeros((radius, n_heads, dh))
    kp, vp = np.concatenate([pad, kh, pad]), np.concatenate([pad, vh, pad])
    is_global = np.zeros(T + 2 * radius, dtype=bool)
    is_global[G + radius] = True
    kg, vg = kh[G], vh[G]
    out = np.empty((T, n_heads, dh))
    for s in range(0, T, block):
        e = min(s + block, T)
        rows = np.arange(s, e)
        kwin = np.lib.stride_tricks.sliding_window_view(kp[s:e + 2 * radius], W, axis=0)
        vwin = np.lib.stride_tricks.sliding_window_view(vp[s:e + 2 * radius], W, axis=0)
        # window slot w of query t holds key t - radius + w
        key = rows[:, None] - radius + np.arange(W)[None, :]
        valid = (key >= 0) & (key < T) & ~is_global[key + radius]
        if causal:
            valid &= key <= rows[:, None]
        sw = np.einsum("thd,thdw->thw", qh[s:e], kwin)
        sw = np.where(valid[:, None, :], sw, -np.inf)
        if G.size:
            sg = np.einsum("thd,ghd->thg", qh[s:e], kg)
            if causal:
                sg = np.where(G[None, None, :] <= rows[:, None, None], sg, -np.inf)
            m = np.maximum(sw.max(axis=-1), sg.max(axis=-1))[..., None]
            ew, eg = np.exp(sw - m), np.exp(sg - m)
            z = ew.sum(axis=-1, keepdims=True) + eg.sum(axis=-1, keepdims=True)
            out[s:e] = (np.einsum("thw,thdw->thd", ew, vwin) + np.einsum("thg,ghd->thd", eg, vg)) / z
        else:
            ew = np.exp(sw - sw.max(axis=-1, keepdims=True))
            out[s:e] = np.einsum("thw,thdw->thd", ew, vwin) / ew.sum(axis=-1, keepdims=True)
    out = out.reshape(T, d)
    # global queries attend everywhere (up to themselves when causal)
    for g in G:
        hi = g + 1 if causal else T
        out[g] = full_attention_forward(q[g:g + 1], k[:hi], v[:hi], n_heads)[0]
    return out
