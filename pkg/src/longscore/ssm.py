"""Diagonal state-space scan and the Mamba-style layer built around it."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractError, DimensionError

MAX_CONV_WIDTH = 16


@dataclass
class SSMParams:
    """Per-channel diagonal transition ``A``, input map ``B`` and readout ``C``, all [d, N]."""

    A: Tensor
    B: Tensor
    C: Tensor

    def __post_init__(self):
        self.A, self.B, self.C = (ag.as_tensor(t) for t in (self.A, self.B, self.C))
        if not (self.A.shape == self.B.shape == self.C.shape) or self.A.ndim != 2:
            raise DimensionError(
                f"A {self.A.shape}, B {self.B.shape}, C {self.C.shape} must share one [d, N] shape")
        if not (np.abs(self.A.data) < 1.0).all():
            raise ConfigurationError("state transition entries must satisfy |A| < 1")

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @classmethod
    def random(cls, channels: int, state_dim: int, rng: np.random.Generator,
               dt_min: float = 1e-3, dt_max: float = 0.3) -> "SSMParams":
        """Log-uniform step sizes give decays exp(-dt) spanning many time scales."""
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=(channels, state_dim)))
        A = np.exp(-dt)
        B = dt * rng.normal(size=(channels, state_dim))
        C = rng.normal(size=(channels, state_dim)) / math.sqrt(state_dim)
        return cls(Tensor(A), Tensor(B), Tensor(C))


def transition_from_unconstrained(raw: Tensor) -> Tensor:
    """exp(-softplus(raw)) lies in (0, 1) for every real ``raw``."""
    return ag.exp(ag.softplus(raw) * -1.0)


def unconstrained_from_transition(A: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(-np.log(A)))


def _readout(C: np.ndarray, H: np.ndarray) -> np.ndarray:
    # sum over the state axis in a fixed left-to-right order
    y = C[..., 0] * H[..., 0]
    for n in range(1, C.shape[-1]):
        y = y + C[..., n] * H[..., n]
    return y


def _scan_sequential(A: np.ndarray, U: np.ndarray) -> np.ndarray:
    H = np.empty_like(U)
    h = np.zeros_like(U[0])
    for t in range(U.shape[0]):
        h = A * h + U[t]
        H[t] = h
    return H


def _scan_chunked(A: np.ndarray, U: np.ndarray, chunk: int) -> np.ndarray:
    """h_t = A * h_{t-1} + U_t computed blockwise.

    Every chunk is unrolled from a zero state (all chunks advance together),
    then the true end-of-chunk states are carried across chunk boundaries and
    folded back in with powers of ``A``. Work stays linear in T; the Python
    loop runs ``chunk + T / chunk`` times instead of T.
    """
    T = U.shape[0]
    nc = -(-T // chunk)
    if nc * chunk != T:
        U = np.concatenate([U, np.zeros((nc * chunk - T,) + U.shape[1:])])
    U = U.reshape((nc, chunk) + U.shape[1:])
    local = np.empty_like(U)
    local[:, 0] = U[:, 0]
    for i in range(1, chunk):
        local[:, i] = A * local[:, i - 1] + U[:, i]
    if nc > 1:
        decay = A ** chunk
        carry = np.empty_like(local[:, 0])
        carry[0] = local[0, -1]
        for k in range(1, nc):
            carry[k] = local[k, -1] + decay * carry[k - 1]
        powers = np.stack([A ** (i + 1) for i in range(chunk)])
        local[1:] += powers[None] * carry[:-1, None]
    return local.reshape((nc * chunk,) + U.shape[2:])[:T]


def _scan_op(params: SSMParams, x: Tensor, chunk: Optional[int]) -> Tensor:
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise DimensionError(f"scan input {x.shape} does not match {params.channels} channels")
    if chunk is not None and chunk < 1:
        raise ConfigurationError(f"chunk must be >= 1, got {chunk}")
    A, B, C = params.A.data, params.B.data, params.C.data
    T = x.shape[0]

    def scan(U):
        if chunk is None:
            return _scan_sequential(A, U)
        return _scan_chunked(A, U, min(chunk, T))

    U = B[None] * x.data[:, :, None]
    H = scan(U)
    y = _readout(C, H)

    def bw(gy):
        G = C[None] * gy[:, :, None]
        GH = scan(G[::-1].copy())[::-1]
        gx = _readout(B, GH)
        gB = np.sum(GH * x.data[:, :, None], axis=0)
        gC = np.sum(H * gy[:, :, None], axis=0)
        gA = np.sum(GH[1:] * H[:-1], axis=0)
        return gx, gA, gB, gC

    return ag.record("ssm_scan", y, (x, params.A, params.B, params.C), bw)


def ssm_scan_sequential(params: SSMParams, x: Tensor) -> Tensor:
    """Reference recurrence h_t = A h_{t-1} + B x_t, y_t = sum_n C h_t, with h_0 = 0."""
    return _scan_op(params, ag.as_tensor(x), None)


def ssm_scan_chunked(params: SSMParams, x: Tensor, chunk: int = 64) -> Tensor:
    """Blocked form of :func:`ssm_scan_sequential`; agrees with it to rounding."""
    return _scan_op(params, ag.as_tensor(x), chunk)


class MambaBlock:
    """L_in -> causal conv -> SiLU -> SSM, gated by SiLU(L_gate), then L_out."""

    def __init__(self, d_model: int, d_inner: int, state_dim: int, conv_width: int,
                 rng: np.random.Generator, max_conv_width: int = MAX_CONV_WIDTH,
                 chunk: Optional[int] = 32):
        if conv_width < 1 or conv_width > max_conv_width:
            raise ConfigurationError(f"conv width {conv_width} outside [1, {max_conv_width}]")
        self.d_model, self.d_inner = d_model, d_inner
        self.max_conv_width = max_conv_width
        self.chunk = chunk

        def lin(n_in, n_out):
            return ag.parameter(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))

        self.L_in_w, self.L_in_b = lin(d_model, d_inner), ag.parameter(np.zeros(d_inner))
        self.L_gate_w, self.L_gate_b = lin(d_model, d_inner), ag.parameter(np.zeros(d_inner))
        bound = 1.0 / math.sqrt(conv_width)
        self.conv = ag.parameter(rng.uniform(-bound, bound, size=(conv_width, d_inner)))
        init = SSMParams.random(d_inner, state_dim, rng)
        self.A_raw = ag.parameter(unconstrained_from_transition(init.A.data))
        self.B = ag.parameter(init.B.data)
        self.C = ag.parameter(init.C.data)
        self.L_out_w, self.L_out_b = lin(d_inner, d_model), ag.parameter(np.zeros(d_model))

    _NAMES = {
        "L_in.weight": "L_in_w", "L_in.bias": "L_in_b",
        "L_gate.weight": "L_gate_w", "L_gate.bias": "L_gate_b",
        "conv": "conv", "ssm.A": "A_raw", "ssm.B": "B", "ssm.C": "C",
        "L_out.weight": "L_out_w", "L_out.bias": "L_out_b",
    }

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + name, getattr(self, attr)) for name, attr in self._NAMES.items()]

    def ssm(self) -> SSMParams:
        return SSMParams(transition_from_unconstrained(self.A_raw), self.B, self.C)

    def __call__(self, x: Tensor) -> Tensor:
        return mamba_block(x, self)


def mamba_block(x: Tensor, block: MambaBlock) -> Tensor:
    if x.ndim != 2 or x.shape[1] != block.d_model:
        raise ConfigurationError(f"mamba block expects [T, {block.d_model}], got {x.shape}")
    u = x @ block.L_in_w + block.L_in_b
    u = ag.silu(ag.causal_depthwise_conv1d(u, block.conv, block.max_conv_width))
    ssm = block.ssm()
    chunk = block.chunk
    y = ssm_scan_sequential(ssm, u) if chunk is None else ssm_scan_chunked(ssm, u, chunk)
    gate = ag.silu(x @ block.L_gate_w + block.L_gate_b)
    return (y * gate) @ block.L_out_w + block.L_out_b


_FROZEN = re.compile(r"^blocks\.\d+\.(ssm\.[ABC]|conv|L_gate\.(weight|bias))$")
_TRAINABLE = re.compile(r"^(embedding|head\.(weight|bias)|blocks\.\d+\.L_(in|out)\.(weight|bias))$")


def freeze_partition(model, apply: bool = True) -> tuple[set, set]:
    """Split a Mamba classifier's parameters into frozen and trainable names.

    Frozen: transition/input/readout of the SSM, the conv kernels and L_gate.
    Trainable: the embedding table, L_in and L_out of every block, and the head.
    With ``apply`` the ``requires_grad`` flags are set to match.
    """
    frozen, trainable = set(), set()
    params = model.named_parameters()
    for name, _ in params:
        if _FROZEN.match(name):
            frozen.add(name)
        elif _TRAINABLE.match(name):
            trainable.add(name)
        else:
            raise ContractError(f"parameter {name!r} is in neither the frozen nor the trainable set")
    if apply:
        for name, t in params:
            t.requires_grad = name in trainable
            if not t.requires_grad:
                t.grad = None
    return frozen, trainable
