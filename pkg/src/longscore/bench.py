"""Forward-pass scaling benchmark: how runtime grows with sequence length for
dense attention, sliding-window attention and the chunked SSM scan."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import full_attention_forward, sliding_window_attention_forward
from .autograd import Tensor
from .errors import InputError
from .ssm import SSMParams, ssm_scan_chunked

MECHANISMS = ("full-attention", "sliding-window", "ssm-scan")
DEFAULT_LENGTHS = (1024, 2048, 4096, 8192, 16384)
MIN_RESOLUTION_MULTIPLE = 1000


def fit_loglog_slope(points: Sequence[tuple[float, float]]) -> float:
    """Least-squares slope of log(time) against log(length)."""
    if len(points) < 2:
        raise InputError("slope fit needs at least two points")
    if any(x <= 0 or y <= 0 for x, y in points):
        raise InputError("slope fit needs strictly positive lengths and times")
    lx = np.log([p[0] for p in points])
    ly = np.log([p[1] for p in points])
    dx = lx - lx.mean()
    return float(np.sum(dx * (ly - ly.mean())) / np.sum(dx * dx))


@dataclass
class ScalingRow:
    mechanism: str
    length: int
    median_seconds: float
    flagged: bool = False


@dataclass
class ScalingReport:
    rows: list
    repetitions: int
    slopes: dict = field(default_factory=dict)

    def medians(self, mechanism: str) -> list[tuple[int, float]]:
        return [(r.length, r.median_seconds) for r in self.rows if r.mechanism == mechanism]

    def doubling_ratios(self, mechanism: str) -> list[float]:
        m = [(n, t) for n, t in self.medians(mechanism)]
        return [t2 / t1 for (n1, t1), (n2, t2) in zip(m, m[1:]) if n2 == 2 * n1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mechanism", "length", "median_seconds", "flagged", "slope"])
        for r in self.rows:
            slope = self.slopes.get(r.mechanism)
            w.writerow([r.mechanism, r.length, f"{r.median_seconds:.6e}", int(r.flagged),
                        "" if slope is None else f"{slope:.3f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'mechanism':<15} {'length':>7} {'median (s)':>12}"]
        for r in self.rows:
            flag = "  (below timer resolution, not fitted)" if r.flagged else ""
            lines.append(f"{r.mechanism:<15} {r.length:>7} {r.median_seconds:>12.6f}{flag}")
        lines.append("")
        for mech, s in self.slopes.items():
            lines.append(f"{mech:<15} log-log slope {'n/a' if s is None else f'{s:.3f}'}")
        return "\n".join(lines) + "\n"


def _workload(mechanism: str, T: int, rng: np.random.Generator, d_model: int, n_heads: int,
              radius: int, state_dim: int, chunk: int) -> Callable[[], object]:
    if mechanism == "ssm-scan":
        params = SSMParams.random(d_model, state_dim, rng)
        x = Tensor(rng.normal(size=(T, d_model)))
        return lambda: ssm_scan_chunked(params, x, chunk)
    q, k, v = (rng.normal(size=(T, d_model)) for _ in range(3))
    if mechanism == "full-attention":
        return lambda: full_attention_forward(q, k, v, n_heads)
    if mechanism == "sliding-window":
        return lambda: sliding_window_attention_forward(q, k, v, radius, (0,), n_heads)
    raise InputError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


def bench_scaling(mechanisms: Sequence[str] = MECHANISMS, lengths: Sequence[int] = DEFAULT_LENGTHS,
                  reps: int = 5, d_model: int = 32, n_heads: int = 2, radius: int = 64,
                  state_dim: int = 16, chunk: int = 64, seed: int = 0,
                  threads: Optional[int] = 1) -> ScalingReport:
    """Median forward time over ``reps`` runs for each mechanism and length.

    Inputs are built before timing. Rows whose median is under
    ``MIN_RESOLUTION_MULTIPLE`` timer ticks are flagged and left out of the fit.
    """
    lengths = list(lengths)
    if len(lengths) < 2 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise InputError("need at least two strictly increasing lengths")
    if reps < 5:
        raise InputError("at least 5 repetitions are required")
    if d_model > 64:
        raise InputError("keep d_model <= 64 so sequence length dominates")
    resolution = time.get_clock_info("perf_counter").resolution
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=threads):
        for mech in mechanisms:
            for T in lengths:
                fn = _workload(mech, T, rng, d_model, n_heads, radius, state_dim, chunk)
                fn()  # warm-up
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - t0)
                med = statistics.median(times)
                rows.append(ScalingRow(mech, T, med, med < MIN_RESOLUTION_MULTIPLE * resolution))
    report = ScalingReport(rows, reps)
    for mech in mechanisms:
        pts = [(r.length, r.median_seconds) for r in rows if r.mechanism == mech and not r.flagged]
        report.slopes[mech] = fit_loglog_slope(pts) if len(pts) >= 2 else None
    return report



