"""
Runtime scaling
===============

Median single-thread time against sequence length, with log-log slopes.
Full attention grows quadratically; the window and the scan grow linearly.
"""

from longscore.bench import bench_scaling

report = bench_scaling(lengths=(256, 512, 1024, 2048), reps=5, d_model=16, radius=32)
print(report.to_text())
print("sliding-window doubling ratios", [round(r, 2) for r in report.doubling_ratios("sliding-window")])
