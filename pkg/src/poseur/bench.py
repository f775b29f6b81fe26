"""Wall-time and FLOP comparison of the two deformable-attention routes."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .attention import EmsdaWeights, FlopCounter, analytic_value_projection_flops, emsda, msda_oracle
from .errors import BenchmarkInvalidError

EQUIVALENCE_TOL = 1e-10


@dataclass(frozen=True)
class BenchCase:
    name: str
    level_shapes: tuple  # ((H, W), ...)
    points: int = 4
    queries: int = 17
    heads: int = 4
    dim: int = 32
    batch: int = 1


DEFAULT_CASES = (
    BenchCase("single-point", ((1, 1),), points=1, queries=1),
    BenchCase("8x8", ((8, 8),)),
    BenchCase("16x12+8x6", ((16, 12), (8, 6))),
    BenchCase("32x24+16x12", ((32, 24), (16, 12))),
    BenchCase("64x48+32x24", ((64, 48), (32, 24))),
    BenchCase("64x48+32x24+16x12", ((64, 48), (32, 24), (16, 12))),
    BenchCase("128x96+64x48", ((128, 96), (64, 48))),
)

CSV_FIELDS = (
    "case",
    "levels",
    "sum_hw",
    "queries",
    "heads",
    "points",
    "dim",
    "flops_emsda",
    "flops_msda",
    "ratio_measured",
    "ratio_analytic",
    "ratio_rel_error",
    "time_emsda_ms",
    "time_msda_ms",
    "max_rel_diff",
)


def relative_difference(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def case_inputs(case: BenchCase, seed=0):
    rng = np.random.default_rng(seed)
    L = len(case.level_shapes)
    weights = EmsdaWeights.random(case.dim, case.heads, L, case.points, rng)
    queries = rng.normal(size=(case.batch, case.queries, case.dim))
    refs = rng.uniform(size=(case.batch, case.queries, 2))
    levels = [rng.normal(size=(case.batch, case.dim, h, w)) for h, w in case.level_shapes]
    return queries, refs, levels, weights


def _time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def run_case(case: BenchCase, seed=0, repeats=3):
    queries, refs, levels, weights = case_inputs(case, seed)
    fe, fm = FlopCounter(), FlopCounter()
    out_e = emsda(queries, refs, levels, weights, flops=fe).data
    out_m = msda_oracle(queries, refs, levels, weights, flops=fm).data
    diff = relative_difference(out_e, out_m)
    if not diff < EQUIVALENCE_TOL:
        raise BenchmarkInvalidError(f"case {case.name}: emsda and msda differ by {diff:.3e}")
    ae, am = analytic_value_projection_flops(
        case.dim, case.heads, case.points, case.level_shapes, queries=case.queries, batch=case.batch
    )
    measured = fe["value_projection"] / fm["value_projection"]
    analytic = ae / am
    return {
        "case": case.name,
        "levels": len(case.level_shapes),
        "sum_hw": sum(h * w for h, w in case.level_shapes),
        "queries": case.queries,
        "heads": case.heads,
        "points": case.points,
        "dim": case.dim,
        "flops_emsda": fe["value_projection"],
        "flops_msda": fm["value_projection"],
        "ratio_measured": measured,
        "ratio_analytic": analytic,
        "ratio_rel_error": abs(measured - analytic) / analytic,
        "time_emsda_ms": _time(lambda: emsda(queries, refs, levels, weights), repeats),
        "time_msda_ms": _time(lambda: msda_oracle(queries, refs, levels, weights), repeats),
        "max_rel_diff": diff,
    }


def run_bench(cases=DEFAULT_CASES, seed=0, repeats=3):
    return [run_case(c, seed, repeats) for c in cases]


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def plot(path, rows):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sorted(rows, key=lambda r: r["sum_hw"])
    x = [r["sum_hw"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.loglog(x, [r["flops_emsda"] for r in rows], "o-", label="emsda")
    ax1.loglog(x, [r["flops_msda"] for r in rows], "s--", label="msda")
    ax1.set_xlabel("pyramid positions")
    ax1.set_ylabel("value-projection FLOPs")
    ax1.legend()
    ax2.loglog(x, [r["time_emsda_ms"] for r in rows], "o-", label="emsda")
    ax2.loglog(x, [r["time_msda_ms"] for r in rows], "s--", label="msda")
    ax2.set_xlabel("pyramid positions")
    ax2.set_ylabel("forward time [ms]")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_report(out_dir, rows):
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "bench.csv"), rows)
    plot(os.path.join(out_dir, "bench.svg"), rows)
