"""Runtime measurement and scaling-law verification.

One "step" is a single vector-field evaluation plus one divergence at the
same point, which is the unit of work one RK4 stage performs during
sampling with likelihoods.  Forward and backward wallclock are timed
separately; backward-pass counts are exact integers read off the tape, so
they are immune to timing noise: d for the hollow field, n*d for the
brute-force baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import network as net
from .flow import _batch_diag_sums

BENCH_FIELDS = ["mode", "n", "d", "k", "steps", "n_edges", "n_lg_edges",
                "rt", "rt_forward", "rt_divergence", "reverse_passes",
                "repeats", "seed"]


@dataclass
class BenchRecord:
    mode: str
    n: int
    d: int
    k: int | None
    steps: int
    n_edges: int
    n_lg_edges: int
    rt: float
    rt_forward: float
    rt_divergence: float
    reverse_passes: int
    repeats: int
    seed: int

    def as_row(self) -> list:
        d = asdict(self)
        return [d[f] for f in BENCH_FIELDS]


MIN_TIMABLE = 1e-4  # seconds; below this the repeat count is raised


def measure_step(params, cfg: net.ArchConfig, x: np.ndarray, Z=None,
                 mode: str = "hollow", repeats: int = 3, t: float = 0.5,
                 seed: int = 0) -> BenchRecord:
    """Median wallclock of one field evaluation + one divergence.

    ``mode`` is "hollow" (d probe passes on the detached program) or
    "baseline" (n*d unit-cotangent passes); the configuration must match.
    Runs one warm-up first; if the total is too fast to time reliably the
    repeat count is increased automatically.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if mode not in ("hollow", "baseline"):
        raise ValueError(f"unknown bench mode {mode!r}")
    if (mode == "baseline") != cfg.baseline:
        raise ValueError("mode does not match the configuration")
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    plan = net.make_plan(x[None], cfg)
    n_edges = len(plan.heads[0].src)
    n_lg = 0 if cfg.baseline else len(plan.heads[0].init_from)
    div_mode = "hollow" if mode == "hollow" else "brute"

    def one_step():
        prog = net.make_field_program(
            params, cfg, n, d, Z=Z, t=t,
            detach_conditioner=(mode == "hollow"))
        t0 = time.perf_counter()
        ad.forward_eval(prog, x.reshape(-1))
        t1 = time.perf_counter()
        _batch_diag_sums(prog, 1, n, d, div_mode)
        t2 = time.perf_counter()
        return t1 - t0, t2 - t1, prog.tape.n_reverse_passes

    one_step()  # warm-up
    while True:
        fw, bw, passes = [], [], None
        for _ in range(repeats):
            f, b, passes = one_step()
            fw.append(f)
            bw.append(b)
        med_f, med_b = float(np.median(fw)), float(np.median(bw))
        if med_f + med_b >= MIN_TIMABLE or repeats >= 200:
            break
        repeats *= 4
    return BenchRecord(mode=mode, n=n, d=d, k=cfg.knn_k, steps=cfg.steps,
                       n_edges=n_edges, n_lg_edges=n_lg,
                       rt=med_f + med_b, rt_forward=med_f,
                       rt_divergence=med_b, reverse_passes=passes,
                       repeats=repeats, seed=seed)


def fit_scaling(ns, ys) -> tuple[float, float]:
    """Least-squares slope of log(y) against log(n), with its stderr."""
    ns = np.asarray(ns, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if ns.size < 4:
        raise ValueError("need at least 4 sweep points")
    if ns.max() / ns.min() < 4.0:
        raise ValueError("sweep must span at least a 4x range")
    if np.any(ys <= 0):
        raise ValueError("metric must be positive")
    lx, ly = np.log(ns), np.log(ys)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    slope = float(coef[0])
    dof = ns.size - 2
    if dof > 0 and res.size:
        s2 = float(res[0]) / dof
        stderr = float(np.sqrt(s2 / np.sum((lx - lx.mean()) ** 2)))
    else:
        stderr = 0.0
    return slope, stderr


def speedup_report(hollow: list[BenchRecord],
                   baseline: list[BenchRecord]) -> list[dict]:
    """Per-n ratio of baseline step time over hollow step time.

    Requires matched (n, d) pairs and checks that the ratio grows
    monotonically with n, which is the qualitative scaling claim.
    """
    base_by_n = {(r.n, r.d): r for r in baseline}
    rows = []
    for h in sorted(hollow, key=lambda r: r.n):
        key = (h.n, h.d)
        if key not in base_by_n:
            raise ValueError(f"no baseline record for n={h.n}, d={h.d}")
        b = base_by_n[key]
        rows.append({
            "n": h.n, "d": h.d,
            "rt_hollow": h.rt, "rt_baseline": b.rt,
            "speedup": b.rt / h.rt,
            "passes_hollow": h.reverse_passes,
            "passes_baseline": b.reverse_passes,
        })
    ratios = [r["speedup"] for r in rows]
    monotone = all(a < b for a, b in zip(ratios, ratios[1:]))
    for r in rows:
        r["monotone_in_n"] = monotone
    return rows
