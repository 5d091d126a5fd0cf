"""Latency benchmarking and comparison-table reporting.

Published baseline rows ship as a versioned CSV (they are ingested
constants, not re-measured here: the reference hardware is an embedded ARM
board we do not assume).  Locally measured rows can be appended next to
them; reports label the hardware so numbers are never silently compared
across machines.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import graph as G

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("Acc (%)", "Param (M)", "FLOPs (M)", "Inf. Speed (ms)")


@dataclass(frozen=True)
class BenchRow:
    model_name: str
    accuracy_pct: float
    params_M: float
    flops_M: float
    latency_ms_per_sample: float

    def __post_init__(self):
        for name in ("accuracy_pct", "params_M", "flops_M", "latency_ms_per_sample"):
            if getattr(self, name) <= 0:
                raise ValueError(f"BenchRow.{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class LatencyStats:
    median_ms: float
    p95_ms: float
    per_sample_ms: float
    batch_size: int
    iterations: int

    @property
    def jittery(self) -> bool:
        return self.p95_ms / self.median_ms > 2.0


def benchmark_latency(graph: G.ArchGraph, params: G.ModelParams, batch_size: int = 10,
                      warmup_iters: int = 10, timed_iters: int = 100,
                      side: int = 224, seed: int = 0) -> LatencyStats:
    """Wall-clock forward latency on frozen weights.

    Per-sample latency is batch time divided by batch size.  Run with
    background work quiesced; a p95/median ratio above 2 logs a warning
    because the medians are then not trustworthy.
    """
    if timed_iters < 3:
        raise ValueError(f"timed_iters must be >= 3 for a stable median, got {timed_iters}")
    rng = np.random.default_rng(seed)
    dtype = next(iter(params.values.values())).dtype if params.values else np.float32
    batch = rng.uniform(0.0, 1.0, size=(batch_size, 1, side, side)).astype(dtype)
    for _ in range(warmup_iters):
        G.forward(graph, params, batch)
    times = np.empty(timed_iters)
    for i in range(timed_iters):
        t0 = time.perf_counter()
        G.forward(graph, params, batch)
        times[i] = (time.perf_counter() - t0) * 1000.0
    stats = LatencyStats(
        median_ms=float(np.median(times)),
        p95_ms=float(np.percentile(times, 95)),
        per_sample_ms=float(np.median(times) / batch_size),
        batch_size=batch_size,
        iterations=timed_iters,
    )
    if stats.jittery:
        log.warning(
            "latency jitter p95/median = %.2f > 2; quiesce background work before benchmarking",
            stats.p95_ms / stats.median_ms,
        )
    return stats


def speedup(baseline_ms: float, subject_ms: float) -> float:
    if subject_ms <= 0:
        raise ValueError(f"subject latency must be > 0, got {subject_ms}")
    if baseline_ms <= 0:
        raise ValueError(f"baseline latency must be > 0, got {baseline_ms}")
    return baseline_ms / subject_ms


def shrink_ratio(baseline: float, subject: float) -> float:
    return speedup(baseline, subject)


def format_ratio(ratio: float) -> str:
    """Ratios >= 20 are rounded whole numbers with '~'; small ones get one decimal."""
    if ratio >= 20:
        return f"~{ratio:.0f}×"
    return f"{ratio:.1f}×"


def load_published_rows() -> list[BenchRow]:
    """The versioned baseline table shipped with the package."""
    text = resources.files("lightinspect").joinpath("published_baselines.csv").read_text()
    return rows_from_csv(text)


def rows_from_csv(text: str) -> list[BenchRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(
            BenchRow(
                model_name=rec["model"],
                accuracy_pct=float(rec["accuracy_pct"]),
                params_M=float(rec["params_M"]),
                flops_M=float(rec["flops_M"]),
                latency_ms_per_sample=float(rec["latency_ms_per_sample"]),
            )
        )
    return rows


def rows_to_csv(rows: list[BenchRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["model", "accuracy_pct", "params_M", "flops_M", "latency_ms_per_sample"])
    for r in rows:
        writer.writerow(
            [r.model_name, _fmt(r.accuracy_pct), _fmt(r.params_M), _fmt(r.flops_M),
             _fmt(r.latency_ms_per_sample)]
        )
    return out.getvalue()


def _fmt(x: float) -> str:
    return f"{x:g}"


def emit_table(rows: list[BenchRow]) -> str:
    """Aligned text table; the best value per column is wrapped in ``**``.

    Best means highest accuracy and lowest params/FLOPs/latency.
    """
    if not rows:
        raise ValueError("emit_table needs at least one row")
    best = {
        "accuracy_pct": max(r.accuracy_pct for r in rows),
        "params_M": min(r.params_M for r in rows),
        "flops_M": min(r.flops_M for r in rows),
        "latency_ms_per_sample": min(r.latency_ms_per_sample for r in rows),
    }

    def cell(row, field):
        text = _fmt(getattr(row, field))
        if len(rows) > 1 and getattr(row, field) == best[field]:
            return f"**{text}**"
        return text

    header = ["Model", *TABLE_COLUMNS]
    body = [
        [r.model_name, cell(r, "accuracy_pct"), cell(r, "params_M"),
         cell(r, "flops_M"), cell(r, "latency_ms_per_sample")]
        for r in rows
    ]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for line in body:
        lines.append(
            "  ".join(
                c.ljust(w) if i == 0 else c.rjust(w)
                for i, (c, w) in enumerate(zip(line, widths))
            ).rstrip()
        )
    return "\n".join(lines) + "\n"


def reference_row(accuracy_pct: float, latency_ms_per_sample: float,
                  graph: G.ArchGraph | None = None,
                  name: str = "reference (this machine)") -> BenchRow:
    """Row for a locally measured model, complexity taken from the graph."""
    graph = graph or G.build_reference_config()
    return BenchRow(
        model_name=name,
        accuracy_pct=accuracy_pct,
        params_M=G.count_params(graph) / 1e6,
        flops_M=G.count_flops(graph, 224, 224) / 1e6,
        latency_ms_per_sample=latency_ms_per_sample,
    )
