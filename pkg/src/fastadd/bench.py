"""Sequence-length sweeps, analytic FLOP counts and scaling fits.

The sweep holds ``seq_len * batch`` constant. Reported wall times are per
sequence (the batch call divided by its batch size), so a linear-cost model
shows a log-log slope near 1 and a quadratic one a slope near 2.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import attention as att
from . import model as mdl
from . import numerics as nx
from .attention import InteractionMode
from .errors import ConfigError, DomainError
from .model import FastformerConfig
from .train import batch_cross_entropy

log = logging.getLogger(__name__)

IMPLEMENTATIONS = ("fastformer", "vanilla")
MODES = ("forward", "forward_backward")
BACKWARD_FLOP_MULTIPLIER = 3

CSV_HEADER = ["impl", "seq_len", "batch", "mode", "wall_ms_median", "wall_ms_p10", "wall_ms_p90", "flops"]


@dataclass
class BenchSpec:
    implementation: str = "fastformer"
    lengths: list = field(default_factory=lambda: [128, 256, 512, 1024, 2048, 4096, 8192])
    base_tokens: int = 8192
    mode: str = "forward"
    warmup_iters: int = 3
    timed_iters: int = 9
    heads: int = 4
    head_dim: int = 16
    layers: int = 1
    seed: int = 0
    vocab_size: int = 1000
    interaction: str = "product"
    share_qv: bool = True

    def problems(self) -> list[str]:
        out = []
        if self.implementation not in IMPLEMENTATIONS:
            out.append(f"bench.implementation must be one of {IMPLEMENTATIONS}")
        if self.mode not in MODES:
            out.append(f"bench.mode must be one of {MODES}")
        if not self.lengths or any(int(n) < 1 for n in self.lengths):
            out.append("bench.lengths must be a non-empty list of positive integers")
        elif any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            out.append("bench.lengths must be strictly increasing")
        if self.base_tokens < 1:
            out.append("bench.base_tokens must be positive")
        if self.warmup_iters < 0 or self.timed_iters < 1:
            out.append("bench needs warmup_iters >= 0 and timed_iters >= 1")
        return out

    def batch(self, seq_len: int) -> int:
        return max(1, self.base_tokens // seq_len)

    def model_config(self) -> FastformerConfig:
        return FastformerConfig(
            num_layers=self.layers,
            heads=self.heads,
            head_dim=self.head_dim,
            vocab_size=self.vocab_size,
            max_len=max(self.lengths),
            num_classes=2,
            interaction=self.interaction,
            share_qv=self.share_qv,
            share_layers=False,
            use_ffn=False,
            dropout=0.0,
            backbone=self.implementation,
            precision="f32",
        )


@dataclass
class BenchRecord:
    implementation: str
    seq_len: int
    batch: int
    mode: str
    wall_ms_median: float
    wall_ms_p10: float
    wall_ms_p90: float
    analytic_flops: int


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------


def count_flops(config: FastformerConfig, seq_len: int, implementation: Optional[str] = None, mode: str = "forward") -> int:
    """Multiply-adds of the attention core of every layer for one sequence.

    Counts the same kernels the instrumented path counts: matrix products as
    ``m*k*n``, element-wise kernels (score scaling, softmax, interactions,
    residual) by element count. ``forward_backward`` is three times the
    forward count.
    """
    impl = implementation or config.backbone
    if impl not in IMPLEMENTATIONS:
        raise ConfigError(f"unknown implementation {impl!r}")
    if mode not in MODES:
        raise ConfigError(f"unknown bench mode {mode!r}")
    N, h, d = seq_len, config.heads, config.head_dim
    D = h * d
    d_in = D if config.full_projection else d
    projections = (2 if config.share_qv else 3) * N * d_in * d
    if impl == "fastformer":
        pool = 2 * N * d + 2 * N
        if config.mode is InteractionMode.CONCAT_PROJECT:
            interaction = N * 2 * d * d
        else:
            interaction = N * d
        head = projections + 2 * pool + 2 * interaction + N * d * d + N * d
        layer = h * head
    else:
        head = projections + N * N * d + 2 * N * N + N * N * d
        layer = h * head + N * D * D
    total = config.num_layers * layer
    return total * (BACKWARD_FLOP_MULTIPLIER if mode == "forward_backward" else 1)


def instrumented_flops(model: mdl.Model, seq_len: int, seed: int = 0) -> int:
    """Run the attention core of every layer once under the FLOP counter."""
    config = model.config
    X = nx.seeded_normal((seq_len, config.width), seed, 1.0, config.precision)
    with nx.counting_flops() as counter:
        for l in range(config.num_layers):
            layer = mdl.attention_layer(model, l)
            if config.backbone == "fastformer":
                X, _ = att.multihead_forward(X, layer, config.mode)
            else:
                X, _ = att.vanilla_attention_forward(X, layer)
    return counter.multiply_adds


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


def _step_fn(model: mdl.Model, ids: np.ndarray, labels: np.ndarray, mode: str):
    if mode == "forward":
        return lambda: mdl.forward(model, ids)

    def fwd_bwd():
        logits, cache = mdl.forward(model, ids)
        _, d_logits = batch_cross_entropy(logits, labels)
        return mdl.backward(model, cache, d_logits, freeze_embeddings=True)

    return fwd_bwd


def run_bench(spec: BenchSpec) -> list[BenchRecord]:
    """Time one implementation over ``spec.lengths`` in a single thread of control.

    Inputs are random token ids from a generator seeded by ``spec.seed``;
    token embeddings receive no gradient. A length that runs out of memory is
    logged and skipped.
    """
    problems = spec.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    config = spec.model_config()
    model = mdl.build_model(config, spec.seed)
    rng = np.random.default_rng(spec.seed)
    records = []
    for N in spec.lengths:
        batch = spec.batch(N)
        try:
            ids = rng.integers(0, spec.vocab_size, size=(batch, N))
            labels = rng.integers(0, config.num_classes, size=batch)
            fn = _step_fn(model, ids, labels, spec.mode)
            for _ in range(spec.warmup_iters):
                fn()
            samples = []
            for _ in range(spec.timed_iters):
                start = time.perf_counter()
                fn()
                samples.append((time.perf_counter() - start) * 1e3 / batch)
        except MemoryError:
            log.warning("out of memory at %s seq_len=%d batch=%d; skipping", spec.implementation, N, batch)
            continue
        p10, median, p90 = np.percentile(samples, [10, 50, 90])
        records.append(
            BenchRecord(
                implementation=spec.implementation,
                seq_len=N,
                batch=batch,
                mode=spec.mode,
                wall_ms_median=float(median),
                wall_ms_p10=float(p10),
                wall_ms_p90=float(p90),
                analytic_flops=count_flops(config, N, spec.implementation, spec.mode),
            )
        )
        log.info("%s %s N=%d batch=%d median %.4f ms/seq", spec.implementation, spec.mode, N, batch, median)
    return records


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def fit_power_law(records: Sequence[BenchRecord]) -> tuple[float, float]:
    """Least-squares ``(slope, intercept)`` of log(median ms) against log(seq_len)."""
    if len({(r.implementation, r.mode) for r in records}) > 1:
        raise DomainError("fit records of a single implementation and mode at a time")
    return loglog_fit([r.seq_len for r in records], [r.wall_ms_median for r in records])


def loglog_fit(lengths: Iterable[float], times: Iterable[float]) -> tuple[float, float]:
    x = np.asarray(list(lengths), dtype=np.float64)
    y = np.asarray(list(times), dtype=np.float64)
    if x.size < 3:
        raise DomainError(f"need at least 3 points for a slope fit, got {x.size}")
    if np.any(x <= 0) or np.any(y <= 0):
        raise DomainError("lengths and times must be positive")
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


def fit_loglog_slope(records: Sequence[BenchRecord]) -> float:
    return fit_power_law(records)[0]


def predict_ms(records: Sequence[BenchRecord], seq_len: int) -> float:
    """Median time at ``seq_len`` read off the fitted power law."""
    slope, intercept = fit_power_law(records)
    return math.exp(intercept + slope * math.log(seq_len))


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def emit_csv(records: Sequence[BenchRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([
                r.implementation, r.seq_len, r.batch, r.mode,
                f"{r.wall_ms_median:.6g}", f"{r.wall_ms_p10:.6g}", f"{r.wall_ms_p90:.6g}",
                r.analytic_flops,
            ])
    return path


def read_csv(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise DomainError(f"unexpected bench CSV header {reader.fieldnames}")
        return [
            BenchRecord(
                implementation=row["impl"],
                seq_len=int(row["seq_len"]),
                batch=int(row["batch"]),
                mode=row["mode"],
                wall_ms_median=float(row["wall_ms_median"]),
                wall_ms_p10=float(row["wall_ms_p10"]),
                wall_ms_p90=float(row["wall_ms_p90"]),
                analytic_flops=int(row["flops"]),
            )
            for row in reader
        ]


def emit_plot_data(records: Sequence[BenchRecord], path) -> Path:
    """``log(N) log(ms)`` pairs, one block per (implementation, mode), blank-line separated."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.implementation, r.mode), []).append(r)
    lines = []
    for (impl, mode), rows in groups.items():
        lines.append(f"# {impl} {mode}")
        lines.extend(f"{math.log(r.seq_len):.6f} {math.log(r.wall_ms_median):.6f}" for r in rows)
        lines.append("")
    path = Path(path)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def sweep(spec: BenchSpec, implementations=IMPLEMENTATIONS, modes=MODES, vanilla_max_len: Optional[int] = None) -> list[BenchRecord]:
    """Run ``run_bench`` for every implementation and mode, one after another."""
    records = []
    for impl in implementations:
        lengths = spec.lengths
        if impl == "vanilla" and vanilla_max_len is not None:
            lengths = [n for n in lengths if n <= vanilla_max_len]
        for mode in modes:
            records.extend(run_bench(dataclasses.replace(spec, implementation=impl, mode=mode, lengths=lengths)))
    return records
