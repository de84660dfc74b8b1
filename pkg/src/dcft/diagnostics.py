"""Verification and analysis utilities.

Coverage maps count how many (subspace entry, kernel entry) pairs land on
each output cell of a transposed convolution; with stride equal to the
kernel size every cell is hit exactly once, otherwise overlap produces the
periodic unevenness known as checkerboard artifacts.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import engine
from .adapters import count_params, needs_padding, plan_shapes, preset_targets
from .checkpoint import atomic_write
from .data import Dataset
from .engine import Matrix
from .errors import NumericError, ShapeError
from .model import ModelSpec, attach_adapters, build_model
from .train import TrainConfig, train

# -- coverage --------------------------------------------------------------


@dataclass
class CoverageMap:
    counts: np.ndarray
    d: int
    s: int

    @property
    def is_uniform(self) -> bool:
        return bool((self.counts == self.counts.flat[0]).all())

    def summary(self) -> str:
        lo, hi = int(self.counts.min()), int(self.counts.max())
        rows, cols = self.counts.shape
        if self.is_uniform:
            return f"uniform: {rows}x{cols} map, every cell covered {lo} time(s) (d={self.d}, s={self.s})"
        return f"non-uniform: {rows}x{cols} map, coverage ranges {lo}..{hi} (d={self.d}, s={self.s})"

    def to_pgm(self) -> bytes:
        """Plain-text (P2) greyscale image, brightest = most covered."""
        rows, cols = self.counts.shape
        peak = max(int(self.counts.max()), 1)
        lines = [f"P2\n# coverage d={self.d} s={self.s}\n{cols} {rows}\n{peak}"]
        lines += [" ".join(str(int(v)) for v in row) for row in self.counts]
        return ("\n".join(lines) + "\n").encode()

    def write_pgm(self, path) -> None:
        atomic_write(path, self.to_pgm())


def coverage_map(d_in: int, d_out: int, d: int, s: int) -> CoverageMap:
    plan = plan_shapes(d_in, d_out, d, s)
    counts = np.zeros((d_in, d_out), dtype=np.int64)
    span_r, span_c = s * (plan.f_in - 1) + 1, s * (plan.f_out - 1) + 1
    for u in range(d):
        for v in range(d):
            counts[u : u + span_r : s, v : v + span_c : s] += 1
    return CoverageMap(counts, d, s)


# -- projection ------------------------------------------------------------


def orth_project(u, basis: Sequence) -> np.ndarray:
    """Sum over basis vectors of (<u, v> / <v, v>) v.

    Equals the orthogonal projection onto span(basis) only when the basis
    vectors are mutually orthogonal.
    """
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros_like(u)
    for i, v in enumerate(basis):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != u.shape:
            raise ShapeError(f"basis vector {i} has shape {v.shape}, u has {u.shape}")
        vv = float(v @ v)
        if vv == 0.0:
            raise ShapeError(f"basis vector {i} is zero")
        out += (float(u @ v) / vv) * v
    return out


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    eps: float
    global_max: float = 0.0

    def __post_init__(self):
        self.global_max = max(self.per_param.values(), default=0.0)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.global_max < tol


def grad_check(
    loss_fn: Callable[[], Matrix], params: Mapping[str, Matrix], eps: float = 1e-5
) -> GradCheckReport:
    """Compare recorded gradients with central differences, coordinate by coordinate.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    plist = list(params.items())
    for _, p in plist:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.item()):
        raise NumericError(f"loss is not finite: {loss.item()}")
    engine.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in plist}

    def evaluate() -> float:
        value = loss_fn().item()
        if not np.isfinite(value):
            raise NumericError("loss became non-finite under perturbation")
        return value

    errors: dict[str, float] = {}
    for name, p in plist:
        worst = 0.0
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            p.version += 1
            up = evaluate()
            flat[i] = old - eps
            p.version += 1
            down = evaluate()
            flat[i] = old
            p.version += 1
            num = (up - down) / (2 * eps)
            denom = max(abs(ga[i]), abs(num), 1e-12)
            worst = max(worst, abs(ga[i] - num) / denom)
        errors[name] = worst
    for _, p in plist:
        p.zero_grad()
    return GradCheckReport(errors, eps)


# -- budgets and sweeps ----------------------------------------------------


@dataclass
class SweepRow:
    d: int
    s: int
    total: int | None
    padding_needed: list[str] = field(default_factory=list)

    @property
    def status(self) -> str:
        if self.padding_needed:
            return "excluded: needs padding for " + ",".join(self.padding_needed)
        return "ok"


def budget_sweep(arch: str, pairs: Sequence[tuple[int, int]], targets=None, k: int = 1) -> list[SweepRow]:
    """Totals for each (d, s); configurations that cannot tile every target are excluded, not padded."""
    tlist, layers = preset_targets(arch) if targets is None else preset_targets(arch, targets)
    rows = []
    for d, s in pairs:
        bad = needs_padding(tlist, d, s)
        total = None if bad else count_params(tlist, d, s, k, layers).total_params
        rows.append(SweepRow(d, s, total, bad))
    return rows


def strictly_decreasing(values: Sequence[float]) -> bool:
    return all(a > b for a, b in zip(values, values[1:]))


# -- efficiency ------------------------------------------------------------


@dataclass
class EfficiencyRow:
    name: str
    adapter: str
    d: int
    s: int
    params: int
    final_accuracy: float
    seconds: float
    steps: int
    steps_to_threshold: int | None


def efficiency_report(
    configs: Sequence[TrainConfig],
    dataset: Dataset,
    spec: ModelSpec | None = None,
    threshold: float = 0.9,
    names: Sequence[str] | None = None,
) -> list[EfficiencyRow]:
    """Train each config from the same frozen backbone, one after another."""
    spec = spec or ModelSpec()
    rows = []
    for i, cfg in enumerate(configs):
        model = build_model(spec)
        attach_adapters(model, cfg.adapter_config())
        start = time.perf_counter()
        report = train(model, dataset, cfg)
        elapsed = time.perf_counter() - start
        rows.append(
            EfficiencyRow(
                name=names[i] if names else f"{cfg.adapter}(d={cfg.d},s={cfg.s})",
                adapter=cfg.adapter,
                d=cfg.d,
                s=cfg.s,
                params=report.trainable_params,
                final_accuracy=report.eval_accuracy[-1] if report.eval_accuracy else float("nan"),
                seconds=elapsed,
                steps=report.steps,
                steps_to_threshold=report.steps_to(threshold),
            )
        )
    return rows


# -- output ----------------------------------------------------------------


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [["-" if v is None else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


BUDGET_HEADER = ("target", "d_in", "d_out", "d", "s", "F_in", "F_out", "params", "params_full_F", "lora_r1")


def budget_rows(report) -> list[tuple]:
    return [
        (e.name, e.plan.d_in, e.plan.d_out, e.plan.d, e.plan.s, e.plan.f_in, e.plan.f_out,
         e.params, e.params_before, e.lora_r1)
        for e in report.entries
    ]


EFFICIENCY_HEADER = ("config", "adapter", "d", "s", "params", "final_acc", "seconds", "steps", "steps_to_threshold")


def efficiency_rows(rows: Sequence[EfficiencyRow]) -> list[tuple]:
    return [
        (r.name, r.adapter, r.d, r.s, r.params, f"{r.final_accuracy:.4f}", f"{r.seconds:.2f}", r.steps,
         r.steps_to_threshold)
        for r in rows
    ]
