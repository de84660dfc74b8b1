"""DCFT and LoRA adapters plus the shape / parameter-budget algebra.

A DCFT adapter stores a rank-k subspace ``F = B @ A`` of shape
``F_in x F_out`` and a ``d x d`` kernel ``C``. The weight update is the
strided transposed convolution of ``F`` with ``C``; when the stride equals
the kernel size this is exactly ``kron(F, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import engine
from .engine import Matrix
from .errors import ConfigError, ShapeError, UsageError

TARGETS = ("Q", "K", "V", "O", "FFN_in", "FFN_out")

ARCH_PRESETS = {
    # name: (hidden, ffn, layers)
    "deberta-base-like": (768, 3072, 12),
    "roberta-large-like": (1024, 4096, 24),
    "deberta-xxl-like": (1536, 6144, 48),
}


def target_shapes(hidden: int, ffn: int) -> dict[str, tuple[int, int]]:
    """Host matrix shape (rows, cols) for every adaptable target."""
    return {
        "Q": (hidden, hidden),
        "K": (hidden, hidden),
        "V": (hidden, hidden),
        "O": (hidden, hidden),
        "FFN_in": (ffn, hidden),
        "FFN_out": (hidden, ffn),
    }


def parse_targets(spec: str | Iterable[str]) -> tuple[str, ...]:
    """Parse ``"all"`` or a comma list such as ``"q,k,ffn_in"`` into canonical names."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    items = [t.strip() for t in items if t.strip()]
    if not items:
        raise ConfigError("targets must not be empty")
    lookup = {t.lower(): t for t in TARGETS}
    out: list[str] = []
    for item in items:
        if item.lower() == "all":
            return TARGETS
        if item.lower() not in lookup:
            raise ConfigError(f"unknown target {item!r}; choose from {', '.join(TARGETS)} or all")
        name = lookup[item.lower()]
        if name not in out:
            out.append(name)
    return tuple(sorted(out, key=TARGETS.index))


# -- shape planning --------------------------------------------------------


@dataclass(frozen=True)
class ShapePlan:
    d_in: int
    d_out: int
    d: int
    s: int
    f_in: int
    f_out: int
    k: int = 1

    @property
    def per_matrix_params(self) -> int:
        return self.k * self.f_out + self.f_in * self.k + self.d * self.d

    @property
    def params_before(self) -> int:
        """Count with a full (unfactored) subspace matrix."""
        return self.f_in * self.f_out + self.d * self.d


def _valid_stride(n: int, d: int, s: int) -> bool:
    return n >= d and (n - d) % s == 0


def _nearest(candidates: Iterable[int], target: int) -> int | None:
    cands = sorted(candidates, key=lambda c: (abs(c - target), c))
    return cands[0] if cands else None


def plan_shapes(d_in: int, d_out: int, d: int, s: int, k: int = 1) -> ShapePlan:
    """Subspace dims for a ``d_in x d_out`` target with kernel ``d`` and stride ``s``.

    Raises instead of rounding when the target is not exactly covered.
    """
    for label, v in (("d_in", d_in), ("d_out", d_out), ("d", d), ("s", s), ("k", k)):
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigError(f"{label} must be a positive integer, got {v!r}")
    if s > d:
        raise ConfigError(f"stride {s} exceeds kernel size {d}; parameters would not participate")
    if d > min(d_in, d_out):
        raise ShapeError(f"kernel size {d} larger than target {d_in}x{d_out}")
    if not (_valid_stride(d_in, d, s) and _valid_stride(d_out, d, s)):
        bad = [n for n in (d_in, d_out) if not _valid_stride(n, d, s)]
        hints = []
        if s == d:
            best_d = _nearest(
                (c for c in range(1, min(d_in, d_out) + 1) if d_in % c == 0 and d_out % c == 0), d
            )
            hints.append(f"nearest valid kernel size with stride=kernel: {best_d}")
        best_s = _nearest(
            (c for c in range(1, d + 1) if _valid_stride(d_in, d, c) and _valid_stride(d_out, d, c)), s
        )
        hints.append(f"nearest valid stride for d={d}: {best_s}")
        raise ShapeError(
            f"target {d_in}x{d_out} is not tiled by kernel {d} at stride {s} "
            f"({', '.join(f'({n} - {d}) % {s} != 0' for n in bad)}); " + "; ".join(hints)
        )
    return ShapePlan(d_in, d_out, d, s, (d_in - d) // s + 1, (d_out - d) // s + 1, k)


# -- adapters --------------------------------------------------------------


class DcftAdapter:
    """Trainable (A, B, C) producing a ``target_rows x target_cols`` update."""

    def __init__(self, a: Matrix, b: Matrix, c: Matrix, stride: int, target_rows: int, target_cols: int):
        k = a.rows
        self.plan = plan_shapes(target_rows, target_cols, c.rows, stride, k)
        expect = {"a": (k, self.plan.f_out), "b": (self.plan.f_in, k), "c": (c.rows, c.rows)}
        for label, m in (("a", a), ("b", b), ("c", c)):
            if m.shape != expect[label]:
                raise ShapeError(f"DCFT factor {label} has shape {m.shape}, expected {expect[label]}")
        self.a, self.b, self.c = a, b, c
        self._cache_key = None
        self._cache: Matrix | None = None

    @classmethod
    def create(
        cls,
        d_in: int,
        d_out: int,
        d: int,
        s: int,
        k: int = 1,
        rng: np.random.Generator | None = None,
        std: float = 0.02,
        zero_b: bool = False,
    ) -> "DcftAdapter":
        plan = plan_shapes(d_in, d_out, d, s, k)
        rng = rng if rng is not None else np.random.default_rng()
        a = Matrix.randn(k, plan.f_out, rng, std, requires_grad=True)
        b = Matrix.randn(plan.f_in, k, rng, std, requires_grad=True)
        if zero_b:
            b.data[:] = 0.0
        c = Matrix.randn(d, d, rng, std, requires_grad=True)
        return cls(a, b, c, s, d_in, d_out)

    family = "dcft"

    @property
    def stride(self) -> int:
        return self.plan.s

    @property
    def d(self) -> int:
        return self.plan.d

    @property
    def k(self) -> int:
        return self.plan.k

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.plan.d_in, self.plan.d_out

    def parameters(self) -> dict[str, Matrix]:
        return {"a": self.a, "b": self.b, "c": self.c}

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def subspace(self) -> Matrix:
        return engine.matmul(self.b, self.a)

    def delta(self) -> Matrix:
        """Weight update; cached until any factor changes."""
        key = (
            tuple((id(p), p.version) for p in self.parameters().values()),
            engine.grad_enabled(),
        )
        if key != self._cache_key:
            out = engine.deconv2d(self.subspace(), self.c, self.stride)
            if out.shape != self.target_shape:
                raise ShapeError(f"DCFT delta is {out.shape}, host weight is {self.target_shape}")
            self._cache, self._cache_key = out, key
        return self._cache

    def penalty(self) -> Matrix:
        return orth_penalty(self.a, self.b)


class LoraAdapter:
    """Trainable (A, B) with update ``B @ A`` of rank at most r."""

    family = "lora"

    def __init__(self, a: Matrix, b: Matrix):
        if a.rows != b.cols:
            raise ShapeError(f"LoRA rank mismatch: a is {a.shape}, b is {b.shape}")
        self.a, self.b = a, b
        self._cache_key = None
        self._cache: Matrix | None = None

    @classmethod
    def create(
        cls,
        d_in: int,
        d_out: int,
        r: int = 1,
        rng: np.random.Generator | None = None,
        std: float = 0.02,
        zero_b: bool = False,
    ) -> "LoraAdapter":
        if r < 1 or r > min(d_in, d_out):
            raise ConfigError(f"LoRA rank must be in [1, {min(d_in, d_out)}], got {r}")
        rng = rng if rng is not None else np.random.default_rng()
        a = Matrix.randn(r, d_out, rng, std, requires_grad=True)
        b = Matrix.randn(d_in, r, rng, std, requires_grad=True)
        if zero_b:
            b.data[:] = 0.0
        return cls(a, b)

    @property
    def r(self) -> int:
        return self.a.rows

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.b.rows, self.a.cols

    def parameters(self) -> dict[str, Matrix]:
        return {"a": self.a, "b": self.b}

    def num_params(self) -> int:
        return self.r * (self.b.rows + self.a.cols)

    def delta(self) -> Matrix:
        key = (tuple((id(p), p.version) for p in (self.a, self.b)), engine.grad_enabled())
        if key != self._cache_key:
            self._cache, self._cache_key = engine.matmul(self.b, self.a), key
        return self._cache


Adapter = DcftAdapter | LoraAdapter


def _gram_short(m: Matrix) -> Matrix:
    # Gram matrix over the shorter dimension: k x k for rank-k factors
    return engine.matmul(m, m.T) if m.rows <= m.cols else engine.matmul(m.T, m)


def orth_penalty(a: Matrix, b: Matrix) -> Matrix:
    """``||G(A) - I||_F^2 + ||G(B) - I||_F^2`` with G the short-side Gram matrix.

    For a ``k x F_out`` factor A this is ``A A^T`` and for ``F_in x k`` B it
    is ``B^T B``; both are k x k.
    """
    ga, gb = _gram_short(a), _gram_short(b)
    return engine.add(
        engine.frobenius_norm_sq(engine.sub(ga, Matrix.eye(ga.rows))),
        engine.frobenius_norm_sq(engine.sub(gb, Matrix.eye(gb.rows))),
    )


def _check_host(adapter: Adapter, w0: Matrix) -> None:
    if w0.shape != adapter.target_shape:
        raise ShapeError(f"adapter targets {adapter.target_shape} but weight is {w0.shape}")
    if w0.requires_grad:
        raise UsageError("pretrained weight must be frozen (requires_grad=False)")


def effective_weight(adapter: Adapter, w0: Matrix) -> Matrix:
    """``w0 + delta`` with gradients flowing only into the adapter."""
    _check_host(adapter, w0)
    return engine.add(w0, adapter.delta())


def adapted_forward(adapter: Adapter, w0: Matrix, x: Matrix) -> Matrix:
    return engine.matmul(effective_weight(adapter, w0), x)


def merge(adapter: Adapter, w0: Matrix) -> Matrix:
    """Fold the update into a plain frozen weight matrix."""
    _check_host(adapter, w0)
    with engine.no_grad():
        return Matrix(w0.data + adapter.delta().data)


# -- parameter budgets -----------------------------------------------------


@dataclass(frozen=True)
class BudgetEntry:
    name: str
    plan: ShapePlan

    @property
    def params(self) -> int:
        return self.plan.per_matrix_params

    @property
    def params_before(self) -> int:
        return self.plan.params_before

    @property
    def lora_r1(self) -> int:
        return self.plan.d_in + self.plan.d_out


@dataclass
class ParamBudgetReport:
    entries: list[BudgetEntry]
    layers: int
    d: int
    s: int
    k: int = 1

    @property
    def per_layer(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_params(self) -> int:
        return self.per_layer * self.layers

    @property
    def total_before(self) -> int:
        return sum(e.params_before for e in self.entries) * self.layers

    @property
    def total_lora_r1(self) -> int:
        return sum(e.lora_r1 for e in self.entries) * self.layers


def _normalize_targets(targets) -> list[tuple[str, int, int]]:
    out = []
    for i, t in enumerate(targets):
        if len(t) == 3:
            out.append((str(t[0]), int(t[1]), int(t[2])))
        elif len(t) == 2:
            out.append((f"target{i}", int(t[0]), int(t[1])))
        else:
            raise ConfigError(f"target entry {t!r} must be (d_in, d_out) or (name, d_in, d_out)")
    return out


def count_params(
    targets: Sequence, d: int, s: int, k: int = 1, layers: int = 1
) -> ParamBudgetReport:
    """Trainable DCFT parameters for ``targets`` repeated over ``layers``.

    ``targets`` holds ``(d_in, d_out)`` or ``(name, d_in, d_out)`` tuples.
    The kernel is counted once per adapted matrix.
    """
    if layers < 1:
        raise ConfigError(f"layers must be positive, got {layers}")
    entries = [BudgetEntry(name, plan_shapes(r, c, d, s, k)) for name, r, c in _normalize_targets(targets)]
    return ParamBudgetReport(entries, layers, d, s, k)


def preset_targets(arch: str, targets: Iterable[str] = TARGETS) -> tuple[list[tuple[str, int, int]], int]:
    if arch not in ARCH_PRESETS:
        raise ConfigError(f"unknown arch preset {arch!r}; known: {', '.join(ARCH_PRESETS)}")
    hidden, ffn, layers = ARCH_PRESETS[arch]
    shapes = target_shapes(hidden, ffn)
    return [(t, *shapes[t]) for t in targets], layers


def needs_padding(targets: Sequence, d: int, s: int) -> list[str]:
    """Names of targets that the (d, s) pair cannot tile without padding."""
    bad = []
    for name, r, c in _normalize_targets(targets):
        try:
            plan_shapes(r, c, d, s)
        except ShapeError:
            bad.append(name)
    return bad


def lora_count(targets: Sequence, r: int = 1, layers: int = 1) -> int:
    return sum(r * (a + b) for _, a, b in _normalize_targets(targets)) * layers


def max_ratio_bound(plan: ShapePlan) -> float:
    """Lower bound on before/after count ratio from factoring F (k=1)."""
    return plan.f_in * plan.f_out / (plan.f_in + plan.f_out)
