"""A small frozen transformer encoder with adapter attachment points.

Activations are laid out with one column per token (``hidden x tokens``),
so every host weight acts from the left: ``(W0 + delta) @ X``. A batch is
the horizontal concatenation of its sequences; a block-diagonal additive
mask keeps attention within each sequence.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import engine
from .adapters import (
    TARGETS,
    Adapter,
    DcftAdapter,
    LoraAdapter,
    count_params,
    effective_weight,
    merge,
    target_shapes,
)
from .engine import Matrix
from .errors import ConfigError, ShapeError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int = 16
    hidden_dim: int = 16
    ffn_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    num_classes: int = 2
    max_seq_len: int = 16
    seed: int = 0

    def validate(self) -> None:
        for key, value in asdict(self).items():
            if key != "seed" and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"model.{key} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")


@dataclass(frozen=True)
class AdapterConfig:
    family: str = "dcft"
    targets: tuple[str, ...] = TARGETS
    d: int = 2
    s: int = 2
    k: int = 1
    lora_rank: int = 1
    init_std: float = 0.02
    zero_b: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.family not in ("dcft", "lora"):
            raise ConfigError(f"adapter family must be dcft or lora, got {self.family!r}")
        if not self.targets:
            raise ConfigError("targets must not be empty")
        unknown = set(self.targets) - set(TARGETS)
        if unknown:
            raise ConfigError(f"unknown targets: {sorted(unknown)}")
        if self.family == "dcft" and not 1 <= self.s <= self.d:
            raise ConfigError(f"stride must satisfy 1 <= s <= d, got s={self.s}, d={self.d}")
        if self.k < 1 or self.lora_rank < 1:
            raise ConfigError("k and lora_rank must be positive")


def _weight_names(layer: int) -> dict[str, str]:
    return {t: f"layers.{layer}.{t}" for t in TARGETS}


class ToyTransformer:
    """Embedding -> L x [attention + tanh FFN, residual] -> mean pool -> linear head."""

    def __init__(self, spec: ModelSpec, weights: dict[str, Matrix]):
        self.spec = spec
        self.weights = weights
        self.adapters: dict[tuple[int, str], Adapter] = {}
        self.adapter_config: AdapterConfig | None = None
        self.backbone_modified = False

    # -- structure ---------------------------------------------------------

    def host(self, layer: int, target: str) -> Matrix:
        return self.weights[_weight_names(layer)[target]]

    def frozen_state(self) -> dict[str, np.ndarray]:
        return {k: w.data.copy() for k, w in self.weights.items()}

    def adapter_parameters(self) -> dict[str, Matrix]:
        """Trainable matrices in a fixed order, keyed ``adapters.<layer>.<target>.<factor>``."""
        out = {}
        for (layer, target), ad in sorted(self.adapters.items(), key=lambda kv: (kv[0][0], TARGETS.index(kv[0][1]))):
            for fname, p in ad.parameters().items():
                out[f"adapters.{layer}.{target}.{fname}"] = p
        return out

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self.adapter_parameters().values())

    def orth_penalty_total(self) -> Matrix:
        terms = [ad.penalty() for ad in self.adapters.values() if isinstance(ad, DcftAdapter)]
        if not terms:
            return Matrix.zeros(1, 1)
        total = terms[0]
        for t in terms[1:]:
            total = engine.add(total, t)
        return total

    def _weight(self, layer: int, target: str) -> Matrix:
        w0 = self.host(layer, target)
        ad = self.adapters.get((layer, target))
        return w0 if ad is None else effective_weight(ad, w0)

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        sequences: Sequence[np.ndarray],
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Matrix:
        """Logits of shape ``batch x num_classes``."""
        spec = self.spec
        lengths = [len(s) for s in sequences]
        if not lengths:
            raise ShapeError("forward needs at least one sequence")
        if max(lengths) > spec.max_seq_len:
            raise ShapeError(f"sequence length {max(lengths)} exceeds max_seq_len {spec.max_seq_len}")
        ids = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
        positions = np.concatenate([np.arange(n) for n in lengths])
        seg = np.repeat(np.arange(len(lengths)), lengths)
        mask = np.where(seg[:, None] == seg[None, :], 0.0, MASK_VALUE)
        pool = np.zeros((len(ids), len(lengths)))
        pool[np.arange(len(ids)), seg] = 1.0 / np.asarray(lengths, dtype=np.float64)[seg]

        x = engine.add(
            engine.gather_cols(self.weights["embed"], ids),
            engine.gather_cols(self.weights["pos"], positions),
        )
        dh = spec.hidden_dim // spec.num_heads
        scale = 1.0 / np.sqrt(dh)

        def drop(m: Matrix) -> Matrix:
            if dropout <= 0.0 or rng is None:
                return m
            keep = (rng.random(m.shape) >= dropout) / (1.0 - dropout)
            return engine.mul(m, Matrix(keep))

        for layer in range(spec.num_layers):
            q = engine.matmul(self._weight(layer, "Q"), x)
            k = engine.matmul(self._weight(layer, "K"), x)
            v = engine.matmul(self._weight(layer, "V"), x)
            heads = []
            for h in range(spec.num_heads):
                lo, hi = h * dh, (h + 1) * dh
                qh, kh, vh = (engine.slice_rows(m, lo, hi) for m in (q, k, v))
                scores = engine.scale(engine.matmul(engine.transpose(qh), kh), scale)
                probs = engine.softmax_rows(scores, mask)
                heads.append(engine.matmul(vh, engine.transpose(probs)))
            attn = engine.matmul(self._weight(layer, "O"), engine.vstack(heads))
            x = engine.add(x, drop(attn))

            hidden = engine.tanh(
                engine.add(engine.matmul(self._weight(layer, "FFN_in"), x), self.weights[f"layers.{layer}.b_in"])
            )
            ffn = engine.add(
                engine.matmul(self._weight(layer, "FFN_out"), hidden), self.weights[f"layers.{layer}.b_out"]
            )
            x = engine.add(x, drop(ffn))

        pooled = engine.matmul(x, Matrix(pool))
        logits = engine.add(engine.matmul(self.weights["head.W"], pooled), self.weights["head.b"])
        return engine.transpose(logits)

    def predict(self, sequences: Sequence[np.ndarray]) -> np.ndarray:
        with engine.no_grad():
            return np.argmax(self.forward(sequences).data, axis=1)

    # -- merge ---------------------------------------------------------------

    def merged(self) -> "ToyTransformer":
        """Standalone copy with every adapter folded into its host weight."""
        weights = {k: Matrix(w.data) for k, w in self.weights.items()}
        for (layer, target), ad in self.adapters.items():
            name = _weight_names(layer)[target]
            weights[name] = merge(ad, self.weights[name])
        out = ToyTransformer(self.spec, weights)
        out.backbone_modified = True
        return out


def build_model(spec: ModelSpec) -> ToyTransformer:
    """Seeded random frozen backbone."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, f = spec.hidden_dim, spec.ffn_dim
    weights: dict[str, Matrix] = {
        "embed": Matrix.randn(h, spec.vocab_size, rng, 1.0),
        "pos": Matrix.randn(h, spec.max_seq_len, rng, 0.1),
    }
    shapes = target_shapes(h, f)
    for layer in range(spec.num_layers):
        for target, name in _weight_names(layer).items():
            rows, cols = shapes[target]
            weights[name] = Matrix.randn(rows, cols, rng, 1.0 / np.sqrt(cols))
        weights[f"layers.{layer}.b_in"] = Matrix.randn(f, 1, rng, 0.1)
        weights[f"layers.{layer}.b_out"] = Matrix.randn(h, 1, rng, 0.1)
    weights["head.W"] = Matrix.randn(spec.num_classes, h, rng, 1.0 / np.sqrt(h))
    weights["head.b"] = Matrix.zeros(spec.num_classes, 1)
    for name, w in weights.items():
        w.name = name
    return ToyTransformer(spec, weights)


def attach_adapters(model: ToyTransformer, cfg: AdapterConfig) -> None:
    """One adapter per (layer, target); shape problems are collected across targets."""
    cfg.validate()
    if model.adapters:
        raise ConfigError("model already has adapters attached")
    rng = np.random.default_rng(cfg.seed)
    errors = []
    created: dict[tuple[int, str], Adapter] = {}
    for layer in range(model.spec.num_layers):
        for target in cfg.targets:
            rows, cols = model.host(layer, target).shape
            try:
                if cfg.family == "dcft":
                    ad = DcftAdapter.create(rows, cols, cfg.d, cfg.s, cfg.k, rng=rng, std=cfg.init_std, zero_b=cfg.zero_b)
                else:
                    ad = LoraAdapter.create(rows, cols, cfg.lora_rank, rng=rng, std=cfg.init_std, zero_b=cfg.zero_b)
            except ShapeError as exc:
                if layer == 0:
                    errors.append(f"{target} ({rows}x{cols}): {exc}")
                continue
            for fname, p in ad.parameters().items():
                p.name = f"adapters.{layer}.{target}.{fname}"
            created[(layer, target)] = ad
    if errors:
        raise ShapeError("cannot attach adapters:\n  " + "\n  ".join(errors))
    model.adapters = created
    model.adapter_config = cfg


def expected_trainable(spec: ModelSpec, cfg: AdapterConfig) -> int:
    """Trainable count predicted by the budget algebra, without building a model."""
    shapes = target_shapes(spec.hidden_dim, spec.ffn_dim)
    targets = [(t, *shapes[t]) for t in cfg.targets]
    if cfg.family == "lora":
        return sum(cfg.lora_rank * (r + c) for _, r, c in targets) * spec.num_layers
    return count_params(targets, cfg.d, cfg.s, cfg.k, spec.num_layers).total_params
