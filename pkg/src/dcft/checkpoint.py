"""Binary checkpoints.

Layout (all integers little-endian)::

    magic       8 bytes   b"DCFTCKPT"
    version     u32
    header_len  u64
    header      header_len bytes of canonical JSON (sorted keys, compact)
    n_arrays    u32
    n_arrays x:
        name_len u16, name (utf-8), rows u32, cols u32,
        rows*cols float64 values, row-major

The header carries ``kind`` ("full", "adapters" or "merged"), the model
spec, the adapter config, the train config echo and a manifest listing the
shape of each array in file order. A file is parsed completely and checked against its
manifest before any model object is built.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .engine import Matrix
from .errors import CheckpointError
from .model import AdapterConfig, ModelSpec, ToyTransformer, attach_adapters, build_model

MAGIC = b"DCFTCKPT"
FORMAT_VERSION = 1
KINDS = ("full", "adapters", "merged")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode() if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _adapter_config_dict(cfg: AdapterConfig | None):
    if cfg is None:
        return None
    out = dict(cfg.__dict__)
    out["targets"] = list(cfg.targets)
    return out


def encode(model: ToyTransformer, kind: str = "full", config: dict | None = None) -> bytes:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    if kind == "merged":
        model = model.merged() if model.adapters else model
    arrays: dict[str, np.ndarray] = {}
    if kind in ("full", "merged"):
        arrays.update({k: w.data for k, w in model.weights.items()})
    if kind in ("full", "adapters"):
        arrays.update({k: p.data for k, p in model.adapter_parameters().items()})
    header = {
        "kind": kind,
        "spec": model.spec.__dict__,
        "adapter_config": None if kind == "merged" else _adapter_config_dict(model.adapter_config),
        "backbone_modified": model.backbone_modified,
        "config": config,
        "arrays": [[int(a.shape[0]), int(a.shape[1])] for a in arrays.values()],
    }
    hbytes = canonical_json(header).encode()
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hbytes)), hbytes, struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<II", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: ToyTransformer, path: str | Path, kind: str = "full", config: dict | None = None) -> None:
    atomic_write(path, encode(model, kind, config))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} ({n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, arrays); raises on any inconsistency."""
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a DCFT checkpoint (bad magic)")
    version, hlen = r.unpack("<IQ", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if not isinstance(header, dict) or header.get("kind") not in KINDS:
        raise CheckpointError("checkpoint header lacks a valid kind")
    (count,) = r.unpack("<I", "array count")
    manifest = header.get("arrays", [])
    if count != len(manifest):
        raise CheckpointError(f"array count {count} disagrees with header manifest ({len(manifest)})")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        if not (isinstance(entry, list) and len(entry) == 2 and all(isinstance(v, int) for v in entry)):
            raise CheckpointError(f"malformed manifest entry {entry!r}")
        rows, cols = entry
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "array name").decode()
        except UnicodeDecodeError:
            raise CheckpointError("array name is not valid utf-8") from None
        if name in arrays:
            raise CheckpointError(f"duplicate array {name!r}")
        shape = r.unpack("<II", f"shape of {name}")
        if shape != (rows, cols):
            raise CheckpointError(f"array {name} is {shape}, header says {(rows, cols)}")
        raw = r.take(8 * rows * cols, f"data of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last array")
    return header, arrays


def _fill(target: dict[str, Matrix], arrays: dict[str, np.ndarray], names, what: str) -> None:
    for name in names:
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing {what} array {name}")
        if arrays[name].shape != target[name].shape:
            raise CheckpointError(f"{name}: checkpoint has {arrays[name].shape}, model expects {target[name].shape}")
    for name in names:
        target[name].data[...] = arrays[name]
        target[name].version += 1


def load_checkpoint(path: str | Path, base: ToyTransformer | None = None) -> ToyTransformer:
    """Rebuild a model from ``path``.

    Adapter-only files need the backbone: either ``base`` or, when the
    backbone was never modified, a fresh one regenerated from the ModelSpec seed.
    """
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    header, arrays = decode(buf)
    try:
        spec = ModelSpec(**header["spec"])
        acfg_raw = header.get("adapter_config")
        acfg = None
        if acfg_raw is not None:
            acfg_raw = dict(acfg_raw, targets=tuple(acfg_raw["targets"]))
            acfg = AdapterConfig(**acfg_raw)
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"malformed spec in checkpoint header: {exc}") from None

    kind = header["kind"]
    if kind == "adapters" and base is None and header.get("backbone_modified"):
        raise CheckpointError("adapter-only checkpoint over a modified backbone; pass the base model")
    if kind == "adapters" and base is not None and base.spec != spec:
        raise CheckpointError("base model spec differs from the checkpoint spec")

    model = build_model(spec)
    if kind == "adapters" and base is not None:
        model.weights = {k: Matrix(w.data, name=k) for k, w in base.weights.items()}
    if kind in ("full", "merged"):
        _fill(model.weights, arrays, list(model.weights), "weight")
    model.backbone_modified = bool(header.get("backbone_modified")) or kind == "merged"
    if acfg is not None:
        attach_adapters(model, acfg)
        _fill(model.adapter_parameters(), arrays, list(model.adapter_parameters()), "adapter")
    expected = set(model.weights) if kind != "adapters" else set()
    expected |= set(model.adapter_parameters())
    unexpected = set(arrays) - expected
    if unexpected:
        raise CheckpointError(f"checkpoint has unexpected arrays: {sorted(unexpected)[:5]}")
    return model


def read_header(path: str | Path) -> dict:
    return decode(Path(path).read_bytes())[0]
