"""Checkpoint I/O (safetensors layout) and the weight / adapter data model.

The on-disk layout is::

    [8 bytes  little-endian u64 N]
    [N bytes  UTF-8 JSON header: name -> {"dtype", "shape", "data_offsets"}]
    [payload  raw little-endian tensor bytes, offsets relative to payload start]

Only 2-D floating tensors enter the pipeline. They are held in float64 regardless
of the file dtype and written back in their original dtype. Everything else
(biases, norms, scalar ``alpha`` entries) is kept verbatim in ``extras`` so a
load/save cycle never drops data.
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, FormatError, IoError, PairingError, ShapeError

log = logging.getLogger(__name__)

# numpy storage dtype for every supported tag; BF16 is carried as raw uint16
_DTYPES: dict[str, np.dtype] = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
FLOAT_TAGS = ("F64", "F32", "F16", "BF16")
METADATA_KEY = "__metadata__"


def _bf16_to_f64(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.uint32) << 16).view(np.float32).astype(np.float64)


def _f64_to_bf16(x: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    # round to nearest even on the dropped 16 bits
    rounding = ((bits >> 16) & 1) + np.uint32(0x7FFF)
    return ((bits + rounding) >> 16).astype(np.uint16)


def decode_float(raw: np.ndarray, tag: str) -> np.ndarray:
    """Widen a stored float tensor to float64 (exact for every float tag)."""
    if tag == "BF16":
        return _bf16_to_f64(raw)
    return raw.astype(np.float64)


def encode_float(x: np.ndarray, tag: str) -> np.ndarray:
    if tag == "BF16":
        return _f64_to_bf16(x)
    return np.asarray(x, dtype=_DTYPES[tag])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RawTensor:
    """A tensor kept byte-for-byte as stored (``data`` uses the storage dtype)."""

    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray

    def as_float(self) -> np.ndarray:
        if self.dtype not in FLOAT_TAGS:
            return self.data.astype(np.float64)
        return decode_float(self.data, self.dtype)


@dataclass(frozen=True)
class WeightMap:
    """Ordered collection of 2-D float64 matrices loaded from a checkpoint.

    ``dtypes`` records the file dtype of each entry so it can be written back
    unchanged; ``extras`` holds every tensor that did not enter the pipeline.
    """

    entries: dict[str, np.ndarray]
    dtype: str = "F32"
    source_path: str = ""
    dtypes: dict[str, str] = field(default_factory=dict)
    extras: dict[str, RawTensor] = field(default_factory=dict)
    metadata: dict[str, str] | None = None
    skipped: tuple[str, ...] = ()

    def __post_init__(self):
        for key, mat in self.entries.items():
            if mat.ndim != 2 or 0 in mat.shape:
                raise ShapeError(f"{key}: expected a non-empty 2-D matrix, got shape {mat.shape}")
            if mat.dtype != np.float64 or mat.flags.writeable:
                self.entries[key] = _frozen(np.asarray(mat, dtype=np.float64))

    def __getitem__(self, key: str) -> np.ndarray:
        return self.entries[key]

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    def dtype_of(self, key: str) -> str:
        return self.dtypes.get(key, self.dtype)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "WeightMap":
        """Copy with some matrices swapped out; dtypes, extras and order are kept."""
        entries = {k: updates.get(k, v) for k, v in self.entries.items()}
        for k, v in updates.items():
            entries.setdefault(k, v)
        return WeightMap(
            entries=entries,
            dtype=self.dtype,
            source_path=self.source_path,
            dtypes=dict(self.dtypes),
            extras=dict(self.extras),
            metadata=self.metadata,
        )


@dataclass(frozen=True)
class DeltaMap:
    """Per-layer weight updates of one provenance (``fft``, ``lora`` or ``casa``)."""

    entries: dict[str, np.ndarray]
    kind: str
    dtype: str = "F32"

    def __post_init__(self):
        if self.kind not in ("fft", "lora", "casa"):
            raise ValueError(f"unknown delta kind {self.kind!r}")

    def __getitem__(self, key: str) -> np.ndarray:
        return self.entries[key]

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    def dtype_of(self, key: str) -> str:
        return self.dtype


# ---------------------------------------------------------------------------
# reading / writing


def _parse_header(buf: bytes, path: str) -> tuple[dict, int]:
    if len(buf) < 8:
        raise FormatError(f"{path}: file shorter than the 8-byte header length field")
    (n,) = struct.unpack("<Q", buf[:8])
    if n > len(buf) - 8:
        raise FormatError(f"{path}: header length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed JSON header ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")
    return header, 8 + n


def load_checkpoint(path: str | os.PathLike) -> WeightMap:
    """Read a safetensors-layout file into a :class:`WeightMap`.

    2-D float tensors become float64 entries; anything else is stored in
    ``extras`` and its name is listed in ``skipped``.
    """
    path = str(path)
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from None
    header, start = _parse_header(buf, path)
    payload = memoryview(buf)[start:]

    metadata = header.pop(METADATA_KEY, None)
    entries: dict[str, np.ndarray] = {}
    dtypes: dict[str, str] = {}
    extras: dict[str, RawTensor] = {}
    skipped: list[str] = []
    for name, info in header.items():
        try:
            tag = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: bad header entry for {name!r}") from None
        if tag not in _DTYPES:
            raise FormatError(f"{path}: unsupported dtype {tag!r} for {name!r}")
        np_dtype = _DTYPES[tag]
        if not 0 <= begin <= end <= len(payload):
            raise FormatError(f"{path}: data_offsets [{begin}, {end}] of {name!r} out of bounds")
        if end - begin != math.prod(shape) * np_dtype.itemsize:
            raise FormatError(f"{path}: byte length of {name!r} does not match shape {list(shape)}")
        raw = np.frombuffer(payload[begin:end], dtype=np_dtype).reshape(shape)

        if len(shape) == 2 and tag in FLOAT_TAGS and 0 not in shape:
            mat = decode_float(raw, tag)
            if not np.all(np.isfinite(mat)):
                raise DataError(f"{path}: non-finite values in tensor {name!r}")
            entries[name] = _frozen(mat)
            dtypes[name] = tag
        else:
            extras[name] = RawTensor(tag, shape, _frozen(raw.copy()))
            skipped.append(name)

    if skipped:
        log.debug("%s: %d non-matrix tensors kept as extras", path, len(skipped))
    counts = Counter(dtypes.values())
    dtype = counts.most_common(1)[0][0] if counts else "F32"
    return WeightMap(
        entries=entries,
        dtype=dtype,
        source_path=path,
        dtypes=dtypes,
        extras=extras,
        metadata=metadata,
        skipped=tuple(skipped),
    )


def checkpoint_bytes(weights: WeightMap | DeltaMap) -> bytes:
    """Serialize to the safetensors layout. Header keys are sorted and payload
    blocks are laid out in the same sorted order, so output is deterministic."""
    blobs: dict[str, tuple[str, tuple[int, ...], bytes]] = {}
    for key, mat in weights.items():
        if not np.all(np.isfinite(mat)):
            raise DataError(f"non-finite values in tensor {key!r}")
        tag = weights.dtype_of(key)
        blobs[key] = (tag, tuple(mat.shape), encode_float(mat, tag).tobytes())
    for key, raw in getattr(weights, "extras", {}).items():
        if key in blobs:
            raise ShapeError(f"tensor {key!r} present both as matrix and as extra")
        blobs[key] = (raw.dtype, raw.shape, np.ascontiguousarray(raw.data, dtype=_DTYPES[raw.dtype]).tobytes())

    header: dict[str, object] = {}
    metadata = getattr(weights, "metadata", None)
    if metadata:
        header[METADATA_KEY] = metadata
    offset = 0
    chunks = []
    for key in sorted(blobs):
        tag, shape, data = blobs[key]
        header[key] = {"dtype": tag, "shape": list(shape), "data_offsets": [offset, offset + len(data)]}
        offset += len(data)
        chunks.append(data)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def save_checkpoint(weights: WeightMap | DeltaMap, path: str | os.PathLike) -> None:
    data = checkpoint_bytes(weights)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------
# LoRA adapters

DEFAULT_CONVENTIONS: tuple[tuple[str, str], ...] = (
    (".lora_A.weight", ".lora_B.weight"),
    (".lora_down.weight", ".lora_up.weight"),
)


@dataclass(frozen=True)
class LoraPair:
    A: np.ndarray  # rank x d_in
    B: np.ndarray  # d_out x rank
    alpha: float
    convention: tuple[str, str] = DEFAULT_CONVENTIONS[0]
    has_alpha: bool = False
    dtype: str = "F32"

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"inconsistent LoRA factor shapes A{self.A.shape} B{self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])


@dataclass(frozen=True)
class LoraAdapter:
    pairs: dict[str, LoraPair]
    unmatched: tuple[str, ...] = ()
    source_path: str = ""

    def __len__(self) -> int:
        return len(self.pairs)


def pair_lora(raw: WeightMap, conventions: Sequence[tuple[str, str]] = DEFAULT_CONVENTIONS) -> LoraAdapter:
    """Group ``<base><A-suffix>`` / ``<base><B-suffix>`` tensors into pairs.

    ``alpha`` comes from a scalar ``<base>.alpha`` tensor when present, else
    defaults to the rank. Keys that mention ``lora`` but match no convention are
    returned in ``unmatched``.
    """
    pairs: dict[str, LoraPair] = {}
    used: set[str] = set()
    for a_suffix, b_suffix in conventions:
        for key in list(raw.keys()):
            if key in used:
                continue
            if key.endswith(a_suffix):
                base, partner = key[: -len(a_suffix)], key[: -len(a_suffix)] + b_suffix
            elif key.endswith(b_suffix):
                base, partner = key[: -len(b_suffix)], key[: -len(b_suffix)] + a_suffix
            else:
                continue
            if partner not in raw:
                raise PairingError(base)
            a_key, b_key = base + a_suffix, base + b_suffix
            A, B = raw[a_key], raw[b_key]
            if B.shape[1] != A.shape[0]:
                raise PairingError(f"{base}: A{A.shape} and B{B.shape} disagree on rank")
            if base in pairs:
                raise PairingError(f"{base}: factors present under more than one naming convention")
            alpha_key = base + ".alpha"
            has_alpha = alpha_key in raw.extras or alpha_key in raw
            if alpha_key in raw.extras:
                alpha = float(raw.extras[alpha_key].as_float().reshape(-1)[0])
            elif alpha_key in raw:
                alpha = float(raw[alpha_key].reshape(-1)[0])
            else:
                alpha = float(A.shape[0])
            if has_alpha:
                used.add(alpha_key)
            pairs[base] = LoraPair(
                A=A, B=B, alpha=alpha, convention=(a_suffix, b_suffix),
                has_alpha=has_alpha, dtype=raw.dtype_of(a_key),
            )
            used.update((a_key, b_key))

    all_keys = list(raw.keys()) + list(raw.extras)
    unmatched = tuple(k for k in all_keys if k not in used and "lora" in k.lower())
    if unmatched:
        log.warning("%d LoRA-like keys did not match any convention: %s", len(unmatched), ", ".join(unmatched[:5]))
    return LoraAdapter(pairs=pairs, unmatched=unmatched, source_path=raw.source_path)


def load_adapter(path: str | os.PathLike, conventions: Sequence[tuple[str, str]] = DEFAULT_CONVENTIONS) -> LoraAdapter:
    return pair_lora(load_checkpoint(path), conventions)


def adapter_weights(adapter: LoraAdapter) -> WeightMap:
    """Lay an adapter out as a checkpoint in its own naming convention."""
    entries: dict[str, np.ndarray] = {}
    dtypes: dict[str, str] = {}
    extras: dict[str, RawTensor] = {}
    for base, pair in adapter.pairs.items():
        a_suffix, b_suffix = pair.convention
        entries[base + a_suffix] = pair.A
        entries[base + b_suffix] = pair.B
        dtypes[base + a_suffix] = dtypes[base + b_suffix] = pair.dtype
        if pair.has_alpha or pair.alpha != pair.rank:
            tag = pair.dtype
            extras[base + ".alpha"] = RawTensor(tag, (), encode_float(np.array(pair.alpha), tag).reshape(()))
    common = set(dtypes.values())
    return WeightMap(
        entries=entries, dtype=common.pop() if len(common) == 1 else "F32",
        dtypes=dtypes, extras=extras,
    )


def save_adapter(adapter: LoraAdapter, path: str | os.PathLike) -> None:
    save_checkpoint(adapter_weights(adapter), path)


# ---------------------------------------------------------------------------
# deltas


def compute_fft_delta(source: WeightMap, target: WeightMap) -> DeltaMap:
    """``target[k] - source[k]`` on the shared keys; one-sided keys are logged and dropped."""
    only = sorted(set(source.keys()) ^ set(target.keys()))
    if only:
        log.info("%d keys present in only one model are excluded from the delta", len(only))
    entries = {}
    for key, tgt in target.items():
        if key not in source:
            continue
        src = source[key]
        if src.shape != tgt.shape:
            raise ShapeError(f"{key}: source {src.shape} vs target {tgt.shape}")
        entries[key] = _frozen(tgt - src)
    return DeltaMap(entries=entries, kind="fft", dtype=target.dtype)


def lora_delta(pair: LoraPair) -> np.ndarray:
    return pair.scale * (pair.B @ pair.A)


def materialize_lora_delta(adapter: LoraAdapter) -> DeltaMap:
    entries = {base: _frozen(lora_delta(pair)) for base, pair in adapter.pairs.items()}
    dtypes = {p.dtype for p in adapter.pairs.values()}
    return DeltaMap(entries=entries, kind="lora", dtype=dtypes.pop() if len(dtypes) == 1 else "F32")


def resolve_layer_key(base: str, weights: Iterable[str]) -> str | None:
    """Find the model tensor an adapter base key refers to (``base`` or ``base.weight``,
    also with a leading PEFT ``base_model.model.`` prefix removed)."""
    keys = weights if isinstance(weights, (set, dict)) else set(weights)
    candidates = [base, base + ".weight"]
    prefix = "base_model.model."
    if base.startswith(prefix):
        stripped = base[len(prefix):]
        candidates += [stripped, stripped + ".weight"]
    for cand in candidates:
        if cand in keys:
            return cand
    return None
