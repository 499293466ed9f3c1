"""Seeded synthetic source / fine-tuned / LoRA triples with planted structure.

Every layer has a step-like spectrum (three plateaus and a smooth tail). The
fine-tuning drift lives only on the block spanned by the first two plateaus
(the "head" clusters), and the LoRA is a dense random rank-4 update whose
routing spreads over the whole matrix. Both updates are scaled so their
Frobenius norm is ``rigidity * ||S||``, which bounds the relative spectral
change by the same number (Mirsky's inequality).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_store import (
    LoraAdapter,
    LoraPair,
    RawTensor,
    WeightMap,
    decode_float,
    encode_float,
    save_adapter,
    save_checkpoint,
)

SHAPES = ((64, 48), (48, 48))
PLATEAUS = ((10.0, 4), (7.0, 6), (4.0, 8))
HEAD = 10  # directions covered by the first two plateaus
TAIL = (1.2, 0.05)


def planted_spectrum(m: int) -> np.ndarray:
    values = [v for v, n in PLATEAUS for _ in range(n)]
    n_tail = m - len(values)
    if n_tail < 0:
        raise ValueError(f"m={m} too small for the plateau layout")
    values += list(np.geomspace(TAIL[0], TAIL[1], n_tail)) if n_tail else []
    return np.array(values)


def random_orthonormal(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, m)))
    return q * np.sign(np.diag(r))


def _roundtrip(x: np.ndarray, dtype: str) -> np.ndarray:
    return decode_float(encode_float(x, dtype), dtype)


@dataclass
class Fixture:
    source: WeightMap
    target: WeightMap
    adapter: LoraAdapter
    head: dict[str, np.ndarray] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)

    @property
    def keys(self) -> list[str]:
        return list(self.source.keys())

    def write(self, directory: str | Path) -> dict[str, str]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "source": str(d / "source.safetensors"),
            "target": str(d / "target.safetensors"),
            "lora": str(d / "lora.safetensors"),
        }
        save_checkpoint(self.source, paths["source"])
        save_checkpoint(self.target, paths["target"])
        save_adapter(self.adapter, paths["lora"])
        manifest = dict(paths, output=str(d / "out"))
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
        paths["manifest"] = str(d / "manifest.json")
        self.paths = paths
        return paths


def make_fixture(
    seed: int = 0,
    n_layers: int = 8,
    rank: int = 4,
    alpha: float = 8.0,
    drift_rigidity: float = 0.002,
    lora_rigidity: float = 0.002,
    dtype: str = "F64",
) -> Fixture:
    """Build the fixture in memory. ``drift_rigidity=0`` gives target == source."""
    rng = np.random.default_rng(seed)
    src, tgt, extras_s, extras_t = {}, {}, {}, {}
    pairs: dict[str, LoraPair] = {}
    head: dict[str, np.ndarray] = {}
    for i in range(n_layers):
        d_out, d_in = SHAPES[i % len(SHAPES)]
        m = min(d_out, d_in)
        key = f"blocks.{i}.proj.weight"
        s = planted_spectrum(m)
        U = random_orthonormal(rng, d_out, m)
        V = random_orthonormal(rng, d_in, m)
        W_s = _roundtrip((U * s) @ V.T, dtype)

        C_star = np.zeros((m, m))
        C_star[:HEAD, :HEAD] = rng.standard_normal((HEAD, HEAD))
        C_star *= drift_rigidity * np.linalg.norm(s) / np.linalg.norm(C_star)
        W_t = _roundtrip(W_s + U @ C_star @ V.T, dtype) if drift_rigidity else W_s.copy()

        B = rng.standard_normal((d_out, rank))
        A = rng.standard_normal((rank, d_in))
        scale = alpha / rank
        # scale so ||scale * B @ A||_F hits the requested size; split evenly over the factors
        c = np.sqrt(lora_rigidity * np.linalg.norm(s) / (scale * np.linalg.norm(B @ A)))
        base = key[: -len(".weight")]
        pairs[base] = LoraPair(
            A=_roundtrip(A * c, dtype), B=_roundtrip(B * c, dtype), alpha=alpha,
            has_alpha=True, dtype=dtype,
        )

        bias = rng.standard_normal(d_out)
        bias_key = f"blocks.{i}.proj.bias"
        extras_s[bias_key] = RawTensor(dtype, (d_out,), encode_float(bias, dtype))
        extras_t[bias_key] = RawTensor(dtype, (d_out,), encode_float(bias + 0.01 * rng.standard_normal(d_out), dtype))
        src[key], tgt[key] = W_s, W_t
        head[key] = np.arange(HEAD)

    source = WeightMap(entries=src, dtype=dtype, extras=extras_s)
    target = WeightMap(entries=tgt, dtype=dtype, extras=extras_t if drift_rigidity else dict(extras_s))
    return Fixture(source=source, target=target, adapter=LoraAdapter(pairs=pairs), head=head)
