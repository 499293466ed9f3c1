"""Routing-space ablations of a fine-tuned model.

``partial_distilled`` strips the drift routing that does not touch a dominant
cluster; ``overactivate_dominant_blocks`` adds Gaussian energy to the most
heavily used cluster-pair blocks. Both return full checkpoints that differ
from the target only in the affected 2-D layers.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .arbitration import CasaConfig, detect_dominant
from .routing import ClusterSet, block, cluster_metrics, cluster_rotation_graph, project_routing
from .spectral import SvdTriple, svd, topk_energy
from .tensor_store import WeightMap


@dataclass(frozen=True)
class AblationSpec:
    q: tuple[float, ...] = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    noise_mean: float = 2.0
    noise_var: float = 5.0  # variance, so the stdev is sqrt(5)
    block_fraction: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if any(not 0 <= q <= 1 for q in self.q):
            raise ValueError(f"q values must lie in [0, 1], got {self.q}")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        if not 0 < self.block_fraction <= 1:
            raise ValueError("block_fraction must lie in (0, 1]")


def layer_rng(seed: int, key: str) -> np.random.Generator:
    """Independent PCG64 stream per (seed, layer key); stable across platforms and worker order."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")]))


def drift_clusters(svd_s: SvdTriple, C_fft: np.ndarray, cfg: CasaConfig) -> ClusterSet:
    """Rotation-graph clusters built from the drift routing itself (no LoRA involved)."""
    k = topk_energy(svd_s.S, cfg.energy_fraction)
    return cluster_rotation_graph(C_fft, svd_s.S, k, cfg.tau, cfg.eps)


def keep_mask(svd_s: SvdTriple, C_fft: np.ndarray, cfg: CasaConfig, q: float) -> np.ndarray:
    """Dominance mask at quantile ``q``, with entries outside the clustered
    square always kept so that ``q = 0`` keeps everything."""
    clusters = drift_clusters(svd_s, C_fft, cfg)
    labels = detect_dominant(cluster_metrics(C_fft, clusters), clusters, q, "square")
    mask = labels.D.copy()
    k = clusters.k
    mask[k:, :] = True
    mask[:, k:] = True
    return mask


def partial_distilled_layer(W_s: np.ndarray, W_t: np.ndarray, cfg: CasaConfig, q: float, svd_s: SvdTriple | None = None):
    """Returns ``(W_t_q, removed_energy, total_energy)`` for one layer.

    Energies are squared Frobenius norms of the removed and of the full drift routing.
    """
    svd_s = svd_s or svd(W_s)
    C_fft = project_routing(svd_s, W_t - W_s, "fft").C
    total = float(np.sum(C_fft**2))
    removed = np.where(keep_mask(svd_s, C_fft, cfg, q), 0.0, C_fft)
    if not removed.any():
        return W_t, 0.0, total
    return W_t - svd_s.U @ removed @ svd_s.V.T, float(np.sum(removed**2)), total


def _shared_keys(source: WeightMap, target: WeightMap, include=None) -> list[str]:
    keys = [k for k in target.keys() if k in source and source[k].shape == target[k].shape]
    if include is not None:
        keys = [k for k in keys if include(k)]
    return keys


def _run(fn, keys, jobs):
    if jobs > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, keys))
    return [fn(k) for k in keys]


def partial_distilled(
    source: WeightMap,
    target: WeightMap,
    cfg: CasaConfig,
    q: float,
    jobs: int = 1,
    include=None,
    report: list | None = None,
) -> WeightMap:
    """Target with the non-dominant drift routing removed from every shared layer.

    When ``report`` is a list, one ``{"key", "removed_energy", "total_energy"}``
    dict per processed layer is appended to it.
    """
    keys = _shared_keys(source, target, include)

    def one(key):
        return partial_distilled_layer(source[key], target[key], cfg, q)

    results = _run(one, keys, jobs)
    if report is not None:
        for key, (_, rem, tot) in zip(keys, results):
            report.append({"key": key, "removed_energy": rem, "total_energy": tot})
    return target.replace({key: res[0] for key, res in zip(keys, results)})


def top_blocks(C_fft: np.ndarray, clusters: ClusterSet, fraction: float) -> list[tuple[int, int]]:
    """Cluster-pair blocks with the highest Frobenius norm per entry.

    Returns ``ceil(fraction * M^2)`` (at least one) ``(receiver, sender)``
    cluster pairs, sorted by pair index.
    """
    M = clusters.M
    density = np.empty(M * M)
    for a in range(M):
        for b in range(M):
            blk = block(C_fft, clusters, a, b)
            density[a * M + b] = np.linalg.norm(blk) / blk.size
    count = max(1, math.ceil(round(fraction * M * M, 9)))
    order = np.argsort(-density, kind="stable")[:count]
    return sorted((int(i) // M, int(i) % M) for i in order)


def overactivation_routing(svd_s: SvdTriple, C_fft: np.ndarray, cfg: CasaConfig, spec: AblationSpec, rng: np.random.Generator) -> np.ndarray:
    clusters = drift_clusters(svd_s, C_fft, cfg)
    P = np.zeros_like(C_fft)
    std = math.sqrt(spec.noise_var)
    for a, b in top_blocks(C_fft, clusters, spec.block_fraction):
        rows, cols = clusters.clusters[a], clusters.clusters[b]
        P[np.ix_(rows, cols)] += rng.normal(spec.noise_mean, std, size=(rows.size, cols.size))
    return P


def overactivate_dominant_blocks(
    source: WeightMap,
    target: WeightMap,
    cfg: CasaConfig,
    spec: AblationSpec,
    jobs: int = 1,
    include=None,
) -> WeightMap:
    """Target plus Gaussian routing noise on each layer's top drift blocks."""
    keys = _shared_keys(source, target, include)

    def one(key):
        s = svd(source[key])
        C_fft = project_routing(s, target[key] - source[key], "fft").C
        P = overactivation_routing(s, C_fft, cfg, spec, layer_rng(spec.rng_seed, key))
        if not P.any():
            return target[key]
        return target[key] + s.U @ P @ s.V.T

    return target.replace(dict(zip(keys, _run(one, keys, jobs))))
