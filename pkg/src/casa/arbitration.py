"""Cluster-aware spectral arbitration: move a LoRA trained on a source model
onto a fully fine-tuned variant without data.

Per layer, both the LoRA update and the fine-tuning drift are expressed as
routing matrices in the source singular bases. Routing entries that touch
clusters the drift leans on heavily ("dominant") are left to the drift unless
LoRA and drift push the same way hard enough to over-activate; there the
effective routing is capped at the larger of the two magnitudes. Everywhere
else the drift is compensated so the effective routing equals the LoRA's.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .errors import DegenerateError, ShapeError
from .routing import (
    DEFAULT_EPS,
    DEFAULT_TAU,
    ClusterMetrics,
    ClusterSet,
    RoutingMatrix,
    backproject_routing,
    block_cosine,
    cluster_metrics,
    cluster_rotation_graph,
    project_routing,
)
from .spectral import SvdTriple, svd, tail_energy, topk_energy, truncated_factorize
from .tensor_store import LoraAdapter, LoraPair, WeightMap, lora_delta, resolve_layer_key

log = logging.getLogger(__name__)

SCHEMA = "casa-report/1"

RESTORE, PRESERVE, ARBITRATE = 0, 1, 2
REGION_NAMES = {RESTORE: "restore", PRESERVE: "preserve", ARBITRATE: "arbitrate"}


@dataclass(frozen=True)
class CasaConfig:
    energy_fraction: float = 0.9
    tau: float = DEFAULT_TAU
    eps: float = DEFAULT_EPS
    q_dom: float = 0.5
    q_act: float = 0.95
    out_rank: int | None = None  # None: keep each pair's input rank
    residual_policy: str = "passthrough"  # passthrough | discard
    region_policy: str = "square"  # square | strips
    act_population: str = "positive"  # positive | all

    def __post_init__(self):
        if not 0 < self.energy_fraction <= 1:
            raise ValueError(f"energy_fraction must lie in (0, 1], got {self.energy_fraction}")
        for name in ("q_dom", "q_act"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.tau <= 0 or self.eps <= 0:
            raise ValueError("tau and eps must be positive")
        if self.out_rank is not None and self.out_rank < 1:
            raise ValueError(f"out_rank must be >= 1, got {self.out_rank}")
        if self.residual_policy not in ("passthrough", "discard"):
            raise ValueError(f"unknown residual_policy {self.residual_policy!r}")
        if self.region_policy not in ("square", "strips"):
            raise ValueError(f"unknown region_policy {self.region_policy!r}")
        if self.act_population not in ("positive", "all"):
            raise ValueError(f"unknown act_population {self.act_population!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def nearest_rank_quantile(values, q: float) -> float:
    """Smallest element with at least ``ceil(q * n)`` elements at or below it.

    ``q = 0`` returns the minimum, ``q = 1`` the maximum.
    """
    vals = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = vals.size
    if n == 0:
        raise DegenerateError("quantile of an empty set")
    if not 0 <= q <= 1:
        raise ValueError(f"quantile must lie in [0, 1], got {q}")
    # round first so that e.g. 0.7 * 10 counts as 7, not 7.000000000000001
    rank = max(math.ceil(round(q * n, 9)), 1)
    return float(vals[rank - 1])


# ---------------------------------------------------------------------------
# dominance


@dataclass(frozen=True)
class RegionLabels:
    k: int
    dominant_send: tuple[int, ...]
    dominant_recv: tuple[int, ...]
    D: np.ndarray  # bool (m, m)
    region: np.ndarray  # int8 (m, m) over RESTORE / PRESERVE / ARBITRATE
    act_threshold: float | None = None

    @classmethod
    def build(
        cls,
        clusters: ClusterSet,
        dominant_send,
        dominant_recv,
        m: int,
        policy: str = "square",
    ) -> "RegionLabels":
        D = dominance_mask(clusters, dominant_send, dominant_recv, m, policy)
        region = np.where(D, PRESERVE, RESTORE).astype(np.int8)
        return cls(
            k=clusters.k,
            dominant_send=tuple(sorted(int(c) for c in dominant_send)),
            dominant_recv=tuple(sorted(int(c) for c in dominant_recv)),
            D=D,
            region=region,
        )

    def counts(self) -> dict[str, int]:
        return {name: int(np.count_nonzero(self.region == code)) for code, name in REGION_NAMES.items()}


def dominance_mask(clusters: ClusterSet, dominant_send, dominant_recv, m: int, policy: str = "square") -> np.ndarray:
    """Boolean mask of routing entries that touch a dominant cluster.

    Inside the clustered ``k x k`` square an entry ``(i, j)`` is dominant when
    receiver ``i`` sits in a dominant receiving cluster or sender ``j`` in a
    dominant sending one. ``policy="square"`` leaves everything outside the
    square non-dominant; ``"strips"`` extends dominant rows/columns across the
    full matrix.
    """
    k = clusters.k
    if k > m:
        raise ShapeError(f"k={k} exceeds m={m}")
    g = clusters.index_to_cluster
    recv_rows = np.isin(g, list(dominant_recv))
    send_cols = np.isin(g, list(dominant_send))
    D = np.zeros((m, m), dtype=bool)
    if policy == "square":
        D[:k, :k] = recv_rows[:, None] | send_cols[None, :]
    elif policy == "strips":
        D[:k, :] |= recv_rows[:, None]
        D[:, :k] |= send_cols[None, :]
    else:
        raise ValueError(f"unknown region policy {policy!r}")
    return D


def detect_dominant(
    metrics_fft: ClusterMetrics,
    clusters: ClusterSet,
    q_dom: float,
    policy: str = "square",
) -> RegionLabels:
    """Clusters whose drift density reaches the ``q_dom`` nearest-rank quantile
    are dominant, separately on the sending and receiving side."""
    if clusters.M == 0:
        raise DegenerateError("no clusters to rank")
    send, recv = metrics_fft.send_density, metrics_fft.recv_density
    dom_send = np.flatnonzero(send >= nearest_rank_quantile(send, q_dom))
    dom_recv = np.flatnonzero(recv >= nearest_rank_quantile(recv, q_dom))
    return RegionLabels.build(clusters, dom_send, dom_recv, metrics_fft.m, policy)


# ---------------------------------------------------------------------------
# over-activation scoring and arbitration


@dataclass(frozen=True)
class OverActivationScore:
    E: np.ndarray
    context: np.ndarray
    S_score: np.ndarray

    def population(self, labels: RegionLabels, which: str = "positive") -> np.ndarray:
        if which == "positive":
            return self.S_score[labels.D & (self.S_score > 0)]
        if which == "all":
            return self.S_score.ravel()
        raise ValueError(f"unknown population {which!r}")

    def threshold(self, labels: RegionLabels, q_act: float, which: str = "positive") -> float | None:
        pop = self.population(labels, which)
        return nearest_rank_quantile(pop, q_act) if pop.size else None


def context_matrix(C_lora: np.ndarray, C_fft: np.ndarray, clusters: ClusterSet, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Block cosine of each entry's cluster pair; 1 outside the clustered square."""
    m, k = C_lora.shape[0], clusters.k
    ctx = np.ones((m, m))
    cos = block_cosine(C_lora, C_fft, clusters, eps)
    g = clusters.index_to_cluster
    ctx[:k, :k] = cos[np.ix_(g, g)]
    return ctx


def score_overactivation(
    C_lora: RoutingMatrix | np.ndarray,
    C_fft: RoutingMatrix | np.ndarray,
    labels: RegionLabels,
    clusters: ClusterSet,
    eps: float = DEFAULT_EPS,
) -> OverActivationScore:
    Cl = C_lora.C if isinstance(C_lora, RoutingMatrix) else np.asarray(C_lora)
    Cf = C_fft.C if isinstance(C_fft, RoutingMatrix) else np.asarray(C_fft)
    if Cl.shape != Cf.shape or Cl.shape != labels.D.shape:
        raise ShapeError("routing matrices and region labels disagree in shape")
    E = np.maximum(0.0, Cl * Cf) * labels.D
    ctx = context_matrix(Cl, Cf, clusters, eps)
    return OverActivationScore(E=E, context=ctx, S_score=E * ctx)


def arbitrate(
    C_lora: RoutingMatrix | np.ndarray,
    C_fft: RoutingMatrix | np.ndarray,
    labels: RegionLabels,
    score: OverActivationScore,
    q_act: float,
    population: str = "positive",
    layer_key: str = "",
) -> tuple[RoutingMatrix, RegionLabels]:
    """Combine LoRA and drift routing entrywise.

    restore   (non-dominant):        C_casa = C_lora - C_fft
    arbitrate (dominant, S >= Q):    C_casa = max(|C_lora|, |C_fft|) * sign(C_lora) - C_fft
    preserve  (remaining dominant):  C_casa = C_lora

    Only strictly positive scores are ever arbitrated. Returns the new routing
    and the labels with the final region assignment.
    """
    Cl = C_lora.C if isinstance(C_lora, RoutingMatrix) else np.asarray(C_lora)
    Cf = C_fft.C if isinstance(C_fft, RoutingMatrix) else np.asarray(C_fft)
    D = labels.D
    thr = score.threshold(labels, q_act, population)
    if thr is None:
        arb = np.zeros_like(D)
    else:
        arb = D & (score.S_score > 0) & (score.S_score >= thr)

    capped = np.maximum(np.abs(Cl), np.abs(Cf)) * np.sign(Cl) - Cf
    C_casa = np.where(D, np.where(arb, capped, Cl), Cl - Cf)

    region = np.where(D, np.where(arb, ARBITRATE, PRESERVE), RESTORE).astype(np.int8)
    final = RegionLabels(
        k=labels.k, dominant_send=labels.dominant_send, dominant_recv=labels.dominant_recv,
        D=D, region=region, act_threshold=thr,
    )
    return RoutingMatrix(C=C_casa, kind="casa", layer_key=layer_key), final


# ---------------------------------------------------------------------------
# layer / model transfer


@dataclass
class LayerRouting:
    """Intermediate matrices of one layer transfer (kept for inspection, not serialized)."""

    C_lora: np.ndarray
    C_fft: np.ndarray
    C_casa: np.ndarray
    clusters: ClusterSet
    labels: RegionLabels
    score: OverActivationScore
    delta_casa: np.ndarray


@dataclass
class LayerReport:
    key: str
    m: int
    k: int
    M: int
    cluster_sizes: list[int]
    dominant_send: list[int]
    dominant_recv: list[int]
    counts: dict[str, int]
    act_threshold: float | None
    out_rank: int
    residual_norm: float
    factorization_error: float
    tail_bound: float
    routing: LayerRouting | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "routing"}
        return d


@dataclass
class ModelReport:
    config: dict
    layers: list[LayerReport]
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": __version__,
            "config": self.config,
            "inputs": self.inputs,
            "layers": [layer.to_dict() for layer in self.layers],
        }


def transfer_layer(
    svd_s: SvdTriple,
    delta_lora: np.ndarray,
    delta_fft: np.ndarray,
    cfg: CasaConfig,
    out_rank: int | None = None,
    key: str = "",
    keep_routing: bool = False,
) -> tuple[np.ndarray, np.ndarray, LayerReport]:
    """Transfer one layer; returns ``(B, A, report)`` with ``B @ A`` approximating
    the arbitrated update at ``out_rank``."""
    r = out_rank if out_rank is not None else cfg.out_rank
    if r is None:
        raise ValueError("an output rank is required (pass out_rank or set cfg.out_rank)")

    C_lora = project_routing(svd_s, delta_lora, "lora", key)
    C_fft = project_routing(svd_s, delta_fft, "fft", key)
    k = topk_energy(svd_s.S, cfg.energy_fraction)
    clusters = cluster_rotation_graph(C_lora, svd_s.S, k, cfg.tau, cfg.eps)
    labels = detect_dominant(cluster_metrics(C_fft, clusters), clusters, cfg.q_dom, cfg.region_policy)
    score = score_overactivation(C_lora, C_fft, labels, clusters, cfg.eps)
    C_casa, labels = arbitrate(C_lora, C_fft, labels, score, cfg.q_act, cfg.act_population, key)

    delta_casa = backproject_routing(svd_s, C_casa)
    residual = delta_lora - backproject_routing(svd_s, C_lora)
    if cfg.residual_policy == "passthrough":
        delta_casa = delta_casa + residual
    B, A = truncated_factorize(delta_casa, r)
    fact_err = float(np.linalg.norm(delta_casa - B @ A))
    tail = tail_energy(np.linalg.svd(delta_casa, compute_uv=False), r)

    report = LayerReport(
        key=key, m=svd_s.m, k=k, M=clusters.M, cluster_sizes=clusters.sizes,
        dominant_send=list(labels.dominant_send), dominant_recv=list(labels.dominant_recv),
        counts=labels.counts(), act_threshold=labels.act_threshold, out_rank=r,
        residual_norm=float(np.linalg.norm(residual)),
        factorization_error=fact_err, tail_bound=tail,
    )
    if keep_routing:
        report.routing = LayerRouting(
            C_lora=C_lora.C, C_fft=C_fft.C, C_casa=C_casa.C,
            clusters=clusters, labels=labels, score=score, delta_casa=delta_casa,
        )
    return B, A, report


def _repack(pair: LoraPair, B: np.ndarray, A: np.ndarray) -> LoraPair:
    """Fold the adapter's alpha/rank scale out of ``B @ A`` so that the new pair
    materializes to exactly ``B @ A`` while keeping alpha."""
    scale = pair.alpha / A.shape[0]
    root = math.sqrt(abs(scale))
    return LoraPair(
        A=A / root, B=B / (root if scale > 0 else -root),
        alpha=pair.alpha, convention=pair.convention, has_alpha=pair.has_alpha, dtype=pair.dtype,
    )


def transfer_model(
    source: WeightMap,
    target: WeightMap,
    adapter: LoraAdapter,
    cfg: CasaConfig,
    jobs: int = 1,
    keep_routing: bool = False,
) -> tuple[LoraAdapter, ModelReport]:
    """Run :func:`transfer_layer` for every adapted layer.

    Layers may run on a thread pool; results are merged in adapter key order so
    the output does not depend on ``jobs``.
    """
    plan: list[tuple[str, str, LoraPair]] = []
    for base, pair in adapter.pairs.items():
        key = resolve_layer_key(base, source.entries)
        if key is None or key not in target:
            raise KeyError(base)
        if source[key].shape != pair.shape:
            raise ShapeError(f"{base}: adapter update {pair.shape} vs weight {source[key].shape}")
        if target[key].shape != source[key].shape:
            raise ShapeError(f"{key}: source {source[key].shape} vs target {target[key].shape}")
        plan.append((base, key, pair))

    def run(item):
        base, key, pair = item
        log.info("transferring %s", key)
        r = cfg.out_rank if cfg.out_rank is not None else pair.rank
        B, A, rep = transfer_layer(
            svd(source[key]), lora_delta(pair), target[key] - source[key], cfg,
            out_rank=r, key=key, keep_routing=keep_routing,
        )
        return base, _repack(pair, B, A), rep

    if jobs > 1 and len(plan) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, plan))
    else:
        results = [run(item) for item in plan]

    pairs = {base: new_pair for base, new_pair, _ in results}
    out = LoraAdapter(pairs=pairs, source_path=adapter.source_path)
    return out, ModelReport(config=cfg.to_dict(), layers=[rep for _, _, rep in results])
