"""Routing matrices (updates expressed in a layer's singular bases), the two
clusterings of singular directions, and cluster-level diagnostics.

Indices are 0-based throughout. Row ``i`` of a routing matrix is receiver
direction ``u_i``; column ``j`` is sender direction ``v_j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ShapeError
from .spectral import SvdTriple

KINDS = ("lora", "fft", "casa")
METHODS = ("analysis-graph", "rotation-graph")

DEFAULT_TAU = 5.0
DEFAULT_EPS = 1e-8
DEFAULT_SIMILARITY_THRESHOLD = 0.2


@dataclass(frozen=True)
class RoutingMatrix:
    C: np.ndarray
    kind: str
    layer_key: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown routing kind {self.kind!r}")
        if self.C.ndim != 2 or self.C.shape[0] != self.C.shape[1]:
            raise ShapeError(f"routing matrix must be square, got {self.C.shape}")

    @property
    def m(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class ClusterSet:
    """Partition of the leading ``k`` singular indices into connected components."""

    clusters: tuple[np.ndarray, ...]
    k: int
    method: str
    index_to_cluster: np.ndarray = field(repr=False)

    @classmethod
    def from_labels(cls, labels: np.ndarray, method: str) -> "ClusterSet":
        """Build from arbitrary component labels; clusters are renumbered by
        their smallest member index."""
        labels = np.asarray(labels)
        k = labels.shape[0]
        clusters: list[np.ndarray] = []
        seen: dict[int, int] = {}
        mapping = np.empty(k, dtype=np.int64)
        for i in range(k):
            lab = int(labels[i])
            if lab not in seen:
                seen[lab] = len(seen)
            mapping[i] = seen[lab]
        for c in range(len(seen)):
            clusters.append(np.flatnonzero(mapping == c))
        mapping.setflags(write=False)
        return cls(clusters=tuple(clusters), k=k, method=method, index_to_cluster=mapping)

    @classmethod
    def singletons(cls, k: int, method: str) -> "ClusterSet":
        return cls.from_labels(np.arange(k), method)

    @property
    def M(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    def cluster_of(self, i: int) -> int:
        if not 0 <= i < self.k:
            raise IndexError(f"index {i} lies outside the clustered top-{self.k} subspace")
        return int(self.index_to_cluster[i])

    def as_lists(self) -> list[list[int]]:
        return [c.tolist() for c in self.clusters]


@dataclass(frozen=True)
class ClusterMetrics:
    send_density: np.ndarray  # (M,)
    recv_density: np.ndarray  # (M,)
    coherence_send: np.ndarray
    coherence_recv: np.ndarray
    cv_send: np.ndarray
    cv_recv: np.ndarray
    rms_block: np.ndarray  # (M, M), rows = receiver cluster
    m: int

    def layer_summary(self) -> dict:
        """Unweighted means over clusters."""
        return {
            "coherence_send": float(self.coherence_send.mean()),
            "coherence_recv": float(self.coherence_recv.mean()),
            "cv_send": float(self.cv_send.mean()),
            "cv_recv": float(self.cv_recv.mean()),
        }


# ---------------------------------------------------------------------------
# projection


def project_routing(svd: SvdTriple, delta: np.ndarray, kind: str, layer_key: str = "") -> RoutingMatrix:
    """``C = U^T delta V`` in the source layer's singular bases."""
    if delta.shape != svd.shape:
        raise ShapeError(f"{layer_key or 'layer'}: update {delta.shape} does not match weight {svd.shape}")
    return RoutingMatrix(C=svd.U.T @ delta @ svd.V, kind=kind, layer_key=layer_key)


def backproject_routing(svd: SvdTriple, C: RoutingMatrix | np.ndarray) -> np.ndarray:
    C = C.C if isinstance(C, RoutingMatrix) else np.asarray(C)
    if C.shape != (svd.m, svd.m):
        raise ShapeError(f"routing matrix {C.shape} does not match m={svd.m}")
    return svd.U @ C @ svd.V.T


# ---------------------------------------------------------------------------
# clustering


def _components(adjacency: np.ndarray) -> np.ndarray:
    _, labels = connected_components(csr_matrix(adjacency), directed=False)
    return labels


def rotation_strength(C: np.ndarray, S: np.ndarray, k: int, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``|C(i,j)| / (|s_i - s_j| + eps)`` on the leading ``k x k`` block."""
    s = np.asarray(S[:k], dtype=np.float64)
    gap = np.abs(s[:, None] - s[None, :])
    return np.abs(C[:k, :k]) / (gap + eps)


def cluster_rotation_graph(
    C_lora: RoutingMatrix | np.ndarray,
    S: np.ndarray,
    k: int,
    tau: float = DEFAULT_TAU,
    eps: float = DEFAULT_EPS,
) -> ClusterSet:
    """Group leading directions whose coupling beats their spectral gap.

    An edge joins ``i != j`` when the rotation strength exceeds ``tau`` in
    either direction; clusters are the connected components.
    """
    C = C_lora.C if isinstance(C_lora, RoutingMatrix) else np.asarray(C_lora)
    if not 1 <= k <= C.shape[0]:
        raise ValueError(f"k={k} outside [1, {C.shape[0]}]")
    if tau <= 0 or eps <= 0:
        raise ValueError("tau and eps must be positive")
    edges = rotation_strength(C, S, k, eps) > tau
    edges = edges | edges.T
    np.fill_diagonal(edges, False)
    return ClusterSet.from_labels(_components(edges), "rotation-graph")


def cluster_similarity_graph(
    U: np.ndarray,
    U_prime: np.ndarray,
    k: int,
    threshold: float = DEFAULT_SIMILARITY_THRESHOLD,
) -> ClusterSet:
    """Cluster pre-adaptation directions by how they mix into post-adaptation ones.

    Builds a bipartite graph between the first ``k`` columns of ``U`` and of
    ``U_prime`` (edge when the absolute cosine exceeds ``threshold``) and keeps
    the components restricted to the pre-adaptation side.
    """
    if U.shape[0] != U_prime.shape[0]:
        raise ShapeError("bases have different row counts")
    if not 1 <= k <= min(U.shape[1], U_prime.shape[1]):
        raise ValueError(f"k={k} exceeds the available basis columns")
    sim = np.abs(U[:, :k].T @ U_prime[:, :k]) > threshold
    adj = np.zeros((2 * k, 2 * k), dtype=bool)
    adj[:k, k:] = sim
    adj[k:, :k] = sim.T
    labels = _components(adj)[:k]
    return ClusterSet.from_labels(labels, "analysis-graph")


# ---------------------------------------------------------------------------
# metrics


def _mean_pairwise_cosine(vectors: np.ndarray) -> float:
    """Mean cosine over distinct pairs of rows; zero vectors count as orthogonal."""
    n = vectors.shape[0]
    if n < 2:
        return 1.0
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    gram = unit @ unit.T
    iu = np.triu_indices(n, 1)
    return float(gram[iu].mean())


def _cv(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    mean = values.mean()
    return float(values.std() / mean) if mean > 0 else 0.0


def block(C: np.ndarray, clusters: ClusterSet, m: int, n: int) -> np.ndarray:
    return C[np.ix_(clusters.clusters[m], clusters.clusters[n])]


def rms_blocks(C: np.ndarray, clusters: ClusterSet) -> np.ndarray:
    M = clusters.M
    out = np.empty((M, M))
    for a in range(M):
        for b in range(M):
            blk = block(C, clusters, a, b)
            out[a, b] = np.linalg.norm(blk) / np.sqrt(blk.size)
    return out


def cluster_metrics(C: RoutingMatrix | np.ndarray, clusters: ClusterSet) -> ClusterMetrics:
    """Sending/receiving density, pattern coherence, energy CV and block RMS
    of a routing matrix over the given clusters.

    Densities are means of full column (send) or row (recv) norms over the
    members. Coherence and CV are 1 and 0 for singleton clusters.
    """
    C = C.C if isinstance(C, RoutingMatrix) else np.asarray(C)
    if clusters.k > C.shape[0]:
        raise ShapeError(f"clusters cover k={clusters.k} > m={C.shape[0]}")
    col_norm = np.linalg.norm(C, axis=0)
    row_norm = np.linalg.norm(C, axis=1)
    M = clusters.M
    send, recv = np.empty(M), np.empty(M)
    coh_s, coh_r = np.empty(M), np.empty(M)
    cv_s, cv_r = np.empty(M), np.empty(M)
    for c, members in enumerate(clusters.clusters):
        send[c] = col_norm[members].mean()
        recv[c] = row_norm[members].mean()
        coh_s[c] = _mean_pairwise_cosine(C[:, members].T)
        coh_r[c] = _mean_pairwise_cosine(C[members, :])
        cv_s[c] = _cv(col_norm[members])
        cv_r[c] = _cv(row_norm[members])
    return ClusterMetrics(
        send_density=send, recv_density=recv,
        coherence_send=coh_s, coherence_recv=coh_r,
        cv_send=cv_s, cv_recv=cv_r,
        rms_block=rms_blocks(C, clusters), m=C.shape[0],
    )


def block_cosine(C_lora: np.ndarray, C_fft: np.ndarray, clusters: ClusterSet, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Frobenius cosine between matching cluster-pair blocks, 0 where either block is zero."""
    M = clusters.M
    out = np.zeros((M, M))
    for a in range(M):
        for b in range(M):
            bl = block(C_lora, clusters, a, b)
            bf = block(C_fft, clusters, a, b)
            nl, nf = np.linalg.norm(bl), np.linalg.norm(bf)
            if nl == 0 or nf == 0:
                continue
            out[a, b] = np.sum(bl * bf) / (nl * nf + eps)
    return out


def interference_maps(
    C_lora: RoutingMatrix | np.ndarray,
    C_fft: RoutingMatrix | np.ndarray,
    clusters: ClusterSet,
    eps: float = DEFAULT_EPS,
) -> tuple[np.ndarray, np.ndarray]:
    """Per cluster pair: co-activation ``rms_lora * rms_fft`` and directional alignment."""
    Cl = C_lora.C if isinstance(C_lora, RoutingMatrix) else np.asarray(C_lora)
    Cf = C_fft.C if isinstance(C_fft, RoutingMatrix) else np.asarray(C_fft)
    if Cl.shape != Cf.shape:
        raise ShapeError(f"routing shapes differ: {Cl.shape} vs {Cf.shape}")
    overlap = rms_blocks(Cl, clusters) * rms_blocks(Cf, clusters)
    return overlap, block_cosine(Cl, Cf, clusters, eps)
