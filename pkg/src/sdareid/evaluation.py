"""Retrieval metrics and the anti-forgetting / adaptation protocols."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from sdareid.data import DomainDataset
from sdareid.model import ModelBundle, backbone_forward, decode, encode_distribution, refine
from sdareid.pfa import class_centroids

MAX_RANK = 20


@dataclass(frozen=True)
class EvalResult:
    domain: int
    mAP: float
    cmc: tuple[float, ...]
    query_count: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.mAP <= 1.0:
            raise ValueError(f"mAP {self.mAP} outside [0, 1]")
        if any(b < a for a, b in zip(self.cmc, self.cmc[1:])) or (self.cmc and self.cmc[-1] > 1.0):
            raise ValueError(f"CMC must be non-decreasing and <= 1: {self.cmc}")

    def rank(self, k: int) -> float:
        if not self.cmc:
            return 0.0
        return self.cmc[min(k, len(self.cmc)) - 1]

    @property
    def rank1(self) -> float:
        return self.rank(1)


def backbone_features(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    return backbone_forward(bundle, x).data


def extract_refined_features(bundle: ModelBundle, x: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Backbone -> latent mean -> decoder -> refine gate, optionally L2-normalised rows."""
    x_s = backbone_forward(bundle, x).data
    latent = encode_distribution(bundle, x_s)
    x_gen = decode(bundle, latent.mu.data)
    _, x_r = refine(bundle, x_s, x_gen.data)
    out = x_r.data
    if normalize:
        norms = np.sqrt(np.einsum("ij,ij->i", out, out))
        out = out / np.maximum(norms, 1e-12)[:, None]
    return out


def average_precision(ranked_relevance) -> float:
    """Mean over relevant positions r of (relevant items in the top r) / r."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if len(hits) == 0:
        raise ValueError("average precision needs at least one relevant item")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances from explicit differences (exact zero for equal rows)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _score_query(dist_row, q_id, q_cam, g_ids, g_cams, max_rank):
    keep = ~((g_ids == q_id) & (g_cams == q_cam))
    order = np.argsort(dist_row[keep], kind="stable")
    rel = (g_ids[keep] == q_id)[order]
    if not rel.any():
        return None
    first = int(np.argmax(rel))
    hit = np.zeros(max_rank)
    if first < max_rank:
        hit[first:] = 1.0
    return average_precision(rel), hit


def score_ranking(
    dist: np.ndarray,
    q_ids: np.ndarray,
    q_cams: np.ndarray,
    g_ids: np.ndarray,
    g_cams: np.ndarray,
    domain: int = 0,
    max_rank: int = MAX_RANK,
    threads: int = 1,
) -> EvalResult:
    """mAP and CMC from a query x gallery distance matrix.

    Gallery items sharing identity and camera with the query are ignored;
    queries left without a true match are dropped with a warning.  Per-query
    work may run on ``threads`` workers; results are reduced in query order.
    """
    rows = list(range(len(q_ids)))

    def work(i):
        return _score_query(dist[i], q_ids[i], q_cams[i], g_ids, g_cams, max_rank)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(work, rows))
    else:
        scored = [work(i) for i in rows]
    kept = [s for s in scored if s is not None]
    dropped = len(scored) - len(kept)
    if dropped:
        warnings.warn(f"{dropped} queries had no cross-camera match and were dropped", stacklevel=2)
    if not kept:
        return EvalResult(domain, 0.0, tuple(0.0 for _ in range(max_rank)), 0)
    aps = np.array([s[0] for s in kept])
    hits = np.stack([s[1] for s in kept])
    cmc = hits.mean(axis=0)
    return EvalResult(domain, float(aps.mean()), tuple(float(c) for c in cmc), len(kept))


def evaluate_retrieval(
    bundle: ModelBundle,
    query: DomainDataset,
    gallery: DomainDataset,
    normalize: bool = True,
    threads: int = 1,
) -> EvalResult:
    qf = extract_refined_features(bundle, query.x, normalize)
    gf = extract_refined_features(bundle, gallery.x, normalize)
    return score_ranking(
        pairwise_distances(qf, gf),
        query.identity,
        query.camera,
        gallery.identity,
        gallery.camera,
        query.domain,
        threads=threads,
    )


@dataclass
class AntiForgetting:
    results: list[EvalResult]
    mean_mAP: float
    mean_rank1: float


def anti_forgetting_eval(
    bundle: ModelBundle,
    test_sets: list[tuple[DomainDataset, DomainDataset]],
    normalize: bool = True,
    threads: int = 1,
) -> AntiForgetting:
    """Evaluate on every seen domain; macro-average mAP and rank-1."""
    if not test_sets:
        raise ValueError("need at least one seen domain")
    results = [evaluate_retrieval(bundle, q, g, normalize, threads) for q, g in test_sets]
    return AntiForgetting(
        results,
        float(np.mean([r.mAP for r in results])),
        float(np.mean([r.rank1 for r in results])),
    )


def adaptation_eval(
    bundle: ModelBundle, query: DomainDataset, gallery: DomainDataset, normalize: bool = True, threads: int = 1
) -> EvalResult:
    return evaluate_retrieval(bundle, query, gallery, normalize, threads)


@dataclass
class ForgettingCurve:
    series: list[float] = field(default_factory=list)
    drop: float = 0.0


def forgetting_curve(history) -> ForgettingCurve:
    series = [float(v) for v in history]
    if not series:
        raise ValueError("forgetting history is empty")
    return ForgettingCurve(series, series[0] - series[-1])


def centroid_shift(before: ModelBundle, after: ModelBundle, dataset: DomainDataset) -> float:
    """Mean Euclidean distance between per-identity backbone-feature centroids
    computed under two bundles."""
    _, c0 = class_centroids(backbone_features(before, dataset.x), dataset.identity)
    _, c1 = class_centroids(backbone_features(after, dataset.x), dataset.identity)
    return float(np.mean(np.sqrt(((c0 - c1) ** 2).sum(axis=1))))
