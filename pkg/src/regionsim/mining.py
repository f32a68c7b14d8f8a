"""Training-tuple mining: positives, k-reciprocal neighbors, hard negatives.

All similarity inputs are unit descriptors; geographic eligibility always
uses reported (noisy) positions, never ground truth. Gallery items are
addressed by row index, and callers keep row order equal to id order so the
lowest-id tie-break is the lowest row index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import vlad as vlad_mod
from .errors import ParameterError, ShapeError
from .regions import ALL_REGION_IDS, region_view

POSITIVE_RADIUS_M = 10.0
NEGATIVE_RADIUS_M = 25.0
NEGATIVE_POOL_SIZE = 1000


@dataclass(frozen=True)
class TrainingTuple:
    """One training unit: query, easiest positive, ranked difficult
    positives, and negatives with their mined hardest region ids."""

    query_id: int
    easiest_positive: int
    difficult_positives: tuple[int, ...]
    negatives: tuple[int, ...]
    negative_regions: tuple[int, ...]


def easiest_positive(
    query_pos: float,
    query_desc: np.ndarray,
    gallery_pos: np.ndarray,
    gallery_descs: np.ndarray,
) -> Optional[int]:
    """Most similar gallery item within 10 m; None signals no candidate.

    Ties on similarity resolve to the lowest gallery index.
    """
    eligible = np.flatnonzero(np.abs(gallery_pos - query_pos) <= POSITIVE_RADIUS_M)
    if eligible.size == 0:
        return None
    sims = gallery_descs[eligible] @ query_desc
    return int(eligible[np.argmax(sims)])


def sample_negatives(
    query_pos: float,
    query_desc: np.ndarray,
    gallery_pos: np.ndarray,
    gallery_descs: np.ndarray,
    rng: np.random.Generator,
    n: int = 10,
    pool_size: int = NEGATIVE_POOL_SIZE,
) -> list[int]:
    """Uniform sample of n ids from the hardest far-away gallery images.

    The candidate pool is the min(pool_size, available) most query-similar
    images beyond 25 m. A pool smaller than n is returned whole; the caller
    reads the short length as the exhaustion signal.
    """
    far = np.flatnonzero(np.abs(gallery_pos - query_pos) > NEGATIVE_RADIUS_M)
    if far.size == 0:
        return []
    sims = gallery_descs[far] @ query_desc
    order = np.lexsort((far, -sims))  # similarity desc, then lowest id
    pool = far[order][: min(pool_size, far.size)]
    if pool.size <= n:
        return [int(i) for i in pool]
    picked = rng.choice(pool.size, size=n, replace=False)
    return [int(pool[i]) for i in picked]


def _neighbor_order(dist2: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Ascending squared distance, ties by ascending id."""
    return np.lexsort((ids, dist2))


def k_reciprocal(
    query_desc: np.ndarray,
    gallery_descs: np.ndarray,
    k: int,
) -> list[int]:
    """The query's k mutually-nearest gallery neighbors, padded to length k.

    A gallery item qualifies when it lies in the query's top-k and the query
    lies in its own top-k over the other gallery items plus the query (the
    query carries tie-key -1, so it wins distance ties). Qualifying ids come
    first in ascending query distance, then non-qualifying top-k members in
    the same order, so the result is always exactly k ids.
    """
    g = np.asarray(gallery_descs, dtype=np.float64)
    q = np.asarray(query_desc, dtype=np.float64)
    if g.ndim != 2 or q.ndim != 1 or g.shape[1] != q.shape[0]:
        raise ShapeError(f"descriptor shapes do not align: {g.shape} vs {q.shape}")
    n = g.shape[0]
    if k < 1:
        raise ParameterError(f"k must be positive, got {k}")
    if n <= k:
        raise ParameterError(f"gallery size {n} must exceed k={k}")

    diff = g - q
    dq2 = (diff * diff).sum(axis=1)
    topk = _neighbor_order(dq2, np.arange(n))[:k]

    reciprocal = np.zeros(n, dtype=bool)
    for gid in topk:
        others = np.concatenate([np.arange(gid), np.arange(gid + 1, n)])
        dg = g[others] - g[gid]
        cand_d2 = np.concatenate([[dq2[gid]], (dg * dg).sum(axis=1)])
        cand_ids = np.concatenate([[-1], others])
        nearest = _neighbor_order(cand_d2, cand_ids)[:k]
        reciprocal[gid] = bool(np.any(cand_ids[nearest] == -1))

    ordered = [int(i) for i in topk if reciprocal[i]]
    ordered += [int(i) for i in topk if not reciprocal[i]]
    return ordered


def plain_top_k(
    query_desc: np.ndarray,
    gallery_descs: np.ndarray,
    k: int,
) -> list[int]:
    """Plain Euclidean top-k gallery rows: ascending distance, ties lowest id."""
    g = np.asarray(gallery_descs, dtype=np.float64)
    q = np.asarray(query_desc, dtype=np.float64)
    if g.ndim != 2 or q.ndim != 1 or g.shape[1] != q.shape[0]:
        raise ShapeError(f"descriptor shapes do not align: {g.shape} vs {q.shape}")
    if not 1 <= k <= g.shape[0]:
        raise ParameterError(f"k must lie in [1, {g.shape[0]}], got {k}")
    diff = g - q
    d2 = (diff * diff).sum(axis=1)
    return [int(i) for i in _neighbor_order(d2, np.arange(g.shape[0]))[:k]]


def hardest_negative_region(
    query_desc: np.ndarray,
    negative_fm: np.ndarray,
    params: vlad_mod.VladParams,
    region_ids: Sequence[int] = ALL_REGION_IDS,
) -> tuple[int, np.ndarray]:
    """Region of the negative most similar to the query, by exhaustive scan.

    Scores the full map (id 0) and all eight sub-regions with the current
    parameters; ties go to the lowest region id. ``region_ids`` narrows the
    scan for the halves-only ablation.
    """
    best_rid = 0
    best_sim = -np.inf
    best_desc = None
    for rid in region_ids:
        desc = vlad_mod.aggregate_array(params, region_view(negative_fm, rid))
        sim = float(desc @ query_desc)
        if sim > best_sim:
            best_rid, best_sim, best_desc = rid, sim, desc
    return best_rid, best_desc


def tuple_respects_geography(
    t: TrainingTuple,
    query_pos: float,
    gallery_pos: np.ndarray,
    generation: int,
) -> bool:
    """Recheck the 10 m / 25 m rules against raw reported coordinates."""
    if generation == 1:
        if abs(gallery_pos[t.easiest_positive] - query_pos) > POSITIVE_RADIUS_M:
            return False
    elif t.difficult_positives and t.easiest_positive != t.difficult_positives[0]:
        return False
    return all(abs(gallery_pos[n] - query_pos) > NEGATIVE_RADIUS_M for n in t.negatives)
