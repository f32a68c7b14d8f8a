"""Soft-assignment VLAD aggregation of feature maps into unit descriptors.

Each spatial position's feature vector is softly assigned to K learned
centers via a softmax over projected similarity scores; per-center residual
means are intra-normalized, flattened, and globally L2-normalized, yielding
a K*D descriptor whose dot products measure view similarity. Centers are the
only parameters; the projection (2*alpha*c_k) and bias (-alpha*|c_k|^2) are
derived from them inside the graph so gradients reach the centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import DegenerateInputError, InitError, ParameterError, ShapeError
from .seeding import derive_rng

DEFAULT_K = 8
# Sharpness is calibrated to the encoder's feature scale (norms ~0.3): the
# init-time assignment entropy should sit between one-hot and uniform, or
# raw-descriptor similarity carries no location signal for mining.
DEFAULT_ALPHA = 100.0
KMEANS_ITERS = 25


@dataclass
class VladParams:
    centers: ag.Tensor  # (K, D)
    alpha: float = DEFAULT_ALPHA

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def init_centers(features: np.ndarray, k: int, seed: int) -> np.ndarray:
    """K-means centers over local feature rows, seeded and fixed-iteration.

    Starts from k distinct feature vectors chosen by the derived rng and runs
    a fixed number of Lloyd iterations; a cluster that loses all members
    keeps its previous center. Fewer than k distinct features is an error.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError(f"expected (N, D) feature rows, got shape {features.shape}")
    if k < 1:
        raise ParameterError(f"k must be positive, got {k}")
    distinct = np.unique(features, axis=0)
    if distinct.shape[0] < k:
        raise InitError(
            f"k-means needs at least {k} distinct features, found {distinct.shape[0]}"
        )
    rng = derive_rng(seed, "vlad-centers")
    centers = distinct[rng.choice(distinct.shape[0], size=k, replace=False)].copy()
    for _ in range(KMEANS_ITERS):
        d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)  # ties resolve to the lowest center id
        for j in range(k):
            members = features[assign == j]
            if members.shape[0] > 0:
                centers[j] = members.mean(axis=0)
    return centers


def aggregate(params: VladParams, fm: ag.Tensor) -> ag.Tensor:
    """Graph-building aggregation of a (D, H, W) feature map to a descriptor.

    Residual rows are averaged over spatial positions rather than summed, so
    their scale does not depend on how many columns a (sub-)map has and the
    smooth intra-normalization treats full maps and small regions alike.
    """
    if fm.ndim != 3:
        raise ShapeError(f"expected (D, H, W) feature map, got shape {fm.shape}")
    d = params.dim
    if fm.shape[0] != d:
        raise ShapeError(f"feature dim {fm.shape[0]} does not match centers dim {d}")
    k = params.k
    n = fm.shape[1] * fm.shape[2]
    c = params.centers
    x = ag.transpose(ag.reshape(fm, (d, n)))  # (N, D)
    proj = ag.scale(c, 2.0 * params.alpha)
    bias = ag.scale(ag.tensor_sum(ag.mul(c, c), axis=1), -params.alpha)
    scores = ag.add(ag.matmul(x, ag.transpose(proj)), bias)  # (N, K)
    assign = ag.softmax(scores, axis=1)
    weighted = ag.matmul(ag.transpose(assign), x)  # (K, D)
    mass = ag.reshape(ag.tensor_sum(assign, axis=0), (k, 1))
    residuals = ag.scale(ag.sub(weighted, ag.mul(mass, c)), 1.0 / n)
    intra = ag.l2_normalize_smooth(residuals, axis=1)
    flat = ag.reshape(intra, (k * d,))
    return ag.l2_normalize(flat)


def aggregate_array(params: VladParams, fm: np.ndarray) -> np.ndarray:
    """Gradient-free aggregation, bitwise identical to :func:`aggregate`."""
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3:
        raise ShapeError(f"expected (D, H, W) feature map, got shape {fm.shape}")
    c = params.centers.data
    k, d = c.shape
    if fm.shape[0] != d:
        raise ShapeError(f"feature dim {fm.shape[0]} does not match centers dim {d}")
    n = fm.shape[1] * fm.shape[2]
    x = fm.reshape(d, -1).T
    proj = c * (2.0 * params.alpha)
    bias = (c * c).sum(axis=1) * -params.alpha
    scores = x @ proj.T + bias
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    assign = e / e.sum(axis=1, keepdims=True)
    weighted = assign.T @ x
    mass = assign.sum(axis=0).reshape(k, 1)
    residuals = (weighted - mass * c) * (1.0 / n)
    s = np.sqrt(
        (residuals * residuals).sum(axis=1, keepdims=True) + ag.SMOOTH_EPS * ag.SMOOTH_EPS
    )
    intra = residuals / s
    flat = intra.reshape(k * d)
    total = float(np.sqrt((flat * flat).sum()))
    if total <= ag.NORM_FLOOR:
        raise DegenerateInputError("aggregated descriptor has near-zero norm")
    return flat / total
