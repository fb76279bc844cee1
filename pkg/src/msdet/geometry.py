"""Point-cloud sampling, neighbor search, and inverse-distance feature upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, interp_rows, linear, relu


@dataclass(frozen=True)
class WIDConfig:
    """Weighted-inverse-distance interpolation settings."""

    k_neighbors: int = 3
    power: float = 2.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.power <= 0:
            raise ValueError("power must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


def farthest_point_sample(coords: np.ndarray, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties broken by lowest index."""
    coords = np.asarray(coords, dtype=np.float64)
    m = coords.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"farthest_point_sample: n={n} out of range [1, {m}]")
    if not 0 <= seed_index < m:
        raise ValueError(f"farthest_point_sample: seed_index={seed_index} out of range")
    picked = np.empty(n, dtype=np.intp)
    picked[0] = seed_index
    min_d = np.linalg.norm(coords - coords[seed_index], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d))  # argmax returns the first (lowest) index on ties
        picked[i] = nxt
        np.minimum(min_d, np.linalg.norm(coords - coords[nxt], axis=1), out=min_d)
    return picked


def knn(queries: np.ndarray, data: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest data points per query, ascending distance, ties by lowest index.

    Returns (indices Q x k, distances Q x k).
    """
    queries = np.asarray(queries, dtype=np.float64)
    data = np.asarray(data, dtype=np.float64)
    m = data.shape[0]
    if k > m:
        raise ValueError(f"knn: k={k} exceeds {m} data points")
    if k < 1:
        raise ValueError("knn: k must be >= 1")
    d2 = ((queries[:, None, :] - data[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return order, dist


def wid_weights(
    query_points: np.ndarray, source_points: np.ndarray, cfg: WIDConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor indices and normalized inverse-distance weights per query.

    A query whose nearest source lies within cfg.epsilon gets weight 1 on
    that neighbor (exact feature copy in the interpolation).
    """
    idx, dist = knn(query_points, source_points, cfg.k_neighbors)
    coincident = dist[:, 0] < cfg.epsilon
    safe = np.where(dist < cfg.epsilon, 1.0, dist)  # masked out below for coincident rows
    w = 1.0 / safe**cfg.power
    w /= w.sum(axis=1, keepdims=True)
    if np.any(coincident):
        w[coincident] = 0.0
        w[coincident, 0] = 1.0
    return idx, w


def wid_interpolate(
    query_points: np.ndarray,
    source_points: np.ndarray,
    source_feats: np.ndarray,
    cfg: WIDConfig,
) -> np.ndarray:
    """Interpolate source features onto query points (convex combination)."""
    source_feats = np.asarray(source_feats, dtype=np.float64)
    idx, w = wid_weights(query_points, source_points, cfg)
    # anchored form: nearest + sum_i w_i (f_i - nearest). Equivalent because
    # the weights sum to 1, but exact for constant fields and coincident
    # queries despite round-off.
    anchor = source_feats[idx[:, 0]]
    delta = source_feats[idx] - anchor[:, None, :]
    return anchor + (delta * w[:, :, None]).sum(axis=1)


def upsample_features(
    encoder_points: np.ndarray,
    encoder_feats: Tensor,
    dense_points: np.ndarray,
    proj: tuple[Tensor, Tensor, Tensor, Tensor],
    cfg: WIDConfig,
) -> Tensor:
    """Interpolate encoder features onto the dense point set, then project.

    proj is (w1, b1, w2, b2) of a linear -> relu -> linear MLP. Interpolation
    weights are constants of the geometry; gradients flow through the MLP and
    the encoder features.
    """
    idx, w = wid_weights(dense_points, encoder_points, cfg)
    h = interp_rows(encoder_feats, idx, w)
    w1, b1, w2, b2 = proj
    return linear(relu(linear(h, w1, b1)), w2, b2)
