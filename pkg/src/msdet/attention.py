"""Scaled dot-product attention, multi-head attention, and the dual
key-value variant that mixes coarse and upsampled point features under a
shared set of queries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat_channels, matmul, scale, softmax_rows, transpose


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MHAConfig:
    d_model: int = 256
    n_heads: int = 8

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class AttentionParams:
    """Per-head query/key/value projections plus the output projection."""

    def __init__(self, cfg: MHAConfig, rng: np.random.Generator):
        d, dh = cfg.d_model, cfg.head_dim
        s = 1.0 / math.sqrt(d)
        self.cfg = cfg
        self.wq = [Tensor(rng.normal(0, s, (d, dh)), requires_grad=True) for _ in range(cfg.n_heads)]
        self.wk = [Tensor(rng.normal(0, s, (d, dh)), requires_grad=True) for _ in range(cfg.n_heads)]
        self.wv = [Tensor(rng.normal(0, s, (d, dh)), requires_grad=True) for _ in range(cfg.n_heads)]
        self.wo = Tensor(rng.normal(0, s, (d, d)), requires_grad=True)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i in range(self.cfg.n_heads):
            out[f"wq{i}"] = self.wq[i]
            out[f"wk{i}"] = self.wk[i]
            out[f"wv{i}"] = self.wv[i]
        out["wo"] = self.wo
        return out


class MSAParams:
    """Dual key-value attention parameters.

    Heads are split in half: heads 0..h/2-1 attend the first key-value set,
    heads h/2..h-1 the second. Query projections cover all heads and act on
    the shared query input.
    """

    def __init__(self, cfg: MHAConfig, rng: np.random.Generator):
        if cfg.n_heads % 2 != 0:
            raise ConfigError(f"dual-branch attention needs an even head count, got {cfg.n_heads}")
        d, dh = cfg.d_model, cfg.head_dim
        s = 1.0 / math.sqrt(d)
        self.cfg = cfg
        h2 = cfg.n_heads // 2
        self.wq = [Tensor(rng.normal(0, s, (d, dh)), requires_grad=True) for _ in range(cfg.n_heads)]
        self.wk1 = [Tensor(rng.normal(0, s, (d, dh)), requires_grad=True) for _ in range(h2)]
        self.wv1 = [Tensor(rng.normal(0, s, (d, dh)), requires_grad=True) for _ in range(h2)]
        self.wk2 = [Tensor(rng.normal(0, s, (d, dh)), requires_grad=True) for _ in range(h2)]
        self.wv2 = [Tensor(rng.normal(0, s, (d, dh)), requires_grad=True) for _ in range(h2)]
        self.wo = Tensor(rng.normal(0, s, (d, d)), requires_grad=True)

    @classmethod
    def tied_to(cls, p: AttentionParams) -> "MSAParams":
        """Bind both branches to an existing single-set parameter block.

        With identical key-value inputs on both branches the result matches
        plain multi-head attention with p.
        """
        obj = cls.__new__(cls)
        h2 = p.cfg.n_heads // 2
        if p.cfg.n_heads % 2 != 0:
            raise ConfigError("tied_to needs an even head count")
        obj.cfg = p.cfg
        obj.wq = list(p.wq)
        obj.wk1, obj.wv1 = list(p.wk[:h2]), list(p.wv[:h2])
        obj.wk2, obj.wv2 = list(p.wk[h2:]), list(p.wv[h2:])
        obj.wo = p.wo
        return obj

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        h2 = self.cfg.n_heads // 2
        for i in range(self.cfg.n_heads):
            out[f"wq{i}"] = self.wq[i]
        for i in range(h2):
            out[f"wk1_{i}"] = self.wk1[i]
            out[f"wv1_{i}"] = self.wv1[i]
            out[f"wk2_{i}"] = self.wk2[i]
            out[f"wv2_{i}"] = self.wv2[i]
        out["wo"] = self.wo
        return out


def sdpa(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dh)) v."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(f"sdpa: q{q.shape} k{k.shape} v{v.shape}")
    att = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1])))
    return matmul(att, v)


def mha(x_q: Tensor, x_kv: Tensor, p: AttentionParams) -> Tensor:
    d = p.cfg.d_model
    if x_q.shape[1] != d or x_kv.shape[1] != d:
        raise ValueError(f"mha: expected width {d}, got q{x_q.shape} kv{x_kv.shape}")
    heads = [
        sdpa(matmul(x_q, p.wq[i]), matmul(x_kv, p.wk[i]), matmul(x_kv, p.wv[i]))
        for i in range(p.cfg.n_heads)
    ]
    out = heads[0]
    for h in heads[1:]:
        out = concat_channels(out, h)
    return matmul(out, p.wo)


def msa_dual(q_in: Tensor, kv1: Tensor, kv2: Tensor, p: MSAParams) -> Tensor:
    """Dual key-value attention: half the heads read kv1, half read kv2,
    all driven by the shared query input; branch outputs are concatenated
    along channels and projected."""
    d = p.cfg.d_model
    if q_in.shape[1] != d or kv1.shape[1] != d or kv2.shape[1] != d:
        raise ValueError(
            f"msa_dual: expected width {d}, got q{q_in.shape} kv1{kv1.shape} kv2{kv2.shape}"
        )
    h2 = p.cfg.n_heads // 2
    heads = []
    for i in range(h2):
        heads.append(
            sdpa(matmul(q_in, p.wq[i]), matmul(kv1, p.wk1[i]), matmul(kv1, p.wv1[i]))
        )
    for i in range(h2):
        heads.append(
            sdpa(matmul(q_in, p.wq[h2 + i]), matmul(kv2, p.wk2[i]), matmul(kv2, p.wv2[i]))
        )
    out = heads[0]
    for h in heads[1:]:
        out = concat_channels(out, h)
    return matmul(out, p.wo)


def fourier_pos_encode(
    points: np.ndarray, n_freqs: int, d_out: int, bounds: tuple | None = None
) -> np.ndarray:
    """Deterministic sin/cos features of 3D coordinates.

    Coordinates are normalized to [-1, 1] per scene extent (or the given
    (lo, hi) bounds), then encoded at frequencies 2^0 .. 2^(n_freqs-1) and
    zero-padded to d_out channels.
    """
    points = np.asarray(points, dtype=np.float64)
    if d_out < 6 * n_freqs:
        raise ValueError(f"d_out={d_out} too small for {n_freqs} frequencies (needs {6 * n_freqs})")
    if bounds is not None:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
    else:
        lo = points.min(axis=0)
        hi = points.max(axis=0)
    center = (lo + hi) / 2.0
    half = np.maximum((hi - lo) / 2.0, 1e-12)
    x = (points - center) / half
    cols = []
    for f in 2.0 ** np.arange(n_freqs):
        ang = math.pi * f * x
        cols.append(np.sin(ang))
        cols.append(np.cos(ang))
    enc = np.concatenate(cols, axis=1)
    out = np.zeros((points.shape[0], d_out))
    out[:, : enc.shape[1]] = enc
    return out
