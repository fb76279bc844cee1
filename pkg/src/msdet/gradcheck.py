"""Finite-difference verification of every differentiable op and of the
composed dual key-value attention block."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import MHAConfig, MSAParams, msa_dual
from .tensor import Tensor, check_gradient


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random fixed projection to a scalar so every output element matters."""
    w = Tensor(rng.normal(size=out.data.shape))
    return T.sum_all(T.mul(out, w))


def op_checks(seed: int) -> dict[str, float]:
    """Max finite-difference relative error per op for one seed."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    results["matmul"] = check_gradient(
        lambda ts: _weighted(T.matmul(ts[0], ts[1]), np.random.default_rng(seed + 1)),
        [rng.normal(size=(5, 4)), rng.normal(size=(4, 3))],
    )
    results["transpose"] = check_gradient(
        lambda ts: _weighted(T.transpose(ts[0]), np.random.default_rng(seed + 2)),
        [rng.normal(size=(3, 5))],
    )
    results["add"] = check_gradient(
        lambda ts: _weighted(T.add(ts[0], ts[1]), np.random.default_rng(seed + 3)),
        [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))],
    )
    results["mul"] = check_gradient(
        lambda ts: T.sum_all(T.mul(ts[0], ts[1])),
        [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))],
    )
    results["scale"] = check_gradient(
        lambda ts: _weighted(T.scale(ts[0], 2.7), np.random.default_rng(seed + 4)),
        [rng.normal(size=(4, 3))],
    )
    results["relu"] = check_gradient(
        lambda ts: _weighted(T.relu(ts[0]), np.random.default_rng(seed + 5)),
        [rng.normal(size=(4, 4)) + 0.05],  # keep away from the kink
    )
    results["exp"] = check_gradient(
        lambda ts: _weighted(T.exp(ts[0]), np.random.default_rng(seed + 6)),
        [rng.normal(size=(3, 3))],
    )
    results["linear"] = check_gradient(
        lambda ts: _weighted(T.linear(ts[0], ts[1], ts[2]), np.random.default_rng(seed + 7)),
        [rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)],
    )
    results["concat_channels"] = check_gradient(
        lambda ts: _weighted(T.concat_channels(ts[0], ts[1]), np.random.default_rng(seed + 8)),
        [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))],
    )
    results["softmax_rows"] = check_gradient(
        lambda ts: _weighted(T.softmax_rows(ts[0]), np.random.default_rng(seed + 9)),
        [rng.normal(size=(4, 5))],
    )
    results["layer_norm"] = check_gradient(
        lambda ts: _weighted(T.layer_norm(ts[0]), np.random.default_rng(seed + 10)),
        [rng.normal(size=(4, 6))],
    )
    targets = rng.integers(0, 4, size=5)
    results["cross_entropy"] = check_gradient(
        lambda ts: T.cross_entropy(ts[0], targets),
        [rng.normal(size=(5, 4))],
    )
    results["l1_loss"] = check_gradient(
        lambda ts: T.l1_loss(ts[0], ts[1]),
        [rng.normal(size=(4, 3)), rng.normal(size=(4, 3)) + 0.3],
    )
    idx = rng.integers(0, 6, size=4)
    results["gather_rows"] = check_gradient(
        lambda ts: _weighted(T.gather_rows(ts[0], idx), np.random.default_rng(seed + 11)),
        [rng.normal(size=(6, 3))],
    )
    iidx = np.stack([rng.permutation(6)[:3] for _ in range(5)])
    iw = rng.uniform(0.1, 1.0, size=(5, 3))
    iw /= iw.sum(axis=1, keepdims=True)
    results["interp_rows"] = check_gradient(
        lambda ts: _weighted(T.interp_rows(ts[0], iidx, iw), np.random.default_rng(seed + 12)),
        [rng.normal(size=(6, 4))],
    )
    seg = np.asarray([0, 0, 1, 1, 1, 2, 3, 3])
    results["segment_max"] = check_gradient(
        lambda ts: _weighted(T.segment_max(ts[0], seg, 4), np.random.default_rng(seed + 13)),
        [rng.normal(size=(8, 3))],
    )

    # composed dual key-value attention block
    cfg = MHAConfig(d_model=8, n_heads=4)
    p = MSAParams(cfg, np.random.default_rng(seed + 14))
    names = sorted(p.tensors())
    blocks = p.tensors()
    q_in = rng.normal(size=(3, 8))
    kv1 = rng.normal(size=(5, 8))
    kv2 = rng.normal(size=(6, 8))

    def build(ts):
        q, k1, k2 = ts[0], ts[1], ts[2]
        local = MSAParams.__new__(MSAParams)
        local.cfg = cfg
        h2 = cfg.n_heads // 2
        getter = dict(zip(names, ts[3:]))
        local.wq = [getter[f"wq{i}"] for i in range(cfg.n_heads)]
        local.wk1 = [getter[f"wk1_{i}"] for i in range(h2)]
        local.wv1 = [getter[f"wv1_{i}"] for i in range(h2)]
        local.wk2 = [getter[f"wk2_{i}"] for i in range(h2)]
        local.wv2 = [getter[f"wv2_{i}"] for i in range(h2)]
        local.wo = getter["wo"]
        return _weighted(msa_dual(q, k1, k2, local), np.random.default_rng(seed + 15))

    inputs = [q_in, kv1, kv2] + [blocks[n].data.copy() for n in names]
    results["msa_dual"] = check_gradient(build, inputs)
    return results


def run_suite(seeds: int = 20, base_seed: int = 0) -> dict[str, float]:
    """Worst relative error per op across seeds."""
    worst: dict[str, float] = {}
    for s in range(seeds):
        for op, err in op_checks(base_seed + s).items():
            worst[op] = max(worst.get(op, 0.0), err)
    return worst
