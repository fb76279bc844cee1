"""End-to-end detector: set-abstraction pre-encoder, transformer encoder,
decoder with the dual key-value attention in its first layer, box heads,
bipartite matching, loss, training step, and inference."""

from __future__ import annotations

import hashlib
import io
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .attention import (
    AttentionParams,
    ConfigError,
    MHAConfig,
    MSAParams,
    fourier_pos_encode,
    mha,
    msa_dual,
)
from .boxes import Box3D, DetectionResult
from .geometry import WIDConfig, farthest_point_sample, wid_weights
from .scenes import Scene, atomic_write_bytes
from .tensor import Tensor


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_raw_points: int = 2048
    n_encoder_points: int = 512
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 3
    n_decoder_layers: int = 4
    n_queries: int = 16
    n_classes: int = 6
    msa_enabled: bool = False
    masked_encoder: bool = False
    sa_radius: float = 0.4
    sa_group_cap: int = 16
    mlp_hidden: int = 0  # 0 means 2 * d_model
    lambda_cls: float = 1.0
    lambda_center: float = 5.0
    lambda_size: float = 1.0

    def __post_init__(self):
        if self.n_encoder_points > self.n_raw_points:
            raise ConfigError("n_encoder_points must not exceed n_raw_points")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.msa_enabled and self.masked_encoder:
            raise ConfigError(
                "msa_enabled cannot be combined with a masked encoder: the "
                "masking stage removes the points the dense branch needs"
            )
        if self.msa_enabled and self.n_heads % 2 != 0:
            raise ConfigError("msa_enabled needs an even head count")
        if self.n_dense_points > self.n_raw_points:
            raise ConfigError("n_dense_points must not exceed n_raw_points")

    @property
    def n_dense_points(self) -> int:
        return 2 * self.n_encoder_points

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden > 0 else 2 * self.d_model

    @property
    def n_freqs(self) -> int:
        return max(1, min(8, self.d_model // 6))


@dataclass
class MatchResult:
    assignment: list  # per query: GT index or None ("no object")
    total_cost: float


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost injective assignment of GT columns to query rows."""
    cost = np.asarray(cost, dtype=np.float64)
    qn, g = cost.shape
    if qn < g:
        raise ValueError(f"hungarian_match: {qn} queries < {g} ground-truth boxes")
    rows, cols = linear_sum_assignment(cost)
    assignment: list = [None] * qn
    for r, c in zip(rows, cols):
        assignment[r] = int(c)
    return MatchResult(assignment=assignment, total_cost=float(cost[rows, cols].sum()))


# ---------------------------------------------------------------------------
# parameter blocks


def _lin_init(rng, fan_in, fan_out, gain=1.0):
    w = Tensor(rng.normal(0, gain / math.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


class MLPParams:
    def __init__(self, rng, d_in, hidden, d_out):
        self.w1, self.b1 = _lin_init(rng, d_in, hidden)
        self.w2, self.b2 = _lin_init(rng, hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(T.relu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class EncoderLayerParams:
    def __init__(self, rng, mcfg: MHAConfig, hidden: int):
        self.attn = AttentionParams(mcfg, rng)
        self.mlp = MLPParams(rng, mcfg.d_model, hidden, mcfg.d_model)

    def tensors(self):
        out = {f"attn.{k}": v for k, v in self.attn.tensors().items()}
        out.update({f"mlp.{k}": v for k, v in self.mlp.tensors().items()})
        return out


class DecoderLayerParams:
    def __init__(self, rng, mcfg: MHAConfig, hidden: int, dual: bool):
        self.self_attn = AttentionParams(mcfg, rng)
        self.cross = MSAParams(mcfg, rng) if dual else AttentionParams(mcfg, rng)
        self.dual = dual
        self.mlp = MLPParams(rng, mcfg.d_model, hidden, mcfg.d_model)

    def tensors(self):
        out = {f"self.{k}": v for k, v in self.self_attn.tensors().items()}
        out.update({f"cross.{k}": v for k, v in self.cross.tensors().items()})
        out.update({f"mlp.{k}": v for k, v in self.mlp.tensors().items()})
        return out


def encode(x: Tensor, pos: Tensor, layers: list[EncoderLayerParams]) -> Tensor:
    """Stack of self-attention blocks; zero layers is the identity."""
    for layer in layers:
        xin = T.add(x, pos)
        a = mha(xin, xin, layer.attn)
        x = T.layer_norm(T.add(x, a))
        x = T.layer_norm(T.add(x, layer.mlp(x)))
    return x


def decode(
    q: Tensor,
    kv1: Tensor,
    kv2: Tensor | None,
    layers: list[DecoderLayerParams],
    msa_enabled: bool,
) -> Tensor:
    if msa_enabled and kv2 is None:
        raise ConfigError("decode: dense features required when msa is enabled")
    for j, layer in enumerate(layers):
        a = mha(q, q, layer.self_attn)
        q = T.layer_norm(T.add(q, a))
        if layer.dual:
            c = msa_dual(q, kv1, kv2, layer.cross)
        else:
            c = mha(q, kv1, layer.cross)
        q = T.layer_norm(T.add(q, c))
        q = T.layer_norm(T.add(q, layer.mlp(q)))
    return q


# ---------------------------------------------------------------------------
# per-scene geometry (constant across training steps)


@dataclass
class SceneGeometry:
    enc_points: np.ndarray
    group_offsets: np.ndarray  # flattened (offset rows per group)
    segment_ids: np.ndarray
    dense_points: np.ndarray
    wid_idx: np.ndarray
    wid_w: np.ndarray
    enc_pos: np.ndarray
    dense_pos: np.ndarray
    anchors: np.ndarray
    query_pos: np.ndarray


def lexicographic_seed(points: np.ndarray) -> int:
    """Index of the lexicographically smallest point; permutation-stable."""
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return int(order[0])


def ball_groups(
    centers: np.ndarray, points: np.ndarray, radius: float, cap: int,
    center_idx: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Neighbors within radius per center, nearest first, capped; the center
    point itself always leads its group. Returns (flat offsets, segment ids)."""
    offsets = []
    seg = []
    d2 = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    r2 = radius * radius
    for g in range(centers.shape[0]):
        inside = np.flatnonzero(d2[g] <= r2)
        order = inside[np.argsort(d2[g, inside], kind="stable")]
        order = order[order != center_idx[g]][: cap - 1]
        members = np.concatenate([[center_idx[g]], order])
        offsets.append(points[members] - centers[g])
        seg.extend([g] * len(members))
    return np.concatenate(offsets, axis=0), np.asarray(seg, dtype=np.intp)


class Detector:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.wid = WIDConfig()
        rng = np.random.default_rng(seed)
        d, hid = cfg.d_model, cfg.hidden
        mcfg = MHAConfig(d_model=d, n_heads=cfg.n_heads)
        self.sa_mlp = MLPParams(rng, 3, max(32, d // 2), d)
        self.enc_layers = [
            EncoderLayerParams(rng, mcfg, hid) for _ in range(cfg.n_encoder_layers)
        ]
        self.dec_layers = [
            DecoderLayerParams(rng, mcfg, hid, dual=(cfg.msa_enabled and j == 0))
            for j in range(cfg.n_decoder_layers)
        ]
        self.up_proj = MLPParams(rng, d, d, d) if cfg.msa_enabled else None
        self.query_w, self.query_b = _lin_init(rng, d, d)
        self.head_cls_w, self.head_cls_b = _lin_init(rng, d, cfg.n_classes + 1, gain=0.1)
        self.head_center_w, self.head_center_b = _lin_init(rng, d, 3, gain=0.1)
        self.head_size_w, self.head_size_b = _lin_init(rng, d, 3, gain=0.1)
        self._geo_cache: dict[str, SceneGeometry] = {}

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update({f"sa.{k}": v for k, v in self.sa_mlp.tensors().items()})
        for i, layer in enumerate(self.enc_layers):
            out.update({f"enc{i}.{k}": v for k, v in layer.tensors().items()})
        for j, layer in enumerate(self.dec_layers):
            out.update({f"dec{j}.{k}": v for k, v in layer.tensors().items()})
        if self.up_proj is not None:
            out.update({f"up.{k}": v for k, v in self.up_proj.tensors().items()})
        out["query.w"] = self.query_w
        out["query.b"] = self.query_b
        out["head.cls.w"] = self.head_cls_w
        out["head.cls.b"] = self.head_cls_b
        out["head.center.w"] = self.head_center_w
        out["head.center.b"] = self.head_center_b
        out["head.size.w"] = self.head_size_w
        out["head.size.b"] = self.head_size_b
        return out

    def parameter_count(self) -> int:
        return sum(int(np.prod(t.data.shape)) for t in self.parameters().values())

    # -- geometry -----------------------------------------------------------

    def scene_geometry(self, scene: Scene) -> SceneGeometry:
        key = scene.scene_id + hashlib.sha1(
            np.ascontiguousarray(scene.points).tobytes()
        ).hexdigest()
        cached = self._geo_cache.get(key)
        if cached is not None:
            return cached
        cfg = self.cfg
        pts = np.asarray(scene.points, dtype=np.float64)
        seed = lexicographic_seed(pts)
        enc_idx = farthest_point_sample(pts, cfg.n_encoder_points, seed)
        enc_points = pts[enc_idx]
        offsets, seg = ball_groups(
            enc_points, pts, cfg.sa_radius, cfg.sa_group_cap, enc_idx
        )
        dense_idx = farthest_point_sample(pts, cfg.n_dense_points, seed)
        dense_points = pts[dense_idx]
        widx, ww = wid_weights(dense_points, enc_points, self.wid)
        bounds = (pts.min(axis=0), pts.max(axis=0))
        enc_pos = fourier_pos_encode(enc_points, cfg.n_freqs, cfg.d_model, bounds)
        dense_pos = fourier_pos_encode(dense_points, cfg.n_freqs, cfg.d_model, bounds)
        q_idx = farthest_point_sample(
            enc_points, cfg.n_queries, lexicographic_seed(enc_points)
        )
        anchors = enc_points[q_idx]
        query_pos = fourier_pos_encode(anchors, cfg.n_freqs, cfg.d_model, bounds)
        geo = SceneGeometry(
            enc_points=enc_points,
            group_offsets=offsets,
            segment_ids=seg,
            dense_points=dense_points,
            wid_idx=widx,
            wid_w=ww,
            enc_pos=enc_pos,
            dense_pos=dense_pos,
            anchors=anchors,
            query_pos=query_pos,
        )
        self._geo_cache[key] = geo
        return geo

    # -- forward ------------------------------------------------------------

    def forward(self, scene: Scene) -> dict:
        cfg = self.cfg
        geo = self.scene_geometry(scene)
        rows = Tensor(geo.group_offsets)
        feats = T.segment_max(
            self.sa_mlp(rows), geo.segment_ids, cfg.n_encoder_points
        )
        enc_pos = Tensor(geo.enc_pos)
        enc_out = encode(feats, enc_pos, self.enc_layers)
        kv1 = T.add(enc_out, enc_pos)
        kv2 = None
        if cfg.msa_enabled:
            interp = T.interp_rows(enc_out, geo.wid_idx, geo.wid_w)
            dense_feats = self.up_proj(interp)
            kv2 = T.add(dense_feats, Tensor(geo.dense_pos))
        q0 = T.linear(Tensor(geo.query_pos), self.query_w, self.query_b)
        dec_out = decode(q0, kv1, kv2, self.dec_layers, cfg.msa_enabled)
        logits = T.linear(dec_out, self.head_cls_w, self.head_cls_b)
        centers = T.add(
            T.linear(dec_out, self.head_center_w, self.head_center_b),
            Tensor(geo.anchors),
        )
        sizes = T.exp(T.linear(dec_out, self.head_size_w, self.head_size_b))
        return {
            "logits": logits,
            "centers": centers,
            "sizes": sizes,
            "anchors": geo.anchors,
        }


def class_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def match_cost(outputs: dict, gts: list[Box3D], cfg: ModelConfig) -> np.ndarray:
    probs = class_probs(outputs["logits"].data)
    centers = outputs["centers"].data
    sizes = outputs["sizes"].data
    qn = centers.shape[0]
    cost = np.zeros((qn, len(gts)))
    for g, box in enumerate(gts):
        c = np.abs(centers - np.asarray(box.center)).sum(axis=1)
        s = np.abs(sizes - np.asarray(box.size)).sum(axis=1)
        cost[:, g] = (
            cfg.lambda_cls * (1.0 - probs[:, box.class_id])
            + cfg.lambda_center * c
            + cfg.lambda_size * s
        )
    return cost


def detection_loss(
    outputs: dict, gts: list[Box3D], match: MatchResult, cfg: ModelConfig
) -> Tensor:
    """Class CE over all queries plus L1 box terms over matched queries."""
    qn = outputs["logits"].shape[0]
    no_object = cfg.n_classes
    targets = np.full(qn, no_object, dtype=np.intp)
    matched_q = []
    matched_g = []
    for q, g in enumerate(match.assignment):
        if g is not None:
            targets[q] = gts[g].class_id
            matched_q.append(q)
            matched_g.append(g)
    loss = T.cross_entropy(outputs["logits"], targets)
    loss = T.scale(loss, cfg.lambda_cls)
    if matched_q:
        gt_centers = Tensor(np.array([gts[g].center for g in matched_g]))
        gt_sizes = Tensor(np.array([gts[g].size for g in matched_g]))
        center_l1 = T.l1_loss(T.gather_rows(outputs["centers"], matched_q), gt_centers)
        size_l1 = T.l1_loss(T.gather_rows(outputs["sizes"], matched_q), gt_sizes)
        loss = T.add(loss, T.add(
            T.scale(center_l1, cfg.lambda_center), T.scale(size_l1, cfg.lambda_size)
        ))
    return loss


def scene_loss(model: Detector, scene: Scene) -> Tensor:
    outputs = model.forward(scene)
    if scene.boxes:
        cost = match_cost(outputs, scene.boxes, model.cfg)
        match = hungarian_match(cost)
    else:
        match = MatchResult(assignment=[None] * model.cfg.n_queries, total_cost=0.0)
    return detection_loss(outputs, scene.boxes, match, model.cfg)


@dataclass
class OptState:
    lr: float = 1e-3
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def decayed_lr(base_lr: float, step: int, total_steps: int, decay: float = 0.01) -> float:
    """Exponential learning-rate schedule: base_lr * decay ** (step / total_steps).

    The rate falls smoothly from base_lr at step 0 to base_lr * decay at the
    final step.  decay=1.0 keeps the rate constant.
    """
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if decay <= 0.0:
        raise ValueError(f"decay must be positive, got {decay}")
    return base_lr * decay ** (step / total_steps)


def train_step(model: Detector, batch: list[Scene], opt: OptState) -> float:
    """One forward/backward/update over a batch of scenes (mean loss)."""
    params = model.parameters()
    for t in params.values():
        t.zero_grad()
    total = None
    for scene in batch:
        piece = scene_loss(model, scene)
        total = piece if total is None else T.add(total, piece)
    loss = T.scale(total, 1.0 / len(batch))
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergence(
            f"non-finite loss {value!r}; scenes={[s.scene_id for s in batch]}, "
            f"lr={opt.lr}, momentum={opt.momentum}, "
            f"param_norm={math.sqrt(sum(float((t.data ** 2).sum()) for t in params.values())):.6g}"
        )
    T.backward(loss)
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = opt.momentum * v + g
        opt.velocity[name] = v
        p.data -= opt.lr * v
    return value


def infer(model: Detector, scene: Scene, score_threshold: float = 0.05) -> DetectionResult:
    t0 = time.perf_counter()
    outputs = model.forward(scene)
    t1 = time.perf_counter()
    probs = class_probs(outputs["logits"].data)
    centers = outputs["centers"].data
    sizes = outputs["sizes"].data
    boxes = []
    for q in range(probs.shape[0]):
        cls = int(np.argmax(probs[q, : model.cfg.n_classes]))
        score = float(probs[q, cls])
        if score >= score_threshold:
            boxes.append(Box3D(
                center=tuple(float(v) for v in centers[q]),
                size=tuple(float(max(v, 1e-9)) for v in sizes[q]),
                class_id=cls,
                score=score,
            ))
    return DetectionResult(
        scene_id=scene.scene_id,
        boxes=boxes,
        timing={"forward_s": t1 - t0, "post_s": time.perf_counter() - t1},
    )


# ---------------------------------------------------------------------------
# checkpoints: manifest (config key=value lines) + ordered tensor blobs


def save_checkpoint(path, model: Detector) -> None:
    params = model.parameters()
    names = sorted(params)
    cfg = model.cfg
    lines = []
    for key in (
        "n_raw_points", "n_encoder_points", "d_model", "n_heads",
        "n_encoder_layers", "n_decoder_layers", "n_queries", "n_classes",
        "msa_enabled", "masked_encoder", "sa_radius", "sa_group_cap",
        "mlp_hidden", "lambda_cls", "lambda_center", "lambda_size",
    ):
        lines.append(f"{key} = {getattr(cfg, key)}")
    lines.append(f"tensors = {','.join(names)}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(manifest)))
    buf.write(manifest)
    for name in names:
        T.save_tensor(buf, params[name])
    atomic_write_bytes(path, buf.getvalue())


def _parse_cfg_value(key: str, raw: str):
    if key in ("msa_enabled", "masked_encoder"):
        return raw == "True"
    if key in ("sa_radius", "lambda_cls", "lambda_center", "lambda_size"):
        return float(raw)
    return int(raw)


def load_checkpoint(path) -> Detector:
    with open(path, "rb") as fp:
        (mlen,) = struct.unpack("<Q", fp.read(8))
        manifest = fp.read(mlen).decode("utf-8")
        kv = {}
        for line in manifest.strip().splitlines():
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
        names = kv.pop("tensors").split(",") if kv.get("tensors") else []
        cfg = ModelConfig(**{k: _parse_cfg_value(k, v) for k, v in kv.items()})
        model = Detector(cfg, seed=0)
        params = model.parameters()
        if sorted(params) != sorted(names):
            raise ValueError("checkpoint tensor set does not match model config")
        for name in names:
            t = T.load_tensor(fp)
            if t.data.shape != params[name].data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            params[name].data = t.data
    return model


# ---------------------------------------------------------------------------
# static accounting (parameter and FLOP audits)


def upsample_mlp_param_count(cfg: ModelConfig) -> int:
    d = cfg.d_model
    return 2 * d * d + 2 * d


def branch2_projection_param_count(cfg: ModelConfig) -> int:
    # second key-value set: h/2 heads x (Wk, Wv), d x head_dim each
    d = cfg.d_model
    return 2 * (cfg.n_heads // 2) * d * (d // cfg.n_heads)


def _mha_flops(m: int, n: int, d: int) -> int:
    # multiply-adds: q/k/v projections, attention matmuls, output projection
    proj = (m + 2 * n) * d * d
    att = 2 * m * n * d
    return proj + att + m * d * d


def _mlp_flops(m: int, d_in: int, hidden: int, d_out: int) -> int:
    return m * (d_in * hidden + hidden * d_out)


def forward_flop_profile(cfg: ModelConfig) -> dict[str, int]:
    """Analytic per-stage multiply-add counts for one forward pass.

    The dense upsampling branch feeds only the first decoder layer, so its
    cost is attributed to that stage.
    """
    d = cfg.d_model
    n = cfg.n_encoder_points
    qn = cfg.n_queries
    stages: dict[str, int] = {}
    rows = n * cfg.sa_group_cap
    stages["pre_encoder"] = _mlp_flops(rows, 3, max(32, d // 2), d)
    for i in range(cfg.n_encoder_layers):
        stages[f"encoder_layer_{i}"] = _mha_flops(n, n, d) + _mlp_flops(n, d, cfg.hidden, d)
    for j in range(cfg.n_decoder_layers):
        f = _mha_flops(qn, qn, d)  # self-attention
        if cfg.msa_enabled and j == 0:
            nd = cfg.n_dense_points
            # upsampling branch: 3-NN interpolation + projection MLP
            f += nd * 3 * d + _mlp_flops(nd, d, d, d)
            # dual cross-attention: queries project at full width, each
            # key-value set projects at half width
            f += qn * d * d + 2 * (n * d * (d // 2) + nd * d * (d // 2))
            f += 2 * qn * n * (d // 2) + 2 * qn * nd * (d // 2)
            f += qn * d * d
        else:
            f += _mha_flops(qn, n, d)
        f += _mlp_flops(qn, d, cfg.hidden, d)
        stages[f"decoder_layer_{j}"] = f
    stages["heads"] = qn * d * (cfg.n_classes + 1 + 6)
    return stages
