"""Command-line interface: gen-data, train, infer, eval, gradcheck, bench, report."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .evalmetrics import EvalConfig, map_at, render_figures, render_report
from .geometry import WIDConfig, farthest_point_sample, knn, wid_interpolate
from .model import (
    Detector,
    ModelConfig,
    OptState,
    decayed_lr,
    infer,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from .scenes import (
    DESK_CLASSES,
    SceneSpec,
    atomic_write_text,
    generate_scene,
    read_config,
    read_detections,
    read_scene,
    write_detections,
    write_scene,
)


def _load_kv(path: str | None) -> dict[str, str]:
    return read_config(path) if path else {}


def _model_config(kv: dict[str, str], msa: str | None) -> ModelConfig:
    def geti(key, default):
        return int(kv.get(key, default))

    def getf(key, default):
        return float(kv.get(key, default))

    cfg = ModelConfig(
        n_raw_points=geti("model.n_raw_points", 2048),
        n_encoder_points=geti("model.n_encoder_points", 512),
        d_model=geti("model.d_model", 64),
        n_heads=geti("model.n_heads", 4),
        n_encoder_layers=geti("model.n_encoder_layers", 3),
        n_decoder_layers=geti("model.n_decoder_layers", 4),
        n_queries=geti("model.n_queries", 16),
        n_classes=geti("model.n_classes", len(DESK_CLASSES)),
        msa_enabled=kv.get("model.msa_enabled", "off") in ("on", "true", "True"),
        masked_encoder=kv.get("model.masked_encoder", "off") in ("on", "true", "True"),
        sa_radius=getf("model.sa_radius", 0.4),
        sa_group_cap=geti("model.sa_group_cap", 16),
        mlp_hidden=geti("model.mlp_hidden", 0),
        lambda_cls=getf("model.lambda_cls", 1.0),
        lambda_center=getf("model.lambda_center", 5.0),
        lambda_size=getf("model.lambda_size", 1.0),
    )
    if msa is not None:
        from dataclasses import replace
        cfg = replace(cfg, msa_enabled=(msa == "on"))
    return cfg


def _scene_paths(scenes_arg: str) -> list[Path]:
    p = Path(scenes_arg)
    if p.is_dir():
        return sorted(p.glob("*.lods"))
    return [p]


def _class_names(kv: dict[str, str]) -> tuple[str, ...]:
    raw = kv.get("eval.class_names", "")
    return tuple(raw.split(",")) if raw else DESK_CLASSES


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    kv = _load_kv(args.config)
    n_scenes = int(kv.get("data.n_scenes", 8))
    spec_kwargs = dict(
        n_points=int(kv.get("data.n_points", 2048)),
        n_objects=(int(kv.get("data.n_objects_min", 2)), int(kv.get("data.n_objects_max", 4))),
        class_set=_class_names(kv),
        noise_sigma=float(kv.get("data.noise_sigma", 0.005)),
    )
    out = Path(args.out)
    gts = {}
    for i in range(n_scenes):
        scene = generate_scene(
            SceneSpec(seed=args.seed + i, **spec_kwargs), scene_id=f"scene_{i:04d}"
        )
        write_scene(out / f"{scene.scene_id}.lods", scene)
        gts[scene.scene_id] = scene.boxes
    write_detections(out / "gt.txt", gts, with_scores=False)
    print(f"wrote {n_scenes} scenes and gt.txt to {out}")
    return 0


def cmd_train(args) -> int:
    kv = _load_kv(args.config)
    cfg = _model_config(kv, args.msa)
    seed = args.seed if args.seed is not None else int(kv.get("train.seed", 0))
    steps = args.steps if args.steps is not None else int(kv.get("train.steps", 200))
    lr = float(kv.get("train.lr", 1e-3))
    momentum = float(kv.get("train.momentum", 0.9))
    lr_decay = float(kv.get("train.lr_decay", 0.01))
    batch = int(kv.get("train.batch", 8))
    scenes = [read_scene(p) for p in _scene_paths(args.scenes)]
    if not scenes:
        raise RuntimeError(f"no scenes found at {args.scenes}")
    model = Detector(cfg, seed=seed)
    opt = OptState(lr=lr, momentum=momentum)
    log = ["step,loss,lr"]
    for step in range(steps):
        opt.lr = decayed_lr(lr, step, steps, lr_decay)
        lo = (step * batch) % len(scenes)
        sel = scenes[lo:lo + batch]
        if len(sel) < batch:
            sel = sel + scenes[: batch - len(sel)]
        loss = train_step(model, sel, opt)
        log.append(f"{step},{loss!r},{opt.lr!r}")
    out = Path(args.out)
    save_checkpoint(out / "checkpoint.lodc", model)
    atomic_write_text(out / "loss_log.csv", "\n".join(log) + "\n")
    print(f"trained {steps} steps; wrote checkpoint.lodc and loss_log.csv to {out}")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dets = {}
    for p in _scene_paths(args.scenes):
        scene = read_scene(p)
        dets[scene.scene_id] = infer(model, scene).boxes
    out = Path(args.out)
    write_detections(out / "detections.txt", dets, with_scores=True)
    print(f"wrote detections for {len(dets)} scenes to {out / 'detections.txt'}")
    return 0


def _run_eval(args):
    dets = read_detections(args.detections, with_scores=True)
    gts = read_detections(args.ground_truth, with_scores=False)
    thresholds = tuple(float(t) for t in args.iou.split(","))
    kv = _load_kv(args.config)
    names = _class_names(kv)
    cfg = EvalConfig(class_names=names, iou_thresholds=thresholds)
    result = map_at(dets, gts, cfg)
    text, csv_text = render_report(result, list(names))
    return result, text, csv_text, names


def cmd_eval(args) -> int:
    result, text, csv_text, _names = _run_eval(args)
    print(text, end="")
    for thr in sorted(result.map_per_threshold):
        print(f"mAP@{thr:g} = {result.map_per_threshold[thr] * 100:.2f}")
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "report.txt", text)
        atomic_write_text(out / "report.csv", csv_text)
    return 0


def cmd_report(args) -> int:
    result, text, csv_text, names = _run_eval(args)
    out = Path(args.out)
    atomic_write_text(out / "report.txt", text)
    atomic_write_text(out / "report.csv", csv_text)
    figures = render_figures(result, list(names), out)
    print(text, end="")
    print(f"wrote report.txt, report.csv and {len(figures)} figures to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    worst = run_suite(seeds=args.n_seeds, base_seed=args.seed)
    for op in sorted(worst):
        print(f"{op:16s} max rel. error {worst[op]:.3e}")
    overall = max(worst.values())
    print(f"overall          max rel. error {overall:.3e}")
    if overall >= 1e-4:
        print("FAIL: gradient check exceeded 1e-4", file=sys.stderr)
        return 1
    return 0


def _bench_once(op: str, n: int, rng: np.random.Generator) -> float:
    pts = rng.uniform(0, 6, size=(n, 3))
    if op == "fps":
        t0 = time.perf_counter()
        farthest_point_sample(pts, max(1, n // 4), 0)
        return time.perf_counter() - t0
    if op == "knn":
        q = rng.uniform(0, 6, size=(max(1, n // 4), 3))
        t0 = time.perf_counter()
        knn(q, pts, 3)
        return time.perf_counter() - t0
    if op == "wid":
        q = rng.uniform(0, 6, size=(max(1, n // 2), 3))
        feats = rng.normal(size=(n, 64))
        t0 = time.perf_counter()
        wid_interpolate(q, pts, feats, WIDConfig())
        return time.perf_counter() - t0
    if op == "attention":
        from .attention import AttentionParams, MHAConfig, mha
        from .tensor import Tensor
        cfg = MHAConfig(d_model=64, n_heads=4)
        p = AttentionParams(cfg, rng)
        x = Tensor(rng.normal(size=(n, 64)))
        t0 = time.perf_counter()
        mha(x, x, p)
        return time.perf_counter() - t0
    raise RuntimeError(f"unknown bench op {op!r} (use fps, knn, wid, attention)")


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rng = np.random.default_rng(args.seed)
    lines = ["op,size,seconds"]
    for n in sizes:
        dt = _bench_once(args.op, n, rng)
        lines.append(f"{args.op},{n},{dt!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(Path(args.out) / "bench.csv", text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scenes and ground truth")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector; writes checkpoint + loss log")
    p.add_argument("--config", default=None)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--msa", choices=["on", "off"], default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over scenes; writes detections")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    for name, fn in (("eval", cmd_eval), ("report", cmd_report)):
        p = sub.add_parser(name, help=f"{name} detections against ground truth")
        p.add_argument("detections")
        p.add_argument("ground_truth")
        p.add_argument("--config", default=None)
        p.add_argument("--iou", default="0.25,0.5")
        if name == "eval":
            p.add_argument("--out", default=None)
        else:
            p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="time geometry/attention kernels; emits CSV")
    p.add_argument("--op", required=True)
    p.add_argument("--sizes", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
