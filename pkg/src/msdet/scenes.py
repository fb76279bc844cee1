"""Synthetic indoor-scene generation and the plain-text file formats for
scenes, detections, and run configuration."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box3D

DESK_CLASSES = ("bin", "crate", "stool", "desk", "lamp", "shelf")

# canonical extents in meters, jittered +-20% at placement
_CANONICAL_SIZES = {
    "bin": (0.3, 0.3, 0.4),
    "crate": (0.5, 0.5, 0.45),
    "stool": (0.45, 0.45, 0.9),
    "desk": (1.2, 0.6, 0.75),
    "lamp": (0.3, 0.3, 1.5),
    "shelf": (0.8, 0.35, 1.8),
}


class GenerationError(RuntimeError):
    pass


class SceneParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    n_points: int = 2048
    n_objects: tuple[int, int] = (2, 4)
    class_set: tuple[str, ...] = DESK_CLASSES
    room_extent: tuple[float, float, float] = (6.0, 6.0, 3.0)
    noise_sigma: float = 0.005

    def __post_init__(self):
        if self.n_objects[0] < 0 or self.n_objects[1] < self.n_objects[0]:
            raise ValueError(f"bad n_objects range {self.n_objects}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Scene:
    scene_id: str
    points: np.ndarray  # n x 3
    boxes: list[Box3D] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.scene_id == other.scene_id
            and np.array_equal(self.points, other.points)
            and self.boxes == other.boxes
        )


def _sample_box_surface(rng: np.random.Generator, center, size, n: int) -> np.ndarray:
    """Uniform sample over the 6 faces of an axis-aligned box."""
    c = np.asarray(center)
    h = np.asarray(size) / 2.0
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2],
                      h[0] * h[1], h[0] * h[1]])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 3))
    pts = u * h
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * h[axis]
    return pts + c


_MAX_PLACEMENT_ATTEMPTS = 1000
_MIN_POINTS_PER_BOX = 100


def generate_scene(spec: SceneSpec, scene_id: str | None = None) -> Scene:
    """Deterministic synthetic room: non-overlapping boxes on the floor,
    surface-sampled points with Gaussian noise, plus floor/wall points."""
    rng = np.random.default_rng(spec.seed)
    rx, ry, rz = spec.room_extent
    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    boxes: list[Box3D] = []
    for _ in range(n_obj):
        placed = False
        for _attempt in range(_MAX_PLACEMENT_ATTEMPTS):
            cls = int(rng.integers(0, len(spec.class_set)))
            base = _CANONICAL_SIZES.get(spec.class_set[cls], (0.5, 0.5, 0.5))
            size = tuple(float(s * rng.uniform(0.8, 1.2)) for s in base)
            cx = float(rng.uniform(size[0] / 2, rx - size[0] / 2))
            cy = float(rng.uniform(size[1] / 2, ry - size[1] / 2))
            cand = Box3D(center=(cx, cy, size[2] / 2), size=size, class_id=cls)
            if all(_aabb_disjoint(cand, b) for b in boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place object {len(boxes)} after "
                f"{_MAX_PLACEMENT_ATTEMPTS} attempts (seed {spec.seed})"
            )

    # point budget: objects get surface-area-weighted shares with a floor,
    # the remainder goes to room floor and walls
    pts = []
    if boxes:
        areas = np.array([2 * (b.size[0] * b.size[1] + b.size[1] * b.size[2]
                               + b.size[0] * b.size[2]) for b in boxes])
        obj_budget = min(spec.n_points - 1, max(
            int(0.6 * spec.n_points), _MIN_POINTS_PER_BOX * len(boxes)))
        counts = np.maximum(
            (areas / areas.sum() * obj_budget).astype(int), _MIN_POINTS_PER_BOX
        )
        for b, n in zip(boxes, counts):
            surf = _sample_box_surface(rng, b.center, b.size, int(n))
            pts.append(surf + rng.normal(0, spec.noise_sigma, surf.shape))
    n_bg = max(spec.n_points - sum(p.shape[0] for p in pts), 1)
    floor_n = max(n_bg // 2, 1)
    wall_n = n_bg - floor_n
    floor = np.column_stack([
        rng.uniform(0, rx, floor_n), rng.uniform(0, ry, floor_n), np.zeros(floor_n)])
    pts.append(floor + rng.normal(0, spec.noise_sigma, floor.shape))
    if wall_n > 0:
        side = rng.integers(0, 4, wall_n)
        wx = np.where(side == 0, 0.0, np.where(side == 1, rx, rng.uniform(0, rx, wall_n)))
        wy = np.where(side < 2, rng.uniform(0, ry, wall_n), np.where(side == 2, 0.0, ry))
        wz = rng.uniform(0, rz, wall_n)
        wall = np.column_stack([wx, wy, wz])
        pts.append(wall + rng.normal(0, spec.noise_sigma, wall.shape))
    points = np.concatenate(pts, axis=0)
    sid = scene_id if scene_id is not None else f"scene_{spec.seed:016x}"
    return Scene(scene_id=sid, points=points, boxes=boxes)


def _aabb_disjoint(a: Box3D, b: Box3D, margin: float = 0.05) -> bool:
    for i in range(3):
        if (a.center[i] + a.size[i] / 2 + margin <= b.center[i] - b.size[i] / 2
                or b.center[i] + b.size[i] / 2 + margin <= a.center[i] - a.size[i] / 2):
            return True
    return False


# ---------------------------------------------------------------------------
# file formats


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fp:
            fp.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fp:
            fp.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def scene_to_text(scene: Scene) -> str:
    lines = [f"LODS1 {scene.points.shape[0]} {len(scene.boxes)}"]
    for p in scene.points:
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}")
    for b in scene.boxes:
        lines.append(
            f"{b.class_id} {_fmt(b.center[0])} {_fmt(b.center[1])} {_fmt(b.center[2])} "
            f"{_fmt(b.size[0])} {_fmt(b.size[1])} {_fmt(b.size[2])}"
        )
    return "\n".join(lines) + "\n"


def write_scene(path, scene: Scene) -> None:
    atomic_write_text(path, scene_to_text(scene))


def read_scene(path) -> Scene:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SceneParseError(path, 1, "empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "LODS1":
        raise SceneParseError(path, 1, f"bad header {lines[0]!r}")
    try:
        n_points, n_boxes = int(head[1]), int(head[2])
    except ValueError:
        raise SceneParseError(path, 1, f"bad header counts {lines[0]!r}") from None
    if len(lines) < 1 + n_points + n_boxes:
        raise SceneParseError(path, len(lines), "truncated file")
    points = np.empty((n_points, 3))
    for i in range(n_points):
        parts = lines[1 + i].split()
        if len(parts) != 3:
            raise SceneParseError(path, 2 + i, f"expected 3 coordinates, got {lines[1 + i]!r}")
        try:
            points[i] = [float(v) for v in parts]
        except ValueError:
            raise SceneParseError(path, 2 + i, f"bad number in {lines[1 + i]!r}") from None
    boxes = []
    for i in range(n_boxes):
        ln = 1 + n_points + i
        parts = lines[ln].split()
        if len(parts) != 7:
            raise SceneParseError(path, ln + 1, f"expected 7 box fields, got {lines[ln]!r}")
        try:
            cls = int(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise SceneParseError(path, ln + 1, f"bad number in {lines[ln]!r}") from None
        boxes.append(Box3D(center=tuple(vals[0:3]), size=tuple(vals[3:6]), class_id=cls))
    return Scene(scene_id=path.stem, points=points, boxes=boxes)


def write_detections(path, dets_by_scene: dict[str, list[Box3D]], with_scores: bool = True) -> None:
    lines = []
    for sid in sorted(dets_by_scene):
        for b in dets_by_scene[sid]:
            fields = [sid, str(b.class_id)]
            if with_scores:
                fields.append(_fmt(b.score))
            fields += [_fmt(v) for v in (*b.center, *b.size)]
            lines.append(" ".join(fields))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_detections(path, with_scores: bool = True) -> dict[str, list[Box3D]]:
    path = Path(path)
    out: dict[str, list[Box3D]] = {}
    n_fields = 9 if with_scores else 8
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != n_fields:
            raise SceneParseError(path, i + 1, f"expected {n_fields} fields, got {len(parts)}")
        try:
            sid = parts[0]
            cls = int(parts[1])
            rest = [float(v) for v in parts[2:]]
        except ValueError:
            raise SceneParseError(path, i + 1, f"bad number in {line!r}") from None
        score = rest[0] if with_scores else 1.0
        vals = rest[1:] if with_scores else rest
        out.setdefault(sid, []).append(
            Box3D(center=tuple(vals[0:3]), size=tuple(vals[3:6]), class_id=cls, score=score)
        )
    return out


# ---------------------------------------------------------------------------
# run configuration: flat "key = value" lines, dotted keys namespace sections


class ConfigParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


def read_config(path) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    for i, raw in enumerate(path.read_text(encoding="utf-8").splitlines()):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(path, i + 1, f"expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_config(path, cfg: dict[str, str]) -> None:
    atomic_write_text(path, "".join(f"{k} = {v}\n" for k, v in cfg.items()))
