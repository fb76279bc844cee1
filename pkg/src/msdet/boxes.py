"""Axis-aligned 3D box and detection-result containers."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass
class DetectionResult:
    scene_id: str
    boxes: list[Box3D]
    timing: dict[str, float] = field(default_factory=dict)
