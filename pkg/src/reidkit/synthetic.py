"""Controlled ranking scenarios.

Includes the error-insertion sensitivity experiment: start from a list of
correct samples grouped by camera, then insert one error per camera block,
walking from the last camera toward the first, and track AP against CGM.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .metrics import RelevanceList, average_precision, cgm_query

__all__ = [
    "ERROR_CAMERA",
    "POSITIONS",
    "Scenario",
    "SensitivityCurve",
    "StepOutOfRange",
    "build_figure4_initial",
    "insert_error_back_to_front",
    "figure4_state",
    "generate_random_instance",
    "sensitivity_curve",
]

# camera label carried by synthetic error samples; target cameras start at 1
ERROR_CAMERA = 0
POSITIONS = ("before", "within")


class StepOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    rel: RelevanceList
    description: str = ""

    @property
    def camera_order(self) -> list[int]:
        """Target cameras in ascending order (the block order of the layout)."""
        return self.rel.target_cameras

    @property
    def n_errors(self) -> int:
        return len(self.rel) - self.rel.n_targets


@dataclass(frozen=True)
class SensitivityCurve:
    steps: tuple[tuple[int, float, float], ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("errors,mAP,mCGM\n")
        for errors, ap, cgm in self.steps:
            buf.write(f"{errors},{ap:.6f},{cgm:.6f}\n")
        return buf.getvalue()

    @property
    def map_values(self) -> list[float]:
        return [s[1] for s in self.steps]

    @property
    def mcgm_values(self) -> list[float]:
        return [s[2] for s in self.steps]


def build_figure4_initial(cameras: int = 10, targets_per_camera: int = 10) -> Scenario:
    """All-correct list, one contiguous block per camera ``1..cameras``."""
    if cameras < 1 or targets_per_camera < 1:
        raise ValueError("cameras and targets_per_camera must be >= 1")
    cams = np.repeat(np.arange(1, cameras + 1), targets_per_camera)
    rel = RelevanceList(np.ones(cams.size, dtype=bool), cams)
    return Scenario(
        "figure4",
        rel,
        f"{cameras} cameras x {targets_per_camera} targets, contiguous ascending blocks, no errors",
    )


def insert_error_back_to_front(s: Scenario, step: int, position: str = "before") -> Scenario:
    """Apply insertion ``step`` (1-based) to ``s``.

    Step ``i`` targets the ``i``-th camera counted from the back. With
    ``position="before"`` the error goes right before that camera's first
    target; with ``"within"`` it goes right before the camera's last target.
    Existing items keep their relative order.
    """
    if position not in POSITIONS:
        raise ValueError(f"position must be one of {POSITIONS}, got {position!r}")
    order = s.camera_order
    if not 1 <= step <= len(order):
        raise StepOutOfRange(f"step {step} outside 1..{len(order)}")
    cam = order[len(order) - step]
    block = np.flatnonzero(s.rel.flags & (s.rel.cameras == cam))
    at = int(block[0] if position == "before" else block[-1])
    flags = np.insert(s.rel.flags, at, False)
    cams = np.insert(s.rel.cameras, at, ERROR_CAMERA)
    return Scenario(
        s.name,
        RelevanceList(flags, cams),
        f"{s.description}; step {step}: error {position} camera {cam} at {at}",
    )


def figure4_state(steps: int, cameras: int = 10, targets_per_camera: int = 10, position: str = "before") -> Scenario:
    s = build_figure4_initial(cameras, targets_per_camera)
    for i in range(1, steps + 1):
        s = insert_error_back_to_front(s, i, position)
    return s


def generate_random_instance(seed: int, max_len: int, max_cameras: int) -> Scenario:
    """Random relevance list with at least one target; same seed, same list."""
    if max_len < 1 or max_cameras < 1:
        raise ValueError("max_len and max_cameras must be >= 1")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_len + 1))
    flags = rng.random(n) < 0.5
    if not flags.any():
        flags[rng.integers(n)] = True
    cams = rng.integers(1, max_cameras + 1, size=n)
    return Scenario(
        f"random-{seed}",
        RelevanceList(flags, cams),
        f"seed={seed} max_len={max_len} max_cameras={max_cameras}",
    )


def sensitivity_curve(s0: Scenario, steps: int, position: str = "before") -> SensitivityCurve:
    """(errors inserted, AP, CGM) after each insertion step, starting at step 0.

    The scenario is a single query, so its AP and CGM are the mAP and mCGM.
    """
    if not 0 <= steps <= len(s0.camera_order):
        raise StepOutOfRange(f"steps {steps} outside 0..{len(s0.camera_order)}")
    s = s0
    out = []
    for i in range(steps + 1):
        if i:
            s = insert_error_back_to_front(s, i, position)
        out.append((s.n_errors, average_precision(s.rel), cgm_query(s.rel)[0]))
    return SensitivityCurve(tuple(out))
