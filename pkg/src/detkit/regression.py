"""Gradient-descent regression of a single anchor box onto a fixed target.

Reproduces the anchor-enlargement experiment: under CIoU a disjoint anchor
grows before it converges, while the corner penalty alone translates it onto
the target without growth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import Box, LossParams, WiouState, iou, loss_gradient, loss_value, LOSS_IDS

CSV_HEADER = ("step", "x1", "y1", "x2", "y2", "loss", "iou", "area_ratio")

# Shipped scenario: equal-size boxes, the anchor one box-diagonal away from the
# target along both axes. Calibrated so both behaviours show within 150 steps.
DEFAULT_INIT = Box(0.0, 0.0, 2.0, 2.0)
DEFAULT_TARGET = Box(4.0, 3.0, 6.0, 5.0)
DEFAULT_LR = 2.0
DEFAULT_STEPS = 150

# (init, target) pairs on which both behaviours were calibrated.
SCENARIOS = {
    "default": (DEFAULT_INIT, DEFAULT_TARGET),
    "horizontal": (Box(0.0, 0.0, 2.0, 2.0), Box(5.0, 0.0, 7.0, 2.0)),
    "vertical": (Box(0.0, 0.0, 2.0, 2.0), Box(0.0, 5.0, 2.0, 7.0)),
}


@dataclass(frozen=True)
class SimConfig:
    loss_id: str = "piou"
    attention_enabled: bool = False
    init_box: Box = DEFAULT_INIT
    target_box: Box = DEFAULT_TARGET
    learning_rate: float = DEFAULT_LR
    steps: int = DEFAULT_STEPS
    loss_params: LossParams = field(default_factory=LossParams)
    record_every: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.loss_id not in LOSS_IDS:
            raise ValueError(f"unknown loss id {self.loss_id!r}")

    @property
    def effective_loss(self) -> str:
        # PIoU with the attention switched off is driven by the corner penalty alone
        if self.loss_id == "piou" and not self.attention_enabled:
            return "piou_penalty"
        return self.loss_id


@dataclass
class Trajectory:
    steps: list[int] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    ious: list[float] = field(default_factory=list)
    area_ratios: list[float] = field(default_factory=list)
    error: str | None = None

    def append(self, step: int, box: Box, loss: float, overlap: float, ratio: float) -> None:
        self.steps.append(step)
        self.boxes.append(box)
        self.losses.append(loss)
        self.ious.append(overlap)
        self.area_ratios.append(ratio)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def final_iou(self) -> float:
        return self.ious[-1]

    def rows(self):
        for s, b, l, i, r in zip(self.steps, self.boxes, self.losses, self.ious, self.area_ratios):
            yield (s, *b, l, i, r)


def _ordered(x: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = x
    if x2 < x1:
        x1, x2 = x2, x1
    if y2 < y1:
        y1, y2 = y2, y1
    return np.array([x1, y1, x2, y2])


def simulate(cfg: SimConfig) -> Trajectory:
    """Plain gradient descent on the anchor's four coordinates.

    Inverted corners are swapped back after every step. A non-finite or
    overflowing loss or gradient stops the run and sets ``Trajectory.error``.
    """
    loss_id = cfg.effective_loss
    target = cfg.target_box
    state = WiouState() if loss_id == "wiou_v3" else None
    p = cfg.loss_params
    x = np.array(cfg.init_box, dtype=np.float64)
    area0 = Box(*x).area
    traj = Trajectory()

    def record(step: int, box: Box, loss: float):
        ratio = box.area / area0 if area0 > 0 else math.inf
        traj.append(step, box, loss, iou(box, target), ratio)

    for step in range(cfg.steps + 1):
        box = Box(*x)
        try:
            loss = loss_value(loss_id, box, target, p, state)
            grad = loss_gradient(loss_id, box, target, p, state) if step < cfg.steps else None
        except (ValueError, ArithmeticError) as exc:
            traj.error = f"step {step}: {exc}"
            break
        if not math.isfinite(loss) or (grad is not None and not np.all(np.isfinite(grad))):
            traj.error = f"step {step}: non-finite loss or gradient"
            break
        if step % cfg.record_every == 0:
            record(step, box, loss)
        if grad is None:
            break
        if state is not None:
            state.update(1.0 - iou(box, target), p.wiou_momentum)
        x = _ordered(x - cfg.learning_rate * grad)
    return traj


@dataclass(frozen=True)
class EnlargementReport:
    event_step: int | None
    max_ratio: float
    max_ratio_step: int
    final_iou: float

    @property
    def enlarged(self) -> bool:
        return self.event_step is not None


def detect_enlargement(t: Trajectory, threshold: float = 1.05) -> EnlargementReport:
    if not len(t):
        raise ValueError("empty trajectory")
    event = next((s for s, r in zip(t.steps, t.area_ratios) if r > threshold), None)
    k = int(np.argmax(t.area_ratios))
    return EnlargementReport(event, float(t.area_ratios[k]), t.steps[k], t.ious[-1])


def write_trajectory(t: Trajectory, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for row in t.rows():
                w.writerow([str(row[0])] + [f"{v:.9g}" for v in row[1:]])
    except OSError as exc:
        raise OSError(f"cannot write trajectory to {path}: {exc.strerror or exc}") from exc


def read_trajectory(path) -> Trajectory:
    t = Trajectory()
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            vals = [float(v) for v in row[1:]]
            t.append(int(row[0]), Box(*vals[:4]), vals[4], vals[5], vals[6])
    return t
