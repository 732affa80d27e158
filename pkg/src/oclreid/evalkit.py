"""Tracking and continual-learning metrics, plus the bbox-to-action mapping."""
from __future__ import annotations

import enum
import json
from typing import Optional, Sequence

import numpy as np

from .classifier import RidgeClassifier, confidence_batch
from .core import BBox, ReIDError, bbox_center_distance
from .extractor import ExtractorParams, extract
from .simstream import N_SEGMENTS

SUCCESS_RADIUS = 50.0


class Action(enum.Enum):
    MOVE_FORWARD = "move-forward"
    MOVE_BACKWARD = "move-backward"
    NO_OP = "no-op"
    FORWARD_LEFT = "forward-left"
    FORWARD_RIGHT = "forward-right"
    TURN_LEFT = "turn-left"
    TURN_RIGHT = "turn-right"


def success_rate(pred: Sequence[Optional[BBox]], gt: Sequence[BBox]) -> float:
    """Percentage of frames whose predicted centre is within 50 px of the truth."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth frames")
    if not gt:
        return 0.0
    hits = sum(1 for p, g in zip(pred, gt) if p is not None and bbox_center_distance(p, g) < SUCCESS_RADIUS)
    return 100.0 * hits / len(gt)


class AccMatrix:
    """``a[i][j]``: accuracy on segment j after training through segment i."""

    def __init__(self, n: int = N_SEGMENTS):
        self.n = n
        self.a = np.full((n, n), np.nan)

    def set(self, i: int, j: int, value: float):
        if j > i:
            raise IndexError("only j <= i is defined")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.a[i, j] = value

    def final_row(self) -> np.ndarray:
        return self.a[self.n - 1]

    def grid(self) -> list:
        return [[None if np.isnan(v) else round(float(v), 6) for v in row[: i + 1]] for i, row in enumerate(self.a)]

    def to_text(self) -> str:
        lines = []
        for i, row in enumerate(self.grid()):
            lines.append(" ".join(f"{v:6.3f}" if v is not None else "   -  " for v in row))
        return "\n".join(lines)


def r_mEAcc(m: AccMatrix) -> float:
    row = m.final_row()
    if np.any(np.isnan(row)):
        raise ReIDError("final accuracy row is incomplete")
    return float(100.0 * row.mean())


def segment_accuracy(clf: Optional[RidgeClassifier], params: ExtractorParams, observations, labels,
                     threshold: float = 0.5):
    """Fraction of correct target/non-target predictions.

    Returns ``(accuracy, n_unavailable)``; samples whose confidence cannot
    be computed count as misclassified.
    """
    labels = np.asarray(labels)
    if len(observations) == 0:
        raise ReIDError("empty evaluation set")
    if clf is None:
        return 0.0, len(observations)
    F = extract(params, observations)
    V = np.stack([o.vis for o in observations])
    s = confidence_batch(clf, F, V)
    unavailable = np.isnan(s)
    pred = np.where(unavailable, -1, (np.nan_to_num(s) > threshold).astype(int))
    return float(np.mean(pred == labels)), int(unavailable.sum())


def bbox_to_action(b: BBox, expected, image) -> Action:
    W, H = image
    w_exp, h_exp = expected
    x_err = (b.cx - W / 2) / (W / 2)
    s_err = (b.w * b.h - w_exp * h_exp) / (w_exp * h_exp)
    return action_from_errors(x_err, s_err)


def action_from_errors(x_err: float, s_err: float) -> Action:
    # first match wins, in the published rule order
    if abs(x_err) <= 0.1 and s_err <= -0.2:
        return Action.MOVE_FORWARD
    if abs(x_err) <= 0.1 and s_err >= 0.2:
        return Action.MOVE_BACKWARD
    if abs(x_err) < 0.1 and abs(s_err) < 0.2:
        return Action.NO_OP
    if 0.1 <= x_err <= 0.3:
        return Action.FORWARD_RIGHT
    if x_err > 0.3:
        return Action.TURN_RIGHT
    if -0.3 <= x_err <= -0.1:
        return Action.FORWARD_LEFT
    if x_err < -0.3:
        return Action.TURN_LEFT
    # only reachable for |x_err| == 0.1 with |s_err| < 0.2, which rules (4)/(6) cover
    raise AssertionError(f"unmapped errors x={x_err} s={s_err}")


_LEFT_OK = {Action.MOVE_BACKWARD, Action.TURN_LEFT, Action.FORWARD_LEFT}
_RIGHT_OK = {Action.MOVE_BACKWARD, Action.TURN_RIGHT, Action.FORWARD_RIGHT}
_CENTER = {Action.MOVE_FORWARD, Action.MOVE_BACKWARD, Action.NO_OP}


def bbox_side(b: BBox, image) -> str:
    x_err = (b.cx - image[0] / 2) / (image[0] / 2)
    if abs(x_err) < 0.1:
        return "center"
    return "left" if x_err < 0 else "right"


def relaxed_action_match(pred: Action, gt_side: str, gt_action: Optional[Action] = None) -> bool:
    """Relaxed correctness: any action that re-centres the target counts.

    For a centred target the prediction must equal ``gt_action`` when given,
    otherwise any of move-forward / move-backward / no-op is accepted.
    """
    if gt_side == "left":
        return pred in _LEFT_OK
    if gt_side == "right":
        return pred in _RIGHT_OK
    if gt_side == "center":
        if gt_action is not None:
            return pred == gt_action
        return pred in _CENTER
    raise ValueError(f"unknown side {gt_side!r}")


def metric_record(metric: str, scenario: str, strategy: str, seed: int, value) -> str:
    return json.dumps({"metric": metric, "scenario": scenario, "strategy": strategy, "seed": seed, "value": value})
