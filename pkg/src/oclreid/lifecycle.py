"""Target-ReID lifecycle: follow, guard against id switches, re-identify."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

from .core import ConfigError, Observation, ReIDError

FOLLOWING = "FOLLOWING"
LOST = "LOST"

ID_SWITCH_GUARD = "ID_SWITCH_GUARD"
REID_SUCCESS = "REID_SUCCESS"
TRAIN_SKIPPED = "TRAIN_SKIPPED"
CONF_UNAVAILABLE = "CONF_UNAVAILABLE"


class ContractViolation(ReIDError):
    pass


@dataclass(frozen=True)
class Thresholds:
    switch: float = 0.35
    reid: float = 0.7
    reid_frames: int = 5

    def __post_init__(self):
        if self.switch <= 0 or self.reid <= 0:
            raise ConfigError("thresholds must be positive")
        if self.reid_frames < 1:
            raise ConfigError("reid_frames must be >= 1")


@dataclass(frozen=True)
class LifecycleState:
    """Lifecycle state; ``target_id`` is None exactly when LOST.

    ``bootstrap`` counts the initial frames during which the designated
    target is trusted without a confidence check (no classifier exists yet).
    """

    mode: str = LOST
    target_id: Optional[int] = None
    reid_streaks: Mapping[int, int] = field(default_factory=dict)
    thresholds: Thresholds = Thresholds()
    bootstrap: int = 0

    def __post_init__(self):
        if (self.mode == LOST) != (self.target_id is None):
            raise ValueError("mode LOST iff target_id is None")

    @classmethod
    def following(cls, target_id: int, thresholds: Thresholds = Thresholds(), bootstrap: int = 0):
        return cls(FOLLOWING, target_id, {}, thresholds, bootstrap)


@dataclass(frozen=True)
class TrainRequest:
    """Labelled frame handed to the learning side (target first)."""

    target: Observation
    negatives: tuple

    @property
    def samples(self) -> tuple:
        return (self.target,) + self.negatives


@dataclass(frozen=True)
class FrameDecision:
    target_position: Optional[object]
    target_track: Optional[int]
    trained_this_frame: bool
    events: tuple
    scores: Mapping[int, Optional[float]]


def label_frame(state: LifecycleState, frame_obs: Sequence[Observation]) -> list:
    """Label 1 for the followed track, 0 for everyone else."""
    if state.mode != FOLLOWING:
        raise ContractViolation("labels are only defined while following")
    if not any(o.track_id == state.target_id for o in frame_obs):
        raise ContractViolation(f"target track {state.target_id} not in frame")
    return [(o, int(o.track_id == state.target_id)) for o in frame_obs]


def _score(score_fn, obs):
    s = score_fn(obs)
    if s is None or (isinstance(s, float) and math.isnan(s)):
        return None
    return float(s)


def step(state: LifecycleState, frame_obs: Sequence[Observation],
         score_fn: Callable[[Observation], Optional[float]], allow_training: bool = True):
    """Advance one frame.

    ``score_fn`` returns the target confidence of an observation, or None
    when it cannot be computed.  Returns ``(state, decision, request)``
    where ``request`` is a :class:`TrainRequest` or None.
    """
    th = state.thresholds
    by_id = {o.track_id: o for o in frame_obs}
    events = []
    scores = {}

    if state.mode == FOLLOWING:
        target = by_id.get(state.target_id)
        if target is None:
            lost = replace(state, mode=LOST, target_id=None, reid_streaks={}, bootstrap=0)
            return lost, FrameDecision(None, None, False, (), {}), None
        s = _score(score_fn, target)
        scores[target.track_id] = s
        if s is None:
            events.append(CONF_UNAVAILABLE)
        if state.bootstrap > 0 or (s is not None and s > th.switch):
            request = None
            if allow_training:
                labelled = label_frame(state, frame_obs)
                request = TrainRequest(
                    target.with_label(1),
                    tuple(o.with_label(0) for o, y in labelled if y == 0),
                )
            else:
                events.append(TRAIN_SKIPPED)
            new = replace(state, bootstrap=max(0, state.bootstrap - 1))
            return new, FrameDecision(target.bbox, target.track_id, request is not None, tuple(events), scores), request
        events.append(ID_SWITCH_GUARD)
        lost = replace(state, mode=LOST, target_id=None, reid_streaks={}, bootstrap=0)
        return lost, FrameDecision(None, None, False, tuple(events), scores), None

    streaks = {}
    for obs in sorted(frame_obs, key=lambda o: o.track_id):
        s = _score(score_fn, obs)
        scores[obs.track_id] = s
        if s is None:
            events.append(CONF_UNAVAILABLE)
            continue
        if s > th.reid:
            streaks[obs.track_id] = min(state.reid_streaks.get(obs.track_id, 0) + 1, th.reid_frames)
    done = sorted(tid for tid, n in streaks.items() if n >= th.reid_frames)
    if done:
        tid = done[0]
        events.append(REID_SUCCESS)
        new = replace(state, mode=FOLLOWING, target_id=tid, reid_streaks={})
        return new, FrameDecision(by_id[tid].bbox, tid, False, tuple(events), scores), None
    new = replace(state, reid_streaks=streaks)
    return new, FrameDecision(None, None, False, tuple(events), scores), None


def event_record(frame: int, state: LifecycleState, decision: FrameDecision) -> dict:
    return {
        "frame": int(frame),
        "mode": state.mode,
        "target_id": -1 if state.target_id is None else int(state.target_id),
        "scores": {str(k): (None if v is None else round(v, 6)) for k, v in sorted(decision.scores.items())},
        "events": list(decision.events),
    }
