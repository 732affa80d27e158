"""Short/long-term experience buffers, keyframe selection and replay."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ConfigError, Observation, ReIDError
from .extractor import (
    ExtractorParams,
    TrainBatch,
    _cross_entropy,
    _head_inputs,
    _pair_distance,
    forward_arrays,
    mixed_loss,
    sgd_step,
)

POLICIES = ("reservoir", "mir")


class KeyframeUndecidableError(ReIDError):
    pass


class ReplayUnavailableError(ReIDError):
    pass


class ShortTermMemory:
    """Most recent ``capacity`` observations, oldest evicted first."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ConfigError("short-term capacity must be >= 1")
        self.capacity = capacity
        self.buf = deque(maxlen=capacity)

    def push(self, obs) -> "ShortTermMemory":
        self.buf.append(obs)
        return self

    def items(self) -> list:
        return list(self.buf)

    def __len__(self):
        return len(self.buf)


class LongTermMemory:
    """Capacity-bounded archive consolidated by reservoir sampling.

    Negatives share the reservoir but are additionally held to ``neg_cap``;
    exceeding it evicts the oldest stored negative.
    """

    def __init__(self, capacity: int = 512, policy: str = "reservoir", neg_cap: Optional[int] = None):
        if capacity < 1:
            raise ConfigError("long-term capacity must be >= 1")
        if policy not in POLICIES:
            raise ConfigError(f"unknown policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.neg_cap = capacity // 4 if neg_cap is None else neg_cap
        self.buf: list = []
        self.n_seen = 0
        self._stamp: list = []  # insertion order per slot, for oldest-negative eviction
        self._counter = 0

    def offer(self, obs, draw: Callable[[int], int]) -> "LongTermMemory":
        """Offer one sample; ``draw(n)`` must return a uniform integer in [0, n)."""
        self.n_seen += 1
        if len(self.buf) < self.capacity:
            self.buf.append(obs)
            self._stamp.append(self._counter)
        else:
            i = draw(self.n_seen)
            if i >= self.capacity:
                return self
            self.buf[i] = obs
            self._stamp[i] = self._counter
        self._counter += 1
        if getattr(obs, "label", 1) == 0:
            self._enforce_negative_quota()
        return self

    def _enforce_negative_quota(self):
        negs = [i for i, o in enumerate(self.buf) if getattr(o, "label", 1) == 0]
        while len(negs) > self.neg_cap:
            oldest = min(negs, key=lambda i: self._stamp[i])
            del self.buf[oldest]
            del self._stamp[oldest]
            negs = [i for i, o in enumerate(self.buf) if getattr(o, "label", 1) == 0]

    @property
    def n_negative(self) -> int:
        return sum(1 for o in self.buf if getattr(o, "label", 1) == 0)

    def __len__(self):
        return len(self.buf)


def rng_draw(rng: np.random.Generator) -> Callable[[int], int]:
    return lambda n: int(rng.integers(n))


@dataclass
class KeyframeState:
    snapshot: ExtractorParams
    l_t: Optional[float] = None
    delta_threshold: float = 0.02


def keyframe_rule(loss: float, l_t: Optional[float], delta_threshold: float):
    """Accept iff the loss exceeds the reference by more than the margin.

    Before any reference loss exists the sample is accepted.
    """
    if l_t is None:
        return True, math.inf
    delta = loss - l_t
    return delta > delta_threshold, delta


def keyframe_decision(state: KeyframeState, obs: Observation, context: TrainBatch, margin: float = 0.3):
    """Loss-guided keyframe test of a target sample against the frozen snapshot."""
    batch = TrainBatch((obs.with_label(1),), ("incoming",)) + context
    if not batch.has_both_classes():
        raise KeyframeUndecidableError("context holds no negative sample")
    loss = mixed_loss(state.snapshot, batch, margin).total
    return keyframe_rule(loss, state.l_t, state.delta_threshold)


def sample_replay(st: ShortTermMemory, lt: Optional[LongTermMemory], b_lt: int, rng: np.random.Generator) -> TrainBatch:
    """Whole short-term buffer plus a uniform draw of ``b_lt`` long-term samples."""
    if len(st) == 0:
        raise ReplayUnavailableError("short-term memory is empty")
    m_st = TrainBatch(tuple(st.buf), ("short-term",) * len(st))
    n_lt = 0 if lt is None else len(lt)
    for k in (min(b_lt, n_lt), n_lt):
        idx = np.sort(rng.choice(n_lt, size=k, replace=False)) if k else []
        m_lt = TrainBatch(tuple(lt.buf[i] for i in idx), ("long-term",) * k)
        batch = m_st + m_lt
        if batch.has_both_classes():
            return batch
    raise ReplayUnavailableError("replay batch lacks a positive or a negative")


def candidate_losses(params: ExtractorParams, candidates: list, context: TrainBatch, margin: float = 0.3) -> np.ndarray:
    """Per-candidate mixed loss, each candidate mined against ``context`` alone.

    Equals ``mixed_loss(params, {c} + context).per_sample[0]`` for every
    candidate ``c`` but shares the context forward pass.
    """
    Xc, Vc, yc = TrainBatch(tuple(candidates)).arrays()
    Xx, Vx, yx = context.arrays()
    F, _ = forward_arrays(params, np.concatenate([Xc, Xx]), np.concatenate([Vc, Vx]))
    V = np.concatenate([Vc, Vx])
    y = np.concatenate([yc, yx])
    nc = len(candidates)
    pooled, concat, _ = _head_inputs(F[:nc], Vc)
    ce_g, _ = _cross_entropy(pooled @ params.Hg_W + params.Hg_b, yc)
    ce_c, _ = _cross_entropy(concat @ params.Hc_W + params.Hc_b, yc)
    hinge = np.zeros(nc)
    ctx = np.arange(nc, len(y))
    for a in range(nc):
        mutual = (V[a] & V[ctx]).any(axis=1)
        pos = ctx[(y[ctx] == y[a]) & mutual]
        neg = ctx[(y[ctx] != y[a]) & mutual]
        if len(pos) == 0 or len(neg) == 0:
            continue
        d_pos = _pair_distance(F, V, np.full(len(pos), a), pos)[0]
        d_neg = _pair_distance(F, V, np.full(len(neg), a), neg)[0]
        hinge[a] = max(0.0, d_pos.max() - d_neg.min() + margin)
    return ce_g + ce_c + hinge


def mir_retrieve(lt: LongTermMemory, params: ExtractorParams, incoming: TrainBatch, candidate_count: int,
                 b_lt: int, lr: float, rng: np.random.Generator, margin: float = 0.3) -> list:
    """Maximally-interfered retrieval of ``b_lt`` samples from ``lt``."""
    if candidate_count < b_lt:
        raise ConfigError("candidate_count must be >= b_lt")
    if len(lt) == 0:
        return []
    k = min(candidate_count, len(lt))
    cand_idx = np.sort(rng.choice(len(lt), size=k, replace=False))
    candidates = [lt.buf[i] for i in cand_idx]
    virtual, _ = sgd_step(params, incoming, lr, margin)
    scores = candidate_losses(virtual, candidates, incoming, margin) - candidate_losses(params, candidates, incoming, margin)
    order = sorted(range(k), key=lambda j: (-scores[j], cand_idx[j]))
    return [candidates[j] for j in order[:b_lt]]


def dump_memory(path, st: ShortTermMemory, lt: Optional[LongTermMemory]) -> None:
    meta = {
        "kind": "meta",
        "short_capacity": st.capacity,
        "long_capacity": None if lt is None else lt.capacity,
        "policy": None if lt is None else lt.policy,
        "n_seen": None if lt is None else lt.n_seen,
        "neg_cap": None if lt is None else lt.neg_cap,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(meta) + "\n")
        for name, items in (("short", st.items()), ("long", [] if lt is None else lt.buf)):
            for obs in items:
                rec = obs.to_record()
                rec["memory"] = name
                fh.write(json.dumps(rec) + "\n")


def load_memory(path):
    """Inverse of :func:`dump_memory`; returns (meta, short list, long list)."""
    short, long_ = [], []
    with open(path) as fh:
        meta = json.loads(fh.readline())
        for line in fh:
            rec = json.loads(line)
            (short if rec.pop("memory") == "short" else long_).append(Observation.from_record(rec))
    return meta, short, long_
