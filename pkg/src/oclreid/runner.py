"""Experiment orchestration: warm start, per-frame loop, learner strategies.

Randomness: one ``SeedSequence(seed)`` is split into four generators used
for (0) extractor initialisation, (1) warm-up batch order, (2) long-term
reservoir draws and (3) replay / MIR candidate sampling.  The scenario
stream is seeded with the same integer through its own splitting.
"""
from __future__ import annotations

import json
import logging
import platform
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .classifier import DesignBlock, RidgeClassifier, confidence_batch, fit
from .concurrency import DropOldestQueue, SnapshotSlot
from .core import ConfigError, ReIDError
from .evalkit import AccMatrix, metric_record, r_mEAcc, segment_accuracy, success_rate
from .extractor import (
    ExtractorParams,
    TrainBatch,
    extract,
    init_params,
    save_checkpoint,
    sgd_step,
    snapshot,
)
from .lifecycle import (
    FOLLOWING,
    REID_SUCCESS,
    LifecycleState,
    Thresholds,
    TrainRequest,
    event_record,
    step,
)
from .memory import (
    KeyframeState,
    KeyframeUndecidableError,
    LongTermMemory,
    ReplayUnavailableError,
    ShortTermMemory,
    dump_memory,
    keyframe_decision,
    mir_retrieve,
    rng_draw,
    sample_replay,
)
from .simstream import N_SEGMENTS, ScenarioConfig, SimStream, load_preset, warmup_population

log = logging.getLogger(__name__)

STRATEGIES = ("fixed", "naive", "reservoir", "mir")
MODES = ("deterministic", "concurrent")
LABEL_SOURCES = ("lifecycle", "truth")


@dataclass
class RunConfig:
    scenario: object = "corridor"
    strategy: str = "reservoir"
    seed: int = 0
    mode: str = "deterministic"
    out: Optional[str] = None
    dump_memory: bool = False
    label_source: str = "lifecycle"
    # memory
    short_capacity: int = 64
    long_capacity: int = 512
    b_lt: int = 64
    neg_fraction: float = 0.25
    mir_candidates: int = 128
    # classifier / keyframes / lifecycle
    lam: float = 1.0
    delta_l: float = 0.02
    delta_sw: float = 0.35
    delta_reid: float = 0.7
    zeta_reid: int = 5
    bootstrap_frames: int = 30
    # extractor
    lr: float = 0.01
    margin: float = 0.3
    d_raw: int = 32
    hidden: int = 64
    embed_dim: int = 16
    n_parts: int = 10
    # warm start
    warmup_samples: int = 2000
    warmup_steps: int = 200
    warmup_lr: float = 0.05
    warmup_persons: int = 20
    # evaluation / concurrency
    holdout_every: int = 10
    queue_size: int = 8

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.label_source not in LABEL_SOURCES:
            raise ConfigError(f"unknown label_source {self.label_source!r}")
        for name in ("lam", "delta_l", "delta_sw", "delta_reid", "margin"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.zeta_reid < 1:
            raise ConfigError("zeta_reid must be >= 1")
        if self.holdout_every < 2:
            raise ConfigError("holdout_every must be >= 2")
        if isinstance(self.scenario, dict):
            self.scenario = ScenarioConfig.from_dict(self.scenario)

    def scenario_config(self) -> ScenarioConfig:
        if isinstance(self.scenario, ScenarioConfig):
            return self.scenario.with_(seed=self.seed)
        return load_preset(self.scenario, seed=self.seed)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if isinstance(self.scenario, ScenarioConfig):
            d["scenario"] = self.scenario.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            if str(path).endswith((".yaml", ".yml")):
                import yaml  # optional; JSON needs nothing extra

                try:
                    data = yaml.safe_load(text)
                except yaml.YAMLError as exc:
                    raise ValueError(str(exc)) from exc
            else:
                data = json.loads(text)
        except ImportError:
            raise ConfigError("YAML configs need PyYAML installed; use JSON instead") from None
        except ValueError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a mapping")
        try:
            return cls.from_dict(data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class RunArtifacts:
    config: RunConfig
    acc: AccMatrix
    r_meacc: float
    success: float
    events: list
    metrics: list
    params: ExtractorParams
    warm_version: int
    classifier: Optional[RidgeClassifier]
    reid_log: list
    post_reid_success: Optional[float]
    train_steps: int
    keyframes: int
    unavailable_eval: int
    manifest: dict
    short_memory: ShortTermMemory = None
    long_memory: Optional[LongTermMemory] = None
    torn_reads: int = 0
    snapshot_reads: int = 0
    queue_dropped: int = 0
    queue_put: int = 0
    seen_versions: list = field(default_factory=list)


_WARM_CACHE: dict = {}


def warm_start(config: RunConfig, scenario: ScenarioConfig) -> ExtractorParams:
    """Pre-train on a disjoint synthetic population; identical for every strategy."""
    key = (config.seed, config.d_raw, config.hidden, config.embed_dim, config.n_parts, config.warmup_samples,
           config.warmup_steps, config.warmup_lr, config.warmup_persons, config.margin,
           scenario.noise_sigma, scenario.appearance_scale)
    if key in _WARM_CACHE:
        return _WARM_CACHE[key]
    rng_init, rng_order = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4)[:2])
    params = init_params(rng_init, config.d_raw, config.hidden, config.embed_dim, config.n_parts)
    per_episode = 16
    episodes = warmup_population(scenario, config.warmup_persons, config.warmup_samples // per_episode, per_episode)
    batches = [TrainBatch(tuple(ep)) for ep in episodes]
    for _ in range(config.warmup_steps if batches else 0):
        params, _ = sgd_step(params, batches[int(rng_order.integers(len(batches)))], config.warmup_lr, config.margin)
    _WARM_CACHE[key] = params
    return params


def refit_classifier(params: ExtractorParams, st_items, lam: float) -> Optional[RidgeClassifier]:
    if not st_items:
        return None
    F = extract(params, st_items)
    V = np.stack([o.vis for o in st_items])
    y = [o.label for o in st_items]
    return fit(DesignBlock.from_features(F, V, y), lam)


class Learner:
    """Memory manager plus extractor updates for one strategy."""

    def __init__(self, config: RunConfig, params: ExtractorParams, rng_mem, rng_replay):
        self.config = config
        self.params = params
        self.lt = None
        if config.strategy in ("reservoir", "mir"):
            self.lt = LongTermMemory(config.long_capacity, "mir" if config.strategy == "mir" else "reservoir",
                                     int(config.neg_fraction * config.long_capacity))
        self.keyframe = KeyframeState(snapshot(params), None, config.delta_l)
        self._draw = rng_draw(rng_mem)
        self._rng = rng_replay
        self._refresh_keyframe = False
        self.steps = 0
        self.keyframes = 0
        self.skipped = 0

    def iterate(self, request: TrainRequest, st_items: tuple) -> bool:
        """One learner iteration; returns True if the extractor was updated."""
        cfg = self.config
        if cfg.strategy == "fixed":
            return False
        if cfg.strategy == "naive":
            batch = TrainBatch(request.samples, ("incoming",) * len(request.samples))
            if not batch.has_both_classes():
                self.skipped += 1
                return False
            self.params, _ = sgd_step(self.params, batch, cfg.lr, cfg.margin)
            self.steps += 1
            return True

        for neg in request.negatives:
            self.lt.offer(neg, self._draw)
        context = TrainBatch(st_items, ("short-term",) * len(st_items))
        try:
            accept, _ = keyframe_decision(self.keyframe, request.target, context, cfg.margin)
        except KeyframeUndecidableError:
            accept = False
        if accept:
            self.lt.offer(request.target, self._draw)
            self.keyframes += 1
            self._refresh_keyframe = True

        st = ShortTermMemory(cfg.short_capacity)
        for o in st_items:
            st.push(o)
        try:
            if cfg.strategy == "mir":
                m_st = TrainBatch(tuple(st_items), ("short-term",) * len(st_items))
                retrieved = mir_retrieve(self.lt, self.params, m_st, max(cfg.mir_candidates, cfg.b_lt),
                                         cfg.b_lt, cfg.lr, self._rng, cfg.margin) if m_st.has_both_classes() else []
                batch = m_st + TrainBatch(tuple(retrieved), ("long-term",) * len(retrieved))
                if not batch.has_both_classes():
                    raise ReplayUnavailableError("MIR batch lacks a class")
            else:
                batch = sample_replay(st, self.lt, cfg.b_lt, self._rng)
        except (ReplayUnavailableError, ReIDError) as exc:
            log.debug("training skipped: %s", exc)
            self.skipped += 1
            return False
        self.params, report = sgd_step(self.params, batch, cfg.lr, cfg.margin)
        self.steps += 1
        if self._refresh_keyframe:
            self.keyframe.snapshot = snapshot(self.params)
            self.keyframe.l_t = report.total
            self._refresh_keyframe = False
        return True


def _truth_request(frame_obs, truth) -> Optional[TrainRequest]:
    tid = truth.gt_target_track_id
    target = next((o for o in frame_obs if o.track_id == tid), None)
    if target is None:
        return None
    return TrainRequest(target.with_label(1), tuple(o.with_label(0) for o in frame_obs if o.track_id != tid))


def run(config: RunConfig) -> RunArtifacts:
    t0 = time.time()
    scenario = config.scenario_config()
    warm = warm_start(config, scenario)
    seqs = np.random.SeedSequence(config.seed).spawn(4)
    learner = Learner(config, warm, np.random.default_rng(seqs[2]), np.random.default_rng(seqs[3]))
    concurrent = config.mode == "concurrent"
    slot = SnapshotSlot(warm)
    queue = DropOldestQueue(config.queue_size)
    learner_thread = None
    if concurrent:
        def learner_loop():
            while True:
                item = queue.get()
                if item is None:
                    return
                try:
                    if learner.iterate(*item):
                        slot.publish(learner.params)
                except ReIDError as exc:
                    log.warning("learner error: %s", exc)
        learner_thread = threading.Thread(target=learner_loop, name="learner", daemon=True)
        learner_thread.start()

    stream = SimStream(scenario)
    thresholds = Thresholds(config.delta_sw, config.delta_reid, config.zeta_reid)
    state = None
    st = ShortTermMemory(config.short_capacity)
    clf = None
    acc = AccMatrix(N_SEGMENTS)
    heldout = [[] for _ in range(N_SEGMENTS)]
    events, preds, gts = [], [], []
    reid_log = []
    seen_versions = []
    unavailable_eval = 0
    T = scenario.frames
    target_occluded_until = -1

    for frame_obs, truth in stream:
        t = truth.frame
        if state is None:
            state = LifecycleState.following(truth.gt_target_track_id, thresholds, config.bootstrap_frames)
        params = slot.read() if concurrent else learner.params
        if concurrent:
            seen_versions.append(params.version)
        is_heldout = t % config.holdout_every == config.holdout_every - 1
        if is_heldout:
            heldout[truth.segment_index].extend(
                o.with_label(int(truth.track_person.get(o.track_id) == 0)) for o in frame_obs)

        scores = {}
        if frame_obs and clf is not None:
            F = extract(params, frame_obs)
            V = np.stack([o.vis for o in frame_obs])
            for o, s in zip(frame_obs, confidence_batch(clf, F, V)):
                scores[o.track_id] = None if np.isnan(s) else float(s)
        state, decision, request = step(state, frame_obs, lambda o: scores.get(o.track_id),
                                        allow_training=not is_heldout)
        if config.label_source == "truth":
            request = None if is_heldout else _truth_request(frame_obs, truth)
        if request is not None:
            for o in request.samples:
                st.push(o)
            clf = refit_classifier(params, st.items(), config.lam)
            if concurrent:
                queue.put((request, tuple(st.items())))
            else:
                learner.iterate(request, tuple(st.items()))

        if truth.gt_target_bbox is None:
            target_occluded_until = t
        if REID_SUCCESS in decision.events:
            person = truth.track_person.get(decision.target_track)
            reid_log.append({"frame": t, "track_id": decision.target_track, "person": person,
                             "after_occlusion": target_occluded_until >= 0})
        events.append(event_record(t, state, decision))
        if truth.gt_target_bbox is not None:
            preds.append((t, decision.target_position))
            gts.append(truth.gt_target_bbox)

        last_of_segment = t == T - 1 or truth.segment_index != _segment(t + 1, T)
        if last_of_segment:
            i = truth.segment_index
            eval_params = slot.read() if concurrent else learner.params
            eval_clf = refit_classifier(eval_params, st.items(), config.lam)
            for j in range(i + 1):
                if not heldout[j]:
                    raise ReIDError(f"segment {j} has no held-out frames")
                a, n_un = segment_accuracy(eval_clf, eval_params, heldout[j], [o.label for o in heldout[j]])
                acc.set(i, j, a)
                if i == N_SEGMENTS - 1:
                    unavailable_eval += n_un

    if concurrent:
        queue.close()
        learner_thread.join()

    final_params = learner.params
    sr = success_rate([p for _, p in preds], gts)
    post = None
    correct = [r for r in reid_log if r["person"] == 0 and r["after_occlusion"]]
    if correct:
        f0 = correct[0]["frame"]
        idx = [k for k, (t, _) in enumerate(preds) if t > f0]
        post = success_rate([preds[k][1] for k in idx], [gts[k] for k in idx]) if idx else None
    final_clf = refit_classifier(final_params, st.items(), config.lam)
    rm = r_mEAcc(acc)
    name = scenario.name
    metrics = [
        metric_record("r_mEAcc", name, config.strategy, config.seed, round(rm, 6)),
        metric_record("success_rate", name, config.strategy, config.seed, round(sr, 6)),
        metric_record("acc_final_row", name, config.strategy, config.seed, [round(float(v), 6) for v in acc.final_row()]),
        metric_record("train_steps", name, config.strategy, config.seed, learner.steps),
        metric_record("keyframes", name, config.strategy, config.seed, learner.keyframes),
        metric_record("reid_events", name, config.strategy, config.seed, reid_log),
        metric_record("post_reid_success_rate", name, config.strategy, config.seed,
                      None if post is None else round(post, 6)),
    ]
    if concurrent:
        metrics.append(metric_record("queue_dropped", name, config.strategy, config.seed, queue.dropped))
        metrics.append(metric_record("torn_snapshots", name, config.strategy, config.seed, slot.torn_reads))
    manifest = {
        "package_version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "seed": config.seed,
        "strategy": config.strategy,
        "mode": config.mode,
        "scenario": scenario.to_dict(),
        "wall_time_s": round(time.time() - t0, 3),
        "warm_version": warm.version,
        "final_version": final_params.version,
    }
    arts = RunArtifacts(
        config=config, acc=acc, r_meacc=rm, success=sr, events=events, metrics=metrics, params=final_params,
        warm_version=warm.version, classifier=final_clf, reid_log=reid_log, post_reid_success=post,
        train_steps=learner.steps, keyframes=learner.keyframes, unavailable_eval=unavailable_eval,
        manifest=manifest, short_memory=st, long_memory=learner.lt, torn_reads=slot.torn_reads,
        snapshot_reads=slot.reads, queue_dropped=queue.dropped, queue_put=queue.put_count,
        seen_versions=seen_versions,
    )
    if config.out:
        write_artifacts(arts, Path(config.out))
    return arts


def _segment(frame: int, frames: int) -> int:
    return min(N_SEGMENTS - 1, (N_SEGMENTS * frame) // frames)


def write_artifacts(arts: RunArtifacts, out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "events.jsonl", "w") as fh:
            for rec in arts.events:
                fh.write(json.dumps(rec) + "\n")
        (out / "metrics.jsonl").write_text("\n".join(arts.metrics) + "\n")
        (out / "acc_matrix.txt").write_text(arts.acc.to_text() + "\n")
        (out / "acc_matrix.json").write_text(json.dumps(arts.acc.grid()))
        save_checkpoint(arts.params, out / "checkpoint.npz")
        summary = {"r_mEAcc": arts.r_meacc, "success_rate": arts.success,
                   "classifier": None if arts.classifier is None else arts.classifier.to_dict()}
        (out / "summary.json").write_text(json.dumps(summary))
        (out / "config.json").write_text(json.dumps(arts.config.to_dict(), indent=2))
        (out / "manifest.json").write_text(json.dumps(arts.manifest, indent=2))
        if arts.config.dump_memory:
            dump_memory(out / "memory.jsonl", arts.short_memory, arts.long_memory)
    except OSError as exc:
        raise ConfigError(f"cannot write artifacts to {out}: {exc}") from exc


def compare(configs) -> dict:
    """Mean and std (over seeds) of r-mEAcc and success rate per strategy."""
    configs = list(configs)
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    scen = {json.dumps(c.scenario_config().with_(seed=0).to_dict(), sort_keys=True) for c in configs}
    if len(scen) != 1:
        raise ConfigError("all configs must share one scenario")
    results = {}
    for c in configs:
        arts = run(c)
        results.setdefault(c.strategy, []).append((c.seed, arts.r_meacc, arts.success))
    return summarize(results)


def summarize(results: dict) -> dict:
    table = {}
    for strategy, rows in results.items():
        rm = np.array([r[1] for r in rows])
        sr = np.array([r[2] for r in rows])
        table[strategy] = {
            "seeds": [r[0] for r in rows],
            "r_mEAcc_mean": float(rm.mean()), "r_mEAcc_std": float(rm.std()),
            "success_mean": float(sr.mean()), "success_std": float(sr.std()),
        }
    return table


def format_table(table: dict) -> str:
    lines = [f"{'strategy':<10} {'r-mEAcc (%)':>16} {'SR (%)':>16}"]
    for strategy, row in table.items():
        lines.append(f"{strategy:<10} {row['r_mEAcc_mean']:>8.1f} ± {row['r_mEAcc_std']:<5.1f} "
                     f"{row['success_mean']:>8.1f} ± {row['success_std']:<5.1f}")
    return "\n".join(lines)
