"""Deterministic synthetic observation streams with appearance drift.

Each person has an N x D_raw latent appearance (front and back halves
independent).  A frame observes every unoccluded person: visible part rows
are latent + current lighting bias + Gaussian noise, invisible rows are
zero.  Lighting is additive and piecewise constant; viewpoint is a
per-person front/back orientation that flips at random or by script.

Random streams are split from one ``SeedSequence``: appearance, trajectory,
orientation, noise and drift each get their own generator so that changing
one script does not perturb the others.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .core import BACK, D_RAW, FRONT, N_PARTS, PART_NAMES, BBox, ConfigError, Observation, read_records

N_SEGMENTS = 8


@dataclass(frozen=True)
class Occlusion:
    start: int
    end: int
    person: int
    mode: str = "full"
    parts: tuple = ("legs", "feet")

    def __post_init__(self):
        if self.mode not in ("full", "parts"):
            raise ConfigError(f"unknown occlusion mode {self.mode!r}")
        if self.end <= self.start:
            raise ConfigError("occlusion end must follow start")


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario description; ``seed`` fully determines the stream.

    Attributes:
        persons: target (person 0) plus ``persons - 1`` distractors.
        distractor_similarity: 0 gives independent appearance, 1 a clone
            of the target.
        drift_schedule: ``(frame, scale)`` pairs; from ``frame`` on the
            lighting bias is ``scale`` times a fresh random unit vector.
        occlusion_script: :class:`Occlusion` entries.
        flip_prob: per-frame, per-person probability of turning around.
        viewpoint_script: ``(frame, person, "front" | "back")`` overrides.
    """

    name: str = "custom"
    seed: int = 0
    persons: int = 3
    frames: int = 1000
    distractor_similarity: float = 0.0
    drift_schedule: tuple = ()
    occlusion_script: tuple = ()
    flip_prob: float = 0.0
    viewpoint_script: tuple = ()
    noise_sigma: float = 0.3
    image_size: tuple = (640, 480)
    appearance_scale: float = 1.0

    def __post_init__(self):
        if self.persons < 1 or self.frames < 1:
            raise ConfigError("need at least one person and one frame")
        if not 0.0 <= self.distractor_similarity <= 1.0:
            raise ConfigError("distractor_similarity must lie in [0, 1]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        occ = tuple(o if isinstance(o, Occlusion) else Occlusion(**o) if isinstance(o, dict) else Occlusion(*o)
                    for o in self.occlusion_script)
        object.__setattr__(self, "occlusion_script", occ)
        object.__setattr__(self, "drift_schedule", tuple(tuple(d) for d in self.drift_schedule))
        object.__setattr__(self, "viewpoint_script", tuple(tuple(v) for v in self.viewpoint_script))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        for frame, _ in self.drift_schedule:
            if not 0 <= frame < self.frames:
                raise ConfigError(f"drift frame {frame} outside [0, {self.frames})")
        for o in occ:
            if not (0 <= o.start < self.frames and o.end <= self.frames):
                raise ConfigError(f"occlusion {o} outside [0, {self.frames})")
            if not 0 <= o.person < self.persons:
                raise ConfigError(f"occlusion refers to unknown person {o.person}")
        for frame, person, side in self.viewpoint_script:
            if not 0 <= frame < self.frames or not 0 <= person < self.persons or side not in ("front", "back"):
                raise ConfigError(f"bad viewpoint entry {(frame, person, side)}")

    def with_(self, **kw) -> "ScenarioConfig":
        d = asdict(self)
        d["occlusion_script"] = self.occlusion_script
        d.update(kw)
        return ScenarioConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["occlusion_script"] = [asdict(o) for o in self.occlusion_script]
        d["occlusion_script"] = [{**o, "parts": list(o["parts"])} for o in d["occlusion_script"]]
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d["occlusion_script"] = tuple(
            Occlusion(**{**o, "parts": tuple(o.get("parts", ("legs", "feet")))}) for o in d.get("occlusion_script", ())
        )
        return cls(**d)


def load_preset(name: str, seed: Optional[int] = None) -> ScenarioConfig:
    try:
        text = resources.files("oclreid.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    cfg = ScenarioConfig.from_dict(json.loads(text))
    return cfg if seed is None else cfg.with_(seed=seed)


@dataclass
class PersonModel:
    latent: np.ndarray
    phase: float
    speed: float
    base_x: float
    amplitude: float
    base_w: float

    def bbox(self, frame: int, image_size) -> BBox:
        W, H = image_size
        cx = self.base_x + self.amplitude * np.sin(self.speed * frame + self.phase)
        w = self.base_w * (1.0 + 0.15 * np.sin(0.5 * self.speed * frame + 2.0 * self.phase))
        h = 2.2 * w
        cx = float(np.clip(cx, w / 2, W - w / 2))
        cy = float(np.clip(0.55 * H, h / 2, H - h / 2))
        return BBox(cx, cy, float(w), float(h))


@dataclass(frozen=True)
class FrameTruth:
    frame: int
    gt_target_bbox: Optional[BBox]
    gt_target_track_id: Optional[int]
    visible_tracks: tuple
    segment_index: int
    track_person: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "frame": self.frame,
            "gt_track_id": -1 if self.gt_target_track_id is None else self.gt_target_track_id,
            "gt_bbox": None if self.gt_target_bbox is None else self.gt_target_bbox.as_list(),
            "segment": self.segment_index,
        }


def segment_of(frame: int, frames: int) -> int:
    return min(N_SEGMENTS - 1, (N_SEGMENTS * frame) // frames)


def _part_indices(names):
    out = []
    for n in names:
        out.extend(i for i, p in enumerate(PART_NAMES) if p.endswith(n))
    return out


def make_latents(rng: np.random.Generator, persons: int, similarity: float, scale: float = 1.0,
                 n_parts: int = N_PARTS, d_raw: int = D_RAW) -> np.ndarray:
    target = rng.normal(0.0, scale, (n_parts, d_raw))
    out = [target]
    mix = np.sqrt(max(0.0, 1.0 - similarity ** 2))
    for _ in range(persons - 1):
        out.append(similarity * target + mix * rng.normal(0.0, scale, (n_parts, d_raw)))
    return np.stack(out)


class SimStream:
    """Iterator over ``(frame_obs, truth)`` for one scenario."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        ss = np.random.SeedSequence(config.seed)
        rng_app, rng_traj, self._rng_orient, self._rng_noise, rng_drift = (np.random.default_rng(s) for s in ss.spawn(5))
        self.latents = make_latents(rng_app, config.persons, config.distractor_similarity, config.appearance_scale)
        W = config.image_size[0]
        self.people = []
        for p in range(config.persons):
            self.people.append(PersonModel(
                latent=self.latents[p],
                phase=float(rng_traj.uniform(0, 2 * np.pi)),
                speed=float(rng_traj.uniform(0.004, 0.02)),
                base_x=float(W / 2 if p == 0 else rng_traj.uniform(0.2 * W, 0.8 * W)),
                amplitude=float(0.25 * W if p == 0 else rng_traj.uniform(0.2 * W, 0.4 * W)),
                base_w=float(rng_traj.uniform(60, 100)),
            ))
        self._bias_points = []
        for frame, scale in sorted(config.drift_schedule):
            u = rng_drift.normal(size=D_RAW)
            self._bias_points.append((frame, scale * u / np.linalg.norm(u)))

    def lighting_bias(self, frame: int) -> np.ndarray:
        bias = np.zeros(D_RAW)
        for start, b in self._bias_points:
            if frame >= start:
                bias = b
        return bias

    def __iter__(self) -> Iterator:
        cfg = self.config
        P = cfg.persons
        orient = np.zeros(P, dtype=int)  # 0 front, 1 back
        track_ids = list(range(1, P + 1))
        next_id = P + 1
        was_absent = [False] * P
        script = {}
        for frame, person, side in cfg.viewpoint_script:
            script.setdefault(frame, []).append((person, 0 if side == "front" else 1))
        halves = (np.isin(np.arange(N_PARTS), FRONT), np.isin(np.arange(N_PARTS), BACK))
        for t in range(cfg.frames):
            flips = self._rng_orient.random(P) < cfg.flip_prob
            if t > 0:
                orient = np.where(flips, 1 - orient, orient)
            for person, side in script.get(t, ()):
                orient[person] = side
            bias = self.lighting_bias(t)
            noise = self._rng_noise.normal(0.0, cfg.noise_sigma, (P, N_PARTS, D_RAW))
            frame_obs = []
            mapping = {}
            gt_bbox = None
            for p in range(P):
                occ = [o for o in cfg.occlusion_script if o.person == p and o.start <= t < o.end]
                if any(o.mode == "full" for o in occ):
                    was_absent[p] = True
                    continue
                if was_absent[p]:
                    track_ids[p] = next_id
                    next_id += 1
                    was_absent[p] = False
                vis = halves[orient[p]].copy()
                for o in occ:
                    hidden = vis.copy()
                    hidden[_part_indices(o.parts)] = False
                    if hidden.any():
                        vis = hidden
                raw = self.latents[p] + bias + noise[p]
                bbox = self.people[p].bbox(t, cfg.image_size)
                frame_obs.append(Observation(track_ids[p], raw, vis, bbox, 0, t))
                mapping[track_ids[p]] = p
                if p == 0:
                    gt_bbox = bbox
            frame_obs.sort(key=lambda o: o.track_id)
            truth = FrameTruth(
                frame=t,
                gt_target_bbox=gt_bbox,
                gt_target_track_id=track_ids[0] if gt_bbox is not None else None,
                visible_tracks=tuple(o.track_id for o in frame_obs),
                segment_index=segment_of(t, cfg.frames),
                track_person=mapping,
            )
            yield frame_obs, truth


def generate(config: ScenarioConfig):
    return iter(SimStream(config))


def write_stream(config: ScenarioConfig, path, truth_path=None) -> int:
    """Materialise a stream: observation records to ``path`` plus a truth sidecar.

    The sidecar defaults to ``<path>.truth.jsonl``.  Returns the frame count.
    """
    path = Path(path)
    truth_path = Path(truth_path) if truth_path else path.with_suffix(".truth.jsonl")
    n = 0
    with open(path, "w") as obs_fh, open(truth_path, "w") as truth_fh:
        for frame_obs, truth in SimStream(config):
            for obs in frame_obs:
                obs_fh.write(json.dumps(obs.to_record()) + "\n")
            truth_fh.write(json.dumps(truth.to_record()) + "\n")
            n += 1
    return n


def read_stream(path, truth_path=None):
    """Inverse of :func:`write_stream`: list of (frame_obs, truth record)."""
    path = Path(path)
    truth_path = Path(truth_path) if truth_path else path.with_suffix(".truth.jsonl")
    by_frame = {}
    for obs in read_records(path):
        by_frame.setdefault(obs.frame, []).append(obs)
    with open(truth_path) as fh:
        truths = [json.loads(line) for line in fh if line.strip()]
    return [(by_frame.get(t["frame"], []), t) for t in truths]


def warmup_population(config: ScenarioConfig, persons: int = 20, frames: int = 125,
                      samples_per_episode: int = 16, seed: Optional[int] = None) -> list:
    """IID labelled episodes for pre-training, from persons disjoint from the scenario.

    Each episode picks a target uniformly among ``persons`` and returns
    ``samples_per_episode`` observations: half of the target (label 1), half
    spread over three other persons (label 0).  Orientation is random per
    sample; no lighting bias is applied.
    """
    if frames <= 0:
        return []
    seed = (config.seed + 1) * 7919 + 104729 if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    latents = rng.normal(0.0, config.appearance_scale, (persons, N_PARTS, D_RAW))
    halves = (np.isin(np.arange(N_PARTS), FRONT), np.isin(np.arange(N_PARTS), BACK))
    bbox = BBox(config.image_size[0] / 2, config.image_size[1] / 2, 80.0, 176.0)
    half = samples_per_episode // 2
    episodes = []
    for e in range(frames):
        target = e % persons if frames >= persons else int(rng.integers(persons))
        others = rng.choice([p for p in range(persons) if p != target], size=min(3, persons - 1), replace=False)
        who = [target] * half + [int(others[i % len(others)]) for i in range(samples_per_episode - half)]
        episode = []
        for k, p in enumerate(who):
            vis = halves[int(rng.integers(2))]
            raw = latents[p] + rng.normal(0.0, config.noise_sigma, (N_PARTS, D_RAW))
            episode.append(Observation(p + 1, raw, vis, bbox, int(p == target), e))
        episodes.append(episode)
    return episodes
