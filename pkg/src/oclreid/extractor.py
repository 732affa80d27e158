"""Part-based embedding network trained with a mixed CE + part-triplet loss.

The network is a shared two-layer MLP applied to every part descriptor with
an additive per-part code after the first layer.  Two binary identity heads
sit on top: one on the visibility-weighted mean of the part rows, one on the
concatenation of all rows.  Gradients are computed by hand.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import ConfigError, NumericError, Observation, PartFeatures, ReIDError
from .validation import check_binary_labels, check_parts_array, check_vis

BLOCKS = ("W1", "b1", "W2", "b2", "part_embed", "Hg_W", "Hg_b", "Hc_W", "Hc_b")
CHECKPOINT_FORMAT = 1


class MiningImpossibleError(ReIDError):
    pass


@dataclass(frozen=True, eq=False)
class ExtractorParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    part_embed: np.ndarray
    Hg_W: np.ndarray
    Hg_b: np.ndarray
    Hc_W: np.ndarray
    Hc_b: np.ndarray
    version: int = 0

    def __post_init__(self):
        D, H = self.W1.shape
        C = self.W2.shape[1]
        N = self.part_embed.shape[0]
        expected = {
            "b1": (H,), "W2": (H, C), "b2": (C,), "part_embed": (N, H),
            "Hg_W": (C, 2), "Hg_b": (2,), "Hc_W": (C * N, 2), "Hc_b": (2,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self) -> tuple:
        """(D_raw, H, C, N)"""
        return (self.W1.shape[0], self.W1.shape[1], self.W2.shape[1], self.part_embed.shape[0])

    def blocks(self) -> dict:
        return {name: getattr(self, name) for name in BLOCKS}

    def equals(self, other: "ExtractorParams") -> bool:
        return all(np.array_equal(getattr(self, b), getattr(other, b)) for b in BLOCKS)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha1()
        for name in BLOCKS:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


def init_params(rng: np.random.Generator, d_raw=32, hidden=64, embed_dim=16, n_parts=10) -> ExtractorParams:
    return ExtractorParams(
        W1=rng.normal(0.0, np.sqrt(2.0 / d_raw), (d_raw, hidden)),
        b1=np.zeros(hidden),
        W2=rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, embed_dim)),
        b2=np.zeros(embed_dim),
        part_embed=rng.normal(0.0, 0.1, (n_parts, hidden)),
        Hg_W=rng.normal(0.0, 0.1, (embed_dim, 2)),
        Hg_b=np.zeros(2),
        Hc_W=rng.normal(0.0, 0.1, (embed_dim * n_parts, 2)),
        Hc_b=np.zeros(2),
    )


def zero_params(d_raw=32, hidden=64, embed_dim=16, n_parts=10) -> ExtractorParams:
    return ExtractorParams(
        W1=np.zeros((d_raw, hidden)), b1=np.zeros(hidden),
        W2=np.zeros((hidden, embed_dim)), b2=np.zeros(embed_dim),
        part_embed=np.zeros((n_parts, hidden)),
        Hg_W=np.zeros((embed_dim, 2)), Hg_b=np.zeros(2),
        Hc_W=np.zeros((embed_dim * n_parts, 2)), Hc_b=np.zeros(2),
    )


def snapshot(params: ExtractorParams) -> ExtractorParams:
    """Deep, independent copy (same version)."""
    return replace(params, **{name: getattr(params, name).copy() for name in BLOCKS})


@dataclass(frozen=True)
class TrainBatch:
    """Labelled observations with a provenance tag per sample."""

    samples: tuple
    tags: tuple = field(default=None)

    def __post_init__(self):
        samples = tuple(self.samples)
        tags = ("short-term",) * len(samples) if self.tags is None else tuple(self.tags)
        if len(tags) != len(samples):
            raise ValueError("one provenance tag per sample required")
        bad = set(tags) - {"short-term", "long-term", "incoming"}
        if bad:
            raise ValueError(f"unknown provenance tags {bad}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "tags", tags)

    @classmethod
    def from_pairs(cls, pairs, tag="short-term") -> "TrainBatch":
        return cls(tuple(obs.with_label(y) for obs, y in pairs), (tag,) * len(pairs))

    def __len__(self) -> int:
        return len(self.samples)

    def __add__(self, other: "TrainBatch") -> "TrainBatch":
        return TrainBatch(self.samples + other.samples, self.tags + other.tags)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def has_both_classes(self) -> bool:
        y = self.labels
        return bool((y == 1).any() and (y == 0).any())

    def arrays(self):
        """Stacked (X, vis, y)."""
        X = np.stack([s.raw for s in self.samples])
        V = np.stack([s.vis for s in self.samples])
        return X, V, self.labels


@dataclass(frozen=True)
class LossReport:
    total: float
    ce_g: float
    ce_c: float
    triplet: float
    per_sample: tuple


def _check_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values after {layer}")


def forward_arrays(params: ExtractorParams, X: np.ndarray, V: np.ndarray):
    """Batched forward pass; returns masked F (B, N, C) and the cache for backprop."""
    with np.errstate(invalid="ignore", over="ignore"):
        Z1 = X @ params.W1 + params.b1 + params.part_embed
        _check_finite(Z1, "layer1")
        A1 = np.maximum(Z1, 0.0)
        F = (A1 @ params.W2 + params.b2) * V[..., None]
    _check_finite(F, "layer2")
    return F, (X, Z1, A1)


def forward(params: ExtractorParams, obs: Observation) -> PartFeatures:
    F, _ = forward_arrays(params, obs.raw[None], obs.vis[None])
    return PartFeatures(F[0], obs.vis)


def extract(params: ExtractorParams, observations: Sequence[Observation]) -> np.ndarray:
    """(B, N, C) features for a list of observations."""
    if not observations:
        return np.zeros((0,) + params.part_embed.shape[:1] + params.W2.shape[1:])
    X = np.stack([o.raw for o in observations])
    V = np.stack([o.vis for o in observations])
    return forward_arrays(params, X, V)[0]


def _head_inputs(F, V):
    nvis = V.sum(axis=1)
    if np.any(nvis == 0):
        raise ReIDError("sample without visible parts")
    pooled = F.sum(axis=1) / nvis[:, None]
    concat = F.reshape(F.shape[0], -1)
    return pooled, concat, nvis


def heads(params: ExtractorParams, feats: PartFeatures):
    """(logits_g, logits_c) for one sample."""
    pooled, concat, _ = _head_inputs(feats.F[None], feats.vis[None])
    return (pooled @ params.Hg_W + params.Hg_b)[0], (concat @ params.Hc_W + params.Hc_b)[0]


def _cross_entropy(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    per = -logp[np.arange(len(y)), y]
    prob = np.exp(logp)
    prob[np.arange(len(y)), y] -= 1.0
    return per, prob  # prob now holds d(per)/d(logits)


def mine_triplets(F, V, y):
    """Batch-hard mining on the mutual-visibility part distance.

    Returns (anchors, hardest_pos, hardest_neg) index arrays.  Anchors without
    a distinct positive or a negative at a defined distance are dropped.
    """
    # squared distances by expansion are only used for the argmax/argmin
    Fk = np.ascontiguousarray(F.transpose(1, 0, 2))  # (N, B, C)
    sq = np.einsum("kic,kic->ki", Fk, Fk)
    gram = Fk @ Fk.transpose(0, 2, 1)
    part = np.sqrt(np.maximum(sq[:, :, None] + sq[:, None, :] - 2.0 * gram, 0.0))
    Vk = V.T.astype(np.float64)
    mutual = Vk[:, :, None] * Vk[:, None, :]
    count = mutual.sum(axis=0)
    defined = count > 0
    dist = np.where(defined, (part * mutual).sum(axis=0) / np.maximum(count, 1), 0.0)
    same = y[:, None] == y[None, :]
    pos_ok = same & defined & ~np.eye(len(y), dtype=bool)
    neg_ok = ~same & defined
    valid = pos_ok.any(axis=1) & neg_ok.any(axis=1)
    anchors = np.flatnonzero(valid)
    hp = np.argmax(np.where(pos_ok, dist, -np.inf), axis=1)[anchors]
    hn = np.argmin(np.where(neg_ok, dist, np.inf), axis=1)[anchors]
    return anchors, hp, hn


def _pair_distance(F, V, i, j):
    """Exact part distances for index pairs plus the pieces needed for gradients."""
    diff = F[i] - F[j]
    norms = np.sqrt(np.einsum("akc,akc->ak", diff, diff))
    mutual = V[i] & V[j]
    count = mutual.sum(axis=1)
    return (norms * mutual).sum(axis=1) / count, diff, norms, mutual, count


def _loss(params, X, V, y, margin, want_grad):
    if not ((y == 1).any() and (y == 0).any()):
        raise MiningImpossibleError("batch needs at least one positive and one negative")
    B = len(y)
    F, (X_, Z1, A1) = forward_arrays(params, X, V)
    pooled, concat, nvis = _head_inputs(F, V)
    lg = pooled @ params.Hg_W + params.Hg_b
    lc = concat @ params.Hc_W + params.Hc_b
    ce_g_per, dlg = _cross_entropy(lg, y)
    ce_c_per, dlc = _cross_entropy(lc, y)

    anchors, hp, hn = mine_triplets(F, V, y)
    hinge = np.zeros(B)
    if len(anchors):
        d_ap, diff_ap, n_ap, m_ap, c_ap = _pair_distance(F, V, anchors, hp)
        d_an, diff_an, n_an, m_an, c_an = _pair_distance(F, V, anchors, hn)
        hinge[anchors] = np.maximum(0.0, d_ap - d_an + margin)
        triplet = float(hinge[anchors].mean())
    else:
        triplet = 0.0
    ce_g = float(ce_g_per.mean())
    ce_c = float(ce_c_per.mean())
    report = LossReport(
        total=ce_g + ce_c + triplet, ce_g=ce_g, ce_c=ce_c, triplet=triplet,
        per_sample=tuple((ce_g_per + ce_c_per + hinge).tolist()),
    )
    if not want_grad:
        return report, None

    dlg /= B
    dlc /= B
    grads = {
        "Hg_W": pooled.T @ dlg, "Hg_b": dlg.sum(axis=0),
        "Hc_W": concat.T @ dlc, "Hc_b": dlc.sum(axis=0),
    }
    dF = (dlg @ params.Hg_W.T)[:, None, :] / nvis[:, None, None] * V[..., None]
    dF = dF + (dlc @ params.Hc_W.T).reshape(F.shape)
    if len(anchors):
        active = hinge[anchors] > 0.0
        scale = active / len(anchors)
        for sign, diff, norms, mutual, count, other in (
            (1.0, diff_ap, n_ap, m_ap, c_ap, hp),
            (-1.0, diff_an, n_an, m_an, c_an, hn),
        ):
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(mutual & (norms > 0), 1.0 / norms, 0.0) / count[:, None]
            g = sign * (scale[:, None] * w)[..., None] * diff
            np.add.at(dF, anchors, g)
            np.add.at(dF, other, -g)
    dF *= V[..., None]

    H = A1.shape[-1]
    C = F.shape[-1]
    grads["W2"] = A1.reshape(-1, H).T @ dF.reshape(-1, C)
    grads["b2"] = dF.sum(axis=(0, 1))
    dZ1 = (dF @ params.W2.T) * (Z1 > 0)
    grads["W1"] = X_.reshape(-1, X_.shape[-1]).T @ dZ1.reshape(-1, H)
    grads["b1"] = dZ1.sum(axis=(0, 1))
    grads["part_embed"] = dZ1.sum(axis=0)
    return report, grads


def mixed_loss(params: ExtractorParams, batch: TrainBatch, margin: float = 0.3) -> LossReport:
    X, V, y = batch.arrays()
    return _loss(params, X, V, y, margin, want_grad=False)[0]


def loss_and_grad(params: ExtractorParams, batch: TrainBatch, margin: float = 0.3):
    X, V, y = batch.arrays()
    return _loss(params, X, V, y, margin, want_grad=True)


def apply_grads(params: ExtractorParams, grads: dict, lr: float) -> ExtractorParams:
    new = {name: getattr(params, name) - lr * grads[name] for name in BLOCKS}
    for name, arr in new.items():
        _check_finite(arr, name)
    return replace(params, version=params.version + 1, **new)


def sgd_step(params: ExtractorParams, batch: TrainBatch, lr: float = 0.01, margin: float = 0.3):
    """One SGD step on the mixed loss; returns (new params, pre-step loss)."""
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    report, grads = loss_and_grad(params, batch, margin)
    return apply_grads(params, grads, lr), report


def save_checkpoint(params: ExtractorParams, path) -> None:
    header = np.array([CHECKPOINT_FORMAT, *params.dims, params.version], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, header=header, **params.blocks())


def load_checkpoint(path) -> ExtractorParams:
    with np.load(path) as data:
        header = data["header"]
        if header[0] != CHECKPOINT_FORMAT:
            raise ReIDError(f"unsupported checkpoint format {header[0]}")
        params = ExtractorParams(**{b: data[b].copy() for b in BLOCKS}, version=int(header[5]))
    if tuple(int(v) for v in header[1:5]) != params.dims:
        raise ReIDError("checkpoint header does not match block shapes")
    return params


def checkpoint_bytes(params: ExtractorParams) -> bytes:
    buf = io.BytesIO()
    header = np.array([CHECKPOINT_FORMAT, *params.dims, params.version], dtype=np.int64)
    np.savez(buf, header=header, **params.blocks())
    return buf.getvalue()


class PartEmbedder(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the part embedding network.

    ``X`` is a (n_samples, n_parts, d_raw) array of raw part descriptors.
    Invisible parts are zero rows unless ``vis`` is passed explicitly.

    Parameters
    ----------
    hidden, embed_dim : int
        Hidden width and part feature width.
    lr : float
        SGD step size.
    margin : float
        Triplet hinge margin.
    n_steps : int
        SGD steps taken by :meth:`fit`.
    batch_size : int
        Minibatch size used by :meth:`fit`.
    random_state : int or None
    """

    def __init__(self, hidden=64, embed_dim=16, lr=0.01, margin=0.3, n_steps=200,
                 batch_size=64, random_state=None):
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.lr = lr
        self.margin = margin
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def _init(self, X):
        rng = np.random.default_rng(self.random_state)
        self.params_ = init_params(rng, X.shape[2], self.hidden, self.embed_dim, X.shape[1])
        self.n_parts_ = X.shape[1]
        self.loss_curve_ = []
        self._rng = rng

    def fit(self, X, y, vis=None):
        X = check_parts_array(X)
        V = check_vis(vis, X)
        y = check_binary_labels(y, X.shape[0])
        self._init(X)
        for _ in range(self.n_steps):
            idx = self._rng.choice(len(y), size=min(self.batch_size, len(y)), replace=False)
            if not (y[idx].min() == 0 and y[idx].max() == 1):
                continue
            self._step(X[idx], V[idx], y[idx])
        return self

    def partial_fit(self, X, y, vis=None):
        X = check_parts_array(X)
        V = check_vis(vis, X)
        y = check_binary_labels(y, X.shape[0])
        if not hasattr(self, "params_"):
            self._init(X)
        self._step(X, V, y)
        return self

    def _step(self, X, V, y):
        report, grads = _loss(self.params_, X, V, y, self.margin, want_grad=True)
        self.params_ = apply_grads(self.params_, grads, self.lr)
        self.loss_curve_.append(report.total)

    def transform(self, X, vis=None):
        check_is_fitted(self, "params_")
        X = check_parts_array(X, self.n_parts_)
        V = check_vis(vis, X)
        return forward_arrays(self.params_, X, V)[0]
