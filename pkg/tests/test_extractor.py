import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from oclreid.core import BBox, NumericError, Observation, PartFeatures, part_distance
from oclreid.extractor import (
    BLOCKS,
    MiningImpossibleError,
    PartEmbedder,
    TrainBatch,
    forward,
    heads,
    init_params,
    load_checkpoint,
    loss_and_grad,
    mixed_loss,
    save_checkpoint,
    sgd_step,
    snapshot,
    zero_params,
)

from .conftest import make_obs

SMALL = dict(d_raw=6, hidden=8, embed_dim=4, n_parts=10)


def random_batch(rng, n=8, d_raw=6, n_parts=10, p_vis=0.6):
    labels = [1, 0] + [int(v) for v in rng.integers(0, 2, n - 2)]
    samples = []
    for i, y in enumerate(labels):
        vis = rng.random(n_parts) < p_vis
        vis[rng.integers(n_parts)] = True
        samples.append(Observation(i, rng.normal(size=(n_parts, d_raw)), vis, BBox(1, 1, 1, 1), y, 0))
    return TrainBatch(tuple(samples))


def finite_difference(params, batch, eps=1e-4):
    grads = {}
    for name in BLOCKS:
        arr = getattr(params, name)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += eps
            minus[idx] -= eps
            lp = mixed_loss(replace(params, **{name: plus}), batch).total
            lm = mixed_loss(replace(params, **{name: minus}), batch).total
            fd[idx] = (lp - lm) / (2 * eps)
        grads[name] = fd
    return grads


def block_relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def brute_triplet(F_list, vis_list, labels, margin=0.3):
    """All-pairs enumeration of batch-hard triplets with the scalar part distance."""
    losses = []
    feats = [PartFeatures(F, v) for F, v in zip(F_list, vis_list)]
    for a in range(len(feats)):
        pos, neg = [], []
        for j in range(len(feats)):
            if not (feats[a].vis & feats[j].vis).any():
                continue
            d = part_distance(feats[a], feats[j])
            if labels[j] == labels[a] and j != a:
                pos.append(d)
            elif labels[j] != labels[a]:
                neg.append(d)
        if pos and neg:
            losses.append(max(0.0, max(pos) - min(neg) + margin))
    return float(np.mean(losses)) if losses else 0.0


def test_zero_params_give_zero_features(rng):
    obs = make_obs(rng)
    F = forward(zero_params(), obs)
    assert np.all(F.F == 0)


def test_forward_is_deterministic(rng):
    params = init_params(rng)
    obs = make_obs(rng)
    assert np.array_equal(forward(params, obs).F, forward(params, obs).F)


def test_forward_masking_is_local(rng):
    params = init_params(rng)
    full = make_obs(rng, vis=np.ones(10, dtype=bool))
    vis = np.ones(10, dtype=bool)
    vis[2] = False
    masked = Observation(full.track_id, full.raw, vis, full.bbox, full.label, full.frame)
    a, b = forward(params, full).F, forward(params, masked).F
    assert np.all(b[2] == 0)
    keep = np.arange(10) != 2
    assert np.array_equal(a[keep], b[keep])


def test_forward_numeric_error(rng):
    params = init_params(rng)
    params = replace(params, W2=np.full_like(params.W2, np.inf))
    with pytest.raises(NumericError, match="layer2"):
        forward(params, make_obs(rng))


def test_heads_zero_params(rng):
    lg, lc = heads(zero_params(), PartFeatures(rng.normal(size=(10, 16))))
    assert np.all(lg == 0) and np.all(lc == 0)


def test_heads_pooling(rng):
    params = init_params(rng)
    params = replace(params, Hg_W=np.eye(16, 2), Hg_b=np.zeros(2))
    F = np.zeros((10, 16))
    F[3] = rng.normal(size=16)
    lg, _ = heads(params, PartFeatures(F, np.eye(10, dtype=bool)[3]))
    assert np.allclose(lg, F[3, :2])
    u = rng.normal(size=16)
    F2 = np.zeros((10, 16))
    F2[0], F2[1] = u, -u
    vis = np.zeros(10, dtype=bool)
    vis[:2] = True
    lg2, _ = heads(params, PartFeatures(F2, vis))
    assert np.allclose(lg2, 0)


def test_zero_params_cross_entropy_is_ln2(rng):
    batch = TrainBatch(tuple(make_obs(rng, label=i % 2) for i in range(6)))
    rep = mixed_loss(zero_params(), batch)
    assert rep.ce_g == pytest.approx(math.log(2))
    assert rep.ce_c == pytest.approx(math.log(2))
    # identical (all-zero) features: hinge sits exactly at the margin
    assert rep.triplet == pytest.approx(0.3)
    assert rep.total == pytest.approx(rep.ce_g + rep.ce_c + rep.triplet, abs=1e-9)


def test_triplet_matches_bruteforce_hand_case():
    # two positives far apart, one negative equal to the first positive
    F = np.zeros((3, 2, 1))
    F[0, :, 0] = [0.0, 0.0]
    F[1, :, 0] = [4.0, 4.0]
    F[2, :, 0] = [0.0, 0.0]
    vis = [np.ones(2, dtype=bool)] * 3
    labels = [1, 1, 0]
    # anchor 0: d_ap=4, d_an=0 -> 4.3; anchor 1: d_ap=4, d_an=4 -> 0.3; anchor 2: no positive
    assert brute_triplet(F, vis, labels) == pytest.approx((4.3 + 0.3) / 2)

    # realise these features through an identity-like network
    params = replace(
        zero_params(d_raw=1, hidden=1, embed_dim=1, n_parts=2),
        W1=np.ones((1, 1)), W2=np.ones((1, 1)),
    )
    samples = tuple(
        Observation(i, F[i], vis[i], BBox(1, 1, 1, 1), labels[i], 0) for i in range(3)
    )
    rep = mixed_loss(params, TrainBatch(samples))
    assert rep.triplet == pytest.approx((4.3 + 0.3) / 2)


def test_triplet_matches_bruteforce_random(rng):
    from oclreid.extractor import extract

    for _ in range(10):
        params = init_params(rng, **SMALL)
        batch = random_batch(rng, n=9)
        feats = extract(params, batch.samples)
        expected = brute_triplet(list(feats), [s.vis for s in batch.samples], list(batch.labels))
        assert mixed_loss(params, batch).triplet == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_mining_impossible(rng):
    batch = TrainBatch(tuple(make_obs(rng, label=1) for _ in range(3)))
    with pytest.raises(MiningImpossibleError):
        mixed_loss(init_params(rng), batch)


def test_gradient_matches_finite_differences(rng):
    for _ in range(3):
        params = init_params(rng, **SMALL)
        batch = random_batch(rng)
        _, grads = loss_and_grad(params, batch)
        numeric = finite_difference(params, batch)
        for name in BLOCKS:
            assert block_relative_error(grads[name], numeric[name]) <= 1e-4, name


def test_loss_invariant_to_invisible_raw_content(rng):
    params = init_params(rng, **SMALL)
    batch = random_batch(rng)
    rep = mixed_loss(params, batch)
    # Observation zeroes invisible rows, so forward must also ignore whatever
    # the hidden rows would have held
    noisy = []
    for s in batch.samples:
        raw = s.raw + (~s.vis)[:, None] * 100.0
        noisy.append(Observation(s.track_id, raw, s.vis, s.bbox, s.label, s.frame))
    assert mixed_loss(params, TrainBatch(tuple(noisy))).total == rep.total


def test_sgd_step_lr_zero_keeps_values(rng):
    params = init_params(rng, **SMALL)
    new, _ = sgd_step(params, random_batch(rng), lr=0.0)
    assert new.version == params.version + 1
    assert new.equals(params)


def test_sgd_step_rejects_negative_lr(rng):
    with pytest.raises(ValueError):
        sgd_step(init_params(rng, **SMALL), random_batch(rng), lr=-0.1)


def test_sgd_descends_on_fixed_batch(rng):
    params = init_params(rng)
    samples = []
    for i, y in enumerate([1, 1, 0, 0]):
        vis = np.zeros(10, dtype=bool)
        vis[:5] = True
        base = np.full((10, 32), 1.0 if y else -1.0)
        samples.append(Observation(i, base + 0.1 * rng.normal(size=(10, 32)), vis, BBox(1, 1, 1, 1), y, 0))
    batch = TrainBatch(tuple(samples))
    losses = []
    for _ in range(11):
        params, rep = sgd_step(params, batch, lr=0.01)
        losses.append(rep.total)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_snapshot_is_independent(rng):
    params = init_params(rng, **SMALL)
    batch = random_batch(rng)
    obs = batch.samples[0]
    snap = snapshot(params)
    before = forward(params, obs).F
    new, _ = sgd_step(params, batch, lr=0.1)
    assert snap.equals(params)
    assert not new.equals(snap)
    assert snapshot(snap).equals(snap)
    assert np.array_equal(forward(snap, obs).F, before)
    snap.W1[0, 0] += 1.0
    assert not snap.equals(params)


def test_checkpoint_round_trip(tmp_path, rng):
    params = replace(init_params(rng), version=17)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert back.equals(params)
    assert back.version == 17
    assert back.dims == (32, 64, 16, 10)


def test_train_batch_tags(rng):
    a = TrainBatch((make_obs(rng, label=1),), ("short-term",))
    b = TrainBatch((make_obs(rng, label=0),), ("long-term",))
    both = a + b
    assert both.tags == ("short-term", "long-term")
    assert both.has_both_classes()
    with pytest.raises(ValueError):
        TrainBatch((make_obs(rng),), ("elsewhere",))


class TestPartEmbedder:
    def test_get_params_round_trip(self):
        est = PartEmbedder(hidden=8, lr=0.05)
        assert est.get_params()["hidden"] == 8
        est.set_params(lr=0.1)
        assert est.lr == 0.1

    def test_fit_transform_shapes(self, rng):
        X = rng.normal(size=(40, 10, 6))
        X[:, 5:] = 0
        y = np.tile([0, 1], 20)
        Z = PartEmbedder(hidden=8, embed_dim=4, n_steps=5, batch_size=16, random_state=0).fit_transform(X, y)
        assert Z.shape == (40, 10, 4)
        assert np.all(Z[:, 5:] == 0)

    def test_partial_fit_increments_version(self, rng):
        X = rng.normal(size=(6, 10, 6))
        y = np.array([0, 1, 0, 1, 0, 1])
        est = PartEmbedder(hidden=8, embed_dim=4, random_state=0).partial_fit(X, y)
        v = est.params_.version
        est.partial_fit(X, y)
        assert est.params_.version == v + 1
        assert len(est.loss_curve_) == 2

    def test_transform_before_fit(self, rng):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            PartEmbedder().transform(rng.normal(size=(2, 10, 6)))

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            PartEmbedder().fit(rng.normal(size=(4, 6)), [0, 1, 0, 1])
        with pytest.raises(ValueError):
            PartEmbedder().fit(rng.normal(size=(4, 10, 6)), [0, 1, 2, 1])
