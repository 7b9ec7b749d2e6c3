import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanesmith.behaviour import (
    AgentStates,
    IdmParams,
    KDiskVocab,
    PolicyConfig,
    ReturnBins,
    RolloutConfig,
    ToyPolicy,
    action_accuracy,
    bicycle_forward,
    build_kdisk_vocab,
    delta_forward,
    discounted_return,
    idm_accel,
    idm_rollout,
    rollout_dataset,
    reward,
    se2_compose,
    tilted_return_sample,
    train_toy_policy,
)
from lanesmith.behaviour.tokens import tilt_log_probs
from lanesmith.corpus import CorpusConfig, generate_corpus


@pytest.fixture(scope="module")
def rollouts():
    scenes = generate_corpus(CorpusConfig(seed=41, n_scenes=12))
    return [idm_rollout(s, np.random.default_rng(i), RolloutConfig(steps=60)) for i, s in enumerate(scenes)]


# ---- vocabulary ------------------------------------------------------------------------------

def test_vocab_identical_samples_collapse():
    samples = np.tile([0.8, 0.01, 0.002], (50, 1))
    with pytest.warns(RuntimeWarning, match="distinct"):
        v = build_kdisk_vocab(samples, k=8, rng=np.random.default_rng(0))
    assert len(v) == 8
    np.testing.assert_allclose(v.templates, np.tile(samples[0], (8, 1)), atol=1e-8)
    err = np.linalg.norm(v.detokenize(v.tokenize(samples)) - samples, axis=1)
    assert err.max() < 1e-8


def test_vocab_two_clusters():
    rng = np.random.default_rng(1)
    a = rng.normal([1.0, 0.0, 0.0], 0.01, (200, 3))
    b = rng.normal([0.0, 1.0, 0.5], 0.01, (300, 3))
    v = build_kdisk_vocab(np.concatenate([a, b]), k=2, rng=rng)
    got = v.templates[np.argsort(v.templates[:, 0])]
    np.testing.assert_allclose(got[1], a.mean(0), atol=1e-12)
    np.testing.assert_allclose(got[0], b.mean(0), atol=1e-12)


def test_tokenize_templates_and_ties():
    v = KDiskVocab(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    assert v.tokenize([1.0, 0.0, 0.0]) == 1
    np.testing.assert_array_equal(v.tokenize(v.templates), [0, 1, 2])
    np.testing.assert_array_equal(v.detokenize(v.tokenize(v.templates)), v.templates)
    assert v.tokenize([0.5, 0.0, 0.0]) == 0
    assert v.tokenize([0.5, 0.5, 0.0]) == 0
    assert v.tokenize([0.6, 0.6, 0.0]) == 1


def test_vocab_on_rollout_deltas(rollouts, tmp_path):
    _, D, _ = rollout_dataset(rollouts)
    v = build_kdisk_vocab(D, rng=np.random.default_rng(0))
    assert len(v) == 384
    err = np.linalg.norm(v.detokenize(v.tokenize(D))[:, :2] - D[:, :2], axis=1)
    assert err.mean() < 0.1
    v.save(tmp_path / "vocab.json")
    again = KDiskVocab.load(tmp_path / "vocab.json")
    np.testing.assert_array_equal(again.templates, v.templates)
    w = build_kdisk_vocab(D, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(w.templates, v.templates)


# ---- rewards and returns ---------------------------------------------------------------------

def test_reward_examples():
    assert reward([0.0, 0.0], [12.0, 0.0], False) == 1.0
    assert reward([0.0, 0.0], [3.0, 4.0], False) == 0.5
    assert reward([1.0, 1.0], [1.0, 1.0], True) == -10.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.booleans())
def test_reward_range(x, y, coll):
    r = float(reward([x, y], [0.0, 0.0], coll))
    assert -10.0 <= r <= 1.0
    assert (r == 1.0) == (not coll and np.hypot(x, y) >= 10.0)


def test_discounted_return():
    G, trunc = discounted_return(np.ones(40))
    assert G[0] == 20.0 and not trunc[0]
    r = np.ones(40)
    r[5] = -10.0
    G, _ = discounted_return(r)
    assert G[0] == 9.0
    G, trunc = discounted_return(np.ones(25))
    assert trunc[6] and not trunc[5] and G[6] == 0.0
    G, _ = discounted_return(np.ones(30), horizon=3, gamma=0.5)
    assert G[0] == 1.75


# ---- tilting -------------------------------------------------------------------------------

def test_tilt_zero_matches_softmax():
    logits = np.array([0.1, 1.0, -0.5, 0.3])
    centers = np.arange(4.0)
    draws = np.array([tilted_return_sample(np.tile(logits, (20_000, 1)), 0.0, centers, np.random.default_rng(0))])
    freq = np.bincount(draws.ravel(), minlength=4) / 20_000
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.all(np.abs(freq - p) < 4 * np.sqrt(p * (1 - p) / 20_000))


def test_tilt_limits_and_direction():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=350)
    centers = np.linspace(-200, 20, 350)
    assert tilted_return_sample(logits, 1e4, centers, rng) == 349
    uniform = np.zeros((10_000, 350))
    hi = centers[tilted_return_sample(uniform, 10.0, centers, rng)].mean()
    lo = centers[tilted_return_sample(uniform, -10.0, centers, rng)].mean()
    assert hi > lo
    # expectation is non-decreasing in kappa
    small = np.array([0.3, -0.2, 0.5])
    c = np.array([-1.0, 0.0, 2.0])
    means = [np.exp(tilt_log_probs(small, k, c)) @ c for k in np.linspace(-5, 5, 41)]
    assert np.all(np.diff(means) >= -1e-12)


def test_return_bins():
    b = ReturnBins.fit(np.array([-200.0, 20.0]))
    assert b.n == 350
    assert b.to_bin(-200.0) == 0 and b.to_bin(20.0) == 349
    assert np.all(np.diff(b.centers) > 0)


# ---- forward models ---------------------------------------------------------------------------

def test_delta_forward_examples():
    pose = np.array([1.0, 2.0, 0.3])
    new, v = delta_forward(pose, np.zeros(3))
    np.testing.assert_allclose(new, pose, atol=1e-15)
    assert v == 0.0
    new, v = delta_forward(np.array([0.0, 0.0, np.pi / 2]), np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(new, [0.0, 1.0, np.pi / 2], atol=1e-15)
    assert abs(v - 10.0) < 1e-12


def _mat(p):
    c, s = np.cos(p[2]), np.sin(p[2])
    return np.array([[c, -s, p[0]], [s, c, p[1]], [0, 0, 1]])


def test_delta_composition_matches_se2_product():
    rng = np.random.default_rng(0)
    pose = np.array([3.0, -1.0, 0.4])
    m = _mat(pose)
    for d in rng.normal(0, [1.0, 0.3, 0.2], (20, 3)):
        pose, _ = delta_forward(pose, d)
        m = m @ _mat(d)
    np.testing.assert_allclose(pose[:2], m[:2, 2], atol=1e-12)
    assert abs(np.angle(np.exp(1j * (pose[2] - np.arctan2(m[1, 0], m[0, 0]))))) < 1e-12


def test_delta_forward_keeps_box_and_class():
    a = AgentStates.from_objects(np.array([[0, 0, 5, 1, 0, 4.5, 2.0]]), np.array([1]))
    a.pose, a.speed = delta_forward(a.pose, np.array([[0.5, 0.0, 0.01]]))
    assert a.length[0] == 4.5 and a.width[0] == 2.0 and a.cls[0] == 1


def test_bicycle_straight_and_clamp():
    pose, v = bicycle_forward(np.array([0.0, 0.0, 0.0]), 5.0, 4.0, 0.0, 0.0)
    np.testing.assert_allclose(pose, [0.5, 0.0, 0.0], atol=1e-15)
    assert v == 5.0
    _, v = bicycle_forward(np.zeros(3), 0.0, 4.0, -3.0, 0.0)
    assert v == 0.0
    _, v = bicycle_forward(np.zeros(3), 5.0, 4.0, 100.0, 0.0)
    assert abs(v - 5.4) < 1e-12


def test_bicycle_circle():
    length, steer, speed = 4.5, 0.3, 6.0
    L = 0.8 * length
    R = L / np.tan(steer)
    pose = np.zeros(3)
    pts = []
    for _ in range(100):
        pose, speed = bicycle_forward(pose, speed, length, 0.0, steer)
        pts.append(pose[:2])
    radius = np.linalg.norm(np.array(pts) - np.array([0.0, R]), axis=1)
    assert np.abs(radius - R).max() < 0.01 * R


def test_idm_examples():
    p = IdmParams()
    assert abs(idm_accel(p.v0, np.inf, 0.0, p)) < 1e-12
    v = 6.0
    far = idm_accel(v, 1000.0, 0.0, p)
    assert abs(far - p.a * (1 - (v / p.v0) ** 4)) < 1e-3
    # closing in at speed on a stopped leader sitting at the jam distance
    assert idm_accel(8.0, p.s0, 8.0, p) <= -p.b
    # both at rest exactly at the jam distance: the plug-in formula gives zero
    assert abs(idm_accel(0.0, p.s0, 0.0, p)) < 1e-12


def test_se2_compose_inverse_roundtrip():
    from lanesmith.behaviour import relative_delta

    rng = np.random.default_rng(3)
    a = rng.normal(size=(10, 3))
    b = rng.normal(size=(10, 3))
    np.testing.assert_allclose(se2_compose(a, relative_delta(a, b))[:, :2], b[:, :2], atol=1e-12)


# ---- learned policy ---------------------------------------------------------------------------

def test_rollouts_have_expected_shapes(rollouts):
    r = rollouts[0]
    T, A = r.rewards.shape
    assert r.poses.shape == (T + 1, A, 3)
    assert np.all(r.rewards <= 1.0) and np.all(r.rewards >= -10.0)
    assert not r.learnable[r.ego]


def test_policy_overfit_and_loss_drop(rollouts, tmp_path):
    train = rollouts[:10]
    pol, hist = train_toy_policy(train, PolicyConfig(steps=2500, hidden=256, lr=3e-3))
    first = np.mean([h["total"] for h in hist[:20]])
    last = np.mean([h["total"] for h in hist[-20:]])
    assert last < 0.7 * first
    assert action_accuracy(pol, train) > 0.8
    pol.save(tmp_path / "policy.ckpt")
    again = ToyPolicy.load(tmp_path / "policy.ckpt")
    assert action_accuracy(again, train[:2]) == action_accuracy(pol, train[:2])


def test_policy_training_deterministic(rollouts):
    a = train_toy_policy(rollouts[:2], PolicyConfig(steps=5))[1][-1]["total"]
    b = train_toy_policy(rollouts[:2], PolicyConfig(steps=5))[1][-1]["total"]
    assert a == b
