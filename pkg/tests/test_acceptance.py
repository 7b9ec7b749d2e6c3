"""Numbered acceptance criteria; the run ends with one PASS/FAIL line per criterion.

Criteria 7 and 9 use the desk-scale artifacts under ``artifacts/``; when they
are absent they are trained first with ``configs/desk.toml`` (hours on a CPU).
"""
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import make_scene, random_lane_scene, straight
from oracles import brute_convenience, brute_route, chain_scene, min_corner_gap, point_sampling_overlap, random_graph
from lanesmith import tensor as T
from lanesmith.behaviour import ToyPolicy, PolicyConfig, RolloutConfig, idm_rollout, train_toy_policy
from lanesmith.cli import main as cli_main
from lanesmith.corpus import CorpusConfig, generate_corpus, generate_scene, split_of
from lanesmith.metrics.collision import boxes_overlap, object_corners
from lanesmith.metrics.distributions import (
    FeatureHistogram,
    agent_jsd_features,
    fraction_on_lane,
    frechet_1d,
    frechet_gaussian,
    frechet_multivariate,
    jsd,
)
from lanesmith.metrics.graph import build_lane_graph, endpoint_distance, route_length, urban_planning_features
from lanesmith.metrics.report import connectivity_jsd
from lanesmith.models.autoencoder import AeConfig, SceneAutoencoder, forward_loss, load_autoencoder, training_views
from lanesmith.models.data import make_batch, prepare
from lanesmith.models.diffusion import (
    SCENE_PLAIN,
    Conditioning,
    DmConfig,
    Denoiser,
    Generator,
    SamplerConfig,
    build_schedule,
    dm_loss,
    encode_views,
    inpaint,
    latent_stats,
    load_generator,
    partitioned_count_table,
    q_sample,
    q_step,
    sample_scene,
)
from lanesmith.corpus import empirical_count_distribution
from lanesmith.scene import ObjectClass, Scene, apply_ordering, compute_stats, order_elements, partition_scene
from lanesmith.scene.types import SceneRegion
from lanesmith.sim import IdmAgents, SimConfig, episode_metrics, extend_scene, run_episode, world_from_scene
from lanesmith.tensor import autograd as ag
from lanesmith.tensor.gradcheck import check_gradients
from lanesmith.tensor.nn import AdaLNZeroBlock, Attention, MLP, TransformerBlock

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = ROOT / "artifacts"
DESK_CONFIG = ROOT / "configs" / "desk.toml"
DESK_SEED = 0
DESK_SCENES = 2000

TINY_AE = AeConfig(lane_latent=4, object_latent=3, d_lane=16, d_object=8, d_edge=4, heads_lane=2, heads_object=2,
                   n_encoder=1, n_decoder=1, seed=1)
TINY_DM = DmConfig(lane_latent=4, object_latent=3, d_lane=16, d_object=8, heads_lane=2, heads_object=2, n_blocks=1)


def _budget(start, seconds):
    elapsed = time.time() - start
    assert elapsed < seconds, f"took {elapsed:.0f} s, budget {seconds} s"


def _randomize_zero_params(model, rng, scale=0.3):
    for _, p in model.named_parameters():
        if not np.any(p.data):
            p.data = rng.normal(0, scale, p.data.shape)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(CorpusConfig(seed=91, n_scenes=60))


@pytest.fixture(scope="module")
def tiny_gen(small_corpus):
    ae = SceneAutoencoder(TINY_AE)
    stats = compute_stats(small_corpus)
    views = training_views(small_corpus)
    lat = latent_stats(encode_views(ae, views, stats), np.random.default_rng(0))
    model = Denoiser(TINY_DM)
    _randomize_zero_params(model, np.random.default_rng(1))
    return Generator(model, ae, stats, lat, build_schedule(100), empirical_count_distribution(small_corpus),
                     partitioned_count_table(views))


@pytest.fixture(scope="module")
def desk():
    """Desk-scale autoencoder, diffusion model and policy (trained on demand)."""
    ae_path, dm_path, pol_path = ARTIFACTS / "ae.ckpt", ARTIFACTS / "dm.ckpt", ARTIFACTS / "policy.ckpt"
    if not (ae_path.exists() and dm_path.exists() and pol_path.exists()):
        common = ["--config", str(DESK_CONFIG), "--seed", str(DESK_SEED), "--out", str(ARTIFACTS)]
        corpus = ARTIFACTS / "corpus"
        steps = [["corpus", *common]] if not (corpus / "manifest.json").exists() else []
        if not ae_path.exists():
            steps.append(["train-ae", *common, "--corpus", str(corpus)])
        if not dm_path.exists():
            steps.append(["train-dm", *common, "--corpus", str(corpus), "--ae", str(ae_path)])
        if not pol_path.exists():
            steps.append(["train-policy", *common, "--corpus", str(corpus), "--n-scenes", "120"])
        for argv in steps:
            assert cli_main(argv) == 0, argv
    ae, stats = load_autoencoder(ae_path)
    gen = load_generator(dm_path, ae, stats)
    return gen, ToyPolicy.load(pol_path)


@pytest.fixture(scope="module")
def held_out():
    cfg = CorpusConfig(seed=DESK_SEED, n_scenes=DESK_SCENES)
    return [generate_scene(cfg, i) for i in range(DESK_SCENES) if split_of(DESK_SEED, i) == "test"]


# ---- 1 -------------------------------------------------------------------------------------------

def _leaf(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


OPS = [
    lambda x: T.softmax(x, axis=-1), lambda x: T.log_softmax(x, axis=-1), lambda x: T.layer_norm(x), T.gelu, T.silu,
    T.tanh, T.sigmoid, T.exp, lambda x: T.log(x * x + 1.0), lambda x: T.sqrt(x * x + 1.0),
    lambda x: x.transpose((2, 0, 1)), lambda x: x.reshape(-1), lambda x: x[..., 1:],
    lambda x: T.concat([x, x * 2.0], axis=-1), lambda x: x / (x * x + 2.0), lambda x: x.mean(axis=-1),
    lambda x: x.sum(axis=0), lambda x: x - 3.0 * x, lambda x: T.clip(x, -0.5, 0.5) * x,
]


@pytest.mark.acceptance(1, "gradient integrity: ops, blocks, AE loss, DM loss")
def test_ac01_gradient_integrity(small_corpus):
    start = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for op in OPS:
        x = _leaf(rng, 2, 3, 4)
        probe = T.Tensor(rng.standard_normal(op(T.Tensor(x.data)).shape))
        worst = max(worst, check_gradients(lambda: (op(x) * probe).sum(), [x]))
    a, b, w = _leaf(rng, 3, 4), _leaf(rng, 4, 2), T.Tensor(rng.standard_normal((3, 2)))
    worst = max(worst, check_gradients(lambda: (T.matmul(a, b) * w).sum(), [a, b]))
    logits = _leaf(rng, 5, 4)
    target = rng.integers(0, 4, 5)
    worst = max(worst, check_gradients(lambda: T.cross_entropy(logits, target), [logits]))
    attn = Attention(8, 8, 2, rng, edge_dim=3)
    q, kv, e = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 4, 8), _leaf(rng, 2, 3, 4, 3)
    mask = np.array([[True, True, True, False], [True, False, True, True]])
    probe = rng.standard_normal((2, 3, 8))
    worst = max(worst, check_gradients(lambda: (attn(q, kv, edge=e, key_mask=mask) * probe).sum(),
                                       [q, kv, e, attn.wq.weight, attn.we_k.weight, attn.we_v.weight]))
    block, dit, mlp = TransformerBlock(8, 2, rng, d_ctx=6), AdaLNZeroBlock(8, 2, 5, rng), MLP([8, 16, 8], rng)
    dit.modulation.weight.data = rng.standard_normal(dit.modulation.weight.shape) * 0.1
    x, ctx, c = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 4, 6), _leaf(rng, 2, 5)
    worst = max(worst, check_gradients(lambda: (block(x, ctx) * probe).sum(), [x, ctx, block.attn.wk.weight]))
    worst = max(worst, check_gradients(lambda: (dit(x, c) * probe).sum(), [x, c, dit.modulation.weight]))
    worst = max(worst, check_gradients(lambda: (mlp(x) * probe).sum(), [x] + mlp.parameters()))
    # full autoencoder loss
    ae = SceneAutoencoder(TINY_AE)
    stats = compute_stats(small_corpus)
    batch = make_batch([prepare(small_corpus[i], partition=True) for i in range(2)], stats)
    params = [p for name, p in ae.named_parameters() if not name.endswith("wk.bias")]
    picked = [params[i] for i in rng.choice(len(params), 10, replace=False)]
    worst = max(worst, check_gradients(lambda: forward_loss(ae, batch, np.random.default_rng(7))[0], picked,
                                       step=1e-6, max_entries=6, rng=rng))
    # full diffusion loss
    dm = Denoiser(TINY_DM)
    _randomize_zero_params(dm, rng)
    B, L, O = 3, 5, 4
    lm, om = np.ones((B, L), bool), np.ones((B, O), bool)
    lm[0, 3:], om[1, 2:] = False, False
    h0l, h0o = rng.normal(size=(B, L, 4)), rng.normal(size=(B, O, 3))
    t = np.array([3, 40, 99])
    el, eo = rng.normal(size=h0l.shape), rng.normal(size=h0o.shape)
    cond = Conditioning(t, np.full(B, SCENE_PLAIN), np.array([0, 1, 0]), np.array([False, False, True]))
    sched = build_schedule(100)
    # key biases shift every logit equally, so their true gradient is exactly zero
    params = [p for name, p in dm.named_parameters() if not name.endswith("wk.bias")]
    picked = [params[i] for i in rng.choice(len(params), 10, replace=False)]
    worst = max(worst, check_gradients(lambda: dm_loss(dm, h0l, h0o, t, el, eo, cond, lm, om, sched,
                                                             np.array([False, False, True]))[0], picked,
                                       step=1e-6, max_entries=6, rng=rng))
    assert worst < 1e-4
    _budget(start, 120)


# ---- 2 -------------------------------------------------------------------------------------------

@pytest.mark.acceptance(2, "DDPM kernel composition matches the closed-form marginal")
def test_ac02_ddpm_consistency():
    start = time.time()
    s = build_schedule(100)
    rng = np.random.default_rng(2)
    n, h0 = 100_000, -0.8
    x = np.full(n, h0)
    for t in range(1, 101):
        x = q_step(x, t, rng.standard_normal(n), s)
        if t in (1, 2, 10, 50, 100):
            mean, var = np.sqrt(s.alpha_bar[t]) * h0, 1 - s.alpha_bar[t]
            assert abs(x.mean() - mean) < 3 * np.sqrt(var / n)
            assert abs(x.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))
    _budget(start, 60)


# ---- 3 -------------------------------------------------------------------------------------------

@pytest.mark.acceptance(3, "lane latents carry no gradient from object inputs")
def test_ac03_information_flow(small_corpus):
    start = time.time()
    rng = np.random.default_rng(3)
    model = SceneAutoencoder(AeConfig(seed=3))
    _randomize_zero_params(model, rng, 0.1)
    stats = compute_stats(small_corpus)
    views = [prepare(s, partition=bool(i % 2)) for i, s in enumerate(small_corpus[:50])]
    batch = make_batch(views, stats)
    obj = ag.Tensor(batch.objects.copy(), requires_grad=True)
    enc = model.encode(batch, objects=obj)
    ((enc[0] * rng.normal(size=enc[0].shape)).sum() + (enc[1] * rng.normal(size=enc[1].shape)).sum()).backward()
    assert obj.grad is None or not np.any(obj.grad)
    # and the object path is live, so the zero above is not vacuous
    obj.grad = None
    enc = model.encode(batch, objects=obj)
    (enc[2] * rng.normal(size=enc[2].shape)).sum().backward()
    assert obj.grad is not None and np.any(obj.grad)
    _budget(start, 60)


# ---- 4 -------------------------------------------------------------------------------------------

@pytest.mark.acceptance(4, "ordering is a total order and puts F_N before F_P")
def test_ac04_ordering_contract():
    start = time.time()
    rng = np.random.default_rng(4)
    for k in range(1000):
        s = random_lane_scene(rng, n_lanes=int(rng.integers(1, 40)))
        if k % 2:
            s = partition_scene(s)
        ordered = apply_ordering(s)
        shuffled = apply_ordering(s.subset(rng.permutation(s.n_lanes), rng.permutation(s.n_objects)))
        np.testing.assert_array_equal(ordered.lanes, shuffled.lanes)
        np.testing.assert_array_equal(ordered.objects, shuffled.objects)
        np.testing.assert_array_equal(ordered.successor, shuffled.successor)
        np.testing.assert_array_equal(ordered.left, shuffled.left)
        if s.partitioned:
            lane_perm, obj_perm = order_elements(s)
            for regions in (s.lane_regions()[lane_perm], s.object_regions()[obj_perm]):
                fp = np.flatnonzero(regions == SceneRegion.F_P)
                fn = np.flatnonzero(regions == SceneRegion.F_N)
                assert not len(fp) or not len(fn) or fn.max() < fp.min()
    _budget(start, 60)


# ---- 5 -------------------------------------------------------------------------------------------

class RecordingRng:
    """Forwards to a numpy Generator and keeps every standard-normal draw."""

    def __init__(self, seed):
        self._g = np.random.default_rng(seed)
        self.draws = []

    def standard_normal(self, size=None):
        x = self._g.standard_normal(size)
        self.draws.append(x)
        return x

    def __getattr__(self, name):
        return getattr(self._g, name)


@pytest.mark.acceptance(5, "inpainting pins F_N tokens to q_sample of their latents at every step")
def test_ac05_inpainting_invariance(tiny_gen, small_corpus):
    start = time.time()
    gen = tiny_gen
    checked = 0
    for k, scene in enumerate(small_corpus[:5]):
        part = partition_scene(scene)
        behind = part.subset(np.flatnonzero(part.lane_regions() == SceneRegion.F_N),
                             np.flatnonzero(part.object_regions() == SceneRegion.F_N))
        behind.partitioned = False
        if behind.n_lanes == 0:
            continue
        base = apply_ordering(behind.copy(partitioned=True))
        with ag.no_grad():
            enc = gen.ae.encode(make_batch([base], gen.feat_stats))
        mu_l = gen.lat_stats.whiten_lanes(enc[0].data)
        mu_o = gen.lat_stats.whiten_objects(enc[2].data[:, :base.n_objects])
        rng = RecordingRng(k)
        steps = []

        def hook(t, hl, ho, kl, ko):
            eps_l, eps_o = rng.draws[-2], rng.draws[-1]
            np.testing.assert_array_equal(hl[:, :base.n_lanes], q_sample(mu_l, t, eps_l, gen.schedule))
            np.testing.assert_array_equal(ho[:, :base.n_objects], q_sample(mu_o, t, eps_o, gen.schedule))
            steps.append(t)

        out = inpaint(gen, behind, rng, SamplerConfig(), hook=hook, n_fp_lanes=3)
        assert steps == list(range(100, 0, -1))
        assert out.meta["n_fn_lanes"] == base.n_lanes
        checked += 1
    assert checked >= 3
    _budget(start, 60)


# ---- 6 -------------------------------------------------------------------------------------------

@pytest.mark.acceptance(6, "metric oracles: Dijkstra, route length, JSD, Frechet, SAT")
def test_ac06_metric_oracles():
    start = time.time()
    rng = np.random.default_rng(6)
    for _ in range(200):
        g = random_graph(rng, max_edges=10)
        np.testing.assert_allclose(sorted(urban_planning_features(g).convenience), brute_convenience(g), atol=1e-9)
        s = chain_scene(rng, int(rng.integers(2, 8)))
        assert abs(route_length(s) - brute_route(s, 0)) < 1e-9
    e = np.arange(6)
    for _ in range(200):
        p, q = FeatureHistogram(e, rng.integers(0, 20, 5) + 1), FeatureHistogram(e, rng.integers(0, 20, 5))
        if q.total:
            assert 0.0 <= jsd(p, q) <= np.log(2)
    assert abs(jsd(FeatureHistogram(e, [3, 1, 0, 0, 0]), FeatureHistogram(e, [0, 0, 0, 2, 5])) - np.log(2)) < 1e-12
    x, y = rng.normal(0, 1, 7), rng.normal(2, 3, 11)
    assert abs(frechet_1d(x, y) - np.hypot(x.mean() - y.mean(), x.std() - y.std())) < 1e-6
    m1, m2 = rng.normal(size=3), rng.normal(size=3)
    c1, c2 = np.diag(rng.uniform(0.5, 2, 3)), np.diag(rng.uniform(0.5, 2, 3))
    expected = np.sqrt(np.sum((m1 - m2) ** 2) + np.sum((np.sqrt(np.diag(c1)) - np.sqrt(np.diag(c2))) ** 2))
    assert abs(frechet_gaussian(m1, c1, m2, c2) - expected) < 1e-6
    # full covariance: commuting case with shared eigenvectors
    Q = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    l1, l2 = rng.uniform(0.5, 2, 3), rng.uniform(0.5, 2, 3)
    got = frechet_gaussian(m1, Q @ np.diag(l1) @ Q.T, m2, Q @ np.diag(l2) @ Q.T)
    assert abs(got - np.sqrt(np.sum((m1 - m2) ** 2) + np.sum((np.sqrt(l1) - np.sqrt(l2)) ** 2))) < 1e-6
    z = rng.normal(size=(400, 3))
    assert frechet_multivariate(z, z) < 1e-6
    agree = 0
    for _ in range(1000):
        th = rng.uniform(-np.pi, np.pi, 2)
        objs = np.column_stack([rng.uniform(-4, 4, 2), rng.uniform(-4, 4, 2), np.zeros(2), np.cos(th), np.sin(th),
                                rng.uniform(1, 6, 2), rng.uniform(0.5, 3, 2)])
        a, b = object_corners(objs)
        same = boxes_overlap(a, b) == point_sampling_overlap(a, b, rng)
        agree += same
        if not same:
            assert min_corner_gap(a, b) < 0.1
    assert agree >= 995
    _budget(start, 300)


# ---- 7 -------------------------------------------------------------------------------------------

@pytest.mark.acceptance(7, "toy generative quality of desk-scale models vs held-out scenes")
def test_ac07_toy_generative_quality(desk, held_out):
    gen, _ = desk
    rng = np.random.default_rng(7)
    scenes = []
    for _ in range(10):
        scenes += sample_scene(gen, "empirical", rng, SamplerConfig(), n=50)
    assert len(scenes) == 500
    conn = connectivity_jsd(held_out, scenes)
    real_h, gen_h = agent_jsd_features(held_out), agent_jsd_features(scenes)
    near = jsd(real_h["nearest_distance"], gen_h["nearest_distance"])
    on_lane = fraction_on_lane(scenes)
    gaps = [g for g in (endpoint_distance(s) for s in scenes) if g is not None]
    gap = float(np.mean(gaps)) if gaps else 0.0
    print(f"connectivity JSD {conn:.4f}, nearest-distance JSD {near:.4f}, on-lane {on_lane:.3f}, "
          f"endpoint distance {gap:.3f} m over {len(gaps)} scenes")
    assert conn < 0.1
    assert near < 0.1
    assert on_lane >= 0.9
    assert gap < 1.0


# ---- 8 -------------------------------------------------------------------------------------------

@pytest.mark.acceptance(8, "count control: requested agent and lane counts are exact")
def test_ac08_count_control(desk):
    start = time.time()
    gen, _ = desk
    rng = np.random.default_rng(8)
    counts = [(8, 24)] * 25 + [(int(rng.integers(1, 20)), int(rng.integers(1, 40))) for _ in range(75)]
    scenes = []
    for k in range(0, 100, 25):
        scenes += sample_scene(gen, counts[k:k + 25], rng, SamplerConfig())
    assert [(s.n_objects, s.n_lanes) for s in scenes] == counts
    _budget(start, 600)


# ---- 9 -------------------------------------------------------------------------------------------

def _tilted_collision_rate(policy, scenes, kappa):
    cfg = SimConfig(route_length_target=30.0, kappa=kappa)
    eps = []
    for i, s in enumerate(scenes):
        world = world_from_scene(s, np.random.default_rng([9, i]), cfg)
        eps.append(run_episode(world, policy, cfg, np.random.default_rng([9, i, 1])))
    return episode_metrics(eps)["collision"]


@pytest.mark.acceptance(9, "tilting direction: kappa=-50 collides more than kappa=+10")
def test_ac09_tilting_direction(desk, held_out):
    start = time.time()
    _, policy = desk
    scenes = held_out[:200]
    assert len(scenes) == 200
    low = _tilted_collision_rate(policy, scenes, -50.0)
    high = _tilted_collision_rate(policy, scenes, 10.0)
    print(f"planner collision rate: kappa=-50 {low:.1f}%, kappa=+10 {high:.1f}%")
    assert low > high
    _budget(start, 1800)


# ---- 10 ------------------------------------------------------------------------------------------

def _crowd(scene: Scene, rng, n_extra=30) -> Scene:
    """The scene plus extra agents, some near the window edge heading outwards."""
    th = rng.uniform(-np.pi, np.pi, n_extra)
    xy = rng.uniform(-36, 36, (n_extra, 2))
    edge = rng.random(n_extra) < 0.3
    xy[edge, 0] = np.sign(xy[edge, 0]) * 38.5
    th[edge] = np.where(xy[edge, 0] > 0, 0.0, np.pi)
    extra = np.column_stack([xy, rng.uniform(0, 8, n_extra), np.cos(th), np.sin(th),
                             rng.uniform(0.5, 4.5, n_extra), rng.uniform(0.5, 2.0, n_extra)])
    cls = rng.choice([ObjectClass.VEHICLE, ObjectClass.PEDESTRIAN, ObjectClass.CYCLIST], n_extra)
    return scene.copy(objects=np.concatenate([scene.objects, extra]),
                      object_classes=np.concatenate([scene.object_classes, cls]))


@pytest.mark.acceptance(10, "simulation determinism, frozen-on-exit and once-per-tick stepping")
def test_ac10_sim_determinism_and_fov(small_corpus):
    start = time.time()
    train = [idm_rollout(s, np.random.default_rng(i), RolloutConfig(steps=40)) for i, s in enumerate(small_corpus[:3])]
    tiny_policy, _ = train_toy_policy(train, PolicyConfig(steps=30, hidden=32))
    cfg = SimConfig(route_length_target=30.0, time_limit=6.0, kappa=0.0)
    exits = multi = 0
    for k in range(12):
        rng = np.random.default_rng(100 + k)
        scene = _crowd(small_corpus[k], rng)
        policy = tiny_policy if k % 2 else IdmAgents()
        logs = []
        for _ in range(2):
            world = world_from_scene(scene, np.random.default_rng([10, k]), cfg, distracted_prob=0.3)
            exited_at: dict[int, np.ndarray] = {}
            counts = {"subsets": 0}

            def hook(w, rec):
                a = w.agents
                active = set(np.flatnonzero(~a.frozen).tolist())
                assert set(rec.stepped) == active | {w.ego}
                assert all(v == 1 for v in rec.stepped.values())
                movers = [i for sub in rec.subsets for i in sub if i != w.ego]
                assert len(movers) == len(set(movers))
                assert all(len(sub) <= cfg.max_agents_per_window for sub in rec.subsets)
                counts["subsets"] = max(counts["subsets"], len(rec.subsets))
                for i, pose in exited_at.items():
                    np.testing.assert_array_equal(a.pose[i], pose)
                    assert i not in rec.stepped
                for i in np.flatnonzero(a.exited):
                    exited_at.setdefault(int(i), a.pose[i].copy())

            ep = run_episode(world, policy, cfg, np.random.default_rng([10, k, 1]), step_hook=hook)
            logs.append(ep.log_bytes())
        assert logs[0] == logs[1]
        exits += len(exited_at)
        multi += counts["subsets"] > 1
    assert exits > 0 and multi > 0
    _budget(start, 300)


# ---- 11 ------------------------------------------------------------------------------------------

SMOKE_CONFIG = """
seed = 11

[corpus]
n_scenes = 400

[train_ae]
steps = {ae_steps}
eval_every = 10000

[train_dm]
steps = {dm_steps}

[train_policy]
steps = 200

[sim]
route_length_target = 30.0
"""
SMOKE_AE_STEPS = 1500
SMOKE_DM_STEPS = 1200


@pytest.mark.acceptance(11, "end-to-end smoke: corpus, training, generation, 3 extensions, simulation, metrics")
def test_ac11_end_to_end_smoke(tmp_path):
    start = time.time()
    cfg = tmp_path / "smoke.toml"
    cfg.write_text(SMOKE_CONFIG.format(ae_steps=SMOKE_AE_STEPS, dm_steps=SMOKE_DM_STEPS))
    out = tmp_path / "run"
    common = ["--config", str(cfg), "--out", str(out), "--workers", "1"]
    corpus = str(out / "corpus")
    assert cli_main(["corpus", *common]) == 0
    assert cli_main(["train-ae", *common, "--corpus", corpus]) == 0
    assert cli_main(["train-dm", *common, "--corpus", corpus, "--ae", str(out / "ae.ckpt")]) == 0
    assert cli_main(["generate", *common, "--ae", str(out / "ae.ckpt"), "--dm", str(out / "dm.ckpt"), "--n", "20"]) == 0
    # three map extensions by inpainting ahead of the route end
    ae, stats = load_autoencoder(out / "ae.ckpt")
    gen = load_generator(out / "dm.ckpt", ae, stats)
    sim_cfg = SimConfig(route_length_target=400.0)
    # two-way straight road laid out like the corpus: ego lane at y = 0, opposing lane at y = 3.5
    road = make_scene([straight((-32.0, 0.0), (32.0, 0.0)), straight((32.0, 3.5), (-32.0, 3.5))],
                      objects=[[0, 0, 8.0, 1, 0, 4.5, 2.0]], classes=[0])
    world = world_from_scene(road, np.random.default_rng(11), sim_cfg)
    rng = np.random.default_rng(12)
    growth = []
    for _ in range(3):
        before = world.route.length
        assert extend_scene(world, gen, rng, sim_cfg)
        growth.append(world.route.length - before)
    print("route growth per extension (m):", [round(g, 1) for g in growth])
    episode = run_episode(world, IdmAgents(), SimConfig(route_length_target=30.0), np.random.default_rng(13))
    assert episode.steps > 0
    assert cli_main(["simulate", *common, "--scenes", corpus, "--episodes", "5", "--ae", str(out / "ae.ckpt"),
                     "--dm", str(out / "dm.ckpt")]) == 0
    assert cli_main(["metrics", *common, "--real", corpus, "--split", "test", "--gen", str(out / "generated")]) == 0
    assert (out / "metrics.json").exists() and (out / "sim_metrics.json").exists()
    _budget(start, 1800)
    assert all(24.0 <= g <= 40.0 for g in growth), growth
