"""Rule-based and learned agent policies over a shared traffic state."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..metrics.collision import boxes_overlap, object_corners
from ..scene.geometry import wrap_angle
from ..scene.types import ObjectClass, Scene
from ..tensor import autograd as ag
from ..tensor.checkpoint import load as load_ckpt, save as save_ckpt
from ..tensor.nn import MLP, Linear, Module
from ..tensor.optim import AdamW, clip_grad_norm, warmup_linear_decay
from .dynamics import (
    DT,
    AgentStates,
    IdmParams,
    bicycle_forward,
    delta_forward,
    find_leader,
    idm_accel,
    lane_route,
    pure_pursuit_steer,
    relative_delta,
)
from .tokens import (
    HORIZON_STEPS,
    N_RETURN_BINS,
    VOCAB_SIZE,
    KDiskVocab,
    ReturnBins,
    build_kdisk_vocab,
    discounted_return,
    reward,
    tilted_return_sample,
)

log = logging.getLogger(__name__)

CONTEXT_STEPS = 32
ROUTE_MIN_LENGTH = 60.0
ROUTE_REFRESH = 15.0
NEIGHBOURS = 2
NEIGHBOUR_RADIUS = 30.0
V0_RANGES = {
    ObjectClass.VEHICLE: (8.0, 14.0),
    ObjectClass.PEDESTRIAN: (1.0, 1.6),
    ObjectClass.CYCLIST: (4.0, 6.0),
    ObjectClass.STATIC: (0.0, 0.0),
}
EGO_V0 = 8.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Traffic:
    """Agents moving over a lane map, each with its own route."""

    lanes: np.ndarray
    successor: np.ndarray
    agents: AgentStates
    routes: list
    v0: np.ndarray
    ignore_ego: np.ndarray

    @classmethod
    def from_scene(cls, scene: Scene, rng: np.random.Generator, distracted_prob: float = 0.0,
                   ego_v0: float = EGO_V0) -> "Traffic":
        agents = AgentStates.from_scene(scene)
        n = len(agents)
        v0 = np.zeros(n)
        for i, c in enumerate(agents.cls):
            lo, hi = V0_RANGES.get(ObjectClass(int(c)), (ego_v0, ego_v0))
            v0[i] = rng.uniform(lo, hi) if hi > lo else lo
        ignore = rng.random(n) < distracted_prob
        ego = agents.ego
        if ego >= 0:
            v0[ego] = ego_v0
            ignore[ego] = False
        t = cls(scene.lanes.copy(), scene.successor.copy(), agents, [None] * n, v0, ignore)
        t.refresh_routes(range(n), rng, force=True)
        t.cap_initial_speeds()
        return t

    def cap_initial_speeds(self, decel: float = 3.0, margin: float = 1.0, passes: int = 3) -> None:
        """Limit speeds so every agent can stop behind its current leader."""
        a = self.agents
        everyone = range(len(a))
        for _ in range(passes):
            for i in everyone:
                if not self.movable(i):
                    continue
                gap, v_lead = find_leader(a, i, self.routes[i], self.progress(i), everyone)
                if np.isfinite(gap):
                    a.speed[i] = min(a.speed[i], v_lead + np.sqrt(2 * decel * max(gap - margin, 0.0)))

    def progress(self, i: int) -> float:
        return float(self.routes[i].project(self.agents.pose[i, :2][None])[0][0])

    def refresh_routes(self, idx, rng, force: bool = False) -> None:
        for i in idx:
            r = self.routes[i]
            if force or r is None or r.length - self.progress(i) < ROUTE_REFRESH:
                self.routes[i] = lane_route(self.lanes, self.successor, self.agents.pose[i], ROUTE_MIN_LENGTH, rng)

    def movable(self, i: int) -> bool:
        return self.agents.cls[i] != ObjectClass.STATIC


def idm_controls(traffic: Traffic, idx, candidates, params: IdmParams = IdmParams()):
    """(accel, steer, leader gap) for agents ``idx`` following their routes."""
    a = traffic.agents
    ego = a.ego
    accel = np.zeros(len(idx))
    steer = np.zeros(len(idx))
    gaps = np.full(len(idx), np.inf)
    for k, i in enumerate(idx):
        route = traffic.routes[i]
        s_i = traffic.progress(i)
        cand = [j for j in candidates if not (traffic.ignore_ego[i] and j == ego)]
        gap, v_lead = find_leader(a, i, route, s_i, cand)
        accel[k] = idm_accel(a.speed[i], gap, a.speed[i] - v_lead, params, v0=traffic.v0[i])
        steer[k] = pure_pursuit_steer(a.pose[i], route, s_i, a.speed[i], a.length[i])
        gaps[k] = gap
    return accel, steer, gaps


def idm_move(traffic: Traffic, idx, candidates, params: IdmParams = IdmParams()):
    """New (pose, speed) for agents ``idx``; static agents stay put."""
    idx = list(idx)
    a = traffic.agents
    accel, steer, _ = idm_controls(traffic, idx, candidates, params)
    pose, speed = bicycle_forward(a.pose[idx], a.speed[idx], a.length[idx], accel, steer)
    for k, i in enumerate(idx):
        if not traffic.movable(i):
            pose[k], speed[k] = a.pose[i], 0.0
    return pose, speed


# ---- features ---------------------------------------------------------------------------

LOOKAHEAD = (2.0, 5.0, 10.0, 20.0)
N_FEATURES = 5 + 2 * len(LOOKAHEAD) + 3 + 9 + 6 * NEIGHBOURS


def _local(pose, pts):
    c, s = np.cos(pose[2]), np.sin(pose[2])
    d = np.asarray(pts) - pose[:2]
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def agent_features(traffic: Traffic, idx, context) -> np.ndarray:
    """Fixed-size neighbourhood encoding in each agent's frame.

    ``context`` lists the agents visible to the policy (one subset); the ego
    is encoded separately from the other neighbours.
    """
    a = traffic.agents
    ego = a.ego
    out = np.zeros((len(idx), N_FEATURES))
    context = [j for j in context]
    for k, i in enumerate(idx):
        p = a.pose[i]
        route = traffic.routes[i]
        s_i = traffic.progress(i)
        f = [a.speed[i] / 10.0, float(a.cls[i] == ObjectClass.VEHICLE), float(a.cls[i] == ObjectClass.PEDESTRIAN),
             float(a.cls[i] == ObjectClass.CYCLIST), a.length[i] / 5.0]
        look = _local(p, route.point_at(s_i + np.array(LOOKAHEAD))) / 20.0
        f.extend(look.ravel())
        others = [j for j in context if j != i and j != ego]
        gap, v_lead = find_leader(a, i, route, s_i, others)
        f.extend([min(gap, 50.0) / 50.0, float(np.isfinite(gap)), (a.speed[i] - v_lead) / 10.0 if np.isfinite(gap) else 0.0])
        if ego >= 0 and ego != i and ego in context:
            eg, ev = find_leader(a, i, route, s_i, [ego])
            f.extend([min(eg, 50.0) / 50.0, float(np.isfinite(eg)), (a.speed[i] - ev) / 10.0 if np.isfinite(eg) else 0.0])
            rel = _local(p, a.pose[ego, :2])
            dth = wrap_angle(a.pose[ego, 2] - p[2])
            dist = np.hypot(*rel)
            f.extend([*(np.clip(rel / 30.0, -2, 2)), np.cos(dth), np.sin(dth), a.speed[ego] / 10.0, min(dist, 30.0) / 30.0])
        else:
            f.extend([1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
        near = []
        if others:
            o = np.asarray(others)
            d = np.hypot(*(a.pose[o, :2] - p[:2]).T)
            order = np.argsort(d, kind="stable")
            near = [int(o[m]) for m in order[:NEIGHBOURS] if d[m] <= NEIGHBOUR_RADIUS]
        for m in range(NEIGHBOURS):
            if m < len(near):
                j = near[m]
                rel = _local(p, a.pose[j, :2]) / 30.0
                dth = wrap_angle(a.pose[j, 2] - p[2])
                f.extend([*rel, np.cos(dth), np.sin(dth), a.speed[j] / 10.0, 1.0])
            else:
                f.extend([0.0] * 6)
        out[k] = f
    return out


# ---- rollouts -----------------------------------------------------------------------------

@dataclass
class RolloutConfig:
    steps: int = 80
    distracted_prob: float = 0.3
    ego_v0: float = EGO_V0


@dataclass
class Rollout:
    poses: np.ndarray  # (T+1, A, 3)
    speeds: np.ndarray  # (T+1, A)
    features: np.ndarray  # (T, A, F)
    rewards: np.ndarray  # (T, A)
    learnable: np.ndarray  # (A,) agents whose actions are training targets
    ego: int

    @property
    def deltas(self) -> np.ndarray:
        return relative_delta(self.poses[:-1], self.poses[1:])


def ego_collisions(agents: AgentStates) -> np.ndarray:
    """(A,) flags of boxes overlapping the ego box (the ego itself is False)."""
    ego = agents.ego
    flags = np.zeros(len(agents), dtype=bool)
    if ego < 0:
        return flags
    corners = object_corners(agents.to_objects())
    centers = agents.pose[:, :2]
    reach = 0.5 * np.hypot(agents.length, agents.width)
    for j in range(len(agents)):
        if j != ego and np.hypot(*(centers[j] - centers[ego])) <= reach[j] + reach[ego]:
            flags[j] = boxes_overlap(corners[ego], corners[j])
    return flags


def step_rewards(agents: AgentStates) -> np.ndarray:
    ego = agents.ego
    return reward(agents.pose[:, :2], agents.pose[ego, :2], ego_collisions(agents))


def idm_rollout(scene: Scene, rng: np.random.Generator, cfg: RolloutConfig = RolloutConfig()) -> Rollout:
    traffic = Traffic.from_scene(scene, rng, cfg.distracted_prob, cfg.ego_v0)
    a = traffic.agents
    n = len(a)
    everyone = list(range(n))
    learnable = np.array([i != a.ego and traffic.movable(i) for i in everyone])
    poses = [a.pose.copy()]
    speeds = [a.speed.copy()]
    feats, rewards = [], []
    for _ in range(cfg.steps):
        traffic.refresh_routes(everyone, rng)
        feats.append(agent_features(traffic, everyone, everyone))
        pose, speed = idm_move(traffic, everyone, everyone)
        a.pose, a.speed = pose, speed
        poses.append(pose.copy())
        speeds.append(speed.copy())
        rewards.append(step_rewards(a))
    return Rollout(np.array(poses), np.array(speeds), np.array(feats), np.array(rewards), learnable, a.ego)


def rollout_dataset(rollouts: list[Rollout], horizon: int = HORIZON_STEPS):
    """Stacked (features, deltas, returns) over learnable, non-truncated steps."""
    X, D, G = [], [], []
    for r in rollouts:
        g, trunc = discounted_return(r.rewards.T, horizon)  # (A, T)
        keep = (~trunc) & r.learnable[:, None]
        a_idx, t_idx = np.nonzero(keep)
        X.append(r.features[t_idx, a_idx])
        D.append(r.deltas[t_idx, a_idx])
        G.append(g[a_idx, t_idx])
    return np.concatenate(X), np.concatenate(D), np.concatenate(G)


# ---- learned policy ---------------------------------------------------------------------

@dataclass
class PolicyConfig:
    hidden: int = 128
    return_features: int = 8
    steps: int = 3000
    batch_size: int = 256
    lr: float = 2e-3
    warmup: int = 100
    weight_decay: float = 1e-4
    seed: int = 0


def _return_fourier(g: np.ndarray, n: int) -> np.ndarray:
    freqs = np.arange(1, n // 2 + 1)
    ang = np.pi * np.asarray(g)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class ReturnConditionedNet(Module):
    """Shared trunk with a return head and a return-conditioned action head."""

    def __init__(self, n_features: int, cfg: PolicyConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.trunk = MLP([n_features, cfg.hidden, cfg.hidden], rng)
        self.return_head = Linear(cfg.hidden, N_RETURN_BINS, rng)
        self.action_head = MLP([cfg.hidden + cfg.return_features, cfg.hidden, VOCAB_SIZE], rng)

    def __call__(self, x, g_norm):
        h = ag.gelu(self.trunk(ag.as_tensor(x)))
        ret = self.return_head(h)
        act = self.action_head(ag.concat([h, ag.as_tensor(_return_fourier(g_norm, self.cfg.return_features))], axis=-1))
        return ret, act


@dataclass
class ToyPolicy:
    net: ReturnConditionedNet
    vocab: KDiskVocab
    bins: ReturnBins
    history: deque = field(default_factory=lambda: deque(maxlen=CONTEXT_STEPS))

    def act(self, traffic: Traffic, idx, context, rng: np.random.Generator, kappa: float = 0.0):
        """Tokens and return bins for agents ``idx`` seeing ``context``."""
        x = agent_features(traffic, idx, context)
        with ag.no_grad():
            ret_logits, _ = self.net(x, np.zeros(len(idx)))
            bins = np.atleast_1d(tilted_return_sample(ret_logits.data, kappa, self.bins.centers, rng))
            _, act_logits = self.net(x, self.bins.normalized(bins))
        z = act_logits.data - act_logits.data.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(len(idx))
        tokens = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(1), VOCAB_SIZE - 1)
        self.history.append({"agents": list(idx), "tokens": tokens.tolist(), "bins": bins.tolist()})
        return tokens, bins

    def move(self, traffic: Traffic, idx, context, rng, kappa: float = 0.0):
        idx = list(idx)
        tokens, bins = self.act(traffic, idx, context, rng, kappa)
        a = traffic.agents
        pose, speed = delta_forward(a.pose[idx], self.vocab.detokenize(tokens), DT)
        for k, i in enumerate(idx):
            if not traffic.movable(i):
                pose[k], speed[k] = a.pose[i], 0.0
        return pose, speed, tokens, bins

    def save(self, path) -> None:
        state = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        state["vocab"] = self.vocab.templates
        state["vocab_weight"] = np.array([self.vocab.theta_weight])
        state["bins"] = np.array([self.bins.lo, self.bins.hi, self.bins.n], dtype=np.float64)
        c = self.net.cfg
        state["config"] = np.array([c.hidden, c.return_features, c.seed], dtype=np.float64)
        save_ckpt(path, state)

    @classmethod
    def load(cls, path) -> "ToyPolicy":
        state = load_ckpt(path)
        hidden, rf, seed = (int(v) for v in state["config"])
        net = ReturnConditionedNet(N_FEATURES, PolicyConfig(hidden=hidden, return_features=rf, seed=seed))
        net.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("net.")})
        lo, hi, n = state["bins"]
        return cls(net, KDiskVocab(state["vocab"], float(state["vocab_weight"][0])), ReturnBins(lo, hi, int(n)))


def train_toy_policy(rollouts: list[Rollout], cfg: PolicyConfig = PolicyConfig(),
                     vocab: KDiskVocab | None = None) -> tuple[ToyPolicy, list[dict]]:
    """Cross-entropy on return bins and on action tokens given the true return bin."""
    rng = np.random.default_rng(cfg.seed)
    X, D, G = rollout_dataset(rollouts)
    if len(X) == 0:
        raise ValueError("no training samples in the rollouts")
    vocab = vocab or build_kdisk_vocab(D, rng=np.random.default_rng(cfg.seed))
    bins = ReturnBins.fit(G)
    y_tok = vocab.tokenize(D)
    y_bin = bins.to_bin(G)
    g_norm = bins.normalized(y_bin)
    net = ReturnConditionedNet(X.shape[1], cfg)
    params = net.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    bs = min(cfg.batch_size, len(X))
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(X), bs, replace=False)
        ret, act = net(X[idx], g_norm[idx])
        ret_ce = ag.cross_entropy(ret, y_bin[idx])
        act_ce = ag.cross_entropy(act, y_tok[idx])
        loss = ret_ce + act_ce
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"policy loss became non-finite at step {step}")
        net.zero_grad()
        loss.backward()
        clip_grad_norm(params, 1.0)
        opt.step(warmup_linear_decay(step, cfg.steps, cfg.lr, cfg.warmup))
        history.append({"step": step, "total": float(loss.data), "return_ce": float(ret_ce.data),
                        "action_ce": float(act_ce.data)})
        if step % 500 == 0:
            log.info("policy step %d loss %.4f", step, float(loss.data))
    return ToyPolicy(net, vocab, bins), history


def action_accuracy(policy: ToyPolicy, rollouts: list[Rollout]) -> float:
    """Top-1 token accuracy given the true return bin."""
    X, D, G = rollout_dataset(rollouts)
    with ag.no_grad():
        _, act = policy.net(X, policy.bins.normalized(policy.bins.to_bin(G)))
    return float(np.mean(np.argmax(act.data, axis=1) == policy.vocab.tokenize(D)))
