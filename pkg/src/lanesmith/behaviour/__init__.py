"""Agent behaviour: action tokens, returns, forward models and policies."""
from .dynamics import (
    AgentStates,
    IdmParams,
    Route,
    bicycle_forward,
    delta_forward,
    find_leader,
    idm_accel,
    lane_route,
    match_lane,
    relative_delta,
    se2_compose,
)
from .policy import (
    PolicyConfig,
    Rollout,
    RolloutConfig,
    ToyPolicy,
    Traffic,
    action_accuracy,
    agent_features,
    idm_move,
    idm_rollout,
    rollout_dataset,
    train_toy_policy,
)
from .tokens import (
    KDiskVocab,
    ReturnBins,
    build_kdisk_vocab,
    discounted_return,
    reward,
    tilted_return_sample,
)

__all__ = [
    "AgentStates",
    "IdmParams",
    "KDiskVocab",
    "PolicyConfig",
    "ReturnBins",
    "Rollout",
    "RolloutConfig",
    "Route",
    "ToyPolicy",
    "Traffic",
    "action_accuracy",
    "agent_features",
    "bicycle_forward",
    "build_kdisk_vocab",
    "delta_forward",
    "discounted_return",
    "find_leader",
    "idm_accel",
    "idm_move",
    "idm_rollout",
    "lane_route",
    "match_lane",
    "relative_delta",
    "reward",
    "rollout_dataset",
    "se2_compose",
    "tilted_return_sample",
    "train_toy_policy",
]
