"""Decentralized multi-agent RL for rigid formation control.

Teams of unicycle robots learn, from local observation histories only,
to hold a prescribed rigid formation while driving its centroid to a
goal. Training is centralized (one critic over the true state and joint
action); execution is decentralized (per-agent actor networks).
"""

from .env import (
    AgentAction,
    DoneReason,
    EnvState,
    Observation,
    RewardSet,
    compute_reward,
    observation_dim,
    reset,
    reward_from_state_vector,
    step,
    true_state_vector,
)
from .harness import (
    TrainConfig,
    TrainResult,
    baseline_controller,
    evaluate,
    export_traces,
    load_config,
    run_baseline,
    run_episode,
    train,
)
from .learner import (
    LearnerState,
    act,
    act_team,
    load_checkpoint,
    save_checkpoint,
)
from .replay import ReplayBuffer, SequenceSample, Transition, her_relabel
from .rigid_graph import FormationSpec, Thresholds, build_rigid_graph
from .se2 import Point2, Pose

__all__ = [
    "AgentAction",
    "DoneReason",
    "EnvState",
    "FormationSpec",
    "LearnerState",
    "Observation",
    "Point2",
    "Pose",
    "ReplayBuffer",
    "RewardSet",
    "SequenceSample",
    "Thresholds",
    "TrainConfig",
    "TrainResult",
    "Transition",
    "act",
    "act_team",
    "baseline_controller",
    "build_rigid_graph",
    "compute_reward",
    "evaluate",
    "export_traces",
    "her_relabel",
    "load_checkpoint",
    "load_config",
    "observation_dim",
    "reset",
    "reward_from_state_vector",
    "run_baseline",
    "run_episode",
    "save_checkpoint",
    "step",
    "train",
    "true_state_vector",
]
