"""Stochastic-game environment for formation control with unicycle agents.

Agents live in a square arena and are driven by linear and angular
velocity commands. The environment is deterministic given the joint
action: randomness enters only through `reset`, which draws the initial
formation pose and the goal. Each step every agent integrates the same
prior state simultaneously, a shared scalar reward is computed on the
resulting state, and per-agent local-frame observations are emitted.

Reward branches, in precedence order:

  1. any two agents closer than eps_coll        -> r_collision, episode ends
  2. formation held and centroid at the goal    -> r_goal, episode ends
  3. formation held                             -> r_edge
  4. otherwise                                  -> r_penalty

Episodes also end by timeout at max_steps; the timeout reward is
whatever branch 3/4 produced, unchanged.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .rigid_graph import (
    FormationSpec,
    Thresholds,
    centroid,
    collision_condition,
    formation_condition,
    formation_radius,
    place_formation,
)
from .se2 import Point2, Pose, to_local, wrap_angle

ARENA_SIDE = 10.0
MAX_STEPS = 120
DT = 0.1
V_MAX = 1.0
W_MAX = math.pi

_RESET_ATTEMPTS = 10_000


class ArenaTooSmall(ValueError):
    """The formation does not fit inside the arena."""


class EpisodeFinished(RuntimeError):
    """step() was called on a state whose episode already ended."""


class DoneReason(enum.Enum):
    RUNNING = "running"
    COLLISION = "collision"
    SUCCESS = "success"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class RewardSet:
    """Scalar reward constants shared by every agent."""

    r_edge: float = 0.1
    r_collision: float = -100.0
    r_goal: float = 50.0
    r_penalty: float = -0.5


DEFAULT_REWARDS = RewardSet()


@dataclass(frozen=True)
class AgentAction:
    """Velocity command; clamped to the actuator range on construction.

    v: linear velocity, m/s, in [0, V_MAX] (the unicycle does not reverse)
    w: angular velocity, rad/s, in [-W_MAX, W_MAX]
    """

    v: float
    w: float

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.w)):
            raise ValueError(f"non-finite action ({self.v}, {self.w})")
        object.__setattr__(self, "v", min(max(float(self.v), 0.0), V_MAX))
        object.__setattr__(self, "w", min(max(float(self.w), -W_MAX), W_MAX))

    def as_array(self):
        return np.array([self.v, self.w])


@dataclass(frozen=True)
class EnvState:
    """Complete environment state: every pose, the goal, and the clock."""

    poses: tuple
    goal: Point2
    spec: FormationSpec
    step_index: int
    arena_side: float = ARENA_SIDE

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) != self.spec.n_agents:
            raise ValueError(
                f"{len(self.poses)} poses for {self.spec.n_agents} agents"
            )
        if self.arena_side <= 0:
            raise ValueError("arena_side must be positive")
        pad = 1e-9
        for p in list(self.poses) + [Pose(self.goal.x, self.goal.y, 0.0)]:
            if not (-pad <= p.x <= self.arena_side + pad
                    and -pad <= p.y <= self.arena_side + pad):
                raise ValueError(f"position ({p.x}, {p.y}) outside arena")
        if self.step_index < 0:
            raise ValueError("negative step_index")

    @property
    def n_agents(self):
        return self.spec.n_agents

    @property
    def positions(self):
        return tuple(p.position for p in self.poses)


@dataclass(frozen=True)
class Observation:
    """One agent's local view: out-edge neighbors plus the goal.

    neighbor_rel holds (relative position, desired edge length) pairs in
    the observer's body frame, padded with ((0, 0), 0) so every agent in
    an n-agent team exposes exactly min(2, n - 1) entries.
    """

    neighbor_rel: tuple
    goal_rel: Point2

    def __post_init__(self):
        object.__setattr__(self, "neighbor_rel", tuple(self.neighbor_rel))
        if not 1 <= len(self.neighbor_rel) <= 2:
            raise ValueError("expected one or two neighbor entries")
        for _, d in self.neighbor_rel:
            if not (math.isfinite(d) and d >= 0):
                raise ValueError(f"bad desired length {d}")

    def vector(self):
        """Flatten to [n1x, n1y, d1, (n2x, n2y, d2,)? gx, gy]."""
        parts = []
        for point, d in self.neighbor_rel:
            parts.extend((point.x, point.y, d))
        parts.extend((self.goal_rel.x, self.goal_rel.y))
        return np.array(parts)


def observation_dim(n_agents):
    """Length of Observation.vector() for a team of the given size."""
    return 3 * min(2, n_agents - 1) + 2


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    done_reason: DoneReason
    observations: tuple

    def __post_init__(self):
        if self.done != (self.done_reason is not DoneReason.RUNNING):
            raise ValueError("done flag inconsistent with done_reason")


def reset(spec, thresholds, rng, *, arena_side=ARENA_SIDE, max_goal_distance=None):
    """Start an episode: place the formation and draw a goal.

    The formation centroid is uniform over the arena inset by the
    formation radius, so every agent starts inside the walls. The goal
    is drawn from the same inset, rejected until it lies farther than
    eps_goal from the centroid (and, if max_goal_distance is given, no
    farther than that).

    Returns (state, per-agent observations).
    """
    radius = formation_radius(spec)
    if radius > arena_side / 2:
        raise ArenaTooSmall(
            f"formation radius {radius:.3f} m exceeds half the arena side"
        )
    if max_goal_distance is not None and max_goal_distance <= thresholds.eps_goal:
        raise ValueError("max_goal_distance must exceed eps_goal")
    lo, hi = radius, arena_side - radius
    center = Point2(float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    goal = None
    for _ in range(_RESET_ATTEMPTS):
        cand = Point2(float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        dist = math.hypot(cand.x - center.x, cand.y - center.y)
        if dist <= thresholds.eps_goal:
            continue
        if max_goal_distance is not None and dist > max_goal_distance:
            continue
        goal = cand
        break
    if goal is None:
        raise ArenaTooSmall("could not draw a goal satisfying the constraints")
    orientation = float(rng.uniform(-math.pi, math.pi))
    poses = place_formation(center, spec, orientation, rng)
    state = EnvState(tuple(poses), goal, spec, 0, arena_side)
    return state, observe_all(state)


def integrate_unicycle(p, a, dt, *, arena_side=ARENA_SIDE):
    """One explicit-Euler step of the unicycle kinematics.

    Position advances along the heading held at the start of the step,
    then the heading turns. Positions are clamped to the arena walls.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = p.x + a.v * math.cos(p.theta) * dt
    y = p.y + a.v * math.sin(p.theta) * dt
    theta = wrap_angle(p.theta + a.w * dt)
    x = min(max(x, 0.0), arena_side)
    y = min(max(y, 0.0), arena_side)
    return Pose(x, y, theta)


def observe(state, agent):
    """Build one agent's observation in its own body frame.

    Out-edge neighbors appear in the formation graph's edge order with
    their desired lengths; agents with fewer than two out-edges pad with
    zeros so all observation vectors share one shape.
    """
    spec = state.spec
    pose = state.poses[agent]
    entries = []
    for i, j in spec.out_edges(agent):
        entries.append((to_local(pose, state.poses[j].position), spec.length(i, j)))
    want = min(2, spec.n_agents - 1)
    while len(entries) < want:
        entries.append((Point2(0.0, 0.0), 0.0))
    return Observation(tuple(entries), to_local(pose, state.goal))


def observe_all(state):
    return tuple(observe(state, i) for i in range(state.n_agents))


def compute_reward(state, thresholds, rewards=None, *, max_steps=MAX_STEPS):
    """Shared reward and episode status for a (next) state.

    Exactly one branch fires, in the precedence collision > success >
    formation > penalty. Timeout replaces a Running status once the
    step counter reaches max_steps; it never changes the reward.
    """
    rewards = rewards or DEFAULT_REWARDS
    positions = state.positions
    if collision_condition(positions, thresholds):
        return rewards.r_collision, DoneReason.COLLISION
    formed = formation_condition(positions, state.spec, thresholds)
    c = centroid(positions)
    at_goal = math.hypot(c.x - state.goal.x, c.y - state.goal.y) <= thresholds.eps_goal
    if formed and at_goal:
        return rewards.r_goal, DoneReason.SUCCESS
    reward = rewards.r_edge if formed else rewards.r_penalty
    reason = DoneReason.TIMEOUT if state.step_index >= max_steps else DoneReason.RUNNING
    return reward, reason


def step(state, joint_action, thresholds, dt=DT, *, rewards=None, max_steps=MAX_STEPS):
    """Advance the whole team one timestep.

    All agents integrate from the same prior state, so the update is
    order-independent. Raises EpisodeFinished when called on a state
    whose episode already ended (collision, success, or timeout).
    """
    if len(joint_action) != state.n_agents:
        raise ValueError(
            f"{len(joint_action)} actions for {state.n_agents} agents"
        )
    _, prior_reason = compute_reward(state, thresholds, rewards, max_steps=max_steps)
    if prior_reason is not DoneReason.RUNNING:
        raise EpisodeFinished(f"episode already ended: {prior_reason.value}")
    poses = tuple(
        integrate_unicycle(p, a, dt, arena_side=state.arena_side)
        for p, a in zip(state.poses, joint_action)
    )
    next_state = EnvState(poses, state.goal, state.spec, state.step_index + 1,
                          state.arena_side)
    reward, reason = compute_reward(next_state, thresholds, rewards,
                                    max_steps=max_steps)
    return StepResult(
        next_state=next_state,
        reward=reward,
        done=reason is not DoneReason.RUNNING,
        done_reason=reason,
        observations=observe_all(next_state),
    )


def true_state_vector(state):
    """Global state as the critic sees it, length 4n + 2.

    Per agent: centroid-relative position and heading as (cos, sin),
    then the goal relative to the centroid. Using the centroid as the
    origin makes the vector translation-invariant, which is what lets
    rewards be recomputed from stored vectors alone.
    """
    c = centroid(state.positions)
    parts = []
    for pose in state.poses:
        parts.extend((pose.x - c.x, pose.y - c.y,
                      math.cos(pose.theta), math.sin(pose.theta)))
    parts.extend((state.goal.x - c.x, state.goal.y - c.y))
    return np.array(parts)


def reward_from_state_vector(svec, spec, thresholds, rewards=None):
    """Reward branch evaluated directly on a stored state vector.

    Mirrors compute_reward for the position-dependent branches; there is
    no step counter in the vector, so Timeout never appears here. This
    is the rewarder handed to the hindsight relabeler.
    """
    rewards = rewards or DEFAULT_REWARDS
    n = spec.n_agents
    svec = np.asarray(svec, dtype=float)
    if svec.shape != (4 * n + 2,):
        raise ValueError(f"expected state vector of length {4 * n + 2}")
    positions = [Point2(float(svec[4 * i]), float(svec[4 * i + 1])) for i in range(n)]
    if collision_condition(positions, thresholds):
        return rewards.r_collision, DoneReason.COLLISION
    formed = formation_condition(positions, spec, thresholds)
    c = centroid(positions)
    goal = Point2(float(svec[-2]), float(svec[-1]))
    at_goal = math.hypot(c.x - goal.x, c.y - goal.y) <= thresholds.eps_goal
    if formed and at_goal:
        return rewards.r_goal, DoneReason.SUCCESS
    return (rewards.r_edge if formed else rewards.r_penalty), DoneReason.RUNNING


def reward_table(svecs, spec, thresholds, rewards=None):
    """reward_from_state_vector over many rows at once.

    Returns (rewards (M,), reasons list of DoneReason). Used on the hot
    relabeling path; agrees with the scalar version row for row.
    """
    rewards = rewards or DEFAULT_REWARDS
    n = spec.n_agents
    svecs = np.asarray(svecs, dtype=float)
    if svecs.ndim != 2 or svecs.shape[1] != 4 * n + 2:
        raise ValueError(f"expected (M, {4 * n + 2}) state vectors")
    rel = svecs[:, :4 * n].reshape(-1, n, 4)[:, :, :2]
    diff = rel[:, :, None, :] - rel[:, None, :, :]
    dists = np.sqrt((diff * diff).sum(-1))
    iu = np.triu_indices(n, 1)
    collided = (dists[:, iu[0], iu[1]] <= thresholds.eps_coll).any(axis=1)
    idx = np.array(spec.edges, dtype=np.intp)
    edge_err = np.abs(dists[:, idx[:, 0], idx[:, 1]] - spec.lengths_array())
    formed = (edge_err <= thresholds.eps_form).all(axis=1)
    c = rel.mean(axis=1)
    goal = svecs[:, 4 * n:4 * n + 2]
    at_goal = np.hypot(goal[:, 0] - c[:, 0], goal[:, 1] - c[:, 1]) <= thresholds.eps_goal
    succeeded = ~collided & formed & at_goal
    out = np.where(collided, rewards.r_collision,
                   np.where(succeeded, rewards.r_goal,
                            np.where(formed, rewards.r_edge, rewards.r_penalty)))
    reasons = [
        DoneReason.COLLISION if collided[k]
        else DoneReason.SUCCESS if succeeded[k]
        else DoneReason.RUNNING
        for k in range(len(svecs))
    ]
    return out, reasons
