"""Centralized-critic, decentralized-actor learner.

One critic scores H-step windows of (global state, joint action); each
agent's actor maps its own H-step observation history to a velocity
command. Training follows the usual deterministic-gradient recipe:

  - critic regression toward y = r + gamma * Qbar(next window) with the
    final action slot filled in by the target actors;
  - actor ascent along the critic's gradient with respect to the
    agent's own final action slice;
  - polyak soft updates of both target networks.

Bootstrapping is dropped when a window ends in a collision or success
(those are states the task actually terminates in) but kept on timeout,
which is a property of the clock rather than the state.

Critic input layout, per window timestep, concatenated over time:
[state vector, agent 0 action, agent 1 action, ...]. Actor input is the
agent's observation vectors concatenated over time.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .env import V_MAX, W_MAX, AgentAction, DoneReason
from .nets import (
    AdamState,
    GradientBundle,
    adam_step,
    backward,
    forward,
    init_mlp,
    input_gradient,
    params_from_doc,
    params_to_doc,
    polyak_update,
)

CHECKPOINT_FORMAT = "checkpoint-v1"

ACTOR_HIDDEN = (128, 128)
CRITIC_HIDDEN = (256, 256)


class ChecksumMismatch(RuntimeError):
    """A checkpoint file failed its integrity check."""


@dataclass
class LearnerState:
    """All mutable training state: networks, optimizers, hyperparameters."""

    n_agents: int
    obs_dim: int
    h: int
    actors: list
    target_actors: list
    critic: object
    target_critic: object
    actor_opts: list
    critic_opt: AdamState
    gamma: float
    tau: float
    lr_actor: float
    lr_critic: float
    share_parameters: bool
    train_steps: int = 0

    @classmethod
    def create(cls, n_agents, obs_dim, h, rng, *, gamma=0.99, tau=5e-3,
               lr_actor=2e-5, lr_critic=1e-3, share_parameters=True,
               actor_hidden=ACTOR_HIDDEN, critic_hidden=CRITIC_HIDDEN):
        # The actor must trail the critic by a wide margin: with one
        # update per environment step, a faster actor exploits critic
        # extrapolation errors and locks its tanh outputs at the
        # actuator limits before the critic can correct itself.
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        state_dim = 4 * n_agents + 2
        actor_sizes = [obs_dim * h, *actor_hidden, 2]
        critic_sizes = [(state_dim + 2 * n_agents) * h, *critic_hidden, 1]
        actor_acts = ["tanh"] * (len(actor_sizes) - 1)
        critic_acts = ["relu"] * (len(critic_sizes) - 2) + ["linear"]
        if share_parameters:
            shared = init_mlp(actor_sizes, actor_acts, rng)
            actors = [shared] * n_agents
            target_actors = [shared.copy()] * n_agents
        else:
            actors = [init_mlp(actor_sizes, actor_acts, rng)
                      for _ in range(n_agents)]
            target_actors = [a.copy() for a in actors]
        critic = init_mlp(critic_sizes, critic_acts, rng)
        return cls(
            n_agents=n_agents,
            obs_dim=obs_dim,
            h=h,
            actors=actors,
            target_actors=target_actors,
            critic=critic,
            target_critic=critic.copy(),
            actor_opts=[AdamState.zeros(actors[0])] if share_parameters
            else [AdamState.zeros(a) for a in actors],
            critic_opt=AdamState.zeros(critic),
            gamma=gamma,
            tau=tau,
            lr_actor=lr_actor,
            lr_critic=lr_critic,
            share_parameters=share_parameters,
        )

    @property
    def state_dim(self):
        return 4 * self.n_agents + 2


def scale_actor_output(y):
    """Map tanh outputs in (-1, 1)^2 onto the actuator ranges."""
    y = np.asarray(y, float)
    v = V_MAX * (y[..., 0] + 1.0) / 2.0
    w = W_MAX * y[..., 1]
    return np.stack([v, w], axis=-1)


_SCALE_JACOBIAN = np.array([V_MAX / 2.0, W_MAX])


def pad_history(history, h):
    """Left-pad a short history by repeating its first entry."""
    items = list(history)
    if not items:
        raise ValueError("empty observation history")
    if len(items) < h:
        items = [items[0]] * (h - len(items)) + items
    return items[-h:]


def actor_input(obs_history):
    """Flatten H observations (objects or vectors), oldest first."""
    rows = [o.vector() if hasattr(o, "vector") else np.asarray(o, float)
            for o in obs_history]
    return np.concatenate(rows)


def act(actor_params, obs_history, noise_scale, rng):
    """Deterministic policy plus annealed Gaussian exploration noise.

    The noise standard deviation per dimension is noise_scale times the
    full actuator range; the AgentAction constructor clamps the result.
    """
    y, _ = forward(actor_params, actor_input(obs_history))
    action = scale_actor_output(y)
    if noise_scale > 0.0:
        noise = rng.normal(0.0, 1.0, size=2)
        action = action + noise * noise_scale * np.array([V_MAX, 2.0 * W_MAX])
    return AgentAction(float(action[0]), float(action[1]))


def act_team(learner, obs_histories, noise_scale, rng):
    """One action per agent; a single forward pass when actors are shared.

    Draws the same noise stream as calling act() agent by agent, so the
    two paths produce identical actions for identical rng states.
    """
    n = learner.n_agents
    if len(obs_histories) != n:
        raise ValueError(f"expected {n} histories, got {len(obs_histories)}")
    if not learner.share_parameters:
        return [act(learner.actors[i], obs_histories[i], noise_scale, rng)
                for i in range(n)]
    x = np.stack([actor_input(h) for h in obs_histories])
    y, _ = forward(learner.actors[0], x)
    action = scale_actor_output(y)
    if noise_scale > 0.0:
        noise = rng.normal(0.0, 1.0, size=(n, 2))
        action = action + noise * noise_scale * np.array([V_MAX, 2.0 * W_MAX])
    return [AgentAction(float(row[0]), float(row[1])) for row in action]


def _critic_rows(states, actions):
    """(B, H, S) states + (B, H, n, 2) actions -> (B, H*(S+2n)) rows."""
    b, h, n, _ = actions.shape
    flat = actions.reshape(b, h, 2 * n)
    return np.concatenate([states, flat], axis=2).reshape(b, -1)


def _final_action_slice(learner, agent):
    """Column range of one agent's final-timestep action in a critic row."""
    block = learner.state_dim + 2 * learner.n_agents
    start = (learner.h - 1) * block + learner.state_dim + 2 * agent
    return start, start + 2


@dataclass(frozen=True, eq=False)
class BatchArrays:
    """A batch of windows stacked once, shared by every update function.

    Mutating the arrays (the relabeling path does) is allowed; the
    object just keeps the pieces together.
    """

    states: np.ndarray             # (B, H, state_dim)
    actions: np.ndarray            # (B, H, n, 2)
    next_states: np.ndarray        # (B, H, state_dim)
    observations: np.ndarray       # (B, H, n, obs_dim)
    next_observations: np.ndarray  # (B, H, n, obs_dim)
    transforms: np.ndarray         # (B, H, n, 3, 3)
    final_rewards: np.ndarray      # (B,)
    bootstrap: np.ndarray          # (B,) 1.0 keep, 0.0 drop

    def __len__(self):
        return len(self.states)


def prepare_batch(samples):
    """Stack equal-length SequenceSamples into one BatchArrays.

    A window's training outcome (reward and bootstrap mask) comes from
    its first terminal transition when one exists, else from its final
    transition. Fresh windows can only be terminal on the last step, so
    for them the two readings agree; hindsight-relabeled windows may
    reach their substituted goal mid-window, and the episode they
    describe ends right there - bootstrapping past it would stack the
    success payout on top of its own future value.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty batch")
    h = len(samples[0])
    if any(len(s) != h for s in samples):
        raise ValueError("windows in a batch must share one length")
    trs = [t for s in samples for t in s.transitions]
    b = len(samples)

    def stacked(name):
        arr = np.stack([getattr(t, name) for t in trs])
        return arr.reshape(b, h, *arr.shape[1:])

    ends = [next((t for t in s.transitions if t.done), s.final)
            for s in samples]
    return BatchArrays(
        states=stacked("state"),
        actions=stacked("actions"),
        next_states=stacked("next_state"),
        observations=stacked("observations"),
        next_observations=stacked("next_observations"),
        transforms=stacked("transforms"),
        final_rewards=np.array([t.reward for t in ends]),
        bootstrap=np.array([
            0.0 if t.done_reason in (DoneReason.COLLISION, DoneReason.SUCCESS)
            else 1.0
            for t in ends]),
    )


def _as_batch(batch):
    return batch if isinstance(batch, BatchArrays) else prepare_batch(batch)


def critic_targets(learner, batch):
    """Regression targets for a batch of windows, one scalar each.

    The next window shares all but the final action with the stored
    data; that last slot is what the target actors would do on the
    next-observation histories. Bootstrapping is masked out where the
    window ends in a collision or success. `batch` is a list of
    SequenceSamples or a BatchArrays.
    """
    batch = _as_batch(batch)
    b, h, n, d = batch.next_observations.shape
    next_actions = np.empty_like(batch.actions)
    next_actions[:, :h - 1] = batch.actions[:, 1:]
    next_actions[:, h - 1] = _policy_actions(
        learner.target_actors, batch.next_observations,
        learner.share_parameters)
    qbar, _ = forward(learner.target_critic,
                      _critic_rows(batch.next_states, next_actions))
    return batch.final_rewards + learner.gamma * qbar[:, 0] * batch.bootstrap


def _policy_actions(actors, obs, shared):
    """Scaled actor outputs per agent from stacked histories (B,H,n,d)."""
    b, h, n, d = obs.shape
    if shared:
        hist = obs.transpose(2, 0, 1, 3).reshape(n * b, h * d)
        y, _ = forward(actors[0], hist)
        return scale_actor_output(y).reshape(n, b, 2).transpose(1, 0, 2)
    out = np.empty((b, n, 2))
    for i in range(n):
        y, _ = forward(actors[i], obs[:, :, i, :].reshape(b, h * d))
        out[:, i] = scale_actor_output(y)
    return out


def critic_target(sample, learner):
    """Single-window convenience wrapper around critic_targets."""
    return float(critic_targets(learner, [sample])[0])


def critic_loss_gradient(learner, batch):
    """Mean-squared-error loss and its gradient in the online critic."""
    batch = _as_batch(batch)
    rows = _critic_rows(batch.states, batch.actions)
    targets = critic_targets(learner, batch)
    q, cache = forward(learner.critic, rows)
    err = q[:, 0] - targets
    loss = float(np.mean(err * err))
    upstream = (2.0 * err / len(batch))[:, None]
    bundle = backward(learner.critic, cache, upstream)
    return loss, bundle


def update_critic(learner, batch):
    """One Adam step on the critic regression; returns the pre-step loss."""
    loss, bundle = critic_loss_gradient(learner, _as_batch(batch))
    learner.critic, learner.critic_opt = adam_step(
        learner.critic, bundle, learner.critic_opt, learner.lr_critic)
    return loss


def actor_objective_gradient(learner, batch, agent):
    """Mean critic value when `agent` acts with its online actor, and the
    gradient of that objective in the actor's parameters.

    The critic sees the stored window except for the agent's own final
    action slice, which is produced by the actor from the stored
    observation history; the chain runs critic input gradient ->
    actuator scaling -> actor backward.
    """
    batch = _as_batch(batch)
    b = len(batch)
    hist = batch.observations[:, :, agent, :].reshape(b, -1)
    y, actor_cache = forward(learner.actors[agent], hist)
    rows = _critic_rows(batch.states, batch.actions)
    lo, hi = _final_action_slice(learner, agent)
    rows[:, lo:hi] = scale_actor_output(y)
    q, critic_cache = forward(learner.critic, rows)
    objective = float(np.mean(q))
    upstream = np.full((b, 1), 1.0 / b)
    dq_input = input_gradient(learner.critic, critic_cache, upstream)
    dy = dq_input[:, lo:hi] * _SCALE_JACOBIAN
    bundle = backward(learner.actors[agent], actor_cache, dy)
    return objective, bundle


def _negated(bundle):
    return GradientBundle(
        tuple(-g for g in bundle.weight_grads),
        tuple(-g for g in bundle.bias_grads),
        -bundle.input_grad,
    )


def _summed(a, b):
    return GradientBundle(
        tuple(x + y for x, y in zip(a.weight_grads, b.weight_grads)),
        tuple(x + y for x, y in zip(a.bias_grads, b.bias_grads)),
        a.input_grad + b.input_grad,
    )


def update_actors(learner, batch):
    """Ascend every actor along the critic; returns the mean objective.

    With parameter sharing the agents' rows are stacked into a single
    forward/backward pass whose parameter gradient is exactly the sum
    of the per-agent contributions, and one Adam step keeps the actors
    bit-identical; otherwise each agent owns its step.
    """
    batch = _as_batch(batch)
    b = len(batch)
    n = learner.n_agents
    if learner.share_parameters:
        hist = batch.observations.transpose(2, 0, 1, 3).reshape(n * b, -1)
        y, actor_cache = forward(learner.actors[0], hist)
        rows = np.tile(_critic_rows(batch.states, batch.actions), (n, 1))
        for i in range(n):
            lo, hi = _final_action_slice(learner, i)
            rows[i * b:(i + 1) * b, lo:hi] = scale_actor_output(y[i * b:(i + 1) * b])
        q, critic_cache = forward(learner.critic, rows)
        objective = float(np.mean(q))
        dq_input = input_gradient(learner.critic, critic_cache,
                                  np.full((n * b, 1), 1.0 / b))
        dy = np.empty((n * b, 2))
        for i in range(n):
            lo, hi = _final_action_slice(learner, i)
            dy[i * b:(i + 1) * b] = dq_input[i * b:(i + 1) * b, lo:hi]
        bundle = backward(learner.actors[0], actor_cache, dy * _SCALE_JACOBIAN)
        new_params, learner.actor_opts[0] = adam_step(
            learner.actors[0], _negated(bundle), learner.actor_opts[0],
            learner.lr_actor)
        learner.actors = [new_params] * n
    else:
        objectives = []
        for i in range(n):
            objective, bundle = actor_objective_gradient(learner, batch, i)
            objectives.append(objective)
            learner.actors[i], learner.actor_opts[i] = adam_step(
                learner.actors[i], _negated(bundle), learner.actor_opts[i],
                learner.lr_actor)
        objective = float(np.mean(objectives))
    learner.train_steps += 1
    return objective


def soft_update_targets(learner):
    """Polyak-average every target network toward its online twin."""
    learner.target_critic = polyak_update(
        learner.target_critic, learner.critic, learner.tau)
    if learner.share_parameters:
        shared = polyak_update(
            learner.target_actors[0], learner.actors[0], learner.tau)
        learner.target_actors = [shared] * learner.n_agents
    else:
        learner.target_actors = [
            polyak_update(t, a, learner.tau)
            for t, a in zip(learner.target_actors, learner.actors)
        ]


def _checkpoint_checksum(doc):
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def checkpoint_doc(learner, config=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "learner": {
            "n_agents": learner.n_agents,
            "obs_dim": learner.obs_dim,
            "h": learner.h,
            "gamma": learner.gamma,
            "tau": learner.tau,
            "lr_actor": learner.lr_actor,
            "lr_critic": learner.lr_critic,
            "share_parameters": learner.share_parameters,
            "train_steps": learner.train_steps,
        },
        "config": config,
        "actors": [params_to_doc(a) for a in learner.actors],
        "target_actors": [params_to_doc(a) for a in learner.target_actors],
        "critic": params_to_doc(learner.critic),
        "target_critic": params_to_doc(learner.target_critic),
    }
    doc["checksum"] = _checkpoint_checksum(
        {k: v for k, v in doc.items() if k != "checksum"})
    return doc


def save_checkpoint(learner, path, config=None):
    """Write the learner to a JSON checkpoint with an integrity hash.

    Optimizer moments are not saved: checkpoints exist for evaluation
    and inspection, not for resuming an interrupted optimizer.
    """
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_doc(learner, config), fh)


def load_checkpoint(path):
    """Read a checkpoint; returns (learner, embedded config).

    Raises ChecksumMismatch when the file content does not hash to its
    recorded checksum, and ValueError on structural problems.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    recorded = doc.get("checksum")
    actual = _checkpoint_checksum(
        {k: v for k, v in doc.items() if k != "checksum"})
    if recorded != actual:
        raise ChecksumMismatch(
            f"checkpoint checksum {recorded} does not match content {actual}")
    meta = doc["learner"]
    actors = [params_from_doc(d) for d in doc["actors"]]
    target_actors = [params_from_doc(d) for d in doc["target_actors"]]
    if meta["share_parameters"]:
        actors = [actors[0]] * meta["n_agents"]
        target_actors = [target_actors[0]] * meta["n_agents"]
    critic = params_from_doc(doc["critic"])
    learner = LearnerState(
        n_agents=meta["n_agents"],
        obs_dim=meta["obs_dim"],
        h=meta["h"],
        actors=actors,
        target_actors=target_actors,
        critic=critic,
        target_critic=params_from_doc(doc["target_critic"]),
        actor_opts=[AdamState.zeros(actors[0])] if meta["share_parameters"]
        else [AdamState.zeros(a) for a in actors],
        critic_opt=AdamState.zeros(critic),
        gamma=meta["gamma"],
        tau=meta["tau"],
        lr_actor=meta["lr_actor"],
        lr_critic=meta["lr_critic"],
        share_parameters=meta["share_parameters"],
        train_steps=meta["train_steps"],
    )
    return learner, doc.get("config")
