"""Training harness: episode runner, training loop, evaluation, baseline.

Everything here is deterministic given (config, seed): one Generator is
threaded through reset draws, exploration noise, replay sampling, and
relabel coin flips, and metrics are written with repr-formatted floats
so reruns produce byte-identical files.

Run directory layout produced by train():
  config.json                  exact configuration used
  metrics.csv                  one row per episode
  traces.csv                   one row per environment step
  checkpoint_ep<N>.json        periodic learner snapshots
  checkpoint_final.json        learner at the end of training
"""

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .env import (
    ARENA_SIDE,
    DT,
    MAX_STEPS,
    V_MAX,
    AgentAction,
    DoneReason,
    RewardSet,
    observation_dim,
    reset,
    reward_table,
    step,
    true_state_vector,
)
from .learner import (
    LearnerState,
    act_team,
    load_checkpoint,
    pad_history,
    prepare_batch,
    save_checkpoint,
    soft_update_targets,
    update_actors,
    update_critic,
)
from .replay import (
    ReplayBuffer,
    Transition,
    relabel_window_batch,
    truncated_flags,
)
from .rigid_graph import (
    Thresholds,
    UnrealizableShape,
    build_rigid_graph,
    canonical_positions,
    centroid,
    edge_errors,
)
from .se2 import relative_transform, wrap_angle

WARMUP_BATCHES = 5
_SHAPE_ATTEMPTS = 1000


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run, with the standard defaults."""

    n_agents: int = 3
    formation_lengths: object = 1.0
    arena_side: float = ARENA_SIDE
    max_steps: int = MAX_STEPS
    episodes: int = 20000
    h: int = 15
    dt: float = DT
    eps_form: float = 0.10
    eps_goal: float = 0.15
    eps_coll: float = 0.20
    r_edge: float = 0.1
    r_collision: float = -100.0
    r_goal: float = 50.0
    r_penalty: float = -0.5
    tau: float = 5e-3
    gamma: float = 0.99
    seed: int = 0
    lr_actor: float = 2e-5
    lr_critic: float = 1e-3
    noise_start: float = 0.3
    noise_end: float = 0.05
    relabel_ratio: float = 0.5
    buffer_capacity: int = 1_000_000
    batch_size: int = 64
    max_goal_distance: float = None
    random_shapes: bool = True
    shape_side_min: float = 0.8
    shape_side_max: float = 1.5
    share_parameters: bool = True
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("need at least 2 agents")
        for name in ("episodes", "max_steps", "h", "batch_size",
                     "buffer_capacity", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if isinstance(self.formation_lengths, list):
            object.__setattr__(self, "formation_lengths",
                               tuple(self.formation_lengths))
        if not 0.0 <= self.relabel_ratio <= 1.0:
            raise ValueError("relabel_ratio must lie in [0, 1]")
        if self.noise_start < 0 or self.noise_end < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.random_shapes and self.n_agents != 3:
            raise ValueError("random shapes are only drawn for 3-agent teams")
        if self.random_shapes and not (self.eps_coll < self.shape_side_min
                                       <= self.shape_side_max):
            raise ValueError("bad random-shape side range")
        if self.max_goal_distance is not None and self.max_goal_distance <= self.eps_goal:
            raise ValueError("max_goal_distance must exceed eps_goal")

    @classmethod
    def smoke(cls, **overrides):
        """Small fixed-shape curriculum used by the trend check."""
        base = dict(
            n_agents=3,
            formation_lengths=1.0,
            random_shapes=False,
            max_goal_distance=3.0,
            max_steps=60,
            episodes=2000,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**dict(mapping))

    def thresholds(self):
        return Thresholds(eps_form=self.eps_form, eps_coll=self.eps_coll,
                          eps_goal=self.eps_goal)

    def reward_set(self):
        return RewardSet(r_edge=self.r_edge, r_collision=self.r_collision,
                         r_goal=self.r_goal, r_penalty=self.r_penalty)

    def to_dict(self):
        d = asdict(self)
        if isinstance(d["formation_lengths"], tuple):
            d["formation_lengths"] = list(d["formation_lengths"])
        return d


def load_config(path):
    """Read a TrainConfig from a JSON or TOML file (by extension)."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a single table/object")
    return TrainConfig.from_mapping(data)


@dataclass(frozen=True)
class StepTrace:
    """One environment step as it lands in the trace file."""

    step: int
    poses: tuple
    actions: np.ndarray
    reward: float
    edge_errors: np.ndarray
    goal_distance: float
    done_reason: DoneReason


@dataclass(frozen=True)
class EpisodeRecord:
    steps: tuple
    outcome: DoneReason
    total_reward: float
    critic_loss: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("empty episode")

    @property
    def length(self):
        return len(self.steps)

    @property
    def final(self):
        return self.steps[-1]


def make_formation(config, rng):
    """Formation for the next episode: fixed lengths or a random triangle."""
    if not config.random_shapes:
        return build_rigid_graph(config.n_agents, config.formation_lengths,
                                 config.eps_coll)
    for _ in range(_SHAPE_ATTEMPTS):
        sides = rng.uniform(config.shape_side_min, config.shape_side_max, 3)
        try:
            return build_rigid_graph(3, sides, config.eps_coll)
        except UnrealizableShape:
            continue
    raise RuntimeError("could not draw a realizable triangle")


def _header_spec(config):
    """A representative spec for trace headers (edge names only)."""
    lengths = 1.0 if config.random_shapes else config.formation_lengths
    return build_rigid_graph(config.n_agents, lengths, config.eps_coll)


def noise_scale_for(config, episode):
    """Exploration scale for an episode: geometric anneal start -> end."""
    if config.noise_start == 0.0 or config.episodes <= 1:
        return config.noise_start
    frac = episode / (config.episodes - 1)
    return config.noise_start * (config.noise_end / config.noise_start) ** frac


def _relabel_in_place(batch, samples, rng, ratio, thresholds, rewards):
    """Hindsight-relabel a random share of a prepared batch.

    Each selected window's goal slots are rewritten toward its achieved
    centroid directly in the stacked arrays. The window's outcome (its
    final reward and bootstrap mask) comes from the first recomputed
    terminal step when one exists: the relabeled episode ends there, so
    the window must train as a terminal one rather than bootstrap a
    success payout onto its own future value.
    """
    if ratio <= 0.0:
        return
    picks = np.flatnonzero(rng.random(len(batch)) < ratio)
    if picks.size == 0:
        return

    def reward_fn(rows, sp, th):
        return reward_table(rows, sp, th, rewards)

    groups = {}
    for b in picks:
        spec = samples[b].spec
        key = (spec.n_agents, spec.edges, spec.lengths_array().tobytes())
        groups.setdefault(key, (spec, []))[1].append(int(b))

    for spec, rows in groups.values():
        idx = np.array(rows)
        states, nstates, obs, nobs, step_rewards, reasons = (
            relabel_window_batch(
                batch.states[idx], batch.next_states[idx],
                batch.observations[idx], batch.next_observations[idx],
                batch.transforms[idx], spec, thresholds, reward_fn))
        batch.states[idx] = states
        batch.next_states[idx] = nstates
        batch.observations[idx] = obs
        batch.next_observations[idx] = nobs
        for k, b in enumerate(rows):
            final = samples[b].final
            dones, out_reasons = truncated_flags(
                reasons[k], final.done_reason if final.done else None)
            end = dones.index(True) if True in dones else len(dones) - 1
            batch.final_rewards[b] = step_rewards[k, end]
            batch.bootstrap[b] = 0.0 if out_reasons[end] in (
                DoneReason.COLLISION, DoneReason.SUCCESS) else 1.0


def run_episode(config, spec, rng, *, learner=None, policy=None,
                noise_scale=0.0, buffer=None, train=False, episode_id=0):
    """Play one episode and return its full trace.

    Exactly one of `learner` (decentralized actors on observation
    histories) or `policy` (a callable (state, agent) -> AgentAction
    with full state access) drives the team. With a buffer attached
    every step is stored; with train=True one critic step, one actor
    step, and one soft target update run per environment step once the
    buffer holds WARMUP_BATCHES * batch_size windows.
    """
    if (learner is None) == (policy is None):
        raise ValueError("provide exactly one of learner or policy")
    if train and (learner is None or buffer is None):
        raise ValueError("training needs a learner and a buffer")
    th = config.thresholds()
    rewards = config.reward_set()
    state, observations = reset(spec, th, rng, arena_side=config.arena_side,
                                max_goal_distance=config.max_goal_distance)
    n = spec.n_agents
    histories = [deque(maxlen=config.h) for _ in range(n)]
    vecs = [o.vector() for o in observations]
    traces = []
    total = 0.0
    losses = []
    while True:
        for i in range(n):
            histories[i].append(vecs[i])
        if learner is not None:
            padded = [pad_history(histories[i], config.h) for i in range(n)]
            actions = tuple(act_team(learner, padded, noise_scale, rng))
        else:
            actions = tuple(policy(state, i) for i in range(n))
        result = step(state, actions, th, dt=config.dt, rewards=rewards,
                      max_steps=config.max_steps)
        next_vecs = [o.vector() for o in result.observations]
        action_array = np.stack([a.as_array() for a in actions])
        if buffer is not None:
            transforms = np.stack([
                relative_transform(result.next_state.poses[i], state.poses[i]).matrix
                for i in range(n)])
            buffer.push(Transition(
                episode_id=episode_id,
                step_index=state.step_index,
                spec=spec,
                state=true_state_vector(state),
                next_state=true_state_vector(result.next_state),
                reward=result.reward,
                done=result.done,
                done_reason=result.done_reason,
                actions=action_array,
                observations=np.stack(vecs),
                next_observations=np.stack(next_vecs),
                transforms=transforms,
            ))
        if train and buffer.window_count(config.h) >= WARMUP_BATCHES * config.batch_size:
            samples = buffer.sample_sequences(config.batch_size, config.h, rng)
            batch = prepare_batch(samples)
            _relabel_in_place(batch, samples, rng, config.relabel_ratio,
                              th, rewards)
            losses.append(update_critic(learner, batch))
            update_actors(learner, batch)
            soft_update_targets(learner)
        positions = result.next_state.positions
        c = centroid(positions)
        goal = result.next_state.goal
        traces.append(StepTrace(
            step=state.step_index,
            poses=result.next_state.poses,
            actions=action_array,
            reward=result.reward,
            edge_errors=edge_errors(positions, spec),
            goal_distance=math.hypot(c.x - goal.x, c.y - goal.y),
            done_reason=result.done_reason,
        ))
        total += result.reward
        state = result.next_state
        vecs = next_vecs
        if result.done:
            break
    loss = float(np.mean(losses)) if losses else float("nan")
    return EpisodeRecord(steps=tuple(traces), outcome=traces[-1].done_reason,
                         total_reward=total, critic_loss=loss)


def _fmt(x):
    return repr(float(x))


METRICS_HEADER = ["episode", "total_reward", "length", "outcome",
                  "critic_loss", "mean_reward_100"]


def trace_header(spec):
    cols = ["episode", "step"]
    for i in range(spec.n_agents):
        cols += [f"x{i}", f"y{i}", f"theta{i}", f"v{i}", f"w{i}"]
    cols += [f"edge_err_{i}_{j}" for i, j in spec.edges]
    cols += ["goal_dist", "reward", "done_reason"]
    return cols


def trace_rows(episode, record):
    for tr in record.steps:
        row = [str(episode), str(tr.step)]
        for pose, action in zip(tr.poses, tr.actions):
            row += [_fmt(pose.x), _fmt(pose.y), _fmt(pose.theta),
                    _fmt(action[0]), _fmt(action[1])]
        row += [_fmt(e) for e in tr.edge_errors]
        row += [_fmt(tr.goal_distance), _fmt(tr.reward), tr.done_reason.value]
        yield row


@dataclass(frozen=True)
class TrainResult:
    rewards: np.ndarray
    critic_losses: np.ndarray
    out_dir: Path
    checkpoints: tuple = ()


def train(config, out_dir, *, seed=None):
    """Full training run; writes metrics, traces, and checkpoints.

    Returns a TrainResult with the per-episode reward and critic-loss
    curves. `seed` overrides config.seed when given.
    """
    if seed is not None:
        config = replace(config, seed=int(seed))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    rng = np.random.default_rng(config.seed)
    learner = LearnerState.create(
        config.n_agents, observation_dim(config.n_agents), config.h, rng,
        gamma=config.gamma, tau=config.tau, lr_actor=config.lr_actor,
        lr_critic=config.lr_critic, share_parameters=config.share_parameters)
    buffer = ReplayBuffer(config.buffer_capacity)
    header_spec = _header_spec(config)
    rewards = []
    losses = []
    checkpoints = []
    recent = deque(maxlen=100)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as mfh, \
            open(out / "traces.csv", "w", newline="", encoding="utf-8") as tfh:
        metrics = csv.writer(mfh)
        metrics.writerow(METRICS_HEADER)
        traces = csv.writer(tfh)
        traces.writerow(trace_header(header_spec))
        for episode in range(config.episodes):
            spec = make_formation(config, rng)
            record = run_episode(
                config, spec, rng, learner=learner,
                noise_scale=noise_scale_for(config, episode),
                buffer=buffer, train=True, episode_id=episode)
            rewards.append(record.total_reward)
            losses.append(record.critic_loss)
            recent.append(record.total_reward)
            metrics.writerow([
                str(episode), _fmt(record.total_reward), str(record.length),
                record.outcome.value, _fmt(record.critic_loss),
                _fmt(np.mean(recent)),
            ])
            for row in trace_rows(episode, record):
                traces.writerow(row)
            if (episode + 1) % config.checkpoint_every == 0:
                path = out / f"checkpoint_ep{episode + 1:06d}.json"
                save_checkpoint(learner, path, config=config.to_dict())
                checkpoints.append(path)
    final = out / "checkpoint_final.json"
    save_checkpoint(learner, final, config=config.to_dict())
    checkpoints.append(final)
    return TrainResult(rewards=np.array(rewards), critic_losses=np.array(losses),
                       out_dir=out, checkpoints=tuple(checkpoints))


def _summarize(records):
    """Aggregate episode outcomes the way the evaluation report does.

    "Edge error" is the worst constrained edge on the final step of each
    episode; "goal distance" is the centroid-goal distance there too.
    """
    outcomes = [r.outcome for r in records]
    n = len(records)
    return {
        "episodes": n,
        "success_rate": sum(o is DoneReason.SUCCESS for o in outcomes) / n,
        "collision_rate": sum(o is DoneReason.COLLISION for o in outcomes) / n,
        "timeout_rate": sum(o is DoneReason.TIMEOUT for o in outcomes) / n,
        "mean_reward": float(np.mean([r.total_reward for r in records])),
        "mean_length": float(np.mean([r.length for r in records])),
        "mean_final_edge_error": float(np.mean(
            [r.final.edge_errors.max() for r in records])),
        "mean_final_goal_distance": float(np.mean(
            [r.final.goal_distance for r in records])),
    }


def _write_episode_files(out, config, spec, records):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "total_reward", "length", "outcome"])
        for k, r in enumerate(records):
            writer.writerow([str(k), _fmt(r.total_reward), str(r.length),
                             r.outcome.value])
    with open(out / "traces.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(trace_header(spec))
        for k, r in enumerate(records):
            for row in trace_rows(k, r):
                writer.writerow(row)
    summary = _summarize(records)
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def evaluate(checkpoint_path, episodes, out_dir, *, config=None):
    """Noise-free rollouts of a checkpointed policy; returns the summary.

    The config embedded in the checkpoint is used unless one is passed
    explicitly. Raises ChecksumMismatch on corrupt checkpoints and
    ValueError when the checkpoint architecture does not match the
    config.
    """
    if episodes < 1:
        raise ValueError("episodes must be positive")
    learner, embedded = load_checkpoint(checkpoint_path)
    if config is None:
        config = (TrainConfig.from_mapping(embedded) if embedded
                  else TrainConfig())
    expected = (config.n_agents, observation_dim(config.n_agents), config.h)
    got = (learner.n_agents, learner.obs_dim, learner.h)
    if expected != got:
        raise ValueError(
            f"checkpoint architecture {got} does not match config {expected}")
    steps_before = learner.train_steps
    rng = np.random.default_rng(config.seed)
    records = []
    for k in range(episodes):
        ep_spec = make_formation(config, rng)
        records.append(run_episode(config, ep_spec, rng, learner=learner,
                                   noise_scale=0.0, episode_id=k))
    assert learner.train_steps == steps_before, "evaluation must not train"
    summary = _write_episode_files(out_dir, config, _header_spec(config), records)
    return summary, records


def baseline_controller(state, agent, *, k_v=2.5, k_w=4.0):
    """Centralized proportional controller toward a formation slot.

    The slots are the desired formation centered on the goal, rotated to
    best fit the team's current spread (least-squares orientation), so
    agents travel nearly parallel paths. Speed is proportional to slot
    distance, gated by heading alignment so an agent turns in place
    rather than driving away from its slot; turn rate is proportional
    to heading error. Clamping happens in AgentAction.
    """
    spec = state.spec
    slots = canonical_positions(spec)
    slots = slots - slots.mean(axis=0)
    positions = np.array([[p.x, p.y] for p in state.poses])
    rel = positions - positions.mean(axis=0)
    sin_sum = float(np.sum(slots[:, 0] * rel[:, 1] - slots[:, 1] * rel[:, 0]))
    cos_sum = float(np.sum(slots[:, 0] * rel[:, 0] + slots[:, 1] * rel[:, 1]))
    phi = math.atan2(sin_sum, cos_sum)
    c, s = math.cos(phi), math.sin(phi)
    target = np.array([
        state.goal.x + c * slots[agent, 0] - s * slots[agent, 1],
        state.goal.y + s * slots[agent, 0] + c * slots[agent, 1],
    ])
    pose = state.poses[agent]
    dx = target[0] - pose.x
    dy = target[1] - pose.y
    dist = math.hypot(dx, dy)
    heading_err = wrap_angle(math.atan2(dy, dx) - pose.theta) if dist > 1e-12 else 0.0
    v = k_v * dist * max(0.0, math.cos(heading_err))
    return AgentAction(min(v, V_MAX), k_w * heading_err)


def run_baseline(episodes, out_dir, *, seed=0, config=None):
    """Scripted-controller episodes over random full-arena goals."""
    if episodes < 1:
        raise ValueError("episodes must be positive")
    if config is None:
        config = TrainConfig(random_shapes=False, formation_lengths=1.0,
                             seed=seed, episodes=episodes)
    rng = np.random.default_rng(config.seed)
    records = []
    for k in range(episodes):
        spec = make_formation(config, rng)
        records.append(run_episode(config, spec, rng,
                                   policy=baseline_controller, episode_id=k))
    summary = _write_episode_files(out_dir, config, _header_spec(config), records)
    return summary, records


def export_traces(run_dir, episode):
    """Extract one episode from a run's traces.csv into its own file."""
    run = Path(run_dir)
    source = run / "traces.csv"
    if not source.exists():
        raise FileNotFoundError(f"no traces.csv under {run}")
    out_path = run / f"trace_episode_{episode}.csv"
    found = False
    with open(source, newline="", encoding="utf-8") as src, \
            open(out_path, "w", newline="", encoding="utf-8") as dst:
        reader = csv.reader(src)
        writer = csv.writer(dst)
        header = next(reader)
        if not header or header[0] != "episode":
            raise ValueError("traces.csv has an unexpected header")
        writer.writerow(header[1:])
        key = str(episode)
        for row in reader:
            if row and row[0] == key:
                writer.writerow(row[1:])
                found = True
    if not found:
        out_path.unlink()
        raise ValueError(f"episode {episode} not present in {source}")
    return out_path
