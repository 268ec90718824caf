"""Centralized experience replay with hindsight goal relabeling.

The buffer stores whole transitions grouped by episode and samples
H-step windows that never cross an episode boundary, so every agent's
slice of a window comes from the same timesteps. Eviction removes the
oldest transitions first (the prefix of the oldest episode), which
keeps every surviving episode contiguous and every window valid.

Hindsight relabeling rewrites a sampled window as if the goal had been
the centroid the team actually reached at the end of the window. No
world poses are stored; the rewrite runs entirely on the stored
centroid-relative state vectors and the per-agent frame-change
transforms, propagating each agent's local view of the new goal
backward through time. Layout contracts this relies on:

  - observation vectors end with the two local goal coordinates;
  - state vectors are [x_c, y_c, cos, sin] per agent then goal - centroid;
  - transforms[i] maps agent i's frame at t+1 into its frame at t.
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .env import DoneReason
from .rigid_graph import FormationSpec

DEFAULT_CAPACITY = 1_000_000
RELABEL_PROBABILITY = 0.5

_TERMINAL = (DoneReason.COLLISION, DoneReason.SUCCESS)


class InsufficientData(RuntimeError):
    """The buffer holds no window of the requested length."""


@dataclass(frozen=True, eq=False)
class Transition:
    """One environment step as stored for replay.

    Arrays are per-agent where applicable: actions (n, 2), observations
    (n, obs_dim), transforms (n, 3, 3). state/next_state are the global
    state vectors of length 4n + 2.
    """

    episode_id: int
    step_index: int
    spec: FormationSpec
    state: np.ndarray
    next_state: np.ndarray
    reward: float
    done: bool
    done_reason: DoneReason
    actions: np.ndarray
    observations: np.ndarray
    next_observations: np.ndarray
    transforms: np.ndarray

    def __post_init__(self):
        for name in ("state", "next_state", "actions", "observations",
                     "next_observations", "transforms"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        n = self.spec.n_agents
        if self.state.shape != (4 * n + 2,) or self.next_state.shape != self.state.shape:
            raise ValueError(f"state vectors must have length {4 * n + 2}")
        if self.actions.shape != (n, 2):
            raise ValueError(f"actions must be (n, 2), got {self.actions.shape}")
        if (self.observations.ndim != 2 or self.observations.shape[0] != n
                or self.observations.shape != self.next_observations.shape):
            raise ValueError("observation arrays must be (n, obs_dim)")
        if self.transforms.shape != (n, 3, 3):
            raise ValueError(f"transforms must be (n, 3, 3), got {self.transforms.shape}")
        if self.done != (self.done_reason is not DoneReason.RUNNING):
            raise ValueError("done flag inconsistent with done_reason")

    @property
    def n_agents(self):
        return self.spec.n_agents


@dataclass(frozen=True, eq=False)
class SequenceSample:
    """Consecutive transitions from one episode, oldest first."""

    transitions: tuple

    def __post_init__(self):
        trs = tuple(self.transitions)
        object.__setattr__(self, "transitions", trs)
        if not trs:
            raise ValueError("empty sequence")
        eid = trs[0].episode_id
        for prev, cur in zip(trs, trs[1:]):
            if cur.episode_id != eid:
                raise ValueError("sequence spans multiple episodes")
            if cur.step_index != prev.step_index + 1:
                raise ValueError("sequence steps are not consecutive")
        # a physical episode ends at most once; a relabeled sequence may
        # move that single terminal earlier, but never duplicates it
        if sum(t.done for t in trs) > 1:
            raise ValueError("more than one terminal transition")

    def __len__(self):
        return len(self.transitions)

    @property
    def episode_id(self):
        return self.transitions[0].episode_id

    @property
    def spec(self):
        return self.transitions[0].spec

    @property
    def final(self):
        return self.transitions[-1]

    def states(self):
        return np.stack([t.state for t in self.transitions])

    def next_states(self):
        return np.stack([t.next_state for t in self.transitions])

    def actions(self):
        return np.stack([t.actions for t in self.transitions])

    def observations(self):
        return np.stack([t.observations for t in self.transitions])

    def next_observations(self):
        return np.stack([t.next_observations for t in self.transitions])


def _check_se2_batch(transforms):
    rot = transforms[:, :2, :2]
    ident = np.einsum("nij,nkj->nik", rot, rot)
    if not np.allclose(ident, np.eye(2), atol=1e-9):
        raise ValueError("transform rotation blocks are not orthonormal")
    det = rot[:, 0, 0] * rot[:, 1, 1] - rot[:, 0, 1] * rot[:, 1, 0]
    if not np.allclose(det, 1.0, atol=1e-9):
        raise ValueError("transform rotation blocks are not proper")
    if not (np.all(transforms[:, 2, :2] == 0.0) and np.all(transforms[:, 2, 2] == 1.0)):
        raise ValueError("transform bottom rows must be [0, 0, 1]")


class ReplayBuffer:
    """FIFO store of transitions with uniform window sampling."""

    def __init__(self, capacity=DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self._capacity = capacity
        self._episodes = OrderedDict()
        self._size = 0

    def __len__(self):
        return self._size

    @property
    def capacity(self):
        return self._capacity

    def push(self, transition):
        """Append a transition; evicts the oldest data once full.

        Transitions must arrive in order: within an episode step indices
        are consecutive, and a new episode may only start after the
        previous one stopped receiving data.
        """
        _check_se2_batch(transition.transforms)
        eid = transition.episode_id
        if self._episodes and eid != next(reversed(self._episodes)):
            if eid in self._episodes:
                raise ValueError(f"episode {eid} is no longer accepting data")
            if eid < next(reversed(self._episodes)):
                raise ValueError(f"episode ids must increase, got {eid}")
        bucket = self._episodes.get(eid)
        if bucket is None:
            self._episodes[eid] = [transition]
        else:
            last = bucket[-1]
            if last.done:
                raise ValueError(f"episode {eid} already ended")
            if transition.step_index != last.step_index + 1:
                raise ValueError(
                    f"step {transition.step_index} does not follow {last.step_index}"
                )
            bucket.append(transition)
        self._size += 1
        while self._size > self._capacity:
            oldest_id, oldest = next(iter(self._episodes.items()))
            oldest.pop(0)
            if not oldest:
                del self._episodes[oldest_id]
            self._size -= 1

    def window_count(self, h):
        """Number of distinct h-step windows currently stored."""
        if h < 1:
            raise ValueError("window length must be positive")
        return sum(max(0, len(b) - h + 1) for b in self._episodes.values())

    def sample_sequences(self, batch, h, rng):
        """Draw `batch` windows uniformly over all (episode, start) pairs."""
        if batch < 1:
            raise ValueError("batch must be positive")
        eligible = [b for b in self._episodes.values() if len(b) >= h]
        counts = np.array([len(b) - h + 1 for b in eligible], dtype=np.int64)
        total = int(counts.sum()) if len(counts) else 0
        if total == 0:
            raise InsufficientData(
                f"no stored episode holds a window of length {h}"
            )
        cum = np.cumsum(counts)
        picks = rng.integers(0, total, size=batch)
        samples = []
        for p in picks:
            e = int(np.searchsorted(cum, p, side="right"))
            start = int(p) - (int(cum[e - 1]) if e else 0)
            samples.append(SequenceSample(tuple(eligible[e][start:start + h])))
        return samples


def _local_goal_views(svec, n):
    """Each agent's body-frame view of the achieved centroid.

    The centroid sits at -x_i^c relative to agent i in world axes;
    rotating by the agent's inverse heading gives the local view.
    """
    out = np.empty((n, 2))
    for i in range(n):
        x, y, c, s = svec[4 * i:4 * i + 4]
        out[i, 0] = c * -x + s * -y
        out[i, 1] = s * x - c * y
    return out


def _goals_from_agent0(svecs, l0):
    """World-frame goal - centroid recovered through agent 0's pose.

    svecs is (T, 4n+2), l0 is agent 0's local goal per step (T, 2).
    """
    x0, y0 = svecs[:, 0], svecs[:, 1]
    c0, s0 = svecs[:, 2], svecs[:, 3]
    lx, ly = l0[:, 0], l0[:, 1]
    return np.stack([c0 * lx - s0 * ly + x0, s0 * lx + c0 * ly + y0], axis=1)


def relabel_window_batch(states, next_states, observations, next_observations,
                         transforms, spec, thresholds, reward_fn):
    """Hindsight-relabel K same-shape windows stacked on a leading axis.

    Array shapes: states (K, T, S), observations (K, T, n, d),
    transforms (K, T, n, 3, 3). Returns rewritten copies plus rewards
    (K, T) and reasons as one list of DoneReason per window.
    """
    k_n, t_len = states.shape[0], states.shape[1]
    n = transforms.shape[2]
    local = np.empty((t_len + 1, k_n, n, 2))
    body = next_states[:, -1, :4 * n].reshape(k_n, n, 4)
    x, y = body[..., 0], body[..., 1]
    c, s = body[..., 2], body[..., 3]
    local[t_len, ..., 0] = c * -x + s * -y
    local[t_len, ..., 1] = s * x - c * y
    rot = transforms[:, :, :, :2, :2]
    shift = transforms[:, :, :, :2, 2]
    for t in range(t_len - 1, -1, -1):
        local[t] = np.einsum("knij,knj->kni", rot[:, t], local[t + 1]) + shift[:, t]
    new_obs = observations.copy()
    new_obs[:, :, :, -2:] = local[:t_len].transpose(1, 0, 2, 3)
    new_nobs = next_observations.copy()
    new_nobs[:, :, :, -2:] = local[1:].transpose(1, 0, 2, 3)
    s_dim = states.shape[2]
    new_states = states.copy()
    flat = new_states.reshape(k_n * t_len, s_dim)
    flat[:, -2:] = _goals_from_agent0(
        flat, local[:t_len, :, 0].transpose(1, 0, 2).reshape(-1, 2))
    new_nstates = next_states.copy()
    nflat = new_nstates.reshape(k_n * t_len, s_dim)
    nflat[:, -2:] = _goals_from_agent0(
        nflat, local[1:, :, 0].transpose(1, 0, 2).reshape(-1, 2))
    rewards, reasons = reward_fn(nflat, spec, thresholds)
    rewards = np.asarray(rewards, float).reshape(k_n, t_len)
    reason_rows = [reasons[k * t_len:(k + 1) * t_len] for k in range(k_n)]
    return new_states, new_nstates, new_obs, new_nobs, rewards, reason_rows


def relabel_arrays(states, next_states, observations, next_observations,
                   transforms, spec, thresholds, reward_fn):
    """Array-level hindsight relabeling of one stored window.

    The achieved centroid of the final step becomes the goal: its local
    view per agent is read off the last next-state vector, then walked
    backward through the per-agent frame transforms. Inputs are the
    window's stacked arrays (leading axis = time); none are modified.
    reward_fn(next_state rows, spec, thresholds) must return per-row
    (rewards, reasons).

    Returns (states, next_states, observations, next_observations,
    rewards, reasons) with goal slots rewritten everywhere.
    """
    out = relabel_window_batch(
        states[None], next_states[None], observations[None],
        next_observations[None], transforms[None], spec, thresholds, reward_fn)
    new_states, new_nstates, new_obs, new_nobs, rewards, reasons = out
    return (new_states[0], new_nstates[0], new_obs[0], new_nobs[0],
            rewards[0], reasons[0])


def truncated_flags(reasons, original_final_reason):
    """Done flags after relabeling: first new terminal wins.

    Steps past the first recomputed collision or success are marked
    running; an original timeout on the final step survives only when
    no new terminal precedes it.
    """
    dones = []
    out_reasons = []
    terminal_seen = False
    last = len(reasons) - 1
    for k, reason in enumerate(reasons):
        if terminal_seen:
            dones.append(False)
            out_reasons.append(DoneReason.RUNNING)
        elif reason in _TERMINAL:
            dones.append(True)
            out_reasons.append(reason)
            terminal_seen = True
        elif k == last and original_final_reason is DoneReason.TIMEOUT:
            dones.append(True)
            out_reasons.append(DoneReason.TIMEOUT)
        else:
            dones.append(False)
            out_reasons.append(DoneReason.RUNNING)
    return dones, out_reasons


def her_relabel(sample, rewarder, thresholds):
    """Rewrite a window as if the goal were the centroid it reached.

    The final transition's achieved centroid becomes the goal: each
    agent's local goal view at the last step is computed directly from
    the stored state vector, then walked backward through the stored
    per-agent transforms. Goal slots in every observation and state
    vector are replaced and rewards recomputed with `rewarder(state
    vector, spec, thresholds)`. The first recomputed collision or
    success becomes the terminal step; anything after it is marked
    running. A timeout on the original final transition survives when
    no new terminal precedes it. The input sample is never modified.
    """
    trs = sample.transitions
    spec = trs[0].spec

    def reward_fn(rows, sp, th):
        pairs = [rewarder(row, sp, th) for row in rows]
        return np.array([p[0] for p in pairs]), [p[1] for p in pairs]

    states, nstates, obs, nobs, rewards, reasons = relabel_arrays(
        np.stack([t.state for t in trs]),
        np.stack([t.next_state for t in trs]),
        np.stack([t.observations for t in trs]),
        np.stack([t.next_observations for t in trs]),
        np.stack([t.transforms for t in trs]),
        spec, thresholds, reward_fn)
    dones, out_reasons = truncated_flags(reasons, trs[-1].done_reason
                                         if trs[-1].done else None)

    rebuilt = []
    for k, tr in enumerate(trs):
        rebuilt.append(Transition(
            episode_id=tr.episode_id,
            step_index=tr.step_index,
            spec=tr.spec,
            state=states[k],
            next_state=nstates[k],
            reward=float(rewards[k]),
            done=dones[k],
            done_reason=out_reasons[k],
            actions=tr.actions,
            observations=obs[k],
            next_observations=nobs[k],
            transforms=tr.transforms,
        ))
    return SequenceSample(tuple(rebuilt))
