"""Double-DQN acquisition policy.

Q-networks read the flattened N x D acquisition state (unacquired rows are
zero) and emit N+1 action values, terminate first. Training runs one
epsilon-greedy episode per training study per epoch, pushes every transition
into a uniform replay buffer and takes one gradient step per environment
step once the buffer holds a full batch.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .core import Action, AcquisitionState, StudyRecord
from .env import EpisodeRecord, RewardSpec, action_mask, reset, run_episode, step
from .metrics import evaluate_episodes
from .neural import (
    Adam,
    CheckpointError,
    Dense,
    Module,
    load_checkpoint,
    mse_loss,
    relu_backward,
    relu_forward,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class AgentTrainingError(RuntimeError):
    pass


@dataclass
class AgentConfig:
    gamma: float = 1.0
    epochs: int = 50
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.6
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_sync: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.0
    hidden: tuple[int, ...] = (256, 256)
    allow_reselect: bool = False
    append_mask: bool = False
    select_by: str = "val_reward"
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("eps_start", "eps_end", "eps_decay_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.select_by not in ("val_bacc", "val_reward"):
            raise ValueError(f"select_by must be 'val_bacc' or 'val_reward', got {self.select_by!r}")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must be >= batch_size")

    def replace(self, **kw) -> "AgentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown agent keys: {sorted(unknown)}")
        return cls(**d)

    def epsilon(self, episode: int, total_episodes: int) -> float:
        """Linear decay over the first ``eps_decay_frac`` of all training episodes."""
        horizon = self.eps_decay_frac * total_episodes
        if horizon <= 0 or episode >= horizon:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * episode / horizon


class QNetwork(Module):
    """Three dense layers with ReLU: state vector -> N+1 action values."""

    def __init__(self, n_in: int, n_actions: int, hidden=(256, 256),
                 rng: np.random.Generator | None = None, dtype=np.float32, name: str = "q"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_actions, self.hidden = n_in, n_actions, tuple(hidden)
        widths = [n_in, *hidden, n_actions]
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            scale = 0.01 if last else np.sqrt(2.0 / a)
            self.layers.append(self._child(Dense(f"{name}.fc{i}", a, b, rng, dtype, scale=scale)))

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Q-network expects {self.n_in} inputs, got {x.shape[-1]}")
        caches = []
        for i, layer in enumerate(self.layers):
            x, c = layer.forward(x)
            ca = None
            if i < len(self.layers) - 1:
                x, ca = relu_forward(x)
            caches.append((c, ca))
        return x, caches

    def backward(self, dq, caches):
        d = dq
        for layer, (c, ca) in zip(reversed(self.layers), reversed(caches)):
            if ca is not None:
                d = relu_backward(d, ca)
            d = layer.backward(d, c)
        return d

    def loss(self, batch, lead: int = 0):
        states, actions, targets = batch
        if lead:
            states = np.broadcast_to(states, (lead,) + states.shape)
        q, _ = self.forward(states)
        picked = q[..., np.arange(actions.shape[0]), actions]
        return mse_loss(picked, targets)[0]

    def loss_and_backward(self, batch) -> float:
        states, actions, targets = batch
        q, caches = self.forward(states)
        rows = np.arange(actions.shape[0])
        loss, dpicked = mse_loss(q[rows, actions], targets)
        dq = np.zeros_like(q)
        dq[rows, actions] = dpicked
        self.backward(dq, caches)
        return float(loss)

    def __call__(self, x) -> np.ndarray:
        return self.forward(np.asarray(x, dtype=self.dtype))[0]


@dataclass
class QNetworkPair:
    online: QNetwork
    target: QNetwork
    n_slots: int
    dim: int
    append_mask: bool = False

    @classmethod
    def create(cls, n_slots: int, dim: int, config: AgentConfig, rng) -> "QNetworkPair":
        n_in = n_slots * dim + (n_slots if config.append_mask else 0)
        online = QNetwork(n_in, n_slots + 1, config.hidden, rng, name="online")
        target = QNetwork(n_in, n_slots + 1, config.hidden, rng, name="target")
        target.copy_from(online)
        return cls(online, target, n_slots, dim, config.append_mask)

    def sync(self):
        self.target.copy_from(self.online)

    def save(self, path, meta: dict | None = None):
        tensors = {**self.online.state_dict(), **self.target.state_dict()}
        info = {"kind": "agent", "n_slots": self.n_slots, "dim": self.dim,
                "append_mask": self.append_mask, "hidden": list(self.online.hidden)}
        info.update(meta or {})
        save_checkpoint(path, tensors, info)

    @classmethod
    def load(cls, path):
        """Returns ``(pair, meta)``."""
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "agent":
            raise CheckpointError(f"{path}: not an agent checkpoint (kind={meta.get('kind')!r})")
        cfg = AgentConfig(hidden=tuple(meta["hidden"]), append_mask=meta["append_mask"])
        pair = cls.create(meta["n_slots"], meta["dim"], cfg, np.random.default_rng(0))
        pair.online.load_state_dict({k: v for k, v in tensors.items() if k.startswith("online.")})
        pair.target.load_state_dict({k: v for k, v in tensors.items() if k.startswith("target.")})
        return pair, meta


def featurize(state: AcquisitionState, append_mask: bool = False) -> np.ndarray:
    flat = state.features.reshape(-1).astype(np.float32)
    if append_mask:
        flat = np.concatenate([flat, state.mask.astype(np.float32)])
    return flat


def q_values(net: QNetwork, state: AcquisitionState, append_mask: bool = False) -> np.ndarray:
    return net(featurize(state, append_mask)[None])[0]


def select_action(qvals, valid_mask, epsilon: float, rng: np.random.Generator | None) -> Action:
    """Epsilon-greedy over valid actions; greedy ties go to the lowest index."""
    valid_mask = np.asarray(valid_mask, dtype=bool)
    valid = np.flatnonzero(valid_mask)
    if valid.size == 0:
        raise ValueError("no valid action")
    if epsilon > 0 and rng.random() < epsilon:
        return Action.from_index(int(valid[rng.integers(valid.size)]))
    masked = np.where(valid_mask, np.asarray(qvals, dtype=float), -np.inf)
    return Action.from_index(int(np.argmax(masked)))


def ddqn_target(rewards, next_states, next_valid, dones, online: QNetwork, target: QNetwork,
                gamma: float) -> np.ndarray:
    """``r`` for terminal transitions, else ``r + gamma * Q_target(s')[argmax_valid Q_online(s')]``."""
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    next_valid = np.asarray(next_valid, dtype=bool)
    if rewards.size == 0:
        raise ValueError("empty batch")
    q_on = online(next_states)
    q_tg = target(next_states)
    # terminal rows may have no valid actions; their bootstrap term is discarded
    safe_valid = next_valid | dones[:, None]
    best = np.argmax(np.where(safe_valid, q_on, -np.inf), axis=1)
    boot = q_tg[np.arange(rewards.size), best].astype(float)
    return np.where(dones, rewards, rewards + gamma * boot)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, n_actions: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.next_valid = np.zeros((capacity, n_actions), dtype=bool)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, state, action: int, reward: float, next_state, next_valid, done: bool):
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.next_valid[i] = next_valid
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, self.size, size=batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.next_valid[idx], self.dones[idx])


def _build_predictor(classifier, studies):
    from .classifier import ClassifierModel, MaskLabelCache

    if isinstance(classifier, ClassifierModel):
        return MaskLabelCache.build(classifier, studies)
    return classifier


def greedy_policy(net: QNetwork, append_mask: bool = False):
    return lambda state, valid: select_action(q_values(net, state, append_mask), valid, 0.0, None)


def rollout_greedy(net: QNetwork, predictor, study: StudyRecord, reward_spec: RewardSpec,
                   allow_reselect: bool = False, append_mask: bool = False) -> EpisodeRecord:
    return run_episode(study, greedy_policy(net, append_mask), reward_spec, predictor, allow_reselect)


def rollout_all(net: QNetwork, predictor, studies: Sequence[StudyRecord], reward_spec: RewardSpec,
                config: AgentConfig) -> list[EpisodeRecord]:
    return [rollout_greedy(net, predictor, s, reward_spec, config.allow_reselect, config.append_mask)
            for s in studies]


LOG_FIELDS = ["epoch", "mean_reward", "val_bacc", "mean_acquired_count", "val_reward", "mean_loss", "epsilon"]


def train_agent(train: Sequence[StudyRecord], val: Sequence[StudyRecord], classifier,
                reward_spec: RewardSpec, config: AgentConfig | None = None):
    """Train a Double-DQN acquisition agent against a frozen classifier.

    ``classifier`` is a ``ClassifierModel`` or any predictor with a cached
    label per (study, mask). Returns ``(pair, log_rows)``; the pair holds the
    epoch with the best greedy validation score, mean reward by default or bACC
    with ``select_by="val_bacc"`` (earliest on ties). bACC ignores cost, so at
    large lambda it favours early epochs that still acquire everything.
    """
    config = config or AgentConfig()
    if not train or not val:
        raise ValueError("train and val splits must be non-empty")
    predictor = _build_predictor(classifier, list(train) + list(val))
    rng = np.random.default_rng(config.seed)
    n_slots, dim = train[0].n_slots, train[0].dim
    pair = QNetworkPair.create(n_slots, dim, config, rng)
    online, target = pair.online, pair.target
    opt = Adam(online.params(), lr=config.lr, weight_decay=config.weight_decay)
    buf = ReplayBuffer(config.replay_capacity, online.n_in, n_slots + 1)
    total_episodes = config.epochs * len(train)

    episode, grad_steps = 0, 0
    best_score, best_state, rows = -np.inf, None, []
    for epoch in range(config.epochs):
        ep_rewards, losses = [], []
        eps = config.epsilon(episode, total_episodes)
        for idx in rng.permutation(len(train)):
            study = train[idx]
            eps = config.epsilon(episode, total_episodes)
            state = reset(study)
            s_vec = featurize(state, config.append_mask)
            done, reward = False, 0.0
            while not done:
                valid = action_mask(state, config.allow_reselect)
                action = select_action(online(s_vec[None])[0], valid, eps, rng)
                nxt, reward, done = step(study, state, action, reward_spec, predictor, config.allow_reselect)
                n_vec = featurize(nxt, config.append_mask)
                buf.add(s_vec, action.index, reward, n_vec, action_mask(nxt, config.allow_reselect), done)
                if len(buf) >= config.batch_size:
                    s, a, r, s2, v2, d = buf.sample(rng, config.batch_size)
                    y = ddqn_target(r, s2, v2, d, online, target, config.gamma)
                    online.zero_grad()
                    loss = online.loss_and_backward((s, a, y.astype(np.float32)))
                    if not np.isfinite(loss):
                        raise AgentTrainingError(
                            f"non-finite TD loss at epoch {epoch}, gradient step {grad_steps}"
                        )
                    opt.step()
                    losses.append(loss)
                    grad_steps += 1
                    if grad_steps % config.target_sync == 0:
                        pair.sync()
                state, s_vec = nxt, n_vec
            ep_rewards.append(reward)
            episode += 1

        val_eps = rollout_all(online, predictor, val, reward_spec, config)
        rep = evaluate_episodes(val_eps, n_slots)
        row = {
            "epoch": epoch,
            "mean_reward": float(np.mean(ep_rewards)),
            "val_bacc": rep.bacc,
            "mean_acquired_count": rep.acquired_count_mean,
            "val_reward": float(np.mean([e.reward for e in val_eps])),
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "epsilon": float(eps),
        }
        rows.append(row)
        log.info("agent epoch %d reward %.4f val bACC %.4f count %.2f", epoch,
                 row["mean_reward"], rep.bacc, rep.acquired_count_mean)
        score = row[config.select_by]
        if score > best_score:
            best_score, best_state = score, online.state_dict()

    online.load_state_dict(best_state)
    return pair, rows
