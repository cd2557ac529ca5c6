"""Acquisition MDP: transitions, sparse terminal reward and episode records.

A *predictor* is any callable ``(study, state) -> label``; it wraps the frozen
classifier (see :class:`afa.classifier.MaskLabelCache` or
:func:`classifier_predictor`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Action, AcquisitionState, StudyRecord

Predictor = Callable[[StudyRecord, AcquisitionState], int]


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    lam: float = 0.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"cost coefficient must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class TransitionRecord:
    state: AcquisitionState
    action: Action
    reward: float
    next_state: AcquisitionState
    done: bool


@dataclass
class EpisodeRecord:
    study_id: str
    actions: list[Action]
    terminal_mask: list[bool]
    reward: float
    predicted: int
    true_label: int
    timeout: bool = False

    def to_json(self) -> dict:
        return {
            "study_id": self.study_id,
            "actions": [a.to_str() for a in self.actions],
            "terminal_mask": [bool(m) for m in self.terminal_mask],
            "reward": self.reward,
            "predicted": self.predicted,
            "true_label": self.true_label,
            "timeout": self.timeout,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeRecord":
        return cls(
            study_id=d["study_id"],
            actions=[Action.from_str(a) for a in d["actions"]],
            terminal_mask=[bool(m) for m in d["terminal_mask"]],
            reward=float(d["reward"]),
            predicted=d["predicted"],
            true_label=int(d["true_label"]),
            timeout=bool(d.get("timeout", False)),
        )


def write_episodes(episodes: Sequence[EpisodeRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in episodes:
            fh.write(json.dumps(e.to_json(), separators=(",", ":")) + "\n")


def read_episodes(path) -> list[EpisodeRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EpisodeRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def classifier_predictor(model) -> Predictor:
    from .classifier import predict_label

    return lambda study, state: predict_label(model, state)


def reset(study: StudyRecord) -> AcquisitionState:
    n, d = study.matrix.shape
    return AcquisitionState(np.zeros(n, dtype=bool), np.zeros((n, d), dtype=study.matrix.dtype), 0)


def action_mask(state: AcquisitionState, allow_reselect: bool = False) -> np.ndarray:
    """Length N+1 validity vector in action-index order (terminate first)."""
    valid = np.ones(state.n_slots + 1, dtype=bool)
    if not allow_reselect:
        valid[1:] = ~state.mask
    return valid


def is_terminal(state: AcquisitionState) -> bool:
    return state.terminated or state.steps_taken >= state.n_slots + 1


def terminal_reward(correct: bool, state: AcquisitionState, study: StudyRecord, spec: RewardSpec) -> float:
    # cost is summed over the *set* of acquired slots
    cost = float(np.sum(study.costs[state.mask]))
    return float(correct) - spec.lam * cost


def step(study: StudyRecord, state: AcquisitionState, action: Action, reward_spec: RewardSpec,
         predictor: Predictor, allow_reselect: bool = False):
    """Apply one action; returns ``(next_state, reward, done)``.

    Terminating yields the indicator of a correct prediction minus the
    lambda-weighted cost of the acquired slots. Reaching N+1 actions without a
    terminate ends the episode with reward exactly 0.
    """
    n = state.n_slots
    if is_terminal(state):
        raise EnvError("step called on a finished episode")
    if action.is_terminate:
        nxt = AcquisitionState(state.mask, state.features, state.steps_taken + 1, terminated=True)
        correct = predictor(study, state) == study.label
        return nxt, terminal_reward(correct, state, study, reward_spec), True
    i = action.slot
    if not 0 <= i < n:
        raise EnvError(f"acquire index {i} out of range for {n} slots")
    if state.mask[i] and not allow_reselect:
        raise EnvError(f"slot {i} already acquired")
    mask = state.mask.copy()
    mask[i] = True
    feats = state.features.copy()
    feats[i] = study.matrix[i]
    nxt = AcquisitionState(mask, feats, state.steps_taken + 1)
    if nxt.steps_taken >= n + 1:
        return nxt, 0.0, True
    return nxt, 0.0, False


def run_episode(study: StudyRecord, policy: Callable[[AcquisitionState, np.ndarray], Action],
                reward_spec: RewardSpec, predictor: Predictor, allow_reselect: bool = False,
                transitions: list | None = None) -> EpisodeRecord:
    """Roll out ``policy(state, valid_mask) -> Action`` from the start state."""
    state = reset(study)
    actions, reward, done = [], 0.0, False
    while not done:
        valid = action_mask(state, allow_reselect)
        action = policy(state, valid)
        nxt, reward, done = step(study, state, action, reward_spec, predictor, allow_reselect)
        if transitions is not None:
            transitions.append(TransitionRecord(state, action, reward, nxt, done))
        actions.append(action)
        state = nxt
    # a timed-out episode still gets a prediction for evaluation; its reward stays 0
    timeout = not actions[-1].is_terminate
    predicted = int(predictor(study, state))
    return EpisodeRecord(
        study_id=study.study_id,
        actions=actions,
        terminal_mask=[bool(m) for m in state.mask],
        reward=float(reward),
        predicted=predicted,
        true_label=study.label,
        timeout=timeout,
    )
