"""Online belief-tracking controller, policy threshold tables and trace files."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import frg
from .core import (
    DiscretePomdp,
    ValidationFailure,
    ZeroLikelihood,
    belief_update,
    marginal_performance,
    predict,
    validate_model,
)
from .solver import AlphaVectorPolicy, policy_action

log = logging.getLogger(__name__)

STEP_SECONDS = 10


class Terminated(RuntimeError):
    """The controller already observed the terminal state."""


class UnstructuredModel(ValueError):
    """Beliefs of this model do not collapse onto two-state sub-simplices."""


@dataclass(frozen=True, eq=False)
class TraceRecord:
    step: int
    observation: int | None
    action: int | None
    beta: float
    belief: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, TraceRecord)
            and (self.step, self.observation, self.action, self.beta)
            == (other.step, other.observation, other.action, other.beta)
            and np.array_equal(self.belief, other.belief)
        )


@dataclass(eq=False)
class ControllerState:
    model: DiscretePomdp
    policy: AlphaVectorPolicy
    belief: np.ndarray
    last_action: int | None
    step: int = 0
    trace: list[TraceRecord] = field(default_factory=list)
    terminated: bool = False

    @property
    def beta(self) -> float:
        return marginal_performance(self.belief)


def _obs_index(model: DiscretePomdp, observation) -> int:
    if isinstance(observation, (int, np.integer)):
        o = int(observation)
        if not 0 <= o < model.n_observations:
            raise ValueError(f"observation index {o} out of range")
        return o
    try:
        return model.observations.index(str(observation))
    except ValueError:
        raise ValueError(f"unknown observation {observation!r}") from None


def controller_init(model: DiscretePomdp, policy: AlphaVectorPolicy) -> ControllerState:
    problems = validate_model(model)
    if model.terminal is not None and model.initial_belief[model.terminal] >= 1.0:
        problems.append("initial belief is a point mass on the terminal state")
    if policy.vectors.shape[1] != model.n_states:
        problems.append("policy vectors do not match the model's state count")
    if problems:
        raise ValidationFailure(problems)
    b = model.initial_belief.copy()
    a = policy_action(policy, b)
    state = ControllerState(model=model, policy=policy, belief=b, last_action=a)
    state.trace.append(TraceRecord(0, None, a, marginal_performance(b), b.copy()))
    return state


def controller_step(state: ControllerState, observation) -> tuple[int | None, float]:
    """Fold in one observation, pick the next action and log the step.

    Returns ``(action, beta)``; the action is ``None`` once the terminal
    state is observed.
    """
    if state.terminated:
        raise Terminated("controller already reached the terminal state")
    model = state.model
    o = _obs_index(model, observation)
    try:
        b = belief_update(model, state.belief, state.last_action, o)
    except ZeroLikelihood as exc:
        log.warning("%s; keeping the prediction step only", exc)
        b = predict(model, state.belief, state.last_action)
        b = b / b.sum()
    state.step += 1
    state.belief = b
    if model.terminal is not None and o == model.terminal:
        state.terminated = True
        a = None
    else:
        a = policy_action(state.policy, b)
    state.last_action = a
    beta = marginal_performance(b)
    state.trace.append(TraceRecord(state.step, o, a, beta, b.copy()))
    return a, beta


def replay(model: DiscretePomdp, actions, observations) -> np.ndarray:
    """Offline Bayes filter over a recorded history, from the initial belief."""
    b = model.initial_belief.copy()
    for a, o in zip(actions, observations):
        b = belief_update(model, b, a, o)
    return b


# ---------------------------------------------------------------- threshold form

@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    action: int


@dataclass
class ThresholdTable:
    """Per visible configuration, beta intervals [lo, hi) with the chosen action; the last one is closed."""

    configs: tuple[str, ...]
    intervals: dict[str, list[Interval]]
    action_labels: tuple[str, ...]

    def action_at(self, config: str, beta: float) -> int:
        ivs = self.intervals[config]
        for iv in ivs[:-1]:
            if beta < iv.hi:
                return iv.action
        return ivs[-1].action

    def boundaries(self, config: str) -> list[float]:
        return [iv.hi for iv in self.intervals[config][:-1]]

    def format(self) -> str:
        lines = []
        for c in self.configs:
            parts = [
                f"[{iv.lo:.4f}, {iv.hi:.4f}{']' if k == len(self.intervals[c]) - 1 else ')'} -> {self.action_labels[iv.action]}"
                for k, iv in enumerate(self.intervals[c])
            ]
            lines.append(f"{c}: " + "; ".join(parts))
        return "\n".join(lines) + "\n"


def _check_structure(model: DiscretePomdp) -> None:
    if model.n_states != frg.N_STATES or model.terminal != frg.TERMINAL:
        raise UnstructuredModel("threshold extraction needs the 9-state layout with terminal g")
    allowed = frg.allowed_transitions()
    if np.any(model.transition[~allowed] > 0):
        a, s, n = np.argwhere((model.transition > 0) & ~allowed)[0]
        raise UnstructuredModel(
            f"T({model.states[n]}|{model.states[s]},{model.actions[a]}) > 0 breaks the configuration structure"
        )
    block = np.zeros((frg.N_STATES, frg.N_STATES), dtype=bool)
    for pair in frg.CONFIG_STATES:
        block[np.ix_(pair, pair)] = True
    block[frg.TERMINAL, frg.TERMINAL] = True
    if np.any(model.observation[~block] > 0):
        s, o = np.argwhere((model.observation > 0) & ~block)[0]
        raise UnstructuredModel(
            f"O({model.observations[o]}|{model.states[s]}) > 0 mixes visible configurations"
        )


def config_belief(c: int, beta) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    np_s, p_s = frg.CONFIG_STATES[c]
    B = np.zeros((len(beta), frg.N_STATES))
    B[:, np_s] = 1.0 - beta
    B[:, p_s] = beta
    return B


def extract_thresholds(
    model: DiscretePomdp,
    policy: AlphaVectorPolicy,
    grid_resolution: int = 1000,
    tol: float = 1e-4,
) -> ThresholdTable:
    """Sweep beta on each configuration's two-state edge and locate action changes."""
    if grid_resolution < 1000:
        raise ValueError("grid_resolution must be at least 1000")
    _check_structure(model)
    grid = np.linspace(0.0, 1.0, grid_resolution + 1)
    labels = tuple(f"{m}/{al}" for m, al in frg.CONFIGS)
    table: dict[str, list[Interval]] = {}
    for c, label in enumerate(labels):
        acts = policy.act(config_belief(c, grid))
        cuts = []
        for i in np.flatnonzero(np.diff(acts)):
            lo, hi = grid[i], grid[i + 1]
            a_lo = acts[i]
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if policy.act(config_belief(c, mid))[0] == a_lo:
                    lo = mid
                else:
                    hi = mid
            cuts.append((float(hi), int(acts[i + 1])))
        ivs = []
        start, current = 0.0, int(acts[0])
        for x, nxt in cuts:
            ivs.append(Interval(start, x, current))
            start, current = x, nxt
        ivs.append(Interval(start, 1.0, current))
        table[label] = ivs
    return ThresholdTable(labels, table, model.actions)


# ---------------------------------------------------------------- trace files

def export_trace(state: ControllerState, path) -> None:
    if not state.trace:
        raise ValueError("empty trace")
    model = state.model
    head = ["step", "time_seconds", "observation", "action", "beta"] + [f"b_{s}" for s in model.states]
    lines = ["\t".join(head)]
    for r in state.trace:
        row = [
            str(r.step),
            str(STEP_SECONDS * r.step),
            "-" if r.observation is None else model.observations[r.observation],
            "-" if r.action is None else model.actions[r.action],
            repr(float(r.beta)),
        ] + [repr(float(v)) for v in r.belief]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_trace(path, model: DiscretePomdp) -> list[TraceRecord]:
    rows = Path(path).read_text().splitlines()
    out = []
    for lineno, line in enumerate(rows[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 5 + model.n_states:
            raise ValueError(f"{path}:{lineno}: expected {5 + model.n_states} columns")
        obs = None if parts[2] == "-" else model.observations.index(parts[2])
        act = None if parts[3] == "-" else model.actions.index(parts[3])
        out.append(TraceRecord(int(parts[0]), obs, act, float(parts[4]), np.array([float(v) for v in parts[5:]])))
    return out
