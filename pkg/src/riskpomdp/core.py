"""Finite POMDP/MDP data model, belief arithmetic and the simulation kernel."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ROW_TOL = 1e-6


class ZeroLikelihood(ArithmeticError):
    """The observation has zero probability under the model's prediction."""


class ValidationFailure(ValueError):
    """A model does not satisfy the structural invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiscretePomdp:
    """Dense discrete POMDP.

    ``transition[a, s, s']`` is P(s' | s, a), ``observation[s', o]`` is
    P(o | s') and ``reward[s']`` is collected on entering ``s'``.
    """

    states: tuple[str, ...]
    actions: tuple[str, ...]
    observations: tuple[str, ...]
    transition: np.ndarray
    observation: np.ndarray
    reward: np.ndarray
    discount: float
    horizon: int
    initial_belief: np.ndarray
    terminal: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "observations", tuple(self.observations))
        for name in ("transition", "observation", "reward", "initial_belief"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    def replace(self, **changes) -> "DiscretePomdp":
        kwargs = {
            name: getattr(self, name)
            for name in (
                "states", "actions", "observations", "transition", "observation",
                "reward", "discount", "horizon", "initial_belief", "terminal",
            )
        }
        kwargs.update(changes)
        return DiscretePomdp(**kwargs)


@dataclass(frozen=True, eq=False)
class DiscreteMdp:
    states: tuple[str, ...]
    actions: tuple[str, ...]
    transition: np.ndarray
    reward: np.ndarray
    discount: float
    horizon: int
    transition_counts: np.ndarray = field(default=None)
    terminal: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        counts = self.transition_counts
        if counts is None:
            counts = np.zeros_like(self.transition, dtype=np.int64)
        object.__setattr__(self, "transition_counts", _frozen(counts, dtype=np.int64))


def _check_stochastic(table: np.ndarray, name: str) -> list[str]:
    problems = []
    if not np.all(np.isfinite(table)):
        problems.append(f"{name}: non-finite entries")
        return problems
    neg = np.argwhere(table < 0)
    for idx in neg:
        problems.append(f"{name}{tuple(int(i) for i in idx)}: negative entry {table[tuple(idx)]:g}")
    sums = table.sum(axis=-1)
    for idx in np.argwhere(np.abs(sums - 1.0) > ROW_TOL):
        problems.append(f"{name} row {tuple(int(i) for i in idx)}: sums to {sums[tuple(idx)]:.9g}")
    return problems


def validate_model(model: DiscretePomdp) -> list[str]:
    """Return a list of invariant violations; an empty list means valid."""
    S, A, O = model.n_states, model.n_actions, model.n_observations
    problems: list[str] = []
    if model.transition.shape != (A, S, S):
        problems.append(f"transition shape {model.transition.shape} != {(A, S, S)}")
    else:
        problems += _check_stochastic(model.transition, "T")
    if model.observation.shape != (S, O):
        problems.append(f"observation shape {model.observation.shape} != {(S, O)}")
    else:
        problems += _check_stochastic(model.observation, "O")
    if model.reward.shape != (S,):
        problems.append(f"reward shape {model.reward.shape} != {(S,)}")
    elif not np.all(np.isfinite(model.reward)):
        problems.append("reward: non-finite entries")
    if model.initial_belief.shape != (S,):
        problems.append("initial belief has wrong dimension")
    else:
        problems += _check_stochastic(model.initial_belief, "initial_belief")
    if not 0.0 < model.discount < 1.0:
        problems.append(f"discount {model.discount} outside (0, 1)")
    if model.horizon < 1:
        problems.append(f"horizon {model.horizon} < 1")
    g = model.terminal
    if g is not None and model.transition.shape == (A, S, S):
        if not np.allclose(model.transition[:, g, g], 1.0, atol=ROW_TOL):
            problems.append(f"terminal state {model.states[g]} is not absorbing")
        if model.reward.shape == (S,) and model.reward[g] != 0.0:
            problems.append(f"terminal state {model.states[g]} has non-zero reward")
    return problems


def check_belief(b: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.ndim != 1 or np.any(b < 0) or abs(b.sum() - 1.0) > tol:
        raise ValueError(f"not a belief: {b}")
    return b


def predict(model: DiscretePomdp, b: np.ndarray, a: int) -> np.ndarray:
    """Prior over next states after taking ``a`` from belief ``b``."""
    return b @ model.transition[a]


def belief_update(model: DiscretePomdp, b: np.ndarray, a: int, o: int) -> np.ndarray:
    """Bayes filter: b'(s') ∝ O(o|s') Σ_s T(s'|s,a) b(s)."""
    unnorm = predict(model, b, a) * model.observation[:, o]
    z = unnorm.sum()
    if z <= 0.0:
        raise ZeroLikelihood(
            f"observation {model.observations[o]!r} impossible after action {model.actions[a]!r}"
        )
    return unnorm / z


def marginal_performance(b: np.ndarray, performant: Sequence[int] | None = None) -> float:
    """Total belief mass on the performant states (FRG layout by default)."""
    if performant is None:
        from .frg import PERFORMANT_STATES
        performant = PERFORMANT_STATES
    return float(np.asarray(b)[list(performant)].sum())


def sample_rows(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws, one per row of ``p`` (shape (n, k)), from uniforms ``u``."""
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf <= (u * cdf[..., -1])[..., None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def sample_index(p: np.ndarray, u: float) -> int:
    return int(sample_rows(np.asarray(p)[None, :], np.array([u]))[0])


def step(model: DiscretePomdp, s: int, a: int, rng: np.random.Generator) -> tuple[int, int, float]:
    """Sample (s', o, r) with the reward collected on the state entered."""
    s_next = sample_index(model.transition[a, s], rng.random())
    o = sample_index(model.observation[s_next], rng.random())
    return s_next, o, float(model.reward[s_next])
