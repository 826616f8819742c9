"""Firefighter Robot Game layout and the transcribed trivial-POMDP fixture.

Nine hidden states: four visible configurations (robot mode x alarm status),
each split by team performance, plus an absorbing game-over state ``g``.
Actions set the visible configuration deterministically; only the
performance component is hidden.
"""
from __future__ import annotations

import numpy as np

from .core import DiscretePomdp, ValidationFailure, validate_model

MODES = ("manual", "auto")
ALARMS = ("on", "off")

# configuration index c <-> action index c; order follows the transition tables
CONFIGS: tuple[tuple[str, str], ...] = (
    ("manual", "on"),
    ("manual", "off"),
    ("auto", "on"),
    ("auto", "off"),
)
ACTIONS = ("manual_on", "manual_off", "auto_on", "auto_off")
STATES = (
    "m_np_off", "m_np_on", "m_p_off", "m_p_on",
    "a_np_off", "a_np_on", "a_p_off", "a_p_on",
    "g",
)
OBSERVATIONS = STATES
TERMINAL = 8
PERFORMANT_STATES = (2, 3, 6, 7)
NON_PERFORMANT_STATES = (0, 1, 4, 5)
N_STATES = len(STATES)
N_ACTIONS = len(ACTIONS)


def state_index(mode: str, alarm: str, performant: bool) -> int:
    return STATES.index(f"{mode[0]}_{'p' if performant else 'np'}_{alarm}")


# (non-performant state, performant state) for every configuration
CONFIG_STATES: tuple[tuple[int, int], ...] = tuple(
    (state_index(m, al, False), state_index(m, al, True)) for m, al in CONFIGS
)


def config_index(mode: str, alarm: str) -> int:
    try:
        return CONFIGS.index((mode, alarm))
    except ValueError:
        raise ValueError(f"unknown visible configuration {mode!r}/{alarm!r}") from None


def config_of_state(s: int) -> int | None:
    for c, pair in enumerate(CONFIG_STATES):
        if s in pair:
            return c
    return None


def allowed_transitions() -> np.ndarray:
    """Boolean mask (A, S, S): entries that may carry probability mass.

    Action ``a`` leads only to the two performance states of its target
    configuration, or to ``g``; ``g`` is absorbing.
    """
    mask = np.zeros((N_ACTIONS, N_STATES, N_STATES), dtype=bool)
    for a in range(N_ACTIONS):
        np_s, p_s = CONFIG_STATES[a]
        mask[a, :TERMINAL, [np_s, p_s, TERMINAL]] = True
        mask[a, TERMINAL, TERMINAL] = True
    return mask


def initial_belief(p_performant: float = 0.5) -> np.ndarray:
    b = np.zeros(N_STATES)
    np_s, p_s = CONFIG_STATES[config_index("manual", "on")]
    b[np_s] = 1.0 - p_performant
    b[p_s] = p_performant
    return b


# Transcribed transition tables. For each action, one row per non-terminal
# source state (STATES order): mass on (non-performant target, performant
# target, g). Values are verbatim; rows carry +-0.001 rounding drift.
TRANSITION_TABLES: dict[str, tuple[tuple[float, float, float], ...]] = {
    "manual_on": (
        (0.917, 0.067, 0.017), (0.917, 0.065, 0.019), (0.027, 0.956, 0.017), (0.032, 0.956, 0.012),
        (0.945, 0.051, 0.005), (0.931, 0.063, 0.006), (0.018, 0.973, 0.009), (0.016, 0.965, 0.020),
    ),
    "manual_off": (
        (0.914, 0.069, 0.017), (0.914, 0.067, 0.018), (0.020, 0.963, 0.017), (0.024, 0.964, 0.012),
        (0.940, 0.055, 0.005), (0.923, 0.071, 0.006), (0.015, 0.976, 0.009), (0.013, 0.967, 0.020),
    ),
    "auto_on": (
        (0.941, 0.042, 0.017), (0.940, 0.042, 0.018), (0.020, 0.963, 0.017), (0.025, 0.963, 0.012),
        (0.921, 0.074, 0.005), (0.916, 0.079, 0.006), (0.023, 0.968, 0.009), (0.019, 0.961, 0.020),
    ),
    "auto_off": (
        (0.944, 0.039, 0.017), (0.943, 0.038, 0.018), (0.021, 0.963, 0.017), (0.025, 0.962, 0.012),
        (0.932, 0.064, 0.005), (0.929, 0.066, 0.006), (0.031, 0.961, 0.009), (0.026, 0.954, 0.020),
    ),
}

REWARDS = (0.257, 0.289, 0.603, 0.741, 0.257, 0.333, 0.432, 0.493, 0.0)

# Confusion counts on the test split: rows = true (non-perf, perf),
# columns = predicted (non-perf, perf).
CONFUSION_COUNTS: dict[tuple[str, str], tuple[tuple[int, int], tuple[int, int]]] = {
    ("manual", "on"): ((113, 43), (71, 105)),
    ("manual", "off"): ((105, 51), (51, 125)),
    ("auto", "on"): ((99, 70), (46, 140)),
    ("auto", "off"): ((91, 39), (55, 97)),
}

DEFAULT_DISCOUNT = 0.98
DEFAULT_HORIZON = 60


def raw_transition_array() -> np.ndarray:
    """The transcribed tables placed on the (A, S, S) grid, not renormalized."""
    T = np.zeros((N_ACTIONS, N_STATES, N_STATES))
    for a, name in enumerate(ACTIONS):
        np_s, p_s = CONFIG_STATES[a]
        for s, (p_np, p_p, p_g) in enumerate(TRANSITION_TABLES[name]):
            T[a, s, np_s] = p_np
            T[a, s, p_s] = p_p
            T[a, s, TERMINAL] = p_g
        T[a, TERMINAL, TERMINAL] = 1.0
    return T


def fixture_transition() -> np.ndarray:
    T = raw_transition_array()
    return T / T.sum(axis=-1, keepdims=True)


def confusion_array() -> np.ndarray:
    """Fixture confusion counts as an int array (config, true, predicted)."""
    return np.array([CONFUSION_COUNTS[c] for c in CONFIGS], dtype=np.int64)


def build_frg_fixture(
    discount: float = DEFAULT_DISCOUNT,
    horizon: int = DEFAULT_HORIZON,
    alpha0: float = 1.0,
):
    """Return ``(model, posterior)`` for the published trivial POMDP."""
    from .observation import dirichlet_posterior, trivial_observation_function

    counts = confusion_array()
    model = DiscretePomdp(
        states=STATES,
        actions=ACTIONS,
        observations=OBSERVATIONS,
        transition=fixture_transition(),
        observation=trivial_observation_function(counts),
        reward=np.array(REWARDS),
        discount=discount,
        horizon=horizon,
        initial_belief=initial_belief(),
        terminal=TERMINAL,
    )
    problems = validate_model(model)
    if problems:
        raise ValidationFailure(problems)
    return model, dirichlet_posterior(counts, alpha0)


def simulate_missions(
    model: DiscretePomdp,
    n_missions: int,
    rng: np.random.Generator,
    max_steps: int = 1000,
) -> list[dict[str, np.ndarray]]:
    """Missions under a uniformly random action policy, run until ``g``.

    Each mission dict holds ``states`` (visited non-terminal states),
    ``observations`` (same length), ``actions`` (action applied at each step)
    and ``reached_terminal``.  Hidden start states are drawn from the
    model's initial belief.
    """
    out = []
    g = model.terminal
    for _ in range(n_missions):
        s = int(rng.choice(model.n_states, p=model.initial_belief))
        o = int(rng.choice(model.n_observations, p=model.observation[s]))
        states, obs, acts = [], [], []
        done = False
        while len(states) < max_steps:
            a = int(rng.integers(model.n_actions))
            states.append(s)
            obs.append(o)
            acts.append(a)
            s = int(rng.choice(model.n_states, p=model.transition[a, s]))
            o = int(rng.choice(model.n_observations, p=model.observation[s]))
            if s == g:
                done = True
                break
        out.append({
            "states": np.array(states),
            "observations": np.array(obs),
            "actions": np.array(acts),
            "reached_terminal": done,
        })
    return out


def fixture_sequences(model: DiscretePomdp, n_missions: int, seed: int):
    """Observation/action sequences simulated from ``model`` for EM refits."""
    from .hmm import ObservationSequenceSet

    rng = np.random.default_rng(seed)
    missions = simulate_missions(model, n_missions, rng)
    seqs = []
    for m in missions:
        obs = np.append(m["observations"], TERMINAL)
        seqs.append((obs, m["actions"]))
    return ObservationSequenceSet(seqs)
