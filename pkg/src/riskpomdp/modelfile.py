"""Plain-text model files and export to the Cassandra ``.pomdp`` format.

Native grammar, one directive per line, ``#`` starts a comment line::

    STATES: <label> ...
    ACTIONS: <label> ...
    OBSERVATIONS: <label> ...
    START: <p> ...              (one probability per state)
    TERMINAL: <state label>     (optional)
    DISCOUNT: <float>
    HORIZON: <int>
    T: <action> <src> <dst> <prob>
    O: <state> <obs> <prob>
    R: <state> <reward>

Unlisted probabilities and rewards are 0.  Floats are written with ``repr``
so a write/read cycle is exact.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DiscretePomdp, ValidationFailure, validate_model


class ModelParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        self.path, self.lineno = path, lineno
        super().__init__(f"{path}:{lineno}: {msg}")


def format_model(model: DiscretePomdp, header: Sequence[str] = ()) -> str:
    lines = [f"# {h}" for h in header]
    lines.append("STATES: " + " ".join(model.states))
    lines.append("ACTIONS: " + " ".join(model.actions))
    lines.append("OBSERVATIONS: " + " ".join(model.observations))
    lines.append("START: " + " ".join(repr(float(p)) for p in model.initial_belief))
    if model.terminal is not None:
        lines.append(f"TERMINAL: {model.states[model.terminal]}")
    lines.append(f"DISCOUNT: {model.discount!r}")
    lines.append(f"HORIZON: {model.horizon}")
    for a, s, n in zip(*np.nonzero(model.transition)):
        lines.append(f"T: {model.actions[a]} {model.states[s]} {model.states[n]} {float(model.transition[a, s, n])!r}")
    for s, o in zip(*np.nonzero(model.observation)):
        lines.append(f"O: {model.states[s]} {model.observations[o]} {float(model.observation[s, o])!r}")
    for s in np.nonzero(model.reward)[0]:
        lines.append(f"R: {model.states[s]} {float(model.reward[s])!r}")
    return "\n".join(lines) + "\n"


def write_model(model: DiscretePomdp, path, header: Sequence[str] = ()) -> None:
    Path(path).write_text(format_model(model, header))


def read_model(path, validate: bool = True) -> DiscretePomdp:
    sections: dict[str, str] = {}
    entries: list[tuple[int, str, list[str]]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise ModelParseError(path, lineno, f"expected 'KEY: value', got {line!r}")
        key = key.strip()
        if key in ("T", "O", "R"):
            entries.append((lineno, key, rest.split()))
        elif key in ("STATES", "ACTIONS", "OBSERVATIONS", "START", "TERMINAL", "DISCOUNT", "HORIZON"):
            if key in sections:
                raise ModelParseError(path, lineno, f"duplicate {key}")
            sections[key] = rest.strip()
        else:
            raise ModelParseError(path, lineno, f"unknown directive {key!r}")
    for key in ("STATES", "ACTIONS", "OBSERVATIONS", "START", "DISCOUNT", "HORIZON"):
        if key not in sections:
            raise ModelParseError(path, 0, f"missing {key}")
    states = tuple(sections["STATES"].split())
    actions = tuple(sections["ACTIONS"].split())
    observations = tuple(sections["OBSERVATIONS"].split())
    S, A, O = len(states), len(actions), len(observations)
    T = np.zeros((A, S, S))
    Z = np.zeros((S, O))
    R = np.zeros(S)

    def lookup(labels, name, lineno):
        try:
            return labels.index(name)
        except ValueError:
            raise ModelParseError(path, lineno, f"unknown label {name!r}") from None

    for lineno, key, parts in entries:
        try:
            if key == "T" and len(parts) == 4:
                T[lookup(actions, parts[0], lineno), lookup(states, parts[1], lineno),
                  lookup(states, parts[2], lineno)] = float(parts[3])
            elif key == "O" and len(parts) == 3:
                Z[lookup(states, parts[0], lineno), lookup(observations, parts[1], lineno)] = float(parts[2])
            elif key == "R" and len(parts) == 2:
                R[lookup(states, parts[0], lineno)] = float(parts[1])
            else:
                raise ModelParseError(path, lineno, f"wrong field count for {key}")
        except ValueError as exc:
            if isinstance(exc, ModelParseError):
                raise
            raise ModelParseError(path, lineno, str(exc)) from None
    try:
        start = np.array([float(v) for v in sections["START"].split()])
        discount = float(sections["DISCOUNT"])
        horizon = int(sections["HORIZON"])
    except ValueError as exc:
        raise ModelParseError(path, 0, str(exc)) from None
    if len(start) != S:
        raise ModelParseError(path, 0, f"START has {len(start)} entries for {S} states")
    terminal = lookup(states, sections["TERMINAL"], 0) if "TERMINAL" in sections else None
    model = DiscretePomdp(states, actions, observations, T, Z, R, discount, horizon, start, terminal)
    if validate:
        problems = validate_model(model)
        if problems:
            raise ValidationFailure(problems)
    return model


def export_cassandra(model: DiscretePomdp, path) -> None:
    """Classic ``.pomdp`` file; rewards are attached to the entered state (``R: * : * : s' : *``)."""
    lines = [
        f"discount: {model.discount!r}",
        "values: reward",
        "states: " + " ".join(model.states),
        "actions: " + " ".join(model.actions),
        "observations: " + " ".join(model.observations),
        "start: " + " ".join(repr(float(p)) for p in model.initial_belief),
        "",
    ]
    for a, act in enumerate(model.actions):
        lines.append(f"T: {act}")
        lines += [" ".join(repr(float(p)) for p in row) for row in model.transition[a]]
        lines.append("")
    for act in model.actions:
        lines.append(f"O: {act}")
        lines += [" ".join(repr(float(p)) for p in row) for row in model.observation]
        lines.append("")
    for s, r in enumerate(model.reward):
        if r != 0:
            lines.append(f"R: * : * : {model.states[s]} : * {float(r)!r}")
    Path(path).write_text("\n".join(lines) + "\n")
