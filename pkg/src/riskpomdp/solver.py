"""Candidate policies: randomized point-based POMDP backups and MDP value iteration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DiscreteMdp, DiscretePomdp, belief_update, ZeroLikelihood

log = logging.getLogger(__name__)

# rounding slack, relative to the largest possible value
_SLACK = 1e-12


@dataclass
class SolverConfig:
    belief_count: int = 500
    max_iter: int = 200
    epsilon: float = 1e-4
    seed: int = 0
    explore_depth: int = 60


@dataclass(frozen=True, eq=False)
class AlphaVectorPolicy:
    vectors: np.ndarray
    actions: np.ndarray
    discount: float
    action_labels: tuple[str, ...] = ()
    state_labels: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=float, ndmin=2)
        actions = np.array(self.actions, dtype=np.int64).reshape(-1)
        if len(vectors) == 0 or len(vectors) != len(actions):
            raise ValueError("policy needs one action per alpha vector and at least one vector")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("alpha vectors must be finite")
        vectors.setflags(write=False)
        actions.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "actions", actions)
        n_actions = len(self.action_labels) or int(actions.max()) + 1
        object.__setattr__(self, "n_actions", n_actions)

    def __len__(self):
        return len(self.vectors)

    def action_values(self, beliefs: np.ndarray) -> np.ndarray:
        """Best value per action, shape (..., n_actions); -inf for absent actions."""
        vals = np.asarray(beliefs) @ self.vectors.T
        out = np.full(vals.shape[:-1] + (self.n_actions,), -np.inf)
        for a in np.unique(self.actions):
            out[..., a] = vals[..., self.actions == a].max(axis=-1)
        return out

    def act(self, beliefs: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest action index
        return self.action_values(beliefs).argmax(axis=-1)


@dataclass(frozen=True, eq=False)
class StatePolicy:
    actions: np.ndarray
    values: np.ndarray
    residual: float
    discount: float
    iterations: int = 0


def policy_action(policy: AlphaVectorPolicy, b: np.ndarray) -> int:
    return int(policy.act(np.asarray(b)[None, :])[0])


def policy_value(policy: AlphaVectorPolicy, b: np.ndarray) -> float:
    return float((policy.vectors @ np.asarray(b)).max())


def expected_rewards(model) -> np.ndarray:
    """r(s, a) = sum_s' T(s'|s,a) R(s'), shape (S, A)."""
    return np.einsum("asn,n->sa", model.transition, model.reward)


def blind_vectors(model: DiscretePomdp, discount: float) -> np.ndarray:
    """Exact values of the fixed-action policies; a valid lower bound."""
    S = model.n_states
    r = expected_rewards(model)
    return np.array([
        np.linalg.solve(np.eye(S) - discount * model.transition[a], r[:, a])
        for a in range(model.n_actions)
    ])


def explore_beliefs(model: DiscretePomdp, count: int, rng: np.random.Generator, depth: int = 60) -> np.ndarray:
    """Beliefs reached by random-action trajectories from the initial belief."""
    beliefs = [model.initial_belief.copy()]
    seen = {model.initial_belief.tobytes()}
    attempts = 0
    while len(beliefs) < count and attempts < 50 * count:
        s = int(rng.choice(model.n_states, p=model.initial_belief))
        b = model.initial_belief.copy()
        for _ in range(depth):
            attempts += 1
            a = int(rng.integers(model.n_actions))
            s = int(rng.choice(model.n_states, p=model.transition[a, s]))
            o = int(rng.choice(model.n_observations, p=model.observation[s]))
            try:
                b = belief_update(model, b, a, o)
            except ZeroLikelihood:
                break
            key = np.round(b, 12).tobytes()
            if key not in seen:
                seen.add(key)
                beliefs.append(b)
                if len(beliefs) >= count:
                    break
            if model.terminal is not None and s == model.terminal:
                break
    return np.array(beliefs)


def _backup_all(B, gao, reward_sa, discount):
    """Point-based Bellman backups at every row of ``B``; returns (alphas, actions)."""
    # gao: (k, A, O, S) projections of the current vectors through T and O
    k, A, O, S = gao.shape
    scores = (gao.reshape(k, A * O, S) @ B.T).reshape(k, A, O, len(B))
    best = scores.argmax(axis=0).transpose(2, 0, 1)  # (n, A, O)
    chosen = gao[best, np.arange(A)[None, :, None], np.arange(O)[None, None, :]]  # (n, A, O, S)
    alphas = reward_sa.T[None] + discount * chosen.sum(axis=2)  # (n, A, S)
    acts = np.einsum("nas,ns->na", alphas, B).argmax(axis=1)
    return alphas[np.arange(len(B)), acts], acts


def solve_pomdp(
    model: DiscretePomdp,
    discount: float | None = None,
    config: SolverConfig | None = None,
    beliefs: np.ndarray | None = None,
) -> AlphaVectorPolicy:
    """Randomized point-based value iteration over an explored belief set.

    Starts from the fixed-action value vectors.  Each sweep backs up randomly
    chosen beliefs until every belief of the set has improved or kept its
    value, so values never decrease.  Stops once the largest Bellman gap over
    the set drops below ``epsilon``.
    """
    config = config or SolverConfig()
    discount = model.discount if discount is None else float(discount)
    if not 0.0 < discount < 1.0:
        raise ValueError("discount must lie in (0, 1)")
    rng = np.random.default_rng(config.seed)
    B = beliefs if beliefs is not None else explore_beliefs(model, config.belief_count, rng, config.explore_depth)
    B = np.asarray(B, dtype=float)
    reward_sa = expected_rewards(model)
    TO = np.einsum("asn,no->aosn", model.transition, model.observation)  # (A, O, S, S')

    V = blind_vectors(model, discount)
    acts = np.arange(model.n_actions)
    values = (B @ V.T).max(axis=1)
    slack = _SLACK * float(np.abs(model.reward).max()) / (1.0 - discount)
    converged = False
    it = 0
    gap = np.inf
    for it in range(1, config.max_iter + 1):
        gao = np.einsum("aosn,kn->kaos", TO, V)
        # backups only depend on the previous vector set, so compute them all up front
        cand, cand_acts = _backup_all(B, gao, reward_sa, discount)
        cand_gain = np.einsum("ns,ns->n", cand, B)
        gap = float((cand_gain - values).max())
        if gap < config.epsilon:
            converged = True
            break
        new_V, new_acts = [], []
        new_values = np.full(len(B), -np.inf)
        pending = np.arange(len(B))
        while len(pending):
            i = int(rng.choice(pending))
            if cand_gain[i] >= values[i]:
                alpha, a = cand[i], int(cand_acts[i])
            else:
                k = int((V @ B[i]).argmax())
                alpha, a = V[k], int(acts[k])
            new_V.append(alpha)
            new_acts.append(a)
            np.maximum(new_values, B @ alpha, out=new_values)
            # the chosen vector attains values[i] up to rounding
            new_values[i] = max(new_values[i], values[i])
            pending = np.flatnonzero(new_values < values - slack)
        # beliefs covered by someone else's vector may still lag their own
        # backup; without this pass the Bellman gap can stall
        lagging = np.flatnonzero(cand_gain > new_values + slack)
        for i in rng.permutation(lagging):
            if cand_gain[i] > new_values[i] + slack:
                new_V.append(cand[i])
                new_acts.append(int(cand_acts[i]))
                np.maximum(new_values, B @ cand[i], out=new_values)
                new_values[i] = max(new_values[i], cand_gain[i])
        V, idx = np.unique(np.array(new_V), axis=0, return_index=True)
        acts = np.array(new_acts)[idx]
        values = new_values
    if not converged:
        log.warning("solver stopped at max_iter=%d with Bellman gap %.3g", config.max_iter, gap)
    return AlphaVectorPolicy(
        vectors=V,
        actions=acts,
        discount=discount,
        action_labels=model.actions,
        state_labels=model.states,
        metadata={
            "iterations": it,
            "belief_count": len(B),
            "residual": gap,
            "converged": converged,
        },
    )


def solve_mdp_vi(mdp: DiscreteMdp, discount: float | None = None, tol: float = 1e-8, max_iter: int = 100_000) -> StatePolicy:
    discount = mdp.discount if discount is None else float(discount)
    T, R = mdp.transition, mdp.reward
    V = np.zeros(len(mdp.states))
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Q = np.einsum("asn,n->sa", T, R + discount * V)
        V_new = Q.max(axis=1)
        residual = float(np.abs(V_new - V).max())
        V = V_new
        if residual <= tol:
            break
    Q = np.einsum("asn,n->sa", T, R + discount * V)
    return StatePolicy(actions=Q.argmax(axis=1), values=V, residual=residual, discount=discount, iterations=it)


# ---------------------------------------------------------------- policy file

def write_policy(policy: AlphaVectorPolicy, path, header: Sequence[str] = ()) -> None:
    lines = ["# riskpomdp alpha-vector policy"]
    lines += [f"# {h}" for h in header]
    lines.append(f"DISCOUNT: {policy.discount!r}")
    for k in sorted(policy.metadata):
        lines.append(f"META {k}: {policy.metadata[k]!r}")
    if policy.state_labels:
        lines.append("STATES: " + " ".join(policy.state_labels))
    if policy.action_labels:
        lines.append("ACTIONS: " + " ".join(policy.action_labels))
    labels = policy.action_labels or tuple(str(a) for a in range(policy.n_actions))
    for vec, a in zip(policy.vectors, policy.actions):
        lines.append(labels[a] + " " + " ".join(repr(float(v)) for v in vec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_policy(path) -> AlphaVectorPolicy:
    import ast

    discount = None
    meta: dict = {}
    states: tuple[str, ...] = ()
    actions: tuple[str, ...] = ()
    vectors, acts = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("DISCOUNT:"):
            discount = float(line.split(":", 1)[1])
        elif line.startswith("META "):
            key, val = line[5:].split(":", 1)
            meta[key.strip()] = ast.literal_eval(val.strip())
        elif line.startswith("STATES:"):
            states = tuple(line.split(":", 1)[1].split())
        elif line.startswith("ACTIONS:"):
            actions = tuple(line.split(":", 1)[1].split())
        else:
            label, *vals = line.split()
            try:
                a = actions.index(label) if actions else int(label)
                vectors.append([float(v) for v in vals])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad alpha-vector line") from None
            acts.append(a)
    if discount is None:
        raise ValueError(f"{path}: missing DISCOUNT")
    return AlphaVectorPolicy(np.array(vectors), np.array(acts), discount, actions, states, meta)
