"""Action-indexed Baum-Welch with a frozen emission table, and model assembly."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from . import frg
from .core import DiscreteMdp, DiscretePomdp, ValidationFailure, validate_model
from .observation import DimensionMismatch, Mission, PerformanceClassifier, assign_states

log = logging.getLogger(__name__)


class EmptyData(ValueError):
    pass


class NonFiniteLikelihood(ArithmeticError):
    pass


@dataclass(eq=False)
class ObservationSequenceSet:
    """Per mission: observations (length L+1, ending in ``g``) and actions (length L)."""

    sequences: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        fixed = []
        for obs, acts in self.sequences:
            obs = np.asarray(obs, dtype=np.int64)
            acts = np.asarray(acts, dtype=np.int64)
            if len(obs) == 0 or len(obs) != len(acts) + 1:
                raise ValueError("each sequence needs one more observation than actions")
            fixed.append((obs, acts))
        self.sequences = fixed

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def n_steps(self) -> int:
        return sum(len(a) for _, a in self.sequences)


@dataclass(eq=False)
class EmFitResult:
    transition: np.ndarray
    loglik_trace: list[float]
    iterations: int
    converged: bool
    restart_logliks: list[float] = field(default_factory=list)
    restart_traces: list[list[float]] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


def classify_sequences(classifier: PerformanceClassifier, missions: Sequence[Mission]) -> ObservationSequenceSet:
    """Map every step to (visible config, predicted performance); append ``g``."""
    seqs = []
    for m in missions:
        if m.features.shape[1] != classifier.n_features:
            raise DimensionMismatch(
                f"mission {m.mission_id}: {m.features.shape[1]} features, classifier expects {classifier.n_features}"
            )
        obs = assign_states(m.configs, classifier.predict_mission(m))
        seqs.append((np.append(obs, frg.TERMINAL), m.actions))
    return ObservationSequenceSet(seqs)


def random_init(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform over allowed entries blended with a Dirichlet(1) draw."""
    T = np.zeros(mask.shape)
    A, S, _ = mask.shape
    for a in range(A):
        for s in range(S):
            allowed = np.flatnonzero(mask[a, s])
            if len(allowed) == 0:
                continue
            jitter = rng.dirichlet(np.ones(len(allowed)))
            T[a, s, allowed] = 0.5 / len(allowed) + 0.5 * jitter
    return T


class _Packed:
    """Sequences concatenated into flat arrays with offsets."""

    def __init__(self, seqs: ObservationSequenceSet):
        self.obs = np.concatenate([o for o, _ in seqs]).astype(np.int64)
        self.act = np.concatenate([np.append(a, 0) for _, a in seqs]).astype(np.int64)
        lens = np.array([len(o) for o, _ in seqs], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)


@numba.njit(cache=True)
def _forward_backward(T, emission, init_dist, obs, act, offsets):
    # zero terms are skipped: beliefs and emissions are sparse in practice
    A, S, _ = T.shape
    counts = np.zeros((A, S, S))
    loglik = 0.0
    n_seq = offsets.shape[0] - 1
    w = np.zeros(S)
    for i in range(n_seq):
        lo = offsets[i]
        L = offsets[i + 1] - lo
        alpha = np.zeros((L, S))
        beta = np.ones((L, S))
        scale = np.zeros(L)
        c = 0.0
        for s in range(S):
            alpha[0, s] = init_dist[s] * emission[s, obs[lo]]
            c += alpha[0, s]
        if not c > 0.0:
            return -np.inf, counts
        scale[0] = c
        for s in range(S):
            alpha[0, s] /= c
        for t in range(1, L):
            a = act[lo + t - 1]
            o = obs[lo + t]
            for s in range(S):
                p = alpha[t - 1, s]
                if p == 0.0:
                    continue
                for u in range(S):
                    alpha[t, u] += p * T[a, s, u]
            c = 0.0
            for u in range(S):
                alpha[t, u] *= emission[u, o]
                c += alpha[t, u]
            if not c > 0.0:
                return -np.inf, counts
            scale[t] = c
            for u in range(S):
                alpha[t, u] /= c
            loglik += np.log(c)
        loglik += np.log(scale[0])
        for t in range(L - 2, -1, -1):
            a = act[lo + t]
            o = obs[lo + t + 1]
            for u in range(S):
                w[u] = emission[u, o] * beta[t + 1, u] / scale[t + 1]
            for s in range(S):
                acc = 0.0
                for u in range(S):
                    if w[u] != 0.0:
                        acc += T[a, s, u] * w[u]
                beta[t, s] = acc
            for s in range(S):
                p = alpha[t, s]
                if p == 0.0:
                    continue
                for u in range(S):
                    if w[u] != 0.0:
                        counts[a, s, u] += p * T[a, s, u] * w[u]
    return loglik, counts


def _e_step(T, emission, init_dist, data: _Packed):
    """Scaled forward-backward; returns (loglik, expected transition counts)."""
    ll, counts = _forward_backward(
        np.ascontiguousarray(T, dtype=float), np.ascontiguousarray(emission, dtype=float),
        init_dist, data.obs, data.act, data.offsets,
    )
    if not np.isfinite(ll):
        raise NonFiniteLikelihood("zero-likelihood sequence: emission zeros inconsistent with data")
    return ll, counts


def _m_step(counts, T_prev, mask, terminal):
    T = T_prev.copy()
    masked = np.where(mask, counts, 0.0)
    sums = masked.sum(axis=-1, keepdims=True)
    has_data = sums[..., 0] > 0
    T[has_data] = masked[has_data] / sums[has_data]
    if terminal is not None:
        T[:, terminal, :] = 0.0
        T[:, terminal, terminal] = 1.0
    return T


def _fit_once(T0, emission, init_dist, data, mask, terminal, tol, max_iter):
    T = T0
    trace: list[float] = []
    converged = False
    for it in range(max_iter):
        ll, counts = _e_step(T, emission, init_dist, data)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
        if it == max_iter - 1:
            break
        T = _m_step(counts, T, mask, terminal)
    return EmFitResult(T, trace, len(trace), converged)


def em_fit(
    seqs: ObservationSequenceSet,
    emission: np.ndarray,
    init: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iter: int = 500,
    restarts: int = 5,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
    terminal: int | None = frg.TERMINAL,
    n_jobs: int = 1,
) -> EmFitResult:
    """Fit action-conditioned transitions by EM with the emission table held fixed.

    Entries outside ``mask`` (default: FRG structure) stay at zero.  When
    ``init`` is given it seeds the first restart; remaining restarts start
    from random rows.  The run with the highest final log-likelihood wins,
    earliest restart on ties.
    """
    if len(seqs) == 0 or seqs.n_steps == 0:
        raise EmptyData("no transitions to fit")
    emission = np.asarray(emission, dtype=float)
    S = emission.shape[0]
    if mask is None:
        mask = frg.allowed_transitions()
    rng = rng if rng is not None else np.random.default_rng(0)
    init_dist = np.ones(S)
    if terminal is not None:
        init_dist[terminal] = 0.0
    init_dist /= init_dist.sum()
    data = _Packed(seqs)

    seeds = rng.integers(0, 2**32, size=max(restarts, 1))
    starts = []
    for r in range(max(restarts, 1)):
        if r == 0 and init is not None:
            T0 = np.where(mask, np.asarray(init, dtype=float), 0.0)
            T0 = T0 / np.where(T0.sum(-1, keepdims=True) > 0, T0.sum(-1, keepdims=True), 1.0)
        else:
            T0 = random_init(mask, np.random.default_rng(seeds[r]))
        if terminal is not None:
            T0[:, terminal, :] = 0.0
            T0[:, terminal, terminal] = 1.0
        starts.append(T0)

    args = (emission, init_dist, data, mask, terminal, tol, max_iter)
    if n_jobs != 1 and len(starts) > 1:
        from joblib import Parallel, delayed

        runs = Parallel(n_jobs=n_jobs)(delayed(_fit_once)(T0, *args) for T0 in starts)
    else:
        runs = [_fit_once(T0, *args) for T0 in starts]
    finals = [r.loglik for r in runs]
    best = runs[int(np.argmax(finals))]
    best.restart_logliks = finals
    best.restart_traces = [r.loglik_trace for r in runs]
    return best


def write_sequences(seqs: ObservationSequenceSet, path, header: Sequence[str] = ()) -> None:
    """One mission per line: ``o0 a0 o1 a1 ... oL`` with FRG labels."""
    lines = [f"# {h}" for h in header]
    for obs, acts in seqs:
        toks = []
        for o, a in zip(obs[:-1], acts):
            toks += [frg.OBSERVATIONS[o], frg.ACTIONS[a]]
        toks.append(frg.OBSERVATIONS[obs[-1]])
        lines.append(" ".join(toks))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequences(path) -> ObservationSequenceSet:
    seqs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        toks = line.split()
        if len(toks) % 2 == 0:
            raise ValueError(f"{path}:{lineno}: a sequence must end with an observation")
        try:
            obs = [frg.OBSERVATIONS.index(t) for t in toks[0::2]]
            acts = [frg.ACTIONS.index(t) for t in toks[1::2]]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        seqs.append((np.array(obs), np.array(acts)))
    return ObservationSequenceSet(seqs)


def write_loglik_table(fit: EmFitResult, path) -> None:
    lines = ["iteration\tloglik"]
    lines += [f"{i}\t{ll!r}" for i, ll in enumerate(fit.loglik_trace)]
    Path(path).write_text("\n".join(lines) + "\n")


def assemble_pomdp(
    fit: EmFitResult | np.ndarray,
    obs_table: np.ndarray,
    rewards: np.ndarray,
    discount: float = frg.DEFAULT_DISCOUNT,
    horizon: int = frg.DEFAULT_HORIZON,
) -> DiscretePomdp:
    T = fit.transition if isinstance(fit, EmFitResult) else np.asarray(fit)
    model = DiscretePomdp(
        states=frg.STATES,
        actions=frg.ACTIONS,
        observations=frg.OBSERVATIONS,
        transition=T,
        observation=obs_table,
        reward=rewards,
        discount=discount,
        horizon=horizon,
        initial_belief=frg.initial_belief(),
        terminal=frg.TERMINAL,
    )
    problems = validate_model(model)
    if problems:
        raise ValidationFailure(problems)
    return model


def mdp_from_sequences(
    seqs: ObservationSequenceSet,
    alpha0: float = 1.0,
    rewards: np.ndarray | None = None,
    discount: float = frg.DEFAULT_DISCOUNT,
    horizon: int = frg.DEFAULT_HORIZON,
    mask: np.ndarray | None = None,
) -> DiscreteMdp:
    """Tally (s, a, s') over hardened state sequences; smoothed row-normalized MLE."""
    mask = frg.allowed_transitions() if mask is None else mask
    A, S, _ = mask.shape
    counts = np.zeros((A, S, S), dtype=np.int64)
    for states, acts in seqs:
        np.add.at(counts, (acts, states[:-1], states[1:]), 1)
    if np.any(counts[~mask]):
        bad = np.argwhere(counts * ~mask)[0]
        raise ValueError(f"transition {tuple(int(i) for i in bad)} violates the structural zeros")
    smoothed = (counts + alpha0) * mask
    T = smoothed / smoothed.sum(axis=-1, keepdims=True)
    T[:, frg.TERMINAL, :] = 0.0
    T[:, frg.TERMINAL, frg.TERMINAL] = 1.0
    return DiscreteMdp(
        states=frg.STATES,
        actions=frg.ACTIONS,
        transition=T,
        reward=np.zeros(S) if rewards is None else rewards,
        discount=discount,
        horizon=horizon,
        transition_counts=counts,
        terminal=frg.TERMINAL,
    )
