"""Risk-sensitive policy selection over models sampled from the observation posterior."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import stats

from . import frg
from .core import DiscretePomdp, ZeroLikelihood, sample_rows
from .hmm import NonFiniteLikelihood, ObservationSequenceSet, em_fit
from .observation import ObservationPosterior, sample_observation_function
from .solver import AlphaVectorPolicy, StatePolicy

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = (0.7, 0.8, 0.9, 0.97, 0.98, 0.99)


class EmptySample(ValueError):
    pass


class DegenerateRanks(ValueError):
    pass


class TooManyDropped(RuntimeError):
    pass


@dataclass(frozen=True)
class FixedPolicy:
    action: int


@dataclass(frozen=True)
class RandomPolicy:
    """Uniform over actions at every step, like the data-collection policy."""

    n_actions: int = frg.N_ACTIONS


Policy = Union[AlphaVectorPolicy, StatePolicy, FixedPolicy, RandomPolicy]


@dataclass
class SelectionConfig:
    gammas: tuple[float, ...] = DEFAULT_GAMMAS
    n_models: int = 200
    n_episodes: int = 200
    q: float = 0.5
    horizon: int = frg.DEFAULT_HORIZON
    seed: int = 0
    em_tol: float = 1e-6
    em_max_iter: int = 500
    em_restarts: int = 1
    min_survival: float = 0.9
    n_jobs: int = 1

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError("quantile order q must lie in (0, 1)")
        if self.n_models < 1 or self.n_episodes < 1:
            raise ValueError("n_models and n_episodes must be at least 1")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.gammas = tuple(float(g) for g in self.gammas)


@dataclass(frozen=True)
class Candidate:
    name: str
    policy: Policy
    gamma: float | None = None


@dataclass(eq=False)
class ReturnSample:
    """Pooled undiscounted returns with the (model, episode) index of each entry."""

    returns: np.ndarray
    model_index: np.ndarray
    episode_index: np.ndarray
    beta_mean: np.ndarray | None = None

    def __len__(self):
        return len(self.returns)


@dataclass
class PolicyStats:
    name: str
    gamma: float | None
    n: int
    mean: float
    std: float
    min: float
    q25: float
    median: float
    q75: float
    max: float
    var: float
    selected: bool = False


@dataclass
class PolicyReport:
    q: float
    rows: list[PolicyStats]
    header: list[str] = field(default_factory=list)

    def selected(self) -> PolicyStats | None:
        return next((r for r in self.rows if r.selected), None)

    def row(self, name: str) -> PolicyStats:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


@dataclass(eq=False)
class SampledModels:
    models: list[DiscretePomdp]
    dropped: int
    requested: int


# ---------------------------------------------------------------- model sampling

def _sample_one(model, posterior, seqs, seed, index, em_tol, em_max_iter, em_restarts):
    rng = np.random.default_rng([seed, index])
    obs = sample_observation_function(posterior, rng)
    if seqs is None:
        return model.replace(observation=obs)
    try:
        fit = em_fit(seqs, obs, init=model.transition, tol=em_tol, max_iter=em_max_iter,
                     restarts=em_restarts, rng=rng, terminal=model.terminal)
    except (NonFiniteLikelihood, FloatingPointError) as exc:
        log.warning("sampled model %d dropped: %s", index, exc)
        return None
    return model.replace(transition=fit.transition, observation=obs)


def sample_models(
    model: DiscretePomdp,
    posterior: ObservationPosterior,
    seqs: ObservationSequenceSet | None,
    n_models: int,
    seed: int = 0,
    em_tol: float = 1e-6,
    em_max_iter: int = 500,
    em_restarts: int = 1,
    n_jobs: int = 1,
) -> SampledModels:
    """Draw observation functions from the posterior and refit dynamics by EM for each.

    Model ``m`` depends only on ``(seed, m)``, so the list is identical for
    any ``n_jobs``.  Rewards, discount and horizon come from ``model``.  With
    ``seqs=None`` there is no data to refit on and the transition function
    of ``model`` is kept.
    """
    args = (model, posterior, seqs, seed)
    kw = dict(em_tol=em_tol, em_max_iter=em_max_iter, em_restarts=em_restarts)
    if n_jobs != 1 and n_models > 1:
        from joblib import Parallel, delayed

        out = Parallel(n_jobs=n_jobs)(delayed(_sample_one)(*args, m, **kw) for m in range(n_models))
    else:
        out = [_sample_one(*args, m, **kw) for m in range(n_models)]
    models = [m for m in out if m is not None]
    dropped = n_models - len(models)
    if dropped:
        log.warning("%d of %d sampled models dropped", dropped, n_models)
    return SampledModels(models, dropped, n_models)


# ---------------------------------------------------------------- rollouts

def _initial_observation(belief_model: DiscretePomdp) -> int:
    return int(np.argmax(belief_model.initial_belief))


def _choose(policy: Policy, beliefs, last_obs, u) -> np.ndarray:
    if isinstance(policy, AlphaVectorPolicy):
        return policy.act(beliefs)
    if isinstance(policy, StatePolicy):
        # the MDP baseline treats the classifier output as the state
        return np.asarray(policy.actions)[last_obs]
    if isinstance(policy, FixedPolicy):
        return np.full(len(beliefs), policy.action, dtype=np.int64)
    if isinstance(policy, RandomPolicy):
        return np.minimum((u * policy.n_actions).astype(np.int64), policy.n_actions - 1)
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def rollout_batch(
    eval_model: DiscretePomdp,
    belief_model: DiscretePomdp,
    policy: Policy,
    uniforms: np.ndarray,
    start_state: int | None = None,
    performant: Sequence[int] = frg.PERFORMANT_STATES,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized episodes driven by ``uniforms`` of shape (n, horizon + 1, 3).

    ``uniforms[:, 0, 0]`` draws the start state; step t uses
    ``uniforms[:, t + 1]`` for next state, observation and the random action.
    The state evolves under ``eval_model`` while the belief is tracked under
    ``belief_model``.  Returns (undiscounted returns, mean beta over the
    decision points of each episode).
    """
    n, h1, _ = uniforms.shape
    horizon = h1 - 1
    S = eval_model.n_states
    if belief_model.n_states != S or belief_model.n_actions != eval_model.n_actions:
        raise ValueError("evaluation and belief models differ in dimension")
    T_eval, O_eval, R_eval = eval_model.transition, eval_model.observation, eval_model.reward
    T_bel, O_bel = belief_model.transition, belief_model.observation
    perf = np.zeros(S, dtype=bool)
    perf[list(performant)] = True
    g = eval_model.terminal

    if start_state is None:
        s = sample_rows(np.broadcast_to(eval_model.initial_belief, (n, S)), uniforms[:, 0, 0])
    else:
        s = np.full(n, start_state, dtype=np.int64)
    b = np.tile(belief_model.initial_belief, (n, 1))
    last_obs = np.full(n, _initial_observation(belief_model), dtype=np.int64)
    alive = np.ones(n, dtype=bool) if g is None else s != g
    returns = np.zeros(n)
    beta_sum = np.zeros(n)
    decisions = np.zeros(n)
    for t in range(horizon):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        u = uniforms[idx, t + 1]
        bi = b[idx]
        beta_sum[idx] += bi[:, perf].sum(axis=1)
        decisions[idx] += 1
        a = _choose(policy, bi, last_obs[idx], u[:, 2])
        s_next = sample_rows(T_eval[a, s[idx]], u[:, 0])
        o = sample_rows(O_eval[s_next], u[:, 1])
        returns[idx] += R_eval[s_next]
        pred = np.einsum("ns,nsu->nu", bi, T_bel[a])
        unnorm = pred * O_bel[:, o].T
        z = unnorm.sum(axis=1)
        if np.any(z <= 0.0):
            raise ZeroLikelihood("observation impossible under the belief model during evaluation")
        b[idx] = unnorm / z[:, None]
        s[idx] = s_next
        last_obs[idx] = o
        if g is not None:
            alive[idx[s_next == g]] = False
    beta_mean = np.divide(beta_sum, decisions, out=np.zeros(n), where=decisions > 0)
    return returns, beta_mean


def episode_uniforms(seed: int, policy_index: int, model_index: int, n_episodes: int, horizon: int) -> np.ndarray:
    """Per-episode streams seeded by (seed, policy, model, episode)."""
    out = np.empty((n_episodes, horizon + 1, 3))
    for e in range(n_episodes):
        out[e] = np.random.default_rng([seed, policy_index, model_index, e]).random((horizon + 1, 3))
    return out


def rollout(
    eval_model: DiscretePomdp,
    belief_model: DiscretePomdp,
    policy: Policy,
    horizon: int,
    rng: np.random.Generator,
) -> float:
    """Undiscounted return of one episode."""
    u = rng.random((1, horizon + 1, 3))
    return float(rollout_batch(eval_model, belief_model, policy, u)[0][0])


def _cell(policy, model, belief_model, seed, p_idx, m_idx, n_episodes, horizon):
    u = episode_uniforms(seed, p_idx, m_idx, n_episodes, horizon)
    return rollout_batch(model, belief_model, policy, u)


def return_distribution(
    policy: Policy,
    models: Sequence[DiscretePomdp],
    belief_model: DiscretePomdp,
    n_episodes: int,
    seed: int = 0,
    policy_index: int = 0,
    horizon: int | None = None,
    n_jobs: int = 1,
) -> ReturnSample:
    """``n_episodes`` rollouts per model, pooled in (model, episode) order."""
    if len(models) == 0:
        raise ValueError("no models to evaluate on")
    horizon = belief_model.horizon if horizon is None else horizon
    args = (belief_model, seed, policy_index)
    if n_jobs != 1 and len(models) > 1:
        from joblib import Parallel, delayed

        cells = Parallel(n_jobs=n_jobs)(
            delayed(_cell)(policy, m, *args, i, n_episodes, horizon) for i, m in enumerate(models)
        )
    else:
        cells = [_cell(policy, m, *args, i, n_episodes, horizon) for i, m in enumerate(models)]
    return ReturnSample(
        returns=np.concatenate([c[0] for c in cells]),
        model_index=np.repeat(np.arange(len(models)), n_episodes),
        episode_index=np.tile(np.arange(n_episodes), len(models)),
        beta_mean=np.concatenate([c[1] for c in cells]),
    )


# ---------------------------------------------------------------- risk measures

def value_at_risk(sample, q: float) -> float:
    """q-order quantile with lower interpolation (an actual sample value)."""
    x = np.asarray(getattr(sample, "returns", sample), dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("value at risk of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    return float(np.quantile(x, q, method="lower"))


def describe(name: str, sample, q: float, gamma: float | None = None) -> PolicyStats:
    x = np.asarray(getattr(sample, "returns", sample), dtype=float)
    if x.size == 0:
        raise EmptySample(f"no returns for {name}")
    return PolicyStats(
        name=name,
        gamma=gamma,
        n=int(x.size),
        mean=float(x.mean()),
        std=float(x.std(ddof=1)) if x.size > 1 else 0.0,
        min=float(x.min()),
        q25=value_at_risk(x, 0.25),
        median=value_at_risk(x, 0.5),
        q75=value_at_risk(x, 0.75),
        max=float(x.max()),
        var=value_at_risk(x, q),
    )


def select_policy(
    candidates: Sequence[Candidate],
    models: Sequence[DiscretePomdp],
    belief_model: DiscretePomdp,
    config: SelectionConfig,
    extra: Sequence[Candidate] = (),
) -> tuple[Candidate, PolicyReport, dict[str, ReturnSample]]:
    """Argmax of VaR_q over pooled returns; ties go to the larger discount.

    ``extra`` policies (baselines) are evaluated and reported but never selected.
    """
    if not candidates:
        raise ValueError("no candidate policies")
    samples: dict[str, ReturnSample] = {}
    rows = []
    for p_idx, cand in enumerate(list(candidates) + list(extra)):
        if cand.name in samples:
            raise ValueError(f"duplicate policy name {cand.name!r}")
        samples[cand.name] = return_distribution(
            cand.policy, models, belief_model, config.n_episodes, config.seed,
            p_idx, config.horizon, config.n_jobs,
        )
        rows.append(describe(cand.name, samples[cand.name], config.q, cand.gamma))
    keys = [(rows[i].var, -np.inf if c.gamma is None else c.gamma, -i) for i, c in enumerate(candidates)]
    best = max(range(len(candidates)), key=lambda i: keys[i])
    rows[best].selected = True
    return candidates[best], PolicyReport(config.q, rows), samples


def belief_score_correlation(beta_mean, returns) -> tuple[float, int]:
    """Spearman rank correlation between per-episode mean beta and return."""
    x = np.asarray(beta_mean, dtype=float)
    y = np.asarray(returns, dtype=float)
    if x.shape != y.shape:
        raise ValueError("beta and return series differ in length")
    if x.size < 10:
        raise ValueError("need at least 10 episodes")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateRanks("constant series has no rank correlation")
    rho = stats.spearmanr(x, y).statistic
    return float(rho), int(x.size)


# ---------------------------------------------------------------- report files

_COLUMNS = ("policy", "gamma", "n", "mean", "std", "min", "25%", "50%", "75%", "max", "VaR", "selected")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.4f}"


def _values(r: PolicyStats) -> list:
    return [r.name, r.gamma, r.n, r.mean, r.std, r.min, r.q25, r.median, r.q75, r.max, r.var, r.selected]


def format_report(report: PolicyReport) -> str:
    lines = [f"# {h}" for h in report.header]
    lines.append(f"# VaR order q = {report.q}")
    for r in report.rows:
        tag = " [selected]" if r.selected else ""
        lines.append(f"policy {r.name}{tag}")
        if r.gamma is not None:
            lines.append(f"  gamma   {r.gamma}")
        for label, v in zip(_COLUMNS[2:-1], _values(r)[2:-1]):
            lines.append(f"  {label:<7} {_fmt(v)}")
    return "\n".join(lines) + "\n"


def write_report(report: PolicyReport, path, table_path=None) -> None:
    Path(path).write_text(format_report(report))
    if table_path is not None:
        write_report_table(report, table_path)


def write_report_table(report: PolicyReport, path) -> None:
    lines = [f"# {h}" for h in report.header]
    lines.append("\t".join(_COLUMNS))
    for r in report.rows:
        vals = [r.name, "-" if r.gamma is None else repr(r.gamma)] + [_fmt(v) for v in _values(r)[2:]]
        lines.append("\t".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_report_table(path) -> PolicyReport:
    rows = []
    header = []
    q = 0.5
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            header.append(line[2:])
            continue
        parts = line.split("\t")
        if parts[0] == "policy":
            continue
        name, gamma, n, *nums, sel = parts
        rows.append(PolicyStats(name, None if gamma == "-" else float(gamma), int(n),
                                *map(float, nums), selected=sel == "yes"))
    return PolicyReport(q, rows, header)


def dump_returns(sample: ReturnSample, path) -> None:
    """One return per line, in (model, episode) order."""
    Path(path).write_text("".join(f"{v!r}\n" for v in sample.returns.tolist()))
