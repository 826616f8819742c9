"""End-to-end orchestration: synthetic batches, the learning pipeline and simulation reports."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, frg
from .core import DiscretePomdp
from .evaluation import (
    DEFAULT_GAMMAS,
    Candidate,
    FixedPolicy,
    PolicyReport,
    RandomPolicy,
    SelectionConfig,
    TooManyDropped,
    describe,
    return_distribution,
    sample_models,
    select_policy,
    write_report,
)
from .hmm import (
    ObservationSequenceSet,
    assemble_pomdp,
    classify_sequences,
    em_fit,
    mdp_from_sequences,
    write_loglik_table,
    write_sequences,
)
from .modelfile import write_model
from .observation import (
    ClassifierConfig,
    Mission,
    ObservationPosterior,
    TrajectoryBatch,
    confusion_counts,
    dirichlet_posterior,
    estimate_rewards,
    label_steps,
    read_batch,
    split_by_quartiles,
    train_classifiers,
    trivial_observation_function,
    write_confusion,
)
from .solver import SolverConfig, solve_mdp_vi, solve_pomdp, write_policy

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


# ---------------------------------------------------------------- synthetic batch

@dataclass
class SyntheticBatch:
    batch: TrajectoryBatch
    hidden_states: list[np.ndarray]


def timeout_dynamics(model: DiscretePomdp) -> np.ndarray:
    """Transitions with the game-over column removed, for fixed-length missions."""
    T = np.array(model.transition)
    g = model.terminal
    T[:, :, g] = 0.0
    T[:, g, :] = 0.0
    T[:, g, g] = 1.0
    return T / T.sum(axis=-1, keepdims=True)


def generate_batch(
    model: DiscretePomdp | None = None,
    n_missions: int = 600,
    missions_per_participant: int = 4,
    mission_steps: int = frg.DEFAULT_HORIZON,
    n_features: int = 6,
    separation: float = 4.0,
    participant_spread: float = 0.3,
    seed: int = 0,
) -> SyntheticBatch:
    """Random-policy missions of the fixture world written as a trajectory batch.

    Every mission lasts ``mission_steps`` steps under the model's dynamics
    without early game-over; ``g`` is what the learner appends at the end.
    The first two features shift by ``separation`` (in noise units) with the
    hidden performance bit, the rest are noise; every participant carries a
    small feature offset.  Fires per step are Bernoulli with the state reward.
    """
    model = model or frg.build_frg_fixture()[0]
    if n_features < 2:
        raise ValueError("need at least two features")
    if np.any(model.reward > 1.0):
        raise ValueError("Bernoulli fires need rewards in [0, 1]")
    rng = np.random.default_rng(seed)
    T = timeout_dynamics(model)
    perf = np.zeros(model.n_states, dtype=bool)
    perf[list(frg.PERFORMANT_STATES)] = True
    n_participants = -(-n_missions // missions_per_participant)
    offsets = rng.normal(0.0, participant_spread, size=(n_participants, n_features))
    missions, hidden = [], []
    for i in range(n_missions):
        pid = i // missions_per_participant
        s = int(rng.choice(model.n_states, p=model.initial_belief))
        states, acts = [], []
        for _ in range(mission_steps):
            a = int(rng.integers(model.n_actions))
            states.append(s)
            acts.append(a)
            s = int(rng.choice(model.n_states, p=T[a, s]))
        states = np.array(states)
        bit = perf[states].astype(float)
        feats = rng.normal(size=(mission_steps, n_features)) + offsets[pid]
        feats[:, :2] += separation * bit[:, None]
        fires = (rng.random(mission_steps) < model.reward[states]).astype(float)
        missions.append(Mission(
            mission_id=f"M{i:04d}",
            participant_id=f"P{pid:03d}",
            score=float(fires.sum()),
            steps=np.arange(mission_steps),
            configs=np.array([frg.config_of_state(x) for x in states]),
            actions=np.array(acts),
            fires=fires,
            features=np.round(feats, 6),
        ))
        hidden.append(states)
    return SyntheticBatch(TrajectoryBatch(missions), hidden)


# ---------------------------------------------------------------- configuration

@dataclass
class PipelineConfig:
    batch: Path | None = None
    out_dir: Path = Path("out")
    gammas: tuple[float, ...] = DEFAULT_GAMMAS
    n_models: int = 200
    n_episodes: int = 200
    q: float = 0.5
    horizon: int = frg.DEFAULT_HORIZON
    discount: float = frg.DEFAULT_DISCOUNT
    alpha0: float = 1.0
    seed: int = 0
    n_jobs: int = 1
    em_restarts: int = 5
    em_tol: float = 1e-6
    em_max_iter: int = 500
    refit_restarts: int = 1
    belief_count: int = 500
    solver_max_iter: int = 200
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    mdp_baseline: bool = True

    def selection(self) -> SelectionConfig:
        return SelectionConfig(
            gammas=self.gammas, n_models=self.n_models, n_episodes=self.n_episodes, q=self.q,
            horizon=self.horizon, seed=self.seed, em_tol=self.em_tol, em_max_iter=self.em_max_iter,
            em_restarts=self.refit_restarts, n_jobs=self.n_jobs,
        )

    def solver(self) -> SolverConfig:
        return SolverConfig(belief_count=self.belief_count, max_iter=self.solver_max_iter, seed=self.seed)

    def digest(self) -> str:
        """Hash of every setting that shapes results (paths and job count excluded)."""
        d = dataclasses.asdict(self)
        for key in ("batch", "out_dir", "n_jobs"):
            d.pop(key)
        d["classifier"].pop("n_jobs")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def artifact_header(seed: int, digest: str, *extra: str) -> list[str]:
    return [f"riskpomdp {__version__} seed={seed} config={digest}", *extra]


def config_digest(**settings) -> str:
    blob = json.dumps(settings, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- pipeline

def baseline_candidates() -> list[Candidate]:
    return [
        Candidate("random", RandomPolicy()),
        Candidate("fixed-auto-alarms", FixedPolicy(frg.ACTIONS.index("auto_on"))),
        Candidate("fixed-manual-alarms", FixedPolicy(frg.ACTIONS.index("manual_on"))),
    ]


def solve_candidates(model: DiscretePomdp, gammas: Sequence[float], solver: SolverConfig, n_jobs: int = 1) -> list[Candidate]:
    if n_jobs != 1 and len(gammas) > 1:
        from joblib import Parallel, delayed

        policies = Parallel(n_jobs=n_jobs)(delayed(solve_pomdp)(model, g, solver) for g in gammas)
    else:
        policies = [solve_pomdp(model, g, solver) for g in gammas]
    return [Candidate(f"pomdp-g{g}", p, g) for g, p in zip(gammas, policies)]


@dataclass
class PipelineResult:
    model: DiscretePomdp
    posterior: ObservationPosterior
    counts: np.ndarray
    sequences: ObservationSequenceSet
    candidates: list[Candidate]
    selected: Candidate
    report: PolicyReport
    mdp_report: PolicyReport | None
    artifacts: dict[str, Path]
    dropped_models: int


def _stage(name, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """split -> label -> train -> confusion -> posterior -> EM -> assemble -> solve -> select."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config.digest()
    header = artifact_header(config.seed, digest)
    art: dict[str, Path] = {}

    batch = _stage("read", read_batch, config.batch)
    split = _stage("split", split_by_quartiles, batch)
    labeled = _stage("label", label_steps, split)
    clf_cfg = dataclasses.replace(config.classifier, seed=config.seed, n_jobs=config.n_jobs)
    classifier = _stage("train", train_classifiers, labeled, clf_cfg)
    counts = _stage("confusion", confusion_counts, classifier)
    art["confusion"] = out / "confusion.txt"
    write_confusion(counts, art["confusion"])
    posterior = _stage("posterior", dirichlet_posterior, counts, config.alpha0)
    obs_table = trivial_observation_function(counts)

    seqs = _stage("classify", classify_sequences, classifier, split.mid_missions)
    art["sequences"] = out / "sequences.txt"
    write_sequences(seqs, art["sequences"], header)
    fit = _stage("em", em_fit, seqs, obs_table, tol=config.em_tol, max_iter=config.em_max_iter,
                 restarts=config.em_restarts, rng=np.random.default_rng([config.seed, 1]), n_jobs=config.n_jobs)
    art["loglik"] = out / "em_loglik.tsv"
    write_loglik_table(fit, art["loglik"])
    predicted = [classifier.predict_mission(m) for m in batch.missions]
    rewards = _stage("rewards", estimate_rewards, batch, predicted)
    model = _stage("assemble", assemble_pomdp, fit, obs_table, rewards, config.discount, config.horizon)
    art["model"] = out / "model.txt"
    write_model(model, art["model"], header)

    candidates = _stage("solve", solve_candidates, model, config.gammas, config.solver(), config.n_jobs)
    for c in candidates:
        path = out / f"policy_g{c.gamma}.txt"
        write_policy(c.policy, path, header + [f"gamma={c.gamma}"])
        art[c.name] = path

    sel_cfg = config.selection()
    sampled = _stage("sample", sample_models, model, posterior, seqs, config.n_models, config.seed,
                     config.em_tol, config.em_max_iter, config.refit_restarts, config.n_jobs)
    if len(sampled.models) < 0.9 * config.n_models:
        raise StageError("sample", TooManyDropped(f"{sampled.dropped} of {config.n_models} models dropped"))
    best, report, _ = _stage("select", select_policy, candidates, sampled.models, model, sel_cfg,
                             extra=baseline_candidates())
    report.header = header + [f"sampled models: {len(sampled.models)} (dropped {sampled.dropped})"]
    art["report"] = out / "report.txt"
    art["report_table"] = out / "report.tsv"
    write_report(report, art["report"], art["report_table"])
    art["selected"] = out / "policy_selected.txt"
    write_policy(best.policy, art["selected"], header + [f"selected {best.name}"])

    mdp_report = None
    if config.mdp_baseline:
        mdp = mdp_from_sequences(seqs, config.alpha0, rewards, config.discount, config.horizon)
        mdp_cands = [Candidate(f"mdp-g{g}", solve_mdp_vi(mdp, g), g) for g in config.gammas]
        _, mdp_report, _ = _stage("select-mdp", select_policy, mdp_cands, sampled.models, model, sel_cfg)
        mdp_report.header = header + ["MDP baseline over the same sampled models"]
        art["mdp_report"] = out / "mdp_report.txt"
        write_report(mdp_report, art["mdp_report"], out / "mdp_report.tsv")
    return PipelineResult(model, posterior, counts, seqs, candidates, best, report, mdp_report, art, sampled.dropped)


def simulate_report(
    model: DiscretePomdp,
    policies: Sequence[Candidate],
    config: SelectionConfig,
    posterior: ObservationPosterior | None = None,
    seqs: ObservationSequenceSet | None = None,
    builtins: bool = True,
) -> PolicyReport:
    """Return statistics per policy over sampled models, or over ``model`` alone."""
    if posterior is not None:
        models = sample_models(model, posterior, seqs, config.n_models, config.seed,
                               config.em_tol, config.em_max_iter, config.em_restarts, config.n_jobs).models
    else:
        models = [model]
    cands = list(policies) + (baseline_candidates() if builtins else [])
    rows = []
    for p_idx, c in enumerate(cands):
        sample = return_distribution(c.policy, models, model, config.n_episodes, config.seed,
                                     p_idx, config.horizon, config.n_jobs)
        rows.append(describe(c.name, sample, config.q, c.gamma))
    return PolicyReport(config.q, rows)


def fixture_counts_posterior(alpha0: float = 1.0) -> tuple[np.ndarray, ObservationPosterior]:
    counts = frg.confusion_array()
    return counts, dirichlet_posterior(counts, alpha0)
