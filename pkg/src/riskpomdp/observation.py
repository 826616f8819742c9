"""From a trajectory batch to classifiers, confusion counts and observation models."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import frg

log = logging.getLogger(__name__)

NON_PERFORMANT, PERFORMANT = 0, 1


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


class TooFewMissions(ValueError):
    pass


class MissingClass(ValueError):
    pass


class SingleGroup(ValueError):
    pass


class EmptyRow(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(eq=False)
class Mission:
    mission_id: str
    participant_id: str
    score: float
    steps: np.ndarray
    configs: np.ndarray
    actions: np.ndarray
    fires: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.steps)


@dataclass(eq=False)
class TrajectoryBatch:
    missions: list[Mission]
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        dims = {m.features.shape[1] for m in self.missions}
        if len(dims) > 1:
            raise DimensionMismatch(f"feature dimensions differ across missions: {sorted(dims)}")
        for m in self.missions:
            if len(m) == 0:
                raise ValueError(f"mission {m.mission_id} has no steps")
            if m.score < 0:
                raise ValueError(f"mission {m.mission_id} has negative score")
        if not self.feature_names and self.missions:
            self.feature_names = tuple(f"f{i + 1}" for i in range(self.n_features))

    @property
    def n_features(self) -> int:
        return self.missions[0].features.shape[1] if self.missions else 0

    def __len__(self):
        return len(self.missions)


@dataclass(eq=False)
class QuartileSplit:
    low_missions: list[Mission]
    mid_missions: list[Mission]
    high_missions: list[Mission]
    q1_threshold: float
    q3_threshold: float


@dataclass(eq=False)
class LabeledSteps:
    features: np.ndarray
    configs: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    mission_ids: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "LabeledSteps":
        return LabeledSteps(
            self.features[mask], self.configs[mask], self.labels[mask],
            self.groups[mask], self.mission_ids[mask],
        )


# ---------------------------------------------------------------- batch file

BATCH_COLUMNS = ("mission_id", "participant_id", "step", "mode", "alarm", "action", "fires", "score")


def read_batch(path) -> TrajectoryBatch:
    """Parse a comma-separated trajectory batch (one row per step)."""
    path = Path(path)
    rows: dict[str, dict] = {}
    order: list[str] = []
    with path.open() as fh:
        header = fh.readline().strip().split(",")
        if tuple(header[: len(BATCH_COLUMNS)]) != BATCH_COLUMNS:
            raise ParseError(path, 1, f"expected header starting with {','.join(BATCH_COLUMNS)}")
        feature_names = tuple(header[len(BATCH_COLUMNS):])
        if not feature_names:
            raise ParseError(path, 1, "no feature columns")
        width = len(header)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != width:
                raise ParseError(path, lineno, f"expected {width} fields, got {len(cells)}")
            mid, pid, step, mode, alarm, action, fires, score = cells[:8]
            try:
                c = frg.config_index(mode, alarm)
                a = frg.ACTIONS.index(action) if action in frg.ACTIONS else None
                if a is None:
                    raise ValueError(f"unknown action {action!r}")
                rec = (int(step), c, a, float(fires), [float(x) for x in cells[8:]])
                score_v = float(score)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if rec[3] < 0:
                raise ParseError(path, lineno, "negative fires count")
            entry = rows.get(mid)
            if entry is None:
                entry = rows[mid] = {"pid": pid, "score": score_v, "recs": []}
                order.append(mid)
            elif entry["pid"] != pid or entry["score"] != score_v:
                raise ParseError(path, lineno, f"inconsistent participant/score for mission {mid}")
            entry["recs"].append(rec)
    missions = []
    for mid in order:
        e = rows[mid]
        recs = sorted(e["recs"], key=lambda r: r[0])
        missions.append(Mission(
            mission_id=mid,
            participant_id=e["pid"],
            score=e["score"],
            steps=np.array([r[0] for r in recs], dtype=np.int64),
            configs=np.array([r[1] for r in recs], dtype=np.int64),
            actions=np.array([r[2] for r in recs], dtype=np.int64),
            fires=np.array([r[3] for r in recs]),
            features=np.array([r[4] for r in recs], dtype=float),
        ))
    return TrajectoryBatch(missions, feature_names)


def write_batch(batch: TrajectoryBatch, path) -> None:
    with Path(path).open("w") as fh:
        fh.write(",".join(BATCH_COLUMNS + tuple(batch.feature_names)) + "\n")
        for m in batch.missions:
            for i in range(len(m)):
                mode, alarm = frg.CONFIGS[m.configs[i]]
                feats = ",".join(repr(float(x)) for x in m.features[i])
                fh.write(
                    f"{m.mission_id},{m.participant_id},{m.steps[i]},{mode},{alarm},"
                    f"{frg.ACTIONS[m.actions[i]]},{_num(m.fires[i])},{_num(m.score)},{feats}\n"
                )


def _num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


# ---------------------------------------------------------------- data split

def split_by_quartiles(batch: TrajectoryBatch) -> QuartileSplit:
    """Low (score < Q1), high (score > Q3), everything else mid.

    Quartiles use linear interpolation between order statistics.  A score
    equal to a threshold is ambiguous and goes to mid.
    """
    if len(batch) < 4:
        raise TooFewMissions(f"need at least 4 missions, got {len(batch)}")
    scores = np.array([m.score for m in batch.missions])
    q1, q3 = np.quantile(scores, [0.25, 0.75], method="linear")
    low, mid, high = [], [], []
    for m, sc in zip(batch.missions, scores):
        if sc < q1:
            low.append(m)
        elif sc > q3:
            high.append(m)
        else:
            mid.append(m)
    return QuartileSplit(low, mid, high, float(q1), float(q3))


def label_steps(split: QuartileSplit) -> LabeledSteps:
    feats, cfgs, labels, groups, mids = [], [], [], [], []
    for missions, label in ((split.low_missions, NON_PERFORMANT), (split.high_missions, PERFORMANT)):
        for m in missions:
            n = len(m)
            feats.append(m.features)
            cfgs.append(m.configs)
            labels.append(np.full(n, label, dtype=np.int64))
            groups.append(np.array([m.participant_id] * n, dtype=object))
            mids.append(np.array([m.mission_id] * n, dtype=object))
    if not feats:
        return LabeledSteps(np.zeros((0, 0)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                            np.zeros(0, object), np.zeros(0, object))
    return LabeledSteps(
        np.concatenate(feats), np.concatenate(cfgs), np.concatenate(labels),
        np.concatenate(groups), np.concatenate(mids),
    )


# ---------------------------------------------------------------- classifiers

@dataclass
class ClassifierConfig:
    # hyperparameter grid; None depth means fully grown trees
    n_estimators: Sequence[int] = (100, 300)
    max_depth: Sequence[int | None] = (None, 8)
    min_samples_leaf: Sequence[int] = (1, 5)
    cv_splits: int = 10
    validation_size: float = 0.2
    test_size: float = 0.2
    seed: int = 0
    n_jobs: int = 1

    def grid(self) -> dict:
        return {
            "n_estimators": list(self.n_estimators),
            "max_depth": list(self.max_depth),
            "min_samples_leaf": list(self.min_samples_leaf),
        }


@dataclass(eq=False)
class PerformanceClassifier:
    """One extra-trees ensemble per visible configuration."""

    ensembles: list
    n_features: int
    params: list[dict]
    cv_scores: list[float]
    heldout: LabeledSteps | None = None
    train_groups: frozenset = field(default_factory=frozenset)
    test_groups: frozenset = field(default_factory=frozenset)

    def predict(self, features: np.ndarray, configs: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise DimensionMismatch(
                f"expected {self.n_features} features, got shape {features.shape}"
            )
        out = np.zeros(len(features), dtype=np.int64)
        for c, est in enumerate(self.ensembles):
            sel = configs == c
            if sel.any():
                out[sel] = est.predict(features[sel])
        return out

    def predict_mission(self, m: Mission) -> np.ndarray:
        return self.predict(m.features, m.configs)


def group_holdout(groups: np.ndarray, test_size: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (train, test) masks with no participant on both sides."""
    from sklearn.model_selection import GroupShuffleSplit

    gss = GroupShuffleSplit(n_splits=1, test_size=test_size, random_state=seed)
    train_idx, test_idx = next(gss.split(np.zeros(len(groups)), groups=groups))
    train = np.zeros(len(groups), bool)
    train[train_idx] = True
    return train, ~train


def cv_folds(groups: np.ndarray, n_splits: int, validation_size: float, seed: int):
    from sklearn.model_selection import GroupShuffleSplit

    gss = GroupShuffleSplit(n_splits=n_splits, test_size=validation_size, random_state=seed)
    return list(gss.split(np.zeros(len(groups)), groups=groups))


def train_classifiers(labeled: LabeledSteps, config: ClassifierConfig | None = None) -> PerformanceClassifier:
    """Fit four extra-trees ensembles with participant-grouped model selection.

    A group-disjoint test partition is held out first; hyperparameters are
    picked on the remainder by grouped shuffle-split CV on balanced accuracy.
    """
    from sklearn.ensemble import ExtraTreesClassifier
    from sklearn.model_selection import GridSearchCV

    config = config or ClassifierConfig()
    if len(set(labeled.groups)) < 2:
        raise SingleGroup("need at least two participants for grouped validation")
    for c, cfg in enumerate(frg.CONFIGS):
        present = set(labeled.labels[labeled.configs == c])
        if present != {NON_PERFORMANT, PERFORMANT}:
            raise MissingClass(f"configuration {cfg} lacks a class (present: {sorted(present)})")

    train_mask, test_mask = group_holdout(labeled.groups, config.test_size, config.seed)
    train = labeled.subset(train_mask)
    ensembles, params, scores = [], [], []
    for c, cfg in enumerate(frg.CONFIGS):
        sub = train.subset(train.configs == c)
        if len(set(sub.labels)) < 2:
            raise MissingClass(f"configuration {cfg} lacks a class after holding out test groups")
        if len(set(sub.groups)) < 2:
            raise SingleGroup(f"configuration {cfg} has a single training participant")
        est = ExtraTreesClassifier(max_features="sqrt", random_state=config.seed + c)
        folds = cv_folds(sub.groups, config.cv_splits, config.validation_size, config.seed + c)
        search = GridSearchCV(
            est, config.grid(), scoring="balanced_accuracy", cv=folds,
            n_jobs=config.n_jobs, refit=True, error_score="raise",
        )
        search.fit(sub.features, sub.labels)
        ensembles.append(search.best_estimator_)
        params.append(dict(search.best_params_))
        scores.append(float(search.best_score_))
        log.info("classifier %s/%s: %s (cv balanced acc %.3f)", *cfg, search.best_params_, search.best_score_)
    return PerformanceClassifier(
        ensembles=ensembles,
        n_features=labeled.features.shape[1],
        params=params,
        cv_scores=scores,
        heldout=labeled.subset(test_mask),
        train_groups=frozenset(train.groups),
        test_groups=frozenset(labeled.groups[test_mask]),
    )


# ---------------------------------------------------------------- confusion

def confusion_counts(classifier: PerformanceClassifier, heldout: LabeledSteps | None = None) -> np.ndarray:
    """(config, true, predicted) counts on the held-out steps."""
    heldout = heldout if heldout is not None else classifier.heldout
    pred = classifier.predict(heldout.features, heldout.configs)
    counts = np.zeros((len(frg.CONFIGS), 2, 2), dtype=np.int64)
    np.add.at(counts, (heldout.configs, heldout.labels, pred), 1)
    for c, cfg in enumerate(frg.CONFIGS):
        for t in (NON_PERFORMANT, PERFORMANT):
            if counts[c, t].sum() == 0:
                raise EmptyRow(f"configuration {cfg}: no held-out steps with true label {t}")
    return counts


def row_normalize(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    sums = counts.sum(axis=-1, keepdims=True)
    if np.any(sums == 0):
        raise EmptyRow("confusion matrix has an empty row")
    return counts / sums


def embed_observation(perf_rows: np.ndarray) -> np.ndarray:
    """Expand per-configuration 2x2 rows into the full state x observation table.

    Visible components and ``g`` are observed exactly; only the performance
    bit is noisy.
    """
    O = np.zeros((frg.N_STATES, frg.N_STATES))
    for c, (np_s, p_s) in enumerate(frg.CONFIG_STATES):
        for t, s in enumerate((np_s, p_s)):
            O[s, np_s] = perf_rows[c, t, NON_PERFORMANT]
            O[s, p_s] = perf_rows[c, t, PERFORMANT]
    O[frg.TERMINAL, frg.TERMINAL] = 1.0
    return O


def trivial_observation_function(counts: np.ndarray) -> np.ndarray:
    return embed_observation(row_normalize(counts))


@dataclass(frozen=True, eq=False)
class ObservationPosterior:
    """Dirichlet parameters, shape (config, true label, predicted label)."""

    alpha: np.ndarray

    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum(axis=-1, keepdims=True)

    def mean_observation_function(self) -> np.ndarray:
        return embed_observation(self.mean())

    def scaled(self, factor: float) -> "ObservationPosterior":
        return ObservationPosterior(self.alpha * factor)


def dirichlet_posterior(counts: np.ndarray, alpha0: float = 1.0) -> ObservationPosterior:
    if not alpha0 > 0:
        raise ValueError("prior concentration must be positive")
    return ObservationPosterior(np.asarray(counts, dtype=float) + alpha0)


def sample_observation_function(posterior: ObservationPosterior, rng: np.random.Generator) -> np.ndarray:
    rows = np.empty_like(posterior.alpha)
    for c in range(rows.shape[0]):
        for t in range(2):
            rows[c, t] = rng.dirichlet(posterior.alpha[c, t])
    return embed_observation(rows)


# ---------------------------------------------------------------- confusion file

_CONF_RE = re.compile(
    r"^CONFIG\s+(\w+)\s+(\w+)\s*:\s*(\d+)\s+(\d+)\s*/\s*(\d+)\s+(\d+)\s*$"
)


def write_confusion(counts: np.ndarray, path) -> None:
    lines = []
    for c, (mode, alarm) in enumerate(frg.CONFIGS):
        (a, b), (d, e) = counts[c]
        lines.append(f"CONFIG {mode} {alarm}: {a} {b} / {d} {e}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_confusion(path) -> np.ndarray:
    counts = np.full((len(frg.CONFIGS), 2, 2), -1, dtype=np.int64)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _CONF_RE.match(line.strip())
        if not m:
            raise ParseError(path, lineno, f"cannot parse {line!r}")
        try:
            c = frg.config_index(m.group(1), m.group(2))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        counts[c] = np.array([int(x) for x in m.groups()[2:]]).reshape(2, 2)
    if np.any(counts < 0):
        raise ParseError(path, 0, "missing configuration lines")
    return counts


# ---------------------------------------------------------------- rewards

def assign_states(configs: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    pairs = np.array(frg.CONFIG_STATES)
    return pairs[configs, predicted]


def estimate_rewards(batch: TrajectoryBatch, predicted: Iterable[np.ndarray]) -> np.ndarray:
    """Mean fires per step over the steps assigned to each state; g gets 0."""
    total = np.zeros(frg.N_STATES)
    visits = np.zeros(frg.N_STATES)
    for m, pred in zip(batch.missions, predicted):
        s = assign_states(m.configs, np.asarray(pred))
        np.add.at(total, s, m.fires)
        np.add.at(visits, s, 1)
    reward = np.zeros(frg.N_STATES)
    for s in range(frg.N_STATES):
        if s == frg.TERMINAL:
            continue
        if visits[s] == 0:
            log.warning("state %s never visited; reward set to 0", frg.STATES[s])
        else:
            reward[s] = total[s] / visits[s]
    return reward
