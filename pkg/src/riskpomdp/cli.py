"""Command-line entry point: ``riskpomdp <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import frg
from .evaluation import (
    DEFAULT_GAMMAS,
    Candidate,
    SelectionConfig,
    dump_returns,
    sample_models,
    select_policy,
    write_report,
)
from .hmm import (
    assemble_pomdp,
    classify_sequences,
    em_fit,
    read_sequences,
    write_loglik_table,
    write_sequences,
)
from .modelfile import export_cassandra, read_model, write_model
from .observation import (
    ClassifierConfig,
    confusion_counts,
    dirichlet_posterior,
    estimate_rewards,
    label_steps,
    read_batch,
    read_confusion,
    split_by_quartiles,
    train_classifiers,
    trivial_observation_function,
    write_batch,
    write_confusion,
)
from .pipeline import (
    PipelineConfig,
    StageError,
    artifact_header,
    baseline_candidates,
    config_digest,
    generate_batch,
    run_pipeline,
    simulate_report,
    solve_candidates,
)
from .runtime import Terminated, controller_init, controller_step, export_trace, extract_thresholds
from .solver import SolverConfig, read_policy, write_policy

log = logging.getLogger("riskpomdp")

# arguments that never change results
_NEUTRAL = {"func", "command", "jobs", "out", "batch", "model", "policy", "policies", "confusion",
            "sequences", "classifier", "trace", "dump_returns", "verbose"}


def _header(args, *extra: str) -> list[str]:
    settings = {k: v for k, v in vars(args).items() if k not in _NEUTRAL}
    return artifact_header(args.seed, config_digest(**settings), *extra)


def _mkdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _classifier_config(args) -> ClassifierConfig:
    return ClassifierConfig(
        n_estimators=tuple(args.trees), max_depth=tuple(None if d == 0 else d for d in args.max_depth),
        min_samples_leaf=tuple(args.min_leaf), cv_splits=args.cv_splits, seed=args.seed, n_jobs=args.jobs,
    )


def _selection(args) -> SelectionConfig:
    return SelectionConfig(
        n_models=args.n_models, n_episodes=args.n_episodes, q=args.quantile, horizon=args.horizon,
        seed=args.seed, n_jobs=args.jobs,
    )


def _load_candidates(paths) -> list[Candidate]:
    out = []
    for p in paths:
        pol = read_policy(p)
        out.append(Candidate(Path(p).stem, pol, pol.discount))
    return out


def _load_model(args):
    model = read_model(args.model) if args.model else frg.build_frg_fixture()[0]
    if args.horizon != model.horizon:
        model = model.replace(horizon=args.horizon)
    return model


# ---------------------------------------------------------------- commands

def cmd_fixture(args) -> int:
    out = _mkdir(args.out)
    model, _ = frg.build_frg_fixture(args.discount, args.horizon, args.alpha0)
    head = _header(args, "trivial POMDP fixture")
    write_model(model, out / "model.txt", head)
    write_confusion(frg.confusion_array(), out / "confusion.txt")
    print(out / "model.txt")
    return 0


def cmd_gen_batch(args) -> int:
    model = _load_model(args)
    syn = generate_batch(model, n_missions=args.n_missions, seed=args.seed)
    write_batch(syn.batch, args.out)
    print(args.out)
    return 0


def cmd_split(args) -> int:
    split = split_by_quartiles(read_batch(args.batch))
    lines = [f"# {h}" for h in _header(args)]
    lines.append(f"Q1 {split.q1_threshold!r}")
    lines.append(f"Q3 {split.q3_threshold!r}")
    for name, ms in (("low", split.low_missions), ("mid", split.mid_missions), ("high", split.high_missions)):
        lines.append(f"{name} " + " ".join(m.mission_id for m in ms))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(args.out)
    return 0


def cmd_train(args) -> int:
    import joblib

    out = _mkdir(args.out)
    batch = read_batch(args.batch)
    clf = train_classifiers(label_steps(split_by_quartiles(batch)), _classifier_config(args))
    counts = confusion_counts(clf)
    write_confusion(counts, out / "confusion.txt")
    joblib.dump(clf, out / "classifier.joblib")
    lines = [f"# {h}" for h in _header(args)]
    for cfg, params, score in zip(frg.CONFIGS, clf.params, clf.cv_scores):
        lines.append(f"{cfg[0]}/{cfg[1]} cv_balanced_accuracy={score:.4f} params={params}")
    (out / "classifier.txt").write_text("\n".join(lines) + "\n")
    print(out / "confusion.txt")
    return 0


def cmd_build_model(args) -> int:
    import joblib

    out = _mkdir(args.out)
    batch = read_batch(args.batch)
    clf = joblib.load(args.classifier)
    counts = read_confusion(args.confusion) if args.confusion else confusion_counts(clf)
    obs = trivial_observation_function(counts)
    split = split_by_quartiles(batch)
    seqs = classify_sequences(clf, split.mid_missions)
    head = _header(args)
    write_sequences(seqs, out / "sequences.txt", head)
    fit = em_fit(seqs, obs, restarts=args.restarts, rng=np.random.default_rng([args.seed, 1]), n_jobs=args.jobs)
    write_loglik_table(fit, out / "em_loglik.tsv")
    rewards = estimate_rewards(batch, [clf.predict_mission(m) for m in batch.missions])
    model = assemble_pomdp(fit, obs, rewards, args.discount, args.horizon)
    write_model(model, out / "model.txt", head)
    print(out / "model.txt")
    return 0


def cmd_solve(args) -> int:
    out = _mkdir(args.out)
    model = _load_model(args)
    cfg = SolverConfig(belief_count=args.belief_count, max_iter=args.max_iter, seed=args.seed)
    for c in solve_candidates(model, args.gamma, cfg, args.jobs):
        path = out / f"policy_g{c.gamma}.txt"
        write_policy(c.policy, path, _header(args, f"gamma={c.gamma}"))
        print(path)
    return 0


def _sampled(args, model):
    counts = read_confusion(args.confusion) if args.confusion else frg.confusion_array()
    posterior = dirichlet_posterior(counts, args.alpha0)
    seqs = read_sequences(args.sequences) if args.sequences else None
    return sample_models(model, posterior, seqs, args.n_models, args.seed, n_jobs=args.jobs)


def cmd_select(args) -> int:
    out = _mkdir(args.out)
    model = _load_model(args)
    cands = _load_candidates(args.policies)
    sampled = _sampled(args, model)
    if len(sampled.models) < 0.9 * args.n_models:
        log.error("%d of %d sampled models dropped", sampled.dropped, args.n_models)
        return 2
    best, report, samples = select_policy(cands, sampled.models, model, _selection(args), extra=baseline_candidates())
    report.header = _header(args, f"sampled models: {len(sampled.models)} (dropped {sampled.dropped})")
    write_report(report, out / "report.txt", out / "report.tsv")
    write_policy(best.policy, out / "policy_selected.txt", _header(args, f"selected {best.name}"))
    if args.dump_returns:
        d = _mkdir(args.dump_returns)
        for name, s in samples.items():
            dump_returns(s, d / f"{name}.txt")
    print(f"selected {best.name}")
    return 0


def cmd_simulate(args) -> int:
    model = _load_model(args)
    cands = _load_candidates(args.policies or [])
    cfg = _selection(args)
    if args.single_model:
        report = simulate_report(model, cands, cfg)
    else:
        counts = read_confusion(args.confusion) if args.confusion else frg.confusion_array()
        seqs = read_sequences(args.sequences) if args.sequences else None
        report = simulate_report(model, cands, cfg, dirichlet_posterior(counts, args.alpha0), seqs)
    report.header = _header(args)
    out = _mkdir(args.out)
    write_report(report, out / "report.txt", out / "report.tsv")
    print(out / "report.txt")
    return 0


def cmd_control(args) -> int:
    model = _load_model(args)
    state = controller_init(model, read_policy(args.policy))
    out = sys.stdout
    out.write(model.actions[state.last_action] + "\n")
    out.flush()
    for line in sys.stdin:
        label = line.strip()
        if not label:
            continue
        try:
            a, beta = controller_step(state, label)
        except Terminated:
            log.error("observation after game over ignored")
            break
        out.write(("-" if a is None else model.actions[a]) + f"\t{beta:.6f}\n")
        out.flush()
        if state.terminated:
            break
    if args.trace:
        export_trace(state, args.trace)
    return 0


def cmd_thresholds(args) -> int:
    model = _load_model(args)
    table = extract_thresholds(model, read_policy(args.policy), args.resolution)
    sys.stdout.write(table.format())
    return 0


def cmd_export(args) -> int:
    model = _load_model(args)
    if args.format != "cassandra":
        raise SystemExit(f"unsupported format {args.format}")
    export_cassandra(model, args.out)
    print(args.out)
    return 0


def cmd_run(args) -> int:
    cfg = PipelineConfig(
        batch=Path(args.batch), out_dir=Path(args.out), gammas=tuple(args.gamma), n_models=args.n_models,
        n_episodes=args.n_episodes, q=args.quantile, horizon=args.horizon, discount=args.discount,
        alpha0=args.alpha0, seed=args.seed, n_jobs=args.jobs, classifier=_classifier_config(args),
    )
    try:
        res = run_pipeline(cfg)
    except StageError as exc:
        log.error("%s", exc)
        return 1
    print(f"selected {res.selected.name}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="parallel workers (-1 = all cores)")
    common.add_argument("--horizon", type=int, default=frg.DEFAULT_HORIZON)
    common.add_argument("--alpha0", type=float, default=1.0, help="Dirichlet prior concentration")
    common.add_argument("-v", "--verbose", action="store_true")

    model_arg = argparse.ArgumentParser(add_help=False)
    model_arg.add_argument("--model", help="native model file (default: built-in fixture)")

    sel = argparse.ArgumentParser(add_help=False)
    sel.add_argument("--n-models", type=int, default=200)
    sel.add_argument("--n-episodes", type=int, default=200)
    sel.add_argument("--quantile", type=float, default=0.5)
    sel.add_argument("--confusion", help="confusion counts file (default: fixture counts)")
    sel.add_argument("--sequences", help="observation sequences for per-model EM refits")

    clf = argparse.ArgumentParser(add_help=False)
    clf.add_argument("--trees", type=int, nargs="+", default=[100, 300])
    clf.add_argument("--max-depth", type=int, nargs="+", default=[0, 8], help="0 = unlimited")
    clf.add_argument("--min-leaf", type=int, nargs="+", default=[1, 5])
    clf.add_argument("--cv-splits", type=int, default=10)

    p = argparse.ArgumentParser(prog="riskpomdp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fixture", parents=[common], help="write the trivial POMDP fixture")
    s.add_argument("--out", required=True)
    s.add_argument("--discount", type=float, default=frg.DEFAULT_DISCOUNT)
    s.set_defaults(func=cmd_fixture)

    s = sub.add_parser("gen-batch", parents=[common, model_arg], help="synthetic trajectory batch")
    s.add_argument("--out", required=True)
    s.add_argument("--n-missions", type=int, default=600)
    s.set_defaults(func=cmd_gen_batch)

    s = sub.add_parser("split", parents=[common], help="quartile split of a batch")
    s.add_argument("--batch", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common, clf], help="train classifiers, write confusion counts")
    s.add_argument("--batch", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-model", parents=[common], help="EM dynamics and trivial POMDP")
    s.add_argument("--batch", required=True)
    s.add_argument("--classifier", required=True)
    s.add_argument("--confusion")
    s.add_argument("--out", required=True)
    s.add_argument("--discount", type=float, default=frg.DEFAULT_DISCOUNT)
    s.add_argument("--restarts", type=int, default=5)
    s.set_defaults(func=cmd_build_model)

    s = sub.add_parser("solve", parents=[common, model_arg], help="point-based solve per discount")
    s.add_argument("--gamma", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    s.add_argument("--out", required=True)
    s.add_argument("--belief-count", type=int, default=500)
    s.add_argument("--max-iter", type=int, default=200)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("select", parents=[common, model_arg, sel], help="VaR selection over sampled models")
    s.add_argument("--policies", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-returns")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("simulate", parents=[common, model_arg, sel], help="policy comparison table")
    s.add_argument("--policies", nargs="*")
    s.add_argument("--single-model", action="store_true", help="evaluate on the given model only")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("control", parents=[common, model_arg], help="observations on stdin, actions on stdout")
    s.add_argument("--policy", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_control)

    s = sub.add_parser("thresholds", parents=[common, model_arg], help="beta thresholds of a policy")
    s.add_argument("--policy", required=True)
    s.add_argument("--resolution", type=int, default=1000)
    s.set_defaults(func=cmd_thresholds)

    s = sub.add_parser("export", parents=[common, model_arg], help="export a model")
    s.add_argument("--format", choices=["cassandra"], default="cassandra")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("run", parents=[common, sel, clf], help="full pipeline from a batch file")
    s.add_argument("--batch", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gamma", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    s.add_argument("--discount", type=float, default=frg.DEFAULT_DISCOUNT)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, StageError) as exc:
        # bad inputs end with a message, not a traceback
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
