import numpy as np
import pytest

from riskpomdp import frg
from riskpomdp.core import ValidationFailure, belief_update, step
from riskpomdp.runtime import (
    Terminated, UnstructuredModel, controller_init, controller_step, export_trace,
    extract_thresholds, parse_trace, replay,
)
from riskpomdp.solver import AlphaVectorPolicy

M_NP_ON, M_P_ON = frg.STATES.index("m_np_on"), frg.STATES.index("m_p_on")
MANUAL_ON, MANUAL_OFF, AUTO_ON = (frg.ACTIONS.index(a) for a in ("manual_on", "manual_off", "auto_on"))


def test_init(fixture_model, policy_098):
    a = controller_init(fixture_model, policy_098)
    b = controller_init(fixture_model, policy_098)
    assert a.beta == 0.5
    assert a.trace == b.trace and a.last_action == b.last_action == MANUAL_ON
    with pytest.raises(ValidationFailure):
        controller_init(fixture_model.replace(initial_belief=np.eye(9)[frg.TERMINAL]), policy_098)


def test_performant_observation_raises_beta(fixture_model, policy_098):
    st = controller_init(fixture_model, policy_098)
    _, beta = controller_step(st, "m_p_on")
    b0 = fixture_model.initial_belief
    pred = b0 @ fixture_model.transition[MANUAL_ON]
    post = pred * fixture_model.observation[:, M_P_ON]
    assert beta == pytest.approx(post[M_P_ON] / post.sum(), abs=1e-12)
    assert beta > 0.5


def test_non_performant_streak_switches_to_auto(fixture_model, policy_098):
    st = controller_init(fixture_model, policy_098)
    for _ in range(20):
        obs = frg.CONFIG_STATES[st.last_action][0]
        a, beta = controller_step(st, obs)
        if a == AUTO_ON:
            break
    assert a == AUTO_ON and beta < 0.36 + 0.08


def test_terminal_observation_stops(fixture_model, policy_098):
    st = controller_init(fixture_model, policy_098)
    a, beta = controller_step(st, "g")
    assert a is None and st.terminated and beta == 0.0
    with pytest.raises(Terminated):
        controller_step(st, "m_p_on")


def test_replay_matches_online_filter(fixture_model, policy_098):
    rng = np.random.default_rng(3)
    st = controller_init(fixture_model, policy_098)
    s = int(rng.choice(9, p=fixture_model.initial_belief))
    acts, obs = [], []
    for _ in range(40):
        a = st.last_action
        s, o, _ = step(fixture_model, s, a, rng)
        if s == frg.TERMINAL:
            break
        acts.append(a)
        obs.append(o)
        controller_step(st, o)
    assert np.array_equal(replay(fixture_model, acts, obs), st.belief)


def test_manual_without_alarms_never_chosen(fixture_model, policy_098):
    rng = np.random.default_rng(11)
    chosen = np.zeros(4, int)
    for _ in range(1000):
        st = controller_init(fixture_model, policy_098)
        s = int(rng.choice(9, p=fixture_model.initial_belief))
        for _ in range(59):
            chosen[st.last_action] += 1
            s, o, _ = step(fixture_model, s, st.last_action, rng)
            if controller_step(st, o)[0] is None:
                break
    assert chosen[MANUAL_OFF] == 0 and chosen[MANUAL_ON] > 0 and chosen[AUTO_ON] > 0


def test_thresholds_fixture(fixture_model, policy_098):
    table = extract_thresholds(fixture_model, policy_098)
    auto_on = table.intervals["auto/on"]
    assert [iv.action for iv in auto_on] == [AUTO_ON, MANUAL_ON]
    assert abs(auto_on[0].hi - 0.48) <= 0.08
    man = table.boundaries("manual/on")
    assert len(man) == 2 and abs(man[0] - 0.36) <= 0.08 and abs(man[1] - 0.42) <= 0.08
    assert table.action_at("manual/on", 0.9) == MANUAL_ON
    assert table.action_at("auto/on", 0.05) == AUTO_ON


def test_thresholds_match_the_policy(fixture_model, policy_098):
    table = extract_thresholds(fixture_model, policy_098)
    betas = np.random.default_rng(0).random(300)
    for c, label in enumerate(table.configs):
        np_s, p_s = frg.CONFIG_STATES[c]
        for beta in betas:
            if min(abs(beta - x) for x in table.boundaries(label) + [2.0]) < 1e-3:
                continue
            b = np.zeros(9)
            b[np_s], b[p_s] = 1 - beta, beta
            assert table.action_at(label, beta) == policy_098.act(b[None])[0]


def test_single_vector_threshold_table(fixture_model):
    pol = AlphaVectorPolicy(np.ones((1, 9)), [2], 0.9)
    table = extract_thresholds(fixture_model, pol)
    for c in table.configs:
        assert len(table.intervals[c]) == 1 and table.intervals[c][0].action == 2
    with pytest.raises(ValueError):
        extract_thresholds(fixture_model, pol, grid_resolution=100)


def test_unstructured_model_rejected(fixture_model):
    pol = AlphaVectorPolicy(np.ones((1, 9)), [0], 0.9)
    O = np.full((9, 9), 1 / 9)
    with pytest.raises(UnstructuredModel):
        extract_thresholds(fixture_model.replace(observation=O), pol)


def test_trace_round_trip(tmp_path, fixture_model, policy_098):
    rng = np.random.default_rng(5)
    st = controller_init(fixture_model, policy_098)
    while len(st.trace) < 60:
        # any observation consistent with the last action's configuration
        controller_step(st, frg.CONFIG_STATES[st.last_action][int(rng.integers(2))])
    export_trace(st, tmp_path / "t.tsv")
    lines = (tmp_path / "t.tsv").read_text().splitlines()
    assert len(lines) == 61
    back = parse_trace(tmp_path / "t.tsv", fixture_model)
    assert back == st.trace
    assert all(0.0 <= r.beta <= 1.0 for r in back)
    assert lines[2].split("\t")[1] == "10"
