import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fclsim.attack import Schedule
from fclsim.contrastive import ContrastiveConfig
from fclsim.federation import (
    ClientTaskError,
    FederationConfig,
    FederationConfigError,
    RoundRecord,
    aggregate,
    initial_state,
    run_experiment,
    run_round,
    select_clients,
)
from fclsim.harness import build_scenario
from fclsim.numcore import ParamVector, RngStream
from fclsim.updates import BENIGN, MALICIOUS, ClientUpdate

L2 = (("x", (2,)),)


def upd(vals, cid=0, kind=BENIGN):
    return ClientUpdate(ParamVector(np.asarray(vals, float), L2), cid, 0, kind)


def test_select_everyone_when_k_equals_n():
    cfg = FederationConfig(n_clients=6, k=6, n_attackers=0)
    for t in range(5):
        assert select_clients(t, cfg, False, RngStream(0)) == list(range(6))


def test_multi_shot_selection_contains_attackers():
    cfg = FederationConfig()
    for t in range(20):
        sel = select_clients(t, cfg, True, RngStream(1))
        assert sel[:3] == [0, 1, 2] and len(set(sel)) == 10
        assert not set(select_clients(t, cfg, False, RngStream(1))) & {0, 1, 2}


def test_config_invariants():
    with pytest.raises(FederationConfigError):
        FederationConfig(n_clients=5, k=6)
    with pytest.raises(FederationConfigError):
        FederationConfig(k=3, n_attackers=4)
    with pytest.raises(FederationConfigError):
        FederationConfig(n_clients=10, k=10, n_attackers=3)
    with pytest.raises(FederationConfigError):
        FederationConfig(server_lr=0.0)


def test_aggregate_examples():
    g = ParamVector(np.array([0.0, 0.0]), L2)
    assert aggregate(g, [upd([0, 0]), upd([0, 0], 1)]) == g
    assert aggregate(g, [upd([2, 0]), upd([0, 2], 1)], 1.0) == ParamVector(np.array([1.0, 1.0]), L2)
    assert aggregate(g, [upd([2, 0]), upd([0, 2], 1)], 1.0, [0.0, 0.0]) == g
    with pytest.raises(ValueError):
        aggregate(g, [])
    with pytest.raises(ValueError):
        aggregate(g, [upd([1, 1])], 1.0, [-1.0])


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6), st.integers(1, 8))
def test_aggregate_permutation_invariant_and_uniform(seed, n):
    gen = np.random.default_rng(seed)
    g = ParamVector(gen.normal(size=2), L2)
    ups = [upd(gen.normal(size=2) * 10.0 ** gen.integers(-3, 4), i) for i in range(n)]
    w = gen.random(n)
    perm = gen.permutation(n)
    assert aggregate(g, ups, 0.7, w) == aggregate(g, [ups[i] for i in perm], 0.7, w[perm])
    assert aggregate(g, ups, 0.7, np.ones(n)) == aggregate(g, ups, 0.7)


def test_model_replacement():
    g = ParamVector(np.array([0.3, -1.2]), L2)
    target = np.array([5.0, 2.0])
    k, eta = 10, 1.0
    mal = upd(target - g.values, 0, MALICIOUS).scaled_by(k / eta)
    ups = [mal] + [upd([0.0, 0.0], i) for i in range(1, k)]
    assert np.max(np.abs(aggregate(g, ups, eta).values - target)) <= 1e-12


def test_record_json_round_trip():
    rec = RoundRecord(3, "attack", True, [0, 4], [1.0, 0.5], [0.2, 0.3], 0.9, {0: 0.5}, {0: 0.8}, 0.01)
    again = RoundRecord.from_json(json.loads(json.dumps(rec.to_json())))
    assert again == rec
    assert rec.to_json()["weight_sum"] == 1.5


def test_zero_learning_rate_keeps_global(tiny_cfg):
    cfg = tiny_cfg.merged({"contrastive.learning_rate": 0.0, "attack.learning_rate": 0.0})
    sim = build_scenario(cfg).sim
    state = initial_state(sim)
    g0 = state.params
    for t in range(3):
        state, rec = run_round(state, sim, t)
        assert rec.attack_round
    assert np.array_equal(state.params.values, g0.values)


def test_no_attackers_matches_benign_rounds(tiny_cfg):
    sim = build_scenario(tiny_cfg).sim
    s_a = s_b = initial_state(sim)
    for t in range(2):
        s_a, r_a = run_round(s_a, sim, None)
        s_b, r_b = run_round(s_b, replace(sim, attack=None), t)
        assert r_a.selected == r_b.selected
    assert s_a.params == s_b.params


def test_history_counts_and_one_shot_schedule(tiny_cfg):
    cfg = tiny_cfg.merged({"attack.schedule": "one_shot", "attack.period": 2, "attack.gamma": 3.0,
                           "federation.rounds": 4})
    sim = build_scenario(cfg).sim
    hist = run_experiment(replace(sim, evaluator=None))
    attack_recs = [r for r in hist.records if r.phase == "attack"]
    assert [r.attack_round for r in attack_recs] == [True, False, True, False]
    assert all(0 in r.selected for r in attack_recs if r.attack_round)
    assert not any(0 in r.selected for r in attack_recs if not r.attack_round)
    state = hist.final_state
    selections = {}
    for r in hist.records:
        for c in r.selected:
            selections[c] = selections.get(c, 0) + 1
    assert state.counts == selections


def test_determinism_across_threads(tiny_cfg):
    sim = build_scenario(tiny_cfg).sim
    a = run_experiment(sim)
    b = run_experiment(replace(sim, fed=replace(sim.fed, threads=3)))
    strip = [json.dumps({**r.to_json(), "wall_time": 0}) for r in a.records]
    assert strip == [json.dumps({**r.to_json(), "wall_time": 0}) for r in b.records]
    assert a.final_state.params == b.final_state.params


def test_changing_k_changes_trajectory(tiny_cfg):
    a = run_experiment(replace(build_scenario(tiny_cfg).sim, evaluator=None))
    b = run_experiment(replace(build_scenario(tiny_cfg.merged({"federation.k": 6})).sim, evaluator=None))
    assert a.final_state.params != b.final_state.params


def test_failed_client_aborts_round(tiny_cfg):
    sim = build_scenario(tiny_cfg).sim
    shards = dict(sim.shards)
    shards[5] = shards[5].subset([])
    bad = replace(sim, shards=shards, fed=replace(sim.fed, n_attackers=0), roster={},
                  contrastive=ContrastiveConfig())
    state = initial_state(bad)
    with pytest.raises(ClientTaskError) as exc:
        for t in range(20):
            state, _ = run_round(state, bad, None)
    assert exc.value.client_id == 5


def test_projector_can_be_frozen(tiny_cfg):
    sim = build_scenario(tiny_cfg.merged({"federation.aggregate_projector": False})).sim
    s0 = initial_state(sim)
    s1, _ = run_round(s0, sim, 0)
    for name, _ in s0.params.layout:
        same = np.array_equal(s0.params.tensor(name), s1.params.tensor(name))
        assert same == name.startswith("proj.")


def test_early_stop_on_plateau(tiny_cfg):
    cfg = tiny_cfg.merged({"federation.early_stop": True, "federation.pretrain_rounds": 40,
                           "federation.rounds": 0})
    hist = run_experiment(build_scenario(cfg).sim)
    # the KNN monitor on separable data is flat from the start
    assert len(hist.records) == 20


def test_schedule_defaults_multi_shot():
    assert Schedule().kind == "multi_shot"
