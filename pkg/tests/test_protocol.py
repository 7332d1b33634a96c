import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedselect import paillier
from fedselect import protocol as P
from fedselect.distributions import generate_federation
from fedselect.registry import RegistryScheme, aggregate_slots, register_all
from fedselect.selection import ClampWarning, DubheSelector, SelectionConfig, make_selector, multi_time_select, parameter_search


@pytest.fixture(scope="module")
def ten_clients():
    return generate_federation(C=10, N=10, n_vc=32, rho=5, emd=1.0, seed=1)


@pytest.fixture(scope="module")
def mid_ds():
    return generate_federation(C=10, N=120, n_vc=64, rho=10, emd=1.5, seed=2)


def test_party_model():
    with pytest.raises(ValueError):
        P.Party("server", holds_secret_key=True)
    sess = P.Session(64, "sized", agent=3)
    parties = sess.parties(5)
    assert parties[0].role == "server" and not parties[0].holds_secret_key
    assert [p.role for p in parties[1:]].count("agent") == 1
    assert all(p.holds_secret_key for p in parties[1:])


def test_registration_decrypts_to_plaintext_aggregate(ten_clients):
    s = RegistryScheme.default()
    reg = P.run_registration_round(ten_clients, s, 64, seed=0)
    oracle = aggregate_slots(register_all(ten_clients.counts, s), s.length).counts
    assert np.array_equal(reg.aggregate.counts, oracle)
    assert reg.report.messages["RegistryUpload"] == 10
    assert reg.report.messages["AggregateBroadcast"] == 1
    assert reg.report.deliveries["AggregateBroadcast"] == 10
    assert reg.report.messages["KeyDispatch"] == 10


def test_full_and_sized_modes_agree(mid_ds, no_clamp_warnings):
    s = RegistryScheme.default()
    cfg = SelectionConfig(K=10, H=3, strategy="dubhe", seed=5)
    outs, reps = [], []
    for mode in ("full", "sized"):
        reg = P.run_registration_round(mid_ds, s, 64, seed=5, crypto=mode)
        out, rep, _ = P.run_selection_round(reg, mid_ds, cfg, round_index=2)
        outs.append(out)
        reps.append(overhead := P.overhead_report_merge([reg.report, rep]))
        assert overhead.messages["DistributionUpload"] == 30
    assert outs[0].to_json() == outs[1].to_json()
    assert reps[0].to_dict()["messages"] == reps[1].to_dict()["messages"]
    assert reps[0].bytes["RegistryUpload"] == reps[1].bytes["RegistryUpload"]


@pytest.mark.parametrize("strategy,H,round_index", [("dubhe", 1, 0), ("dubhe", 4, 3), ("random", 3, 1)])
def test_protocol_matches_pure_selection(mid_ds, strategy, H, round_index, no_clamp_warnings):
    s = RegistryScheme.default()
    reg = P.run_registration_round(mid_ds, s, 64, seed=11, crypto="full")
    cfg = SelectionConfig(K=10, H=H, strategy=strategy, seed=11)
    out, rep, transcript = P.run_selection_round(reg, mid_ds, cfg, round_index)
    pure = multi_time_select(make_selector(strategy, mid_ds.counts, 10, s), mid_ds.counts, H, 11, round_index)
    assert out.to_json() == pure.to_json()
    assert rep.messages["DistributionUpload"] == H * 10
    assert rep.messages["AggregateDistribution"] == H
    assert P.audit_server_view(reg.transcript + transcript) == []


def test_agent_decrypted_population_matches_oracle(mid_ds, no_clamp_warnings):
    s = RegistryScheme.default()
    reg = P.run_registration_round(mid_ds, s, 64, seed=3, crypto="full")
    out, _, _ = P.run_selection_round(reg, mid_ds, SelectionConfig(K=10, H=2, seed=3))
    pooled = mid_ds.counts[out.selected].sum(axis=0)
    assert np.allclose(out.p_o, pooled / pooled.sum())


def test_greedy_rejected_under_protocol(mid_ds):
    reg = P.run_registration_round(mid_ds, RegistryScheme.default(), 64, seed=0, crypto="sized")
    with pytest.raises(ValueError):
        P.run_selection_round(reg, mid_ds, SelectionConfig(K=10, strategy="greedy"))


def test_clamp_warning_under_protocol(ten_clients):
    reg = P.run_registration_round(ten_clients, RegistryScheme.default(), 64, seed=0, crypto="sized")
    with pytest.warns(ClampWarning):
        P.run_selection_round(reg, ten_clients, SelectionConfig(K=9, H=1))


def test_audit_flags_plaintext(ten_clients):
    bus = P.MessageBus()
    bus.send("registration", "RegistryUpload", P.client_name(0), P.SERVER, P.IdList((0,)))
    msg = P.Message(0, "registration", "RegistryUpload", P.client_name(1), P.SERVER, 80, 1, np.eye(10)[0])
    sk_leak = P.Message(0, "registration", "KeyDispatch", P.client_name(1), P.SERVER, 8, 1,
                        P.KeyMaterial(None, object(), 8))
    assert P.audit_server_view(bus.transcript + [msg, sk_leak]) == [msg, sk_leak]


def test_search_phase_matches_pure_search(mid_ds, no_clamp_warnings):
    s = RegistryScheme.default()
    grid = [(0.7, 0.1), (0.5, 0.2), (0.6, 0.05)]
    best, rep, points, transcript = P.run_parameter_search_phase(mid_ds, s, grid, 3, 10, seed=4, key_bits=64)
    pure_best, pure_score, trace = parameter_search(mid_ds.counts, s, grid, 3, 10, 4)
    assert best == pure_best
    assert [p.score for p in points] == pytest.approx([p.score for p in trace], abs=1e-12)
    assert rep.messages["ParamDispatch"] == 3
    assert rep.deliveries["ParamDispatch"] == 3 * 120
    assert rep.messages["RegistryUpload"] == 3 * 120
    assert P.audit_server_view(transcript) == []


def test_single_point_search_counts(ten_clients):
    _, rep, points, _ = P.run_parameter_search_phase(
        ten_clients, RegistryScheme.default(), [(0.7, 0.1)], 1, 3, seed=0, crypto="sized")
    assert len(points) == 1
    assert rep.deliveries["ParamDispatch"] == 10
    assert rep.messages["DistributionUpload"] == 3


def test_registry_upload_bytes_at_2048_bits(ten_clients):
    reg = P.run_registration_round(ten_clients, RegistryScheme.default(), 2048, seed=0, crypto="sized")
    assert reg.report.bytes["RegistryUpload"] == 10 * (4 + 56 * 512)


def test_agent_choice_is_uniform():
    N = 20
    hits = np.zeros(N)
    for t in range(4000):
        sess = P.open_session(N, 64, 123, t, P.MessageBus(t), crypto="sized")
        hits[sess.agent] += 1
    assert stats.chisquare(hits).pvalue > 0.001


def test_transcript_line_format(ten_clients):
    reg = P.run_registration_round(ten_clients, RegistryScheme.default(), 64, seed=0, crypto="sized", round_index=7)
    fields = reg.transcript[-1].line().split("\t")
    assert fields[:3] == ["7", "registration", "AggregateBroadcast"]
    assert int(fields[5]) == 10 * (4 + 56 * 16)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        P.MessageBus().send("x", "Gossip", "a", "b", P.Verdict(0))


def _report(seed):
    rng = np.random.default_rng(seed)
    bus = P.MessageBus()
    for _ in range(int(rng.integers(0, 8))):
        kind = P.KINDS[int(rng.integers(len(P.KINDS)))]
        bus.send(["registration", "selection"][int(rng.integers(2))], kind, "a", "b",
                 P.IdList(tuple(range(int(rng.integers(0, 5))))), deliveries=int(rng.integers(1, 4)))
    return bus.report


def test_merge_of_empty_is_zero():
    z = P.overhead_report_merge([])
    assert z.total_messages == 0 and z.total_bytes == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_merge_associative_commutative(a, b, c):
    A, B, C = _report(a), _report(b), _report(c)
    m = P.overhead_report_merge
    assert m([m([A, B]), C]) == m([A, m([B, C])])
    assert m([A, B]) == m([B, A])
    assert m([A, B]).total_bytes == A.total_bytes + B.total_bytes


def test_registration_plus_rounds_is_componentwise_sum(mid_ds, no_clamp_warnings):
    reg = P.run_registration_round(mid_ds, RegistryScheme.default(), 64, seed=0, crypto="sized")
    reps = [P.run_selection_round(reg, mid_ds, SelectionConfig(K=10, H=2), t)[1] for t in range(3)]
    total = P.overhead_report_merge([reg.report] + reps)
    for kind in P.KINDS:
        assert total.messages[kind] == reg.report.messages[kind] + sum(r.messages[kind] for r in reps)
    assert total.messages["DistributionUpload"] == 3 * 2 * 10
