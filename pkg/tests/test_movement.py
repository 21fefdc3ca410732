"""Movement-rule tests: the 56 reference action rows for three users, the
two multi-pair walkthrough scenarios, and randomized invariant checks."""

import random

import pytest

from becsim.coding import ControlSpec, enumerate_controls
from becsim.core import (
    NativePacketId,
    QueueIndex,
    UserSet,
    audit_state,
    validate_cc,
)
from becsim.movement import (
    FEEDBACK_TRIPLES,
    PHASE_TABLES,
    MovementPlan,
    ReceptionOutcome,
    RpmCase,
    apply_rpm,
    conformance_tables,
    overhead_of,
    run_reference_row,
    synthesize_state,
    tilde_l,
)


def U(*xs):
    return UserSet.of(*xs)


def QI(l, d):
    return QueueIndex(UserSet.from_iterable(l), UserSet.from_iterable(d))


def S(*xs):
    return ReceptionOutcome(UserSet.of(*xs))


EX2_PAIRS = [((1, 2, 3, 5), (0,)), ((0, 2, 4), (1, 3)), ((0, 1, 3, 5), (2,))]


class TestTildeL:
    def test_threshold_two_of_three(self):
        lt = tilde_l(ControlSpec.of(*EX2_PAIRS))
        assert 4 not in lt  # listed once only
        assert 1 in lt
        assert lt & UserSet.full(8) == U(0, 1, 2, 3, 5)

    def test_single_pair_vacuous(self):
        lt = tilde_l(ControlSpec.of(((1, 2), (0,))))
        assert UserSet.full(16).issubset(lt)

    def test_level2_swap(self):
        assert tilde_l(ControlSpec.of(((0,), (1,)), ((1,), (0,)))) == U(0, 1)


class TestReferenceRows:
    @pytest.mark.parametrize("phase", sorted(PHASE_TABLES))
    @pytest.mark.parametrize("triple", FEEDBACK_TRIPLES)
    def test_row(self, phase, triple):
        for record in conformance_tables(phase, triple):
            assert record["ok"], record

    def test_total_row_count(self):
        total = sum(len(PHASE_TABLES[p]) for p in PHASE_TABLES) * len(FEEDBACK_TRIPLES)
        assert total == 56

    def test_mismatch_is_reported(self):
        rec = run_reference_row(2, "RER")
        assert rec["table"] == 2 and rec["triple"] == "RER"
        assert rec["ok"] and rec["problems"] == []


class TestTwoPairWalkthrough:
    """Level-3 pairing of a two-destination packet with its reverse."""

    PAIRS = [((2,), (0, 1)), ((0, 1), (2,))]

    def test_single_receiver_advances_high_sublevel(self):
        state = synthesize_state(3, self.PAIRS)
        spec = ControlSpec.of(*self.PAIRS)
        a = state.queue(QI((2,), (0, 1)))[0]
        b = state.queue(QI((0, 1), (2,)))[0]
        plan = apply_rpm(state, spec, None, S(1))
        assert plan.case is RpmCase.ADVANCE
        assert plan.decoded == [(1, NativePacketId(1, 0))]
        assert plan.real_moves == [(a.pid, QI((2,), (0, 1)), QI((1, 2), (0,)))]
        assert plan.token_moves == [
            (NativePacketId(1, 0), (QI((2,), (0, 1)), 1), None),
            (NativePacketId(0, 0), (QI((2,), (0, 1)), 0), (QI((1, 2), (0,)), 0)),
        ]
        assert b.location == QI((0, 1), (2,))
        # the move lands in the same level but at a strictly higher sublevel
        assert a.location.level == 3 and a.location.sublevel == 2
        assert audit_state(state, deep=True) == []


class TestThreePairWalkthrough:
    """Eight-user, three-pair control with a two-destination middle pair."""

    def fresh(self):
        state = synthesize_state(8, EX2_PAIRS)
        spec = ControlSpec.of(*EX2_PAIRS)
        qis = [QI(l, d) for l, d in EX2_PAIRS]
        pids = [state.queue(qi)[0].pid for qi in qis]
        return state, spec, qis, pids

    def test_involved_receivers_advance(self):
        state, spec, qis, pids = self.fresh()
        plan = apply_rpm(state, spec, None, S(1, 4, 5))
        assert plan.case is RpmCase.ADVANCE
        assert plan.decoded == [(1, NativePacketId(1, 0))]
        assert plan.real_moves == [
            (pids[1], qis[1], QI((0, 1, 2, 4, 5), (3,)))
        ]
        assert audit_state(state, deep=True) == []

    def test_outsiders_force_merge(self):
        state, spec, qis, pids = self.fresh()
        plan = apply_rpm(state, spec, None, S(6, 7))
        assert plan.case is RpmCase.MERGE
        assert plan.decoded == []
        target = QI((6, 7), (0, 1, 2, 3))
        assert plan.merged is not None and plan.merged[1] == target
        merged = state.queue(target)[0]
        assert merged.constituents == frozenset(
            NativePacketId(i, 0) for i in range(4)
        )
        # all four pending tokens now ride the merged composite
        assert {t.native.owner for t in
                (state.vqueue(target, i)[0] for i in range(4))} == {0, 1, 2, 3}
        for qi in qis:
            assert state.queue(qi) == []
        assert audit_state(state, deep=True) == []

    def test_lone_outsider_changes_nothing(self):
        state, spec, qis, pids = self.fresh()
        before = {qi: [p.pid for p in state.queue(qi)] for qi in qis}
        plan = apply_rpm(state, spec, None, S(6))
        assert plan.case is RpmCase.SHRINK
        assert plan.s_effective == U()
        assert plan.real_moves == [] and plan.decoded == []
        assert {qi: [p.pid for p in state.queue(qi)] for qi in qis} == before
        assert audit_state(state, deep=True) == []

    def test_mixed_reception_shrinks_then_advances(self):
        state, spec, qis, pids = self.fresh()
        plan = apply_rpm(state, spec, None, S(1, 6))
        assert plan.case is RpmCase.SHRINK
        assert plan.s_effective == U(1)
        assert plan.decoded == [(1, NativePacketId(1, 0))]
        assert plan.real_moves == [
            (pids[1], qis[1], QI((0, 1, 2, 4), (3,)))
        ]
        assert audit_state(state, deep=True) == []


class TestEdgeBehavior:
    def test_all_erased_retransmits(self):
        state = synthesize_state(3, [((), (0,))])
        plan = apply_rpm(state, ControlSpec.of(((), (0,))), None, S())
        assert plan.case is RpmCase.RETRANSMIT and plan.retransmit
        assert plan.real_moves == [] and plan.decoded == []
        assert state.q_hat() == 1

    def test_fifo_head_is_default(self):
        state = synthesize_state(3, [((), (0,)), ((), (0,))])
        qi = QI((), (0,))
        first, second = state.queue(qi)
        plan = apply_rpm(state, ControlSpec.of(((), (0,))), None, S(0))
        assert plan.real_moves == [(first.pid, qi, None)]
        assert state.queue(qi) == [second]
        assert audit_state(state, deep=True) == []

    def test_explicit_choice_overrides_fifo(self):
        state = synthesize_state(3, [((), (0,)), ((), (0,))])
        qi = QI((), (0,))
        first, second = state.queue(qi)
        apply_rpm(state, ControlSpec.of(((), (0,))), [second], S(0))
        assert state.queue(qi) == [first]
        assert audit_state(state, deep=True) == []

    def test_rejects_foreign_packet(self):
        state = synthesize_state(3, [((), (0,)), ((), (1,))])
        stranger = state.queue(QI((), (1,)))[0]
        with pytest.raises(ValueError):
            apply_rpm(state, ControlSpec.of(((), (0,))), [stranger], S(0))

    def test_rejects_empty_queue(self):
        state = synthesize_state(3, [((), (0,))])
        with pytest.raises(ValueError):
            apply_rpm(state, ControlSpec.of(((), (1,))), None, S(0))

    def test_overhead_counts_constituents(self):
        state = synthesize_state(3, [((), (0,)), ((1, 2), (0,), 2)])
        native = state.queue(QI((), (0,)))[0]
        padded = state.queue(QI((1, 2), (0,)))[0]
        assert overhead_of(native) == 1
        assert overhead_of(padded) == 3
        assert audit_state(state, deep=True) == []


def random_scenario(rng, n_users, catalog):
    """A consistent state around a random control, plus clutter packets."""
    spec = rng.choice(catalog.controls)
    entries = [
        (tuple(qi.listeners), tuple(qi.destinations), rng.randrange(3))
        for qi in spec.sorted_pairs
    ]
    clutter = rng.sample(catalog.controls, k=min(3, len(catalog)))
    for extra in clutter:
        for qi in extra.sorted_pairs:
            if rng.random() < 0.5:
                entries.append(
                    (tuple(qi.listeners), tuple(qi.destinations), rng.randrange(2))
                )
    rng.shuffle(entries)
    state = synthesize_state(n_users, entries)
    s = UserSet.from_iterable(
        u for u in range(n_users) if rng.random() < 0.5
    )
    return state, spec, s


class TestInvariantPreservation:
    def test_exhaustive_three_users(self):
        catalog = enumerate_controls(3)
        full = UserSet.full(3)
        for spec in catalog:
            for mask in range(8):
                s = UserSet(mask)
                assert s.issubset(full)
                state = synthesize_state(
                    3, [(tuple(q.listeners), tuple(q.destinations)) for q in spec.sorted_pairs]
                )
                plan = apply_rpm(state, spec, None, ReceptionOutcome(s))
                assert audit_state(state, deep=True) == [], (spec, s)
                check_plan_invariants(plan, state)

    @pytest.mark.parametrize("n_users", [4, 5])
    def test_randomized_larger_networks(self, n_users):
        catalog = enumerate_controls(n_users)
        rng = random.Random(f"movement-invariants/{n_users}")
        for _ in range(150):
            state, spec, s = random_scenario(rng, n_users, catalog)
            assert audit_state(state, deep=True) == []
            tokens_before = state.v_hat()
            plan = apply_rpm(state, spec, None, ReceptionOutcome(s))
            assert audit_state(state, deep=True) == [], (spec, s)
            check_plan_invariants(plan, state)
            # tokens are destroyed only by decoding
            assert state.v_hat() == tokens_before - len(plan.decoded)


def check_plan_invariants(plan: MovementPlan, state):
    # every decode removed exactly one token
    removals = [t for t in plan.token_moves if t[2] is None]
    assert len(removals) == len(plan.decoded)
    assert {(u, n) for u, n in plan.decoded} == {
        (src[1], native) for native, src, _ in removals
    }
    for i, native in plan.decoded:
        assert native.owner == i  # users only ever decode their own flow
        assert native in state.decoded[i]
    # moves never go backwards
    for pid, src, dst in plan.real_moves:
        if src is not None and dst is not None:
            assert (dst.level, dst.sublevel) > (src.level, src.sublevel)
    if plan.case is RpmCase.MERGE and plan.merged is not None:
        merged_pid, target = plan.merged
        assert any(p.pid == merged_pid for p in state.queue(target))
