"""Interception agent tests: correction algebra against the brute-force
dual-endpoint oracle, transparency, injection, modify/drop/swallow."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iec104lab import c2, iec104 as i104
from iec104lab.c2 import TO_MTU, TO_RTU, Action, Forge, Match
from iec104lab.endpoints import MeasurementSpec, Mtu, MtuConfig, Rtu, RtuConfig, RtuLink, ScheduledCommand
from iec104lab.grid import AssetSpec, FeederSegment, GridConfig, ProcessModel
from iec104lab.mitm import AgentConfig, CorrectionState, MitmAgent, correct_sequences, forge_apdu
from iec104lab.traceio import KIND_C2, KIND_IEC104
from iec104lab.virtnet import EndpointIdentity, SimClock, VirtualNetwork

import seq_oracle


class TestCorrectionAlgebra:
    def test_spec_worked_example(self):
        # One injection toward the RTU; the RTU's ack must be shifted back
        # so the MTU is only told about frames it really sent.
        state = CorrectionState(inj_to_rtu=1, correct_to_mtu=True)
        out = correct_sequences(i104.s_frame(8), TO_MTU, state)
        assert out.apci.rx == 7

    def test_identity_when_counts_zero(self):
        state = CorrectionState(correct_to_mtu=True, correct_to_rtu=True)
        apdu = i104.s_frame(8)
        assert correct_sequences(apdu, TO_MTU, state) is apdu

    def test_wrap(self):
        state = CorrectionState(inj_to_rtu=1, correct_to_mtu=True)
        out = correct_sequences(i104.s_frame(0), TO_MTU, state)
        assert out.apci.rx == 32767

    def test_u_frames_untouched(self):
        state = CorrectionState(inj_to_rtu=3, correct_to_mtu=True, correct_to_rtu=True)
        apdu = i104.u_frame(i104.UFunction.TESTFR_ACT)
        assert correct_sequences(apdu, TO_MTU, state) is apdu

    def test_disabled_direction_untouched(self):
        state = CorrectionState(inj_to_rtu=1, correct_to_mtu=False)
        apdu = i104.s_frame(8)
        assert correct_sequences(apdu, TO_MTU, state) is apdu

    def test_forward_tx_shift_toward_rtu(self):
        state = CorrectionState(inj_to_rtu=2, drop_to_rtu=1, correct_to_rtu=True)
        asdu = i104.Asdu(i104.M_SP_NA_1, 3, 1, (i104.InformationObject(1, value=1.0),))
        out = correct_sequences(i104.i_frame(10, 5, asdu), TO_RTU, state)
        assert out.apci.tx == 11  # +inj -drop
        assert out.apci.rx == 5


def op_sequences():
    forwards = st.lists(st.sampled_from(seq_oracle.FORWARD_OPS), min_size=0, max_size=100)
    mutations = st.lists(st.sampled_from(seq_oracle.MUTATING_OPS), min_size=0, max_size=10)
    return st.tuples(forwards, mutations, st.randoms(use_true_random=False)).map(
        lambda fm: _interleave(*fm)
    )


def _interleave(forwards, mutations, rng):
    ops = list(forwards) + list(mutations)
    rng.shuffle(ops)
    return ops


class TestCorrectionSoundnessOracle:
    """Any interleaving of <=100 forwards and <=10 injections/drops must
    leave both strict endpoints violation-free under full correction."""

    @given(op_sequences())
    @settings(max_examples=300, deadline=None)
    def test_full_correction_never_violates(self, ops):
        state = CorrectionState(correct_to_rtu=True, correct_to_mtu=True)
        mtu, rtu, _ = seq_oracle.run_session(
            ops, state, correct_sequences, TO_RTU, TO_MTU, state.injection_numbers
        )
        assert mtu.violations == []
        assert rtu.violations == []

    @given(op_sequences())
    @settings(max_examples=200, deadline=None)
    def test_injected_frames_always_valid_at_arrival(self, ops):
        # Even with correction off, the forged frame itself must land on
        # the destination's expected counter (later genuine frames break).
        state = CorrectionState(correct_to_rtu=True, correct_to_mtu=True)
        mtu, rtu, _ = seq_oracle.run_session(
            ops, state, correct_sequences, TO_RTU, TO_MTU, state.injection_numbers
        )
        assert not [v for v in rtu.violations + mtu.violations if "tx=" in v[1]]

    def test_disabled_correction_breaks_strict_rtu(self):
        ops = ["mi", "ir", "mi"]  # inject, then a genuine client frame
        state = CorrectionState(correct_to_rtu=False, correct_to_mtu=False)
        _, rtu, _ = seq_oracle.run_session(
            ops, state, correct_sequences, TO_RTU, TO_MTU, state.injection_numbers
        )
        assert rtu.violations, "uncorrected follow-up frame must violate the RTU"

    def test_disabled_correction_shows_future_ack_upstream(self):
        ops = ["mi", "ir", "rs"]
        state = CorrectionState(correct_to_rtu=True, correct_to_mtu=False)
        mtu, rtu, view = seq_oracle.run_session(
            ops, state, correct_sequences, TO_RTU, TO_MTU, state.injection_numbers
        )
        assert rtu.violations == []
        assert mtu.violations and "acks" in mtu.violations[0][1]


# ---------------------------------------------------------------------------
# integration through the virtual network
# ---------------------------------------------------------------------------

MTU_ID = EndpointIdentity("mtu", "02:00:00:00:00:10", "10.0.104.10", 0)
RTU3_ID = EndpointIdentity("rtu3", "02:00:00:00:00:13", "10.0.104.13", 2404)
AGENT_ID = EndpointIdentity("agent1", "02:00:00:00:00:16", "10.0.104.16", c2.C2_PORT)


class Bench:
    def __init__(self, agent_cfg=None, schedule=(), strict_rtu=True, period=1.0):
        self.clock = SimClock()
        self.net = VirtualNetwork(
            self.clock, rng=random.Random("bench"), kind_ports={2404: KIND_IEC104, c2.C2_PORT: KIND_C2}
        )
        grid = GridConfig(
            assets=(AssetSpec("bssi", 12.0, bus="n3", ioa_setpoint=6001, storage_kwh=22.0),),
            segments=(FeederSegment("busbar", "n3", 300.0),),
        )
        self.process = ProcessModel(grid)
        for n in range(1, 2400):
            self.clock.call_at(n * 0.25, self.process.step, 0.25)
        rtu_port = self.net.attach(RTU3_ID, 0.0005)
        mtu_port = self.net.attach(MTU_ID, 0.0005)
        self.agent = None
        if agent_cfg is not None:
            agent_port = self.net.attach(AGENT_ID, 0.0005)
            self.agent = MitmAgent(self.clock, self.net, agent_port, agent_cfg, rng=random.Random("agent"))
        self.rtu = Rtu(
            self.clock,
            rtu_port,
            RtuConfig(
                name="rtu3",
                common_address=3,
                measurements=(MeasurementSpec(4001, "P_kW", "bssi"),),
                setpoint_ioas={6001: "bssi"},
                measurement_period=period,
                strict_sequence=strict_rtu,
            ),
            self.process,
        )
        self.mtu = Mtu(
            self.clock,
            mtu_port,
            MtuConfig(name="mtu", rtus=(RtuLink("rtu3", RTU3_ID.ip, 3),), schedule=tuple(schedule)),
        )
        self.mtu.start()


def agent_cfg(**overrides):
    base = dict(name="agent1", target="rtu3")
    base.update(overrides)
    return AgentConfig(**base)


class TestTransparency:
    def test_benign_run_unchanged_through_agent(self):
        schedule = [ScheduledCommand(5.0, "rtu3", 6001, 0.21), ScheduledCommand(15.0, "rtu3", 6001, 0.42)]
        with_agent = Bench(agent_cfg(), schedule=schedule)
        with_agent.clock.run(until=30.0)
        without = Bench(None, schedule=schedule)
        without.clock.run(until=30.0)

        rows_a = [r for r in with_agent.mtu.transaction_rows() if r["state"] != "Orphan"]
        rows_b = [r for r in without.mtu.transaction_rows() if r["state"] != "Orphan"]
        assert [r["state"] for r in rows_a] == ["Terminated", "Terminated"]
        assert [(r["ioa"], r["value"], r["state"]) for r in rows_a] == [
            (r["ioa"], r["value"], r["state"]) for r in rows_b
        ]
        assert with_agent.mtu.orphans == []
        assert with_agent.rtu.session.alive
        assert with_agent.mtu.measurements_received == without.mtu.measurements_received

    def test_opaque_asdu_forwarded_bit_exact(self):
        bench = Bench(agent_cfg())
        bench.clock.run(until=2.0)
        raw_asdu = bytes((45, 1, 6, 0, 3, 0, 1, 0, 0, 1))  # unmodeled type 45
        session = bench.mtu.links["rtu3"].session
        session.send_i(i104.OpaqueAsdu(raw_asdu))
        seen = []
        original = bench.rtu.session._on_asdu
        bench.rtu.session._on_asdu = lambda asdu: (seen.append(asdu), original(asdu))
        bench.clock.run(until=4.0)
        assert any(isinstance(a, i104.OpaqueAsdu) and a.raw == raw_asdu for a in seen)


def run_injection_bench(swallow=False, correct_to_rtu=True, tail_command=False):
    cfg = agent_cfg(swallow_injected_replies=swallow, correct_to_rtu=correct_to_rtu)
    schedule = [ScheduledCommand(5.0, "rtu3", 6001, 0.42)]
    if tail_command:
        schedule.append(ScheduledCommand(20.0, "rtu3", 6001, 0.3))
    bench = Bench(cfg, schedule=schedule)
    inject = Action(
        kind=c2.KIND_INJECT,
        direction=TO_RTU,
        at_time=10.0,
        forge=Forge(common_address=3, ioa=6001, value=-0.4167),
    )
    bench.clock.call_at(9.0, bench.agent.execute, inject, 1)
    return bench


class TestInjection:
    def test_strict_rtu_accepts_and_process_reacts(self):
        bench = run_injection_bench()
        bench.clock.run(until=30.0)
        assert bench.rtu.session.alive
        assert bench.process.active_power_kw["bssi"] == pytest.approx(-0.4167 * 12.0, rel=1e-3)
        assert bench.agent.state.inj_to_rtu == 1

    def test_replies_forwarded_as_orphans_by_default(self):
        bench = run_injection_bench()
        bench.clock.run(until=30.0)
        assert len(bench.mtu.orphans) == 2
        assert {o["cot"] for o in bench.mtu.orphans} == {7, 10}

    def test_swallowed_replies_leave_no_orphans(self):
        bench = run_injection_bench(swallow=True)
        bench.clock.run(until=30.0)
        assert bench.mtu.orphans == []
        assert bench.process.active_power_kw["bssi"] == pytest.approx(-0.4167 * 12.0, rel=1e-3)
        # Dropped replies still keep the client's counters coherent.
        assert not [n for _, n in bench.mtu.links["rtu3"].session.notes if "future ack" in n]

    def test_followup_command_survives_with_correction(self):
        bench = run_injection_bench(tail_command=True)
        bench.clock.run(until=40.0)
        rows = [r for r in bench.mtu.transaction_rows() if r["state"] != "Orphan"]
        assert [r["state"] for r in rows] == ["Terminated", "Terminated"]
        assert bench.rtu.session.alive
        assert bench.process.active_power_kw["bssi"] == pytest.approx(0.3 * 12.0, rel=1e-3)

    def test_uncorrected_injection_aborts_strict_rtu(self):
        bench = run_injection_bench(correct_to_rtu=False, tail_command=True)
        bench.clock.run(until=40.0)
        assert bench.rtu.aborts, "strict RTU must abort once a genuine frame follows the forgery"
        assert "sequence-error" in bench.rtu.aborts[0][1]


class TestModifyAndDrop:
    def test_modify_zeroes_reported_measurements(self):
        bench = Bench(agent_cfg())
        rule = Action(
            kind=c2.KIND_MODIFY,
            direction=TO_MTU,
            match=Match(type_id=i104.M_ME_NC_1, ioa=4001),
            set_value=0.0,
        )
        bench.clock.call_at(2.0, bench.agent.execute, rule, 1)
        bench.clock.call_at(3.0, bench.process.apply_setpoint, "bssi", 0.5)
        bench.clock.run(until=20.0)
        assert bench.process.active_power_kw["bssi"] == pytest.approx(6.0, rel=1e-3)
        assert bench.mtu.last_values[(3, 4001)] == 0.0  # client believes zero power

    def test_drop_command_times_out_and_session_survives(self):
        bench = Bench(
            agent_cfg(),
            schedule=[ScheduledCommand(5.0, "rtu3", 6001, 0.42), ScheduledCommand(25.0, "rtu3", 6001, 0.2)],
        )
        rule = Action(
            kind=c2.KIND_DROP,
            direction=TO_RTU,
            match=Match(type_id=i104.C_SE_NC_1, ioa=6001),
        )
        bench.clock.call_at(2.0, bench.agent.execute, rule, 1)
        bench.clock.call_at(20.0, bench.agent.execute, Action(kind=c2.KIND_PASSTHROUGH), 2)
        bench.clock.run(until=45.0)
        rows = [r for r in bench.mtu.transaction_rows() if r["state"] != "Orphan"]
        assert rows[0]["state"] == "Failed"  # dropped while the rule stood
        assert rows[1]["state"] == "Terminated"  # passthrough restored
        assert bench.rtu.session.alive
        assert bench.agent.state.drop_to_rtu == 1

    def test_drop_rule_without_match_never_fires(self):
        bench = Bench(agent_cfg(), schedule=[ScheduledCommand(5.0, "rtu3", 6001, 0.42)])
        rule = Action(kind=c2.KIND_DROP, direction=TO_RTU, match=Match(type_id=i104.C_SE_NC_1, ioa=9999))
        bench.clock.call_at(2.0, bench.agent.execute, rule, 1)
        bench.clock.run(until=20.0)
        rows = [r for r in bench.mtu.transaction_rows() if r["state"] != "Orphan"]
        assert rows[0]["state"] == "Terminated"
        assert bench.agent.state.drop_to_rtu == 0

    def test_collect_records_matches(self):
        bench = Bench(agent_cfg())
        rule = Action(kind=c2.KIND_COLLECT, direction=TO_MTU, match=Match(type_id=i104.M_ME_NC_1))
        bench.clock.call_at(2.0, bench.agent.execute, rule, 1)
        bench.clock.run(until=10.0)
        assert len(bench.agent.collected) >= 5


class TestActionValidation:
    def test_inject_requires_forge(self):
        with pytest.raises(ValueError):
            Action(kind=c2.KIND_INJECT)

    def test_modify_requires_match(self):
        with pytest.raises(ValueError):
            Action(kind=c2.KIND_MODIFY)

    def test_inject_when_session_down_fails(self):
        clock = SimClock()
        net = VirtualNetwork(clock, kind_ports={2404: KIND_IEC104})
        net.attach(RTU3_ID, 0.0005)
        agent_port = net.attach(AGENT_ID, 0.0005)
        agent = MitmAgent(clock, net, agent_port, agent_cfg(), rng=random.Random(1))
        statuses = []
        agent._report = lambda body: statuses.append(body)
        agent.execute(
            Action(kind=c2.KIND_INJECT, direction=TO_RTU, forge=Forge(3, 6001, 0.5)), 7
        )
        clock.run(until=1.0)
        assert statuses and statuses[0]["state"] == "ActionFailed"
