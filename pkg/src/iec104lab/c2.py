"""Coordinator channel: the action-packet vocabulary, its wire framing,
and the remote coordinator that ships actions to interception agents.

Wire format: length-prefixed (4-octet big-endian) JSON messages
``{"seq": n, "type": "hello"|"action"|"ack"|"status"|"heartbeat", "body": {...}}``
over one reliable stream per agent. Sequence numbers increase strictly per
session; receivers deduplicate on them, so retransmission is idempotent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

from . import iec104 as i104
from .virtnet import PortHandle, SimClock, StreamEnd

C2_PORT = 10104

TO_RTU = "toRTU"
TO_MTU = "toMTU"

KIND_INJECT = "Inject"
KIND_MODIFY = "Modify"
KIND_DROP = "Drop"
KIND_COLLECT = "Collect"
KIND_PASSTHROUGH = "Passthrough"
ACTION_KINDS = (KIND_INJECT, KIND_MODIFY, KIND_DROP, KIND_COLLECT, KIND_PASSTHROUGH)


@dataclass(frozen=True)
class Match:
    """ASDU predicate; ``None`` fields are wildcards."""

    type_id: Optional[int] = None
    common_address: Optional[int] = None
    ioa: Optional[int] = None

    def matches(self, asdu) -> bool:
        if not isinstance(asdu, i104.Asdu):
            return False
        if self.type_id is not None and asdu.type_id != self.type_id:
            return False
        if self.common_address is not None and asdu.common_address != self.common_address:
            return False
        if self.ioa is not None and all(obj.ioa != self.ioa for obj in asdu.objects):
            return False
        return True


@dataclass(frozen=True)
class Forge:
    """Parameters for locally forging one command frame."""

    common_address: int
    ioa: int
    value: float
    type_id: int = i104.C_SE_NC_1
    cot: int = i104.COT_ACTIVATION
    select: bool = False


@dataclass(frozen=True)
class Action:
    kind: str
    direction: str = TO_RTU
    at_time: float = 0.0
    match: Optional[Match] = None
    forge: Optional[Forge] = None
    set_value: Optional[float] = None  # Modify: rewrite matching object values

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind: {self.kind}")
        if self.direction not in (TO_RTU, TO_MTU):
            raise ValueError(f"unknown direction: {self.direction}")
        if self.kind == KIND_INJECT and self.forge is None:
            raise ValueError("Inject requires forge parameters")
        if self.kind in (KIND_MODIFY, KIND_DROP) and self.match is None:
            raise ValueError(f"{self.kind} requires a match predicate")


def action_to_dict(action: Action) -> dict:
    out = {"kind": action.kind, "direction": action.direction, "at_time": action.at_time}
    if action.match is not None:
        out["match"] = asdict(action.match)
    if action.forge is not None:
        out["forge"] = asdict(action.forge)
    if action.set_value is not None:
        out["set_value"] = action.set_value
    return out


def action_from_dict(data: dict) -> Action:
    return Action(
        kind=data["kind"],
        direction=data.get("direction", TO_RTU),
        at_time=data.get("at_time", 0.0),
        match=Match(**data["match"]) if "match" in data else None,
        forge=Forge(**data["forge"]) if "forge" in data else None,
        set_value=data.get("set_value"),
    )


class JsonChannel:
    """Length-prefixed JSON messages over one stream end."""

    def __init__(self, end: StreamEnd, on_msg: Callable, on_close: Optional[Callable] = None):
        self.end = end
        self._buf = bytearray()
        self._on_msg = on_msg
        end.bind(self._on_data, on_close)

    def send(self, msg: dict) -> None:
        blob = json.dumps(msg).encode("utf-8")
        self.end.send(struct.pack(">I", len(blob)) + blob)

    def _on_data(self, payload: bytes) -> None:
        self._buf.extend(payload)
        while len(self._buf) >= 4:
            (length,) = struct.unpack(">I", self._buf[:4])
            if len(self._buf) < 4 + length:
                break
            blob = bytes(self._buf[4 : 4 + length])
            del self._buf[: 4 + length]
            self._on_msg(json.loads(blob))

    def close(self, reason: str = "") -> None:
        self.end.close(reason)


# ---------------------------------------------------------------------------
# Coordinator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlannedAction:
    t: float  # when the agent should fire it
    agent: str
    action: Action


@dataclass(frozen=True)
class CoordinatorConfig:
    plan: tuple
    agents: dict  # name -> (ip, port)
    start_time: Optional[float] = None  # default: 5 s before the first action
    lead: float = 2.0  # deliver each action this long before its fire time
    ack_timeout: float = 3.0
    max_retransmits: int = 2

    def __post_init__(self):
        object.__setattr__(self, "plan", tuple(sorted(self.plan, key=lambda p: p.t)))

    def effective_start(self) -> float:
        if self.start_time is not None:
            return self.start_time
        if not self.plan:
            return 0.0
        return max(0.0, self.plan[0].t - 5.0)


@dataclass
class _ActionRecord:
    planned: PlannedAction
    seq: Optional[int] = None
    outcome: str = "Pending"
    detail: str = ""
    t_sent: Optional[float] = None
    t_acked: Optional[float] = None
    t_done: Optional[float] = None
    sends: int = 0


class _AgentSession:
    def __init__(self, name: str):
        self.name = name
        self.channel: Optional[JsonChannel] = None
        self.connected = False
        self.hello: Optional[dict] = None
        self.heartbeats = []
        self.last_state = "Unknown"
        self.next_seq = 1
        self.acked = set()


class Coordinator:
    """Registers agents, ships action packets ahead of their fire times,
    and collects acknowledgments, statuses, and heartbeats."""

    def __init__(self, clock: SimClock, port: PortHandle, cfg: CoordinatorConfig):
        self.clock = clock
        self.port = port
        self.cfg = cfg
        self.records = [_ActionRecord(planned=p) for p in cfg.plan]
        self.sessions = {}
        self.events = []

    def start(self) -> None:
        t0 = self.cfg.effective_start()
        for name in dict.fromkeys(p.agent for p in self.cfg.plan):
            self.clock.call_at(t0, self._connect, name)
        for record in self.records:
            send_at = max(t0 + 0.1, record.planned.t - self.cfg.lead)
            self.clock.call_at(send_at, self._send_action, record)

    # -- sessions -----------------------------------------------------------

    def _connect(self, name: str) -> None:
        session = _AgentSession(name)
        self.sessions[name] = session
        target = self.cfg.agents.get(name)
        if target is None:
            self._fail_agent(name, "unknown agent")
            return
        ip, port = target
        end = self.port.connect(ip, port)
        session.channel = JsonChannel(
            end,
            on_msg=lambda msg, n=name: self._on_msg(n, msg),
            on_close=lambda reason, n=name: self._on_close(n, reason),
        )
        session.connected = True
        session.channel.send({"seq": 0, "type": "hello", "body": {"coordinator": True}})

    def _on_close(self, name: str, reason: str) -> None:
        session = self.sessions.get(name)
        if session is not None:
            session.connected = False
        self.events.append((self.clock.now, f"{name} channel closed: {reason}"))
        if reason == "refused":
            self._fail_agent(name, "unreachable")

    def _fail_agent(self, name: str, detail: str) -> None:
        for record in self.records:
            if record.planned.agent == name and record.outcome in ("Pending", "Delivered"):
                record.outcome = "ActionFailed"
                record.detail = detail

    # -- actions ------------------------------------------------------------

    def _send_action(self, record: _ActionRecord) -> None:
        session = self.sessions.get(record.planned.agent)
        if session is None or not session.connected:
            if record.outcome == "Pending":
                record.outcome = "ActionFailed"
                record.detail = "unreachable"
            return
        if record.seq is None:
            record.seq = session.next_seq
            session.next_seq += 1
        if record.t_sent is None:
            record.t_sent = self.clock.now
        record.sends += 1
        session.channel.send(
            {
                "seq": record.seq,
                "type": "action",
                "body": dict(action_to_dict(record.planned.action), agent=record.planned.agent),
            }
        )
        if record.sends <= self.cfg.max_retransmits:
            self.clock.call_later(self.cfg.ack_timeout, self._check_ack, record)

    def _check_ack(self, record: _ActionRecord) -> None:
        if record.t_acked is None and record.outcome in ("Pending", "Delivered"):
            self._send_action(record)

    def _on_msg(self, name: str, msg: dict) -> None:
        session = self.sessions[name]
        mtype = msg.get("type")
        if mtype == "hello":
            session.hello = msg.get("body", {})
        elif mtype == "ack":
            seq = msg.get("reply_to")
            if seq in session.acked:
                return  # duplicate ack, idempotent by seq
            session.acked.add(seq)
            for record in self.records:
                if record.planned.agent == name and record.seq == seq and record.t_acked is None:
                    record.t_acked = self.clock.now
                    if record.outcome == "Pending":
                        record.outcome = "Delivered"
        elif mtype == "status":
            body = msg.get("body", {})
            session.last_state = body.get("state", session.last_state)
            seq = body.get("action_seq")
            for record in self.records:
                if record.planned.agent == name and record.seq == seq:
                    record.outcome = body.get("state", "ActionDone")
                    record.detail = body.get("detail", "")
                    record.t_done = self.clock.now
        elif mtype == "heartbeat":
            body = msg.get("body", {})
            session.last_state = body.get("state", session.last_state)
            session.heartbeats.append((self.clock.now, body))

    # -- reporting ------------------------------------------------------------

    def report(self) -> dict:
        return {
            "actions": [
                {
                    "agent": r.planned.agent,
                    "fire_time": r.planned.t,
                    "kind": r.planned.action.kind,
                    "seq": r.seq,
                    "outcome": r.outcome,
                    "detail": r.detail,
                    "t_sent": r.t_sent,
                    "t_acked": r.t_acked,
                    "t_done": r.t_done,
                    "sends": r.sends,
                }
                for r in self.records
            ],
            "agents": {
                name: {
                    "connected": s.connected,
                    "last_state": s.last_state,
                    "heartbeats": len(s.heartbeats),
                }
                for name, s in sorted(self.sessions.items())
            },
        }
