"""IEC-104 endpoint state machines: the field-side server (RTU) and the
control-side client (MTU).

Both share one session engine that tracks 15-bit send/receive counters,
acknowledges per the k/w flow-control parameters, and answers test frames.
``strict_sequence`` selects how a counter violation is handled: abort the
connection, or resynchronize and keep going.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from . import iec104 as i104
from .virtnet import PortHandle, SimClock, StreamEnd

T1_DEFAULT = 15.0
T2_DEFAULT = 10.0
T3_DEFAULT = 20.0


@dataclass
class SequenceState:
    """Per-connection counters, all modulo 32768."""

    v_s: int = 0  # next send sequence
    v_r: int = 0  # next expected receive sequence
    ack_s: int = 0  # peer-acknowledged send count

    @property
    def unacked(self) -> int:
        return (self.v_s - self.ack_s) % i104.SEQ_MOD


class Iec104Session:
    """One established connection: framing, counters, acks, test frames."""

    def __init__(
        self,
        clock: SimClock,
        end: StreamEnd,
        *,
        name: str,
        k: int = 12,
        w: int = 8,
        strict: bool = False,
        t1: float = T1_DEFAULT,
        t2: float = T2_DEFAULT,
        t3: float = T3_DEFAULT,
        on_asdu: Callable,
        on_started: Optional[Callable] = None,
        on_abort: Optional[Callable] = None,
    ):
        if not 1 <= w <= k:
            raise ValueError("require 1 <= w <= k")
        self.clock = clock
        self.end = end
        self.name = name
        self.k = k
        self.w = w
        self.strict = strict
        self.t1 = t1
        self.t2 = t2
        self.t3 = t3
        self.seq = SequenceState()
        self.started = False
        self.alive = True
        self.notes = []  # (t, note) protocol observations, e.g. resyncs
        self._on_asdu = on_asdu
        self._on_started = on_started
        self._on_abort = on_abort
        self._stream = i104.ApduStream()
        self._sendq = []
        self._recv_unacked = 0
        self._ack_timer = None
        self._idle_timer = None
        self._testfr_timer = None
        end.bind(self._on_bytes, self._on_close)
        self._arm_idle_timer()

    # -- outgoing ----------------------------------------------------------

    def start_data_transfer(self) -> None:
        self._send_u(i104.UFunction.STARTDT_ACT)

    def send_i(self, asdu: i104.Asdu) -> None:
        if not self.alive:
            return
        if self.seq.unacked >= self.k:
            self._sendq.append(asdu)
            return
        self._emit_i(asdu)

    def _emit_i(self, asdu: i104.Asdu) -> None:
        apdu = i104.i_frame(self.seq.v_s, self.seq.v_r, asdu)
        self.seq.v_s = i104.seq_add(self.seq.v_s, 1)
        self._ack_sent()
        self.end.send(i104.encode(apdu))

    def send_s(self) -> None:
        if not self.alive:
            return
        self.end.send(i104.encode(i104.s_frame(self.seq.v_r)))
        self._ack_sent()

    def _send_u(self, function: i104.UFunction) -> None:
        if self.alive:
            self.end.send(i104.encode(i104.u_frame(function)))

    def _ack_sent(self) -> None:
        self._recv_unacked = 0
        if self._ack_timer is not None:
            self._ack_timer.cancel()
            self._ack_timer = None

    # -- incoming ----------------------------------------------------------

    def _on_bytes(self, payload: bytes) -> None:
        if not self.alive:
            return
        try:
            apdus = self._stream.feed(payload)
        except i104.DecodeError as exc:
            self.abort(f"protocol-error: {exc}")
            return
        for apdu in apdus:
            if not self.alive:
                break
            self._handle(apdu)

    def _handle(self, apdu: i104.Apdu) -> None:
        self._arm_idle_timer()
        kind = apdu.apci.frame_kind
        if kind == i104.FrameKind.U:
            self._handle_u(apdu.apci.u_function)
            return
        self._process_ack(apdu.apci.rx)
        if not self.alive or kind == i104.FrameKind.S:
            return
        tx = apdu.apci.tx
        if tx != self.seq.v_r:
            if self.strict:
                self.abort(f"sequence-error: got tx={tx}, expected {self.seq.v_r}")
                return
            self.notes.append((self.clock.now, f"resync v_r {self.seq.v_r} -> {tx}"))
            self.seq.v_r = tx
        self.seq.v_r = i104.seq_add(self.seq.v_r, 1)
        self._recv_unacked += 1
        if self._recv_unacked >= self.w:
            self.send_s()
        elif self._ack_timer is None:
            self._ack_timer = self.clock.call_later(self.t2, self._ack_timeout)
        self._on_asdu(apdu.asdu)

    def _handle_u(self, function: i104.UFunction) -> None:
        if function == i104.UFunction.STARTDT_ACT:
            self._send_u(i104.UFunction.STARTDT_CON)
            self._set_started()
        elif function == i104.UFunction.STARTDT_CON:
            self._set_started()
        elif function == i104.UFunction.TESTFR_ACT:
            self._send_u(i104.UFunction.TESTFR_CON)
        elif function == i104.UFunction.TESTFR_CON:
            if self._testfr_timer is not None:
                self._testfr_timer.cancel()
                self._testfr_timer = None
        elif function == i104.UFunction.STOPDT_ACT:
            self._send_u(i104.UFunction.STOPDT_CON)
            self.started = False

    def _set_started(self) -> None:
        if not self.started:
            self.started = True
            if self._on_started is not None:
                self._on_started()

    def _process_ack(self, rx: Optional[int]) -> None:
        if rx is None:
            return
        advance = (rx - self.seq.ack_s) % i104.SEQ_MOD
        outstanding = self.seq.unacked
        if advance > outstanding:
            if self.strict:
                self.abort(f"ack-error: rx={rx} acknowledges {advance - outstanding} unsent frames")
                return
            self.notes.append((self.clock.now, f"future ack rx={rx}, clamped"))
            self.seq.ack_s = self.seq.v_s
        else:
            self.seq.ack_s = rx
        while self._sendq and self.seq.unacked < self.k:
            self._emit_i(self._sendq.pop(0))

    # -- timers ------------------------------------------------------------

    def _ack_timeout(self) -> None:
        self._ack_timer = None
        if self.alive and self._recv_unacked > 0:
            self.send_s()

    def _arm_idle_timer(self) -> None:
        if self._idle_timer is not None:
            self._idle_timer.cancel()
        self._idle_timer = self.clock.call_later(self.t3, self._idle_timeout)

    def _idle_timeout(self) -> None:
        self._idle_timer = None
        if not self.alive:
            return
        self._send_u(i104.UFunction.TESTFR_ACT)
        if self._testfr_timer is None:
            self._testfr_timer = self.clock.call_later(self.t1, self.abort, "testfr-timeout")
        self._arm_idle_timer()

    # -- teardown ----------------------------------------------------------

    def _cancel_timers(self) -> None:
        for timer in (self._ack_timer, self._idle_timer, self._testfr_timer):
            if timer is not None:
                timer.cancel()
        self._ack_timer = self._idle_timer = self._testfr_timer = None

    def abort(self, reason: str) -> None:
        if not self.alive:
            return
        self.alive = False
        self._cancel_timers()
        self.notes.append((self.clock.now, f"abort: {reason}"))
        self.end.close(reason)
        if self._on_abort is not None:
            self._on_abort(reason)

    def _on_close(self, reason: str) -> None:
        if not self.alive:
            return
        self.alive = False
        self._cancel_timers()
        if self._on_abort is not None:
            self._on_abort(f"peer-closed: {reason}")


# ---------------------------------------------------------------------------
# RTU: field-side server
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementSpec:
    """One reported point: asset power or bus voltage."""

    ioa: int
    quantity: str  # "P_kW" | "V_V"
    ref: str  # asset or bus name


@dataclass(frozen=True)
class RtuConfig:
    name: str
    common_address: int
    measurements: tuple
    setpoint_ioas: dict  # ioa -> asset name
    measurement_period: float = 1.0
    k: int = 12
    w: int = 8
    strict_sequence: bool = True
    t1: float = T1_DEFAULT
    t2: float = T2_DEFAULT
    t3: float = T3_DEFAULT
    exec_delay: float = 0.1  # ActCon to ActTerm spacing
    listen_port: int = i104.IEC104_PORT

    def __post_init__(self):
        object.__setattr__(self, "measurements", tuple(self.measurements))
        if not 1 <= self.w <= self.k:
            raise ValueError("require 1 <= w <= k")


class Rtu:
    """Serves measurements periodically and executes set-point commands."""

    def __init__(self, clock: SimClock, port: PortHandle, cfg: RtuConfig, process):
        self.clock = clock
        self.cfg = cfg
        self.process = process
        self.session: Optional[Iec104Session] = None
        self.aborts = []
        self.commands_executed = []  # (t, asset, value)
        self._meas_timer = None
        port.listen(cfg.listen_port, self._accept)

    def _accept(self, end: StreamEnd) -> None:
        if self.session is not None and self.session.alive:
            end.close("busy")
            return
        self.session = Iec104Session(
            self.clock,
            end,
            name=self.cfg.name,
            k=self.cfg.k,
            w=self.cfg.w,
            strict=self.cfg.strict_sequence,
            t1=self.cfg.t1,
            t2=self.cfg.t2,
            t3=self.cfg.t3,
            on_asdu=self._on_asdu,
            on_started=self._on_started,
            on_abort=self._on_abort,
        )

    def _on_started(self) -> None:
        self._schedule_measurement()

    def _on_abort(self, reason: str) -> None:
        self.aborts.append((self.clock.now, reason))
        if self._meas_timer is not None:
            self._meas_timer.cancel()
            self._meas_timer = None

    def _schedule_measurement(self) -> None:
        self._meas_timer = self.clock.call_later(self.cfg.measurement_period, self._measure)

    def _measure(self) -> None:
        if self.session is None or not self.session.alive:
            return
        self.session.send_i(self._measurement_asdu(i104.COT_PERIODIC))
        self._schedule_measurement()

    def _measurement_asdu(self, cot: int) -> i104.Asdu:
        objects = []
        for spec in self.cfg.measurements:
            if spec.quantity == "P_kW":
                value = self.process.active_power_kw[spec.ref]
            else:
                value = self.process.voltage_at(spec.ref)
            objects.append(i104.InformationObject(spec.ioa, value=value))
        return i104.Asdu(
            type_id=i104.M_ME_NC_1,
            cot=cot,
            common_address=self.cfg.common_address,
            objects=tuple(objects),
        )

    def _on_asdu(self, asdu) -> None:
        if not isinstance(asdu, i104.Asdu):
            return  # opaque payloads are not interpretable, ignore
        if asdu.type_id == i104.C_SE_NC_1 and asdu.cot == i104.COT_ACTIVATION:
            self._handle_setpoint(asdu)
        elif asdu.type_id == i104.C_IC_NA_1 and asdu.cot == i104.COT_ACTIVATION:
            self._handle_interrogation(asdu)

    def _reply(self, asdu: i104.Asdu, cot: int, negative: bool = False) -> None:
        if self.session is not None and self.session.alive:
            self.session.send_i(
                i104.Asdu(
                    type_id=asdu.type_id,
                    cot=cot,
                    common_address=asdu.common_address,
                    objects=asdu.objects,
                    originator=asdu.originator,
                    negative=negative,
                )
            )

    def _handle_setpoint(self, asdu: i104.Asdu) -> None:
        obj = asdu.objects[0]
        if asdu.common_address != self.cfg.common_address or obj.ioa not in self.cfg.setpoint_ioas:
            self._reply(asdu, i104.COT_ACTIVATION_CON, negative=True)
            return
        asset = self.cfg.setpoint_ioas[obj.ioa]
        self._reply(asdu, i104.COT_ACTIVATION_CON)
        self.process.apply_setpoint(asset, obj.value)
        self.commands_executed.append((self.clock.now, asset, obj.value))
        self.clock.call_later(self.cfg.exec_delay, self._reply, asdu, i104.COT_ACTIVATION_TERM)

    def _handle_interrogation(self, asdu: i104.Asdu) -> None:
        if asdu.common_address != self.cfg.common_address:
            self._reply(asdu, i104.COT_ACTIVATION_CON, negative=True)
            return
        self._reply(asdu, i104.COT_ACTIVATION_CON)
        if self.cfg.measurements:
            self.session.send_i(self._measurement_asdu(i104.COT_INTERROGATED))
        self._reply(asdu, i104.COT_ACTIVATION_TERM)


# ---------------------------------------------------------------------------
# MTU: control-side client
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RtuLink:
    name: str
    ip: str
    common_address: int
    port: int = i104.IEC104_PORT


@dataclass(frozen=True)
class ScheduledCommand:
    t: float
    rtu: str
    ioa: int
    value: float


@dataclass(frozen=True)
class MtuConfig:
    name: str
    rtus: tuple
    schedule: tuple = ()
    k: int = 12
    w: int = 1  # acknowledge every I-frame immediately
    strict_sequence: bool = False
    t1: float = T1_DEFAULT
    t2: float = T2_DEFAULT
    t3: float = T3_DEFAULT
    transaction_timeout: float = 10.0
    retry_backoff: float = 2.0
    interrogate_on_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "rtus", tuple(self.rtus))
        object.__setattr__(self, "schedule", tuple(sorted(self.schedule, key=lambda c: c.t)))


@dataclass
class Transaction:
    rtu: str
    type_id: int
    common_address: int
    ioa: int
    value: float
    state: str = "Sent"  # Sent -> Confirmed -> Terminated | Failed
    t_sent: float = 0.0
    t_con: Optional[float] = None
    t_term: Optional[float] = None
    detail: str = ""


class _Link:
    def __init__(self, spec: RtuLink):
        self.spec = spec
        self.session: Optional[Iec104Session] = None
        self.pending = []  # commands issued before data transfer started


class Mtu:
    """Dummy SCADA client: connects, interrogates, commands on schedule,
    matches command replies, and tolerates what it cannot match."""

    def __init__(self, clock: SimClock, port: PortHandle, cfg: MtuConfig):
        self.clock = clock
        self.port = port
        self.cfg = cfg
        self.links = {spec.name: _Link(spec) for spec in cfg.rtus}
        self.transactions = []
        self.orphans = []  # replies with no matching open transaction
        self.measurements_received = 0
        self.last_values = {}  # (ca, ioa) -> value
        self.disconnects = []
        self._open = {}  # (type_id, ca, ioa) -> [Transaction, ...]
        self._running = False

    def start(self) -> None:
        self._running = True
        for idx, name in enumerate(self.links):
            self.clock.call_later(0.05 * idx, self._connect, name)
        for cmd in self.cfg.schedule:
            self.clock.call_at(cmd.t, self._scheduled_command, cmd)

    def stop(self) -> None:
        self._running = False

    # -- connection management ----------------------------------------------

    def _connect(self, name: str) -> None:
        if not self._running:
            return
        link = self.links[name]
        end = self.port.connect(link.spec.ip, link.spec.port)
        link.session = Iec104Session(
            self.clock,
            end,
            name=f"{self.cfg.name}->{name}",
            k=self.cfg.k,
            w=self.cfg.w,
            strict=self.cfg.strict_sequence,
            t1=self.cfg.t1,
            t2=self.cfg.t2,
            t3=self.cfg.t3,
            on_asdu=lambda asdu, n=name: self._on_asdu(n, asdu),
            on_started=lambda n=name: self._on_started(n),
            on_abort=lambda reason, n=name: self._on_link_down(n, reason),
        )
        link.session.start_data_transfer()

    def _on_link_down(self, name: str, reason: str) -> None:
        self.disconnects.append((self.clock.now, name, reason))
        if self._running:
            self.clock.call_later(self.cfg.retry_backoff, self._connect, name)

    def _on_started(self, name: str) -> None:
        link = self.links[name]
        if self.cfg.interrogate_on_start:
            self._send_activation(
                link,
                i104.Asdu(
                    type_id=i104.C_IC_NA_1,
                    cot=i104.COT_ACTIVATION,
                    common_address=link.spec.common_address,
                    objects=(i104.InformationObject(0, value=float(i104.QOI_STATION)),),
                ),
            )
        pending, link.pending = link.pending, []
        for cmd in pending:
            self._command(link, cmd)

    # -- commands ------------------------------------------------------------

    def _scheduled_command(self, cmd: ScheduledCommand) -> None:
        link = self.links[cmd.rtu]
        if link.session is None or not link.session.alive or not link.session.started:
            link.pending.append(cmd)
            return
        self._command(link, cmd)

    def _command(self, link: _Link, cmd: ScheduledCommand) -> None:
        self._send_activation(
            link,
            i104.Asdu(
                type_id=i104.C_SE_NC_1,
                cot=i104.COT_ACTIVATION,
                common_address=link.spec.common_address,
                objects=(i104.InformationObject(cmd.ioa, value=cmd.value),),
            ),
        )

    def _send_activation(self, link: _Link, asdu: i104.Asdu) -> None:
        obj = asdu.objects[0]
        txn = Transaction(
            rtu=link.spec.name,
            type_id=asdu.type_id,
            common_address=asdu.common_address,
            ioa=obj.ioa,
            value=obj.value,
            t_sent=self.clock.now,
        )
        self.transactions.append(txn)
        self._open.setdefault((asdu.type_id, asdu.common_address, obj.ioa), []).append(txn)
        link.session.send_i(asdu)
        self.clock.call_later(self.cfg.transaction_timeout, self._check_timeout, txn)

    def _check_timeout(self, txn: Transaction) -> None:
        if txn.state in ("Sent", "Confirmed"):
            txn.state = "Failed"
            txn.detail = "timeout"
            self._drop_open(txn)

    def _drop_open(self, txn: Transaction) -> None:
        key = (txn.type_id, txn.common_address, txn.ioa)
        queue = self._open.get(key, [])
        if txn in queue:
            queue.remove(txn)

    # -- replies -------------------------------------------------------------

    def _on_asdu(self, rtu_name: str, asdu) -> None:
        if not isinstance(asdu, i104.Asdu):
            return
        if asdu.type_id == i104.M_ME_NC_1:
            self.measurements_received += 1
            for obj in asdu.objects:
                self.last_values[(asdu.common_address, obj.ioa)] = obj.value
            return
        if asdu.cot == i104.COT_ACTIVATION_CON:
            self._match_reply(rtu_name, asdu, confirm=True)
        elif asdu.cot == i104.COT_ACTIVATION_TERM:
            self._match_reply(rtu_name, asdu, confirm=False)

    def _match_reply(self, rtu_name: str, asdu: i104.Asdu, confirm: bool) -> None:
        obj = asdu.objects[0]
        key = (asdu.type_id, asdu.common_address, obj.ioa)
        queue = self._open.get(key, [])
        if confirm:
            for txn in queue:
                if txn.state == "Sent":
                    if asdu.negative:
                        txn.state = "Failed"
                        txn.detail = "negative confirmation"
                        self._drop_open(txn)
                    else:
                        txn.state = "Confirmed"
                        txn.t_con = self.clock.now
                    return
        else:
            for txn in queue:
                if txn.state == "Confirmed":
                    txn.state = "Terminated"
                    txn.t_term = self.clock.now
                    self._drop_open(txn)
                    return
        # Tolerated, recorded, and kept out of the transaction table: the
        # client operates through whatever it cannot explain.
        self.orphans.append(
            {
                "t": self.clock.now,
                "rtu": rtu_name,
                "ioa": obj.ioa,
                "value": obj.value,
                "cot": asdu.cot,
                "state": "Orphan",
            }
        )

    # -- export ---------------------------------------------------------------

    def transaction_rows(self) -> list:
        rows = [
            {
                "t_sent": txn.t_sent,
                "t_con": txn.t_con,
                "t_term": txn.t_term,
                "rtu": txn.rtu,
                "ioa": txn.ioa,
                "value": txn.value,
                "state": txn.state,
            }
            for txn in self.transactions
            if txn.type_id == i104.C_SE_NC_1
        ]
        rows.extend(self.orphans)
        rows.sort(key=lambda r: (r.get("t_sent") if "t_sent" in r else r["t"]))
        return rows
