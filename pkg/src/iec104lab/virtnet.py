"""Deterministic virtual switched network.

A discrete-event clock drives endpoints that exchange reliable, ordered
byte streams through one switch. Every frame crossing the switch or an
inline interception point is recorded by a passive tap together with its
stamped L2/L3/L4 identity. Identity stamps come from the port registry,
never from the sender, with one deliberate exception: an inline agent may
originate frames that carry the agent's own MAC under a forged IP/port.

Connection setup and teardown are modeled as control events (taps record
a close as a short ``FIN`` pseudo-frame); TCP handshakes, retransmission,
and segmentation are not modeled.
"""

from __future__ import annotations

import heapq
import time as _time
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Optional

from .traceio import KIND_OTHER, FrameRecord, Trace

EPHEMERAL_BASE = 49152
DEFAULT_SWITCH_LATENCY = 0.0001
DEFAULT_AGENT_LINK_LATENCY = 0.00005


class VirtnetError(Exception):
    pass


class DuplicateIdentity(VirtnetError):
    pass


class UnknownEndpoint(VirtnetError):
    pass


class AlreadyIntercepted(VirtnetError):
    pass


class UnknownLocation(VirtnetError):
    pass


class SimClock:
    """Monotonic simulated clock with a cancellable event heap."""

    def __init__(self):
        self._now = 0.0
        self._heap = []
        self._seq = 0

    @property
    def now(self) -> float:
        return self._now

    def call_at(self, t: float, fn: Callable, *args):
        if t < self._now:
            t = self._now
        entry = [t, self._seq, fn, args]
        self._seq += 1
        heapq.heappush(self._heap, entry)
        return _Timer(entry)

    def call_later(self, delay: float, fn: Callable, *args):
        return self.call_at(self._now + delay, fn, *args)

    def run(self, until: Optional[float] = None, pace: float = 0.0) -> None:
        """Execute events in time order up to ``until``.

        ``pace`` throttles wall time to ``pace`` seconds per simulated
        second; it never changes event order or timestamps.
        """
        wall_start = _time.monotonic()
        sim_start = self._now
        while self._heap:
            t = self._heap[0][0]
            if until is not None and t > until:
                break
            entry = heapq.heappop(self._heap)
            if entry[2] is None:
                continue
            if pace > 0.0:
                lag = (t - sim_start) * pace - (_time.monotonic() - wall_start)
                if lag > 0:
                    _time.sleep(lag)
            self._now = t
            entry[2](*entry[3])
        if until is not None and until > self._now:
            self._now = until


class _Timer:
    def __init__(self, entry):
        self._entry = entry

    def cancel(self) -> None:
        self._entry[2] = None
        self._entry[3] = ()

    @property
    def active(self) -> bool:
        return self._entry[2] is not None


@dataclass(frozen=True)
class Stamp:
    """L2/L3/L4 source or destination identity carried by a frame."""

    mac: str
    ip: str
    port: int


@dataclass(frozen=True)
class EndpointIdentity:
    name: str
    mac: str
    ip: str
    port: int

    def stamp(self, port: Optional[int] = None) -> Stamp:
        return Stamp(self.mac, self.ip, self.port if port is None else port)


class Tap:
    """Passive capture point: records frames without touching them."""

    def __init__(self, name: str):
        self.name = name
        self.frames = []
        self._flow_ids = {}

    def record(self, ts: float, src: Stamp, dst: Stamp, kind: str, payload: bytes) -> None:
        key = (src.ip, src.port, dst.ip, dst.port)
        flow_id = self._flow_ids.setdefault(key, len(self._flow_ids))
        self.frames.append(
            FrameRecord(
                ts=ts,
                src_mac=src.mac,
                src_ip=src.ip,
                src_port=src.port,
                dst_mac=dst.mac,
                dst_ip=dst.ip,
                dst_port=dst.port,
                kind=kind,
                payload_hex=payload.hex(),
                flow_id=flow_id,
            )
        )


@dataclass
class _Endpoint:
    identity: EndpointIdentity
    link_latency: float
    registered: bool
    jitter: float = 0.0
    listeners: dict = field(default_factory=dict)  # port -> accept callback
    agent: Optional[object] = None  # inline interception agent, if any
    next_ephemeral: int = EPHEMERAL_BASE


class _Leg:
    """One direction of a stream: fixed latency, optional tap crossings."""

    def __init__(self, latency: float, taps, jitter: float = 0.0):
        self.latency = latency
        self.taps = taps  # [(tap, delay_from_send), ...]
        self.jitter = jitter
        self.last_arrival = 0.0


class StreamEnd:
    """One side of a reliable ordered byte stream."""

    def __init__(self, net: "VirtualNetwork", claim: Stamp, leg_out: _Leg, kind: str):
        self._net = net
        self.claim = claim
        self._leg = leg_out
        self._kind = kind
        self.peer: Optional[StreamEnd] = None
        self.is_open = True
        self._on_data = None
        self._on_close = None
        self._ready_at = 0.0  # no delivery before the accept has fired

    def bind(self, on_data: Callable, on_close: Optional[Callable] = None) -> None:
        self._on_data = on_data
        self._on_close = on_close

    @property
    def peer_claim(self) -> Stamp:
        return self.peer.claim

    def send(self, payload: bytes, src_stamp: Optional[Stamp] = None) -> None:
        if not self.is_open or not payload:
            return
        clock = self._net.clock
        src = src_stamp or self.claim
        dst = self.peer.claim
        kind = self._kind
        sent = clock.now
        for tap, delay in self._leg.taps:
            clock.call_at(sent + delay, tap.record, sent + delay, src, dst, kind, payload)
        arrival = sent + self._leg.latency
        if self._leg.jitter:
            arrival += self._net.rng.uniform(0.0, self._leg.jitter)
        arrival = max(arrival, self._leg.last_arrival, self.peer._ready_at)
        self._leg.last_arrival = arrival
        clock.call_at(arrival, self._deliver, payload)

    def _deliver(self, payload: bytes) -> None:
        peer = self.peer
        if peer.is_open and peer._on_data is not None:
            peer._on_data(payload)

    def close(self, reason: str = "") -> None:
        if not self.is_open:
            return
        self.is_open = False
        clock = self._net.clock
        sent = clock.now
        fin = b"FIN"
        for tap, delay in self._leg.taps:
            clock.call_at(sent + delay, tap.record, sent + delay, self.claim, self.peer.claim, KIND_OTHER, fin)
        arrival = max(sent + self._leg.latency, self._leg.last_arrival, self.peer._ready_at)
        self._leg.last_arrival = arrival
        clock.call_at(arrival, self.peer._peer_closed, reason)

    def _peer_closed(self, reason: str) -> None:
        if not self.is_open:
            return
        self.is_open = False
        if self._on_close is not None:
            self._on_close(reason)


class PortHandle:
    """An endpoint's attachment to the network."""

    def __init__(self, net: "VirtualNetwork", entry: _Endpoint):
        self._net = net
        self._entry = entry

    @property
    def identity(self) -> EndpointIdentity:
        return self._entry.identity

    def listen(self, port: int, on_accept: Callable) -> None:
        self._entry.listeners[port] = on_accept

    def connect(self, dst_ip: str, dst_port: int) -> StreamEnd:
        return self._net._connect(self._entry, dst_ip, dst_port)


class VirtualNetwork:
    """One switch, attached endpoints, inline agents, passive taps."""

    def __init__(
        self,
        clock: SimClock,
        rng: Optional[Random] = None,
        switch_latency: float = DEFAULT_SWITCH_LATENCY,
        agent_link_latency: float = DEFAULT_AGENT_LINK_LATENCY,
        kind_ports: Optional[dict] = None,
    ):
        self.clock = clock
        self.rng = rng or Random(0)
        self.switch_latency = switch_latency
        self.agent_link_latency = agent_link_latency
        self.kind_ports = dict(kind_ports or {})
        self._by_ip = {}
        self._by_name = {}
        self.registry = []
        self._taps = {"switch": Tap("switch")}

    # -- topology ---------------------------------------------------------

    def attach(
        self,
        identity: EndpointIdentity,
        link_latency: float,
        registered: bool = True,
        jitter: float = 0.0,
    ) -> PortHandle:
        if identity.name in self._by_name or identity.ip in self._by_ip:
            raise DuplicateIdentity(f"{identity.name} ({identity.ip}) already attached")
        for other in self._by_name.values():
            if other.identity.mac == identity.mac:
                raise DuplicateIdentity(f"mac {identity.mac} already attached")
        entry = _Endpoint(identity, link_latency, registered, jitter=jitter)
        self._by_ip[identity.ip] = entry
        self._by_name[identity.name] = entry
        if registered:
            self.registry.append(
                {"name": identity.name, "mac": identity.mac, "ip": identity.ip, "port": identity.port}
            )
        return PortHandle(self, entry)

    def insert_inline(self, endpoint_name: str, agent) -> None:
        entry = self._by_name.get(endpoint_name)
        if entry is None:
            raise UnknownEndpoint(endpoint_name)
        if entry.agent is not None:
            raise AlreadyIntercepted(endpoint_name)
        entry.agent = agent
        self._taps[f"agent:{endpoint_name}"] = Tap(f"agent:{endpoint_name}")

    def tap(self, location: str) -> Tap:
        try:
            return self._taps[location]
        except KeyError:
            raise UnknownLocation(location) from None

    def tap_names(self) -> list:
        return list(self._taps)

    def build_trace(self, location: str, meta: dict) -> Trace:
        tap = self.tap(location)
        meta = dict(meta)
        meta["tap"] = location
        return Trace(meta=meta, registry=list(self.registry), frames=list(tap.frames))

    # -- streams ----------------------------------------------------------

    def classify(self, src_port: int, dst_port: int) -> str:
        return self.kind_ports.get(dst_port) or self.kind_ports.get(src_port) or KIND_OTHER

    def _switch_legs(self, a: _Endpoint, b: _Endpoint):
        """Leg pair for a path a -> switch -> b, tapped at the switch."""
        tap = self._taps["switch"]
        lat_ab = a.link_latency + self.switch_latency + b.link_latency
        lat_ba = b.link_latency + self.switch_latency + a.link_latency
        jitter = a.jitter + b.jitter
        return (
            _Leg(lat_ab, [(tap, a.link_latency)], jitter),
            _Leg(lat_ba, [(tap, b.link_latency)], jitter),
        )

    def _make_stream(self, claim_a: Stamp, claim_b: Stamp, leg_ab: _Leg, leg_ba: _Leg, kind: str):
        end_a = StreamEnd(self, claim_a, leg_ab, kind)
        end_b = StreamEnd(self, claim_b, leg_ba, kind)
        end_a.peer = end_b
        end_b.peer = end_a
        return end_a, end_b

    def _connect(self, src: _Endpoint, dst_ip: str, dst_port: int) -> StreamEnd:
        src_port = src.next_ephemeral
        src.next_ephemeral += 1
        src_stamp = Stamp(src.identity.mac, src.identity.ip, src_port)
        dst = self._by_ip.get(dst_ip)
        kind = self.classify(src_port, dst_port)
        if dst is None or dst_port not in dst.listeners:
            # Refused: surface an async close on the caller's end.
            leg = _Leg(0.0, [])
            end, _ = self._make_stream(src_stamp, Stamp("", dst_ip, dst_port), leg, leg, kind)
            rtt = 2 * (src.link_latency + self.switch_latency)
            self.clock.call_later(rtt, end._peer_closed, "refused")
            return end
        dst_stamp = Stamp(dst.identity.mac, dst_ip, dst_port)
        if dst.agent is not None:
            # Interception: the caller talks to the agent, which impersonates
            # the original destination on this leg.
            leg_ab, leg_ba = self._switch_legs(src, dst)
            client_end, agent_end = self._make_stream(src_stamp, dst_stamp, leg_ab, leg_ba, kind)
            established = self.clock.now + leg_ab.latency
            client_end._ready_at = agent_end._ready_at = established
            self.clock.call_at(established, dst.agent.on_intercepted_connect, agent_end, dst_port)
            return client_end
        leg_ab, leg_ba = self._switch_legs(src, dst)
        client_end, server_end = self._make_stream(src_stamp, dst_stamp, leg_ab, leg_ba, kind)
        established = self.clock.now + leg_ab.latency
        client_end._ready_at = server_end._ready_at = established
        self.clock.call_at(established, dst.listeners[dst_port], server_end)
        return client_end

    def dial_inline(self, endpoint_name: str, claim: Stamp, dst_port: int) -> StreamEnd:
        """An inline agent dials its intercepted endpoint directly,
        impersonating ``claim`` on the agent-side link."""
        entry = self._by_name.get(endpoint_name)
        if entry is None:
            raise UnknownEndpoint(endpoint_name)
        if dst_port not in entry.listeners:
            raise UnknownEndpoint(f"{endpoint_name} has no listener on {dst_port}")
        tap = self._taps[f"agent:{endpoint_name}"]
        kind = self.classify(claim.port, dst_port)
        lat = self.agent_link_latency
        leg_to_ep = _Leg(lat, [(tap, lat)])
        leg_from_ep = _Leg(lat, [(tap, lat)])
        dst_stamp = Stamp(entry.identity.mac, entry.identity.ip, dst_port)
        agent_end, server_end = self._make_stream(claim, dst_stamp, leg_to_ep, leg_from_ep, kind)
        established = self.clock.now + lat
        agent_end._ready_at = server_end._ready_at = established
        self.clock.call_at(established, entry.listeners[dst_port], server_end)
        return agent_end
