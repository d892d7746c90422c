"""JSON-lines trace format shared by the network taps and the analyzers.

One header line carries run metadata and the endpoint registry; every
following line is one captured frame:

    {"ts": ..., "src_mac": ..., "src_ip": ..., "src_port": ...,
     "dst_mac": ..., "dst_ip": ..., "dst_port": ...,
     "kind": "IEC104"|"C2"|"OTHER", "payload_hex": ..., "flow_id": ...}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

KIND_IEC104 = "IEC104"
KIND_C2 = "C2"
KIND_OTHER = "OTHER"

_FRAME_FIELDS = (
    "ts",
    "src_mac",
    "src_ip",
    "src_port",
    "dst_mac",
    "dst_ip",
    "dst_port",
    "kind",
    "payload_hex",
    "flow_id",
)


@dataclass(frozen=True)
class FrameRecord:
    ts: float
    src_mac: str
    src_ip: str
    src_port: int
    dst_mac: str
    dst_ip: str
    dst_port: int
    kind: str
    payload_hex: str
    flow_id: int

    @property
    def payload(self) -> bytes:
        return bytes.fromhex(self.payload_hex)

    @property
    def flow_key(self) -> tuple:
        return (self.src_ip, self.src_port, self.dst_ip, self.dst_port)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _FRAME_FIELDS}


@dataclass
class Trace:
    meta: dict
    registry: list  # [{"name", "mac", "ip", "port"}, ...]
    frames: list = field(default_factory=list)

    @property
    def registry_ips(self) -> list:
        return [entry["ip"] for entry in self.registry]


def dump_trace(path, trace: Trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": trace.meta, "registry": trace.registry}) + "\n")
        for frame in trace.frames:
            fh.write(json.dumps(frame.to_dict()) + "\n")


def load_trace(path) -> Trace:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        frames = [FrameRecord(**json.loads(line)) for line in fh if line.strip()]
    return Trace(meta=header.get("meta", {}), registry=header.get("registry", []), frames=frames)


def truncate_trace(trace: Trace, t_max: float) -> Trace:
    """Keep only frames with ts <= t_max (flow ids untouched)."""
    kept = [frame for frame in trace.frames if frame.ts <= t_max]
    return Trace(meta=dict(trace.meta), registry=list(trace.registry), frames=kept)
