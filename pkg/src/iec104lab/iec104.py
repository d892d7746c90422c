"""Encoder/decoder for the IEC 60870-5-104 application-layer subset used by
the workbench: I/S/U framing, a four-type ASDU catalog, and 15-bit sequence
arithmetic.

Unknown or malformed ASDU payloads inside a well-framed APCI decode into
:class:`OpaqueAsdu`, preserving the raw octets so interceptors and taps can
forward or record traffic they cannot interpret.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Optional, Union

START_BYTE = 0x68
SEQ_MOD = 32768  # 15-bit TX/RX counters, modulo 32768
APCI_LEN_MIN = 4
APCI_LEN_MAX = 253
IEC104_PORT = 2404

# ASDU type identifiers
M_SP_NA_1 = 1  # single-point information
M_ME_NC_1 = 13  # measured value, short floating point
C_SE_NC_1 = 50  # set-point command, short floating point
C_IC_NA_1 = 100  # general interrogation command

# causes of transmission
COT_PERIODIC = 1
COT_SPONTANEOUS = 3
COT_ACTIVATION = 6
COT_ACTIVATION_CON = 7
COT_ACTIVATION_TERM = 10
COT_INTERROGATED = 20

QOI_STATION = 20  # station-level general interrogation qualifier

# octets per information object after the 3-octet IOA
_OBJ_TAIL_SIZE = {M_SP_NA_1: 1, M_ME_NC_1: 5, C_SE_NC_1: 5, C_IC_NA_1: 1}

# encode-time sanity bound for normalized set-point command values
SETPOINT_LIMIT = 1.5

FLOAT32_MAX = 3.4028235e38


class FrameKind(Enum):
    I = "I"
    S = "S"
    U = "U"


class UFunction(IntEnum):
    """Control-octet values of the six unnumbered (U) frame functions."""

    STARTDT_ACT = 0x07
    STARTDT_CON = 0x0B
    STOPDT_ACT = 0x13
    STOPDT_CON = 0x23
    TESTFR_ACT = 0x43
    TESTFR_CON = 0x83


class Iec104Error(Exception):
    pass


class InvariantViolation(Iec104Error):
    """An Apdu handed to encode() violates a type invariant."""


class DecodeError(Iec104Error):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (octet offset {offset})")
        self.offset = offset


class Truncated(DecodeError):
    """More octets are required to decode a complete APDU."""

    def __init__(self, needed: int, have: int):
        super().__init__(f"need {needed} octets, have {have}", offset=have)
        self.needed = needed


class BadStart(DecodeError):
    """Input does not begin with the 0x68 start octet."""


class Malformed(DecodeError):
    """APCI-level inconsistency; ``offset`` identifies the offending octet."""


def seq_add(seq: int, delta: int) -> int:
    """Add ``delta`` to a 15-bit sequence number, wrapping modulo 32768."""
    if not 0 <= seq < SEQ_MOD:
        raise InvariantViolation(f"sequence number out of range: {seq}")
    return (seq + delta) % SEQ_MOD


@dataclass(frozen=True)
class Apci:
    """Control information of one APDU.

    ``length`` is the on-wire length-field value; it is filled in by the
    decoder and ignored for equality so hand-built frames compare clean.
    """

    frame_kind: FrameKind
    tx: Optional[int] = None
    rx: Optional[int] = None
    u_function: Optional[UFunction] = None
    length: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class InformationObject:
    """One addressed value inside an ASDU.

    ``value`` carries the engineering value for short-float types, 0.0/1.0
    for single-point, and the qualifier octet (as a float) for
    interrogation commands. ``quality`` holds the remaining descriptor bits
    of the trailing octet; ``select`` is the set-point select/execute bit.
    """

    ioa: int
    value: float = 0.0
    quality: int = 0
    select: bool = False


@dataclass(frozen=True)
class Asdu:
    type_id: int
    cot: int
    common_address: int
    objects: tuple
    originator: int = 0
    negative: bool = False
    test: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))


@dataclass(frozen=True)
class OpaqueAsdu:
    """An ASDU kept as raw octets: unknown type id or unparseable layout."""

    raw: bytes


@dataclass(frozen=True)
class Apdu:
    apci: Apci
    asdu: Union[Asdu, OpaqueAsdu, None] = None

    @property
    def frame_kind(self) -> FrameKind:
        return self.apci.frame_kind


def i_frame(tx: int, rx: int, asdu: Union[Asdu, OpaqueAsdu]) -> Apdu:
    return Apdu(Apci(FrameKind.I, tx=tx, rx=rx), asdu)


def s_frame(rx: int) -> Apdu:
    return Apdu(Apci(FrameKind.S, rx=rx))


def u_frame(function: UFunction) -> Apdu:
    return Apdu(Apci(FrameKind.U, u_function=function))


def _check_seq(name: str, value) -> int:
    if not isinstance(value, int) or not 0 <= value < SEQ_MOD:
        raise InvariantViolation(f"{name} must be in [0, 32767], got {value!r}")
    return value


def _pack_seq(value: int) -> tuple:
    return (value << 1) & 0xFF, (value >> 7) & 0xFF


def _unpack_seq(low: int, high: int) -> int:
    return ((high << 7) | (low >> 1)) & 0x7FFF


def _check_float32(value: float, what: str) -> float:
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        raise InvariantViolation(f"{what} must be a finite number, got {value!r}")
    if abs(value) > FLOAT32_MAX:
        raise InvariantViolation(f"{what} exceeds short-float range: {value!r}")
    return float(value)


def _encode_object(type_id: int, obj: InformationObject) -> bytes:
    if not 0 <= obj.ioa <= 0xFFFFFF:
        raise InvariantViolation(f"ioa out of range: {obj.ioa}")
    if not 0 <= obj.quality <= 0xFF:
        raise InvariantViolation(f"quality out of range: {obj.quality}")
    out = bytes((obj.ioa & 0xFF, (obj.ioa >> 8) & 0xFF, (obj.ioa >> 16) & 0xFF))
    if type_id == M_SP_NA_1:
        if obj.value not in (0.0, 1.0):
            raise InvariantViolation(f"single-point value must be 0.0 or 1.0, got {obj.value!r}")
        return out + bytes(((int(obj.value) & 0x01) | (obj.quality & 0xFE),))
    if type_id == M_ME_NC_1:
        value = _check_float32(obj.value, "measured value")
        return out + struct.pack("<f", value) + bytes((obj.quality & 0xFF,))
    if type_id == C_SE_NC_1:
        value = _check_float32(obj.value, "set-point value")
        if abs(value) > SETPOINT_LIMIT:
            raise InvariantViolation(f"set-point value outside sanity bound: {value!r}")
        qos = (obj.quality & 0x7F) | (0x80 if obj.select else 0)
        return out + struct.pack("<f", value) + bytes((qos,))
    if type_id == C_IC_NA_1:
        qoi = int(obj.value)
        if qoi != obj.value or not 0 <= qoi <= 0xFF:
            raise InvariantViolation(f"interrogation qualifier must be an integer 0..255: {obj.value!r}")
        return out + bytes((qoi,))
    raise InvariantViolation(f"unsupported type id for encoding: {type_id}")


def _encode_asdu(asdu: Union[Asdu, OpaqueAsdu]) -> bytes:
    if isinstance(asdu, OpaqueAsdu):
        return asdu.raw
    if asdu.type_id not in _OBJ_TAIL_SIZE:
        raise InvariantViolation(f"unsupported type id: {asdu.type_id}")
    if not asdu.objects:
        raise InvariantViolation("ASDU carries no information objects")
    if len(asdu.objects) > 0x7F:
        raise InvariantViolation("too many information objects")
    if not 0 <= asdu.cot <= 0x3F:
        raise InvariantViolation(f"cot out of range: {asdu.cot}")
    if not 1 <= asdu.common_address <= 65534:
        raise InvariantViolation(f"common address out of range: {asdu.common_address}")
    if not 0 <= asdu.originator <= 0xFF:
        raise InvariantViolation(f"originator out of range: {asdu.originator}")
    cot_octet = asdu.cot | (0x40 if asdu.negative else 0) | (0x80 if asdu.test else 0)
    head = bytes(
        (
            asdu.type_id,
            len(asdu.objects),  # VSQ with SQ=0
            cot_octet,
            asdu.originator,
            asdu.common_address & 0xFF,
            (asdu.common_address >> 8) & 0xFF,
        )
    )
    return head + b"".join(_encode_object(asdu.type_id, obj) for obj in asdu.objects)


def encode(apdu: Apdu) -> bytes:
    """Serialize an Apdu to its on-wire octets.

    Deterministic; raises :class:`InvariantViolation` on any type-invariant
    breach (sequence range, frame/ASDU mismatch, value bounds).
    """
    apci = apdu.apci
    if apci.frame_kind == FrameKind.I:
        if apdu.asdu is None:
            raise InvariantViolation("I-frame requires an ASDU")
        tx = _check_seq("tx", apci.tx)
        rx = _check_seq("rx", apci.rx)
        control = bytes(_pack_seq(tx) + _pack_seq(rx))
        body = _encode_asdu(apdu.asdu)
    elif apci.frame_kind == FrameKind.S:
        if apdu.asdu is not None:
            raise InvariantViolation("S-frame must not carry an ASDU")
        rx = _check_seq("rx", apci.rx)
        control = bytes((0x01, 0x00) + _pack_seq(rx))
        body = b""
    elif apci.frame_kind == FrameKind.U:
        if apdu.asdu is not None:
            raise InvariantViolation("U-frame must not carry an ASDU")
        if apci.u_function is None:
            raise InvariantViolation("U-frame requires a function")
        control = bytes((int(apci.u_function), 0x00, 0x00, 0x00))
        body = b""
    else:
        raise InvariantViolation(f"unknown frame kind: {apci.frame_kind!r}")
    length = len(control) + len(body)
    if length > APCI_LEN_MAX:
        raise InvariantViolation(f"APDU too long: {length} octets after length field")
    return bytes((START_BYTE, length)) + control + body


def _decode_objects(type_id: int, count: int, data: bytes):
    objs = []
    tail = _OBJ_TAIL_SIZE[type_id]
    pos = 0
    for _ in range(count):
        ioa = data[pos] | (data[pos + 1] << 8) | (data[pos + 2] << 16)
        pos += 3
        if type_id == M_SP_NA_1:
            siq = data[pos]
            objs.append(InformationObject(ioa, value=float(siq & 0x01), quality=siq & 0xFE))
        elif type_id == M_ME_NC_1:
            (value,) = struct.unpack("<f", data[pos : pos + 4])
            objs.append(InformationObject(ioa, value=value, quality=data[pos + 4]))
        elif type_id == C_SE_NC_1:
            (value,) = struct.unpack("<f", data[pos : pos + 4])
            qos = data[pos + 4]
            objs.append(
                InformationObject(ioa, value=value, quality=qos & 0x7F, select=bool(qos & 0x80))
            )
        else:  # C_IC_NA_1
            objs.append(InformationObject(ioa, value=float(data[pos])))
        pos += tail
    return tuple(objs)


def _decode_asdu(data: bytes) -> Union[Asdu, OpaqueAsdu]:
    # Anything we cannot interpret is preserved verbatim, never rejected.
    if len(data) < 6:
        return OpaqueAsdu(bytes(data))
    type_id = data[0]
    vsq = data[1]
    count = vsq & 0x7F
    if type_id not in _OBJ_TAIL_SIZE or vsq & 0x80 or count == 0:
        return OpaqueAsdu(bytes(data))
    expected = 6 + count * (3 + _OBJ_TAIL_SIZE[type_id])
    if len(data) != expected:
        return OpaqueAsdu(bytes(data))
    common_address = data[4] | (data[5] << 8)
    if not 1 <= common_address <= 65534:
        return OpaqueAsdu(bytes(data))
    cot_octet = data[2]
    asdu = Asdu(
        type_id=type_id,
        cot=cot_octet & 0x3F,
        common_address=common_address,
        objects=_decode_objects(type_id, count, data[6:]),
        originator=data[3],
        negative=bool(cot_octet & 0x40),
        test=bool(cot_octet & 0x80),
    )
    # Re-reject values our encoder would refuse, keeping them forwardable.
    for obj in asdu.objects:
        if not math.isfinite(obj.value):
            return OpaqueAsdu(bytes(data))
        if type_id == C_SE_NC_1 and abs(obj.value) > SETPOINT_LIMIT:
            return OpaqueAsdu(bytes(data))
    return asdu


def decode(data: bytes):
    """Decode one APDU from the head of ``data``.

    Returns ``(apdu, consumed)`` where ``consumed == 2 + length field``.
    Raises :class:`Truncated`, :class:`BadStart`, or :class:`Malformed`;
    never anything else, for any input.
    """
    if len(data) < 2:
        raise Truncated(needed=2, have=len(data))
    if data[0] != START_BYTE:
        raise BadStart(f"expected 0x68, got 0x{data[0]:02x}", offset=0)
    length = data[1]
    if length < APCI_LEN_MIN or length > APCI_LEN_MAX:
        raise Malformed(f"length field {length} outside [4, 253]", offset=1)
    total = 2 + length
    if len(data) < total:
        raise Truncated(needed=total, have=len(data))
    cf = data[2:6]
    if cf[0] & 0x01 == 0:  # I format
        if cf[2] & 0x01:
            raise Malformed("I-frame rx low octet has LSB set", offset=4)
        if length == 4:
            raise Malformed("I-frame carries no ASDU", offset=1)
        apci = Apci(
            FrameKind.I,
            tx=_unpack_seq(cf[0], cf[1]),
            rx=_unpack_seq(cf[2], cf[3]),
            length=length,
        )
        return Apdu(apci, _decode_asdu(bytes(data[6:total]))), total
    if cf[0] & 0x03 == 0x01:  # S format
        if length != 4:
            raise Malformed("S-frame must have length 4", offset=1)
        if cf[1] != 0:
            raise Malformed("S-frame reserved octet not zero", offset=3)
        if cf[2] & 0x01:
            raise Malformed("S-frame rx low octet has LSB set", offset=4)
        return Apdu(Apci(FrameKind.S, rx=_unpack_seq(cf[2], cf[3]), length=length)), total
    # U format
    if length != 4:
        raise Malformed("U-frame must have length 4", offset=1)
    if cf[1] or cf[2] or cf[3]:
        raise Malformed("U-frame reserved octets not zero", offset=3)
    try:
        function = UFunction(cf[0])
    except ValueError:
        raise Malformed(f"unknown U-frame function 0x{cf[0]:02x}", offset=2) from None
    return Apdu(Apci(FrameKind.U, u_function=function, length=length)), total


class ApduStream:
    """Reassembles APDUs from an ordered byte stream.

    ``feed`` returns every complete APDU and buffers a trailing partial
    frame; non-frame garbage raises the underlying decode error.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)
        out = []
        while self._buf:
            try:
                apdu, consumed = decode(bytes(self._buf))
            except Truncated:
                break
            del self._buf[:consumed]
            out.append(apdu)
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)

    def drain_raw(self) -> bytes:
        """Take the buffered octets verbatim (after a decode error, say)."""
        raw = bytes(self._buf)
        self._buf.clear()
        return raw
