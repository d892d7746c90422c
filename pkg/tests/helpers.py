"""Shared test helpers: random APDU generation and an independent
reference decoder used to cross-check the production codec."""

from __future__ import annotations

import random
import struct

from iec104lab import iec104 as i104

U_FUNCTIONS = list(i104.UFunction)


def random_apdu(rng: random.Random) -> i104.Apdu:
    """Draw a random valid Apdu (float values are float32-exact)."""
    kind = rng.choice(["I", "I", "I", "S", "U"])
    if kind == "S":
        return i104.s_frame(rng.randrange(i104.SEQ_MOD))
    if kind == "U":
        return i104.u_frame(rng.choice(U_FUNCTIONS))
    type_id = rng.choice([i104.M_SP_NA_1, i104.M_ME_NC_1, i104.C_SE_NC_1, i104.C_IC_NA_1])
    objects = []
    for _ in range(rng.randint(1, 5)):
        ioa = rng.randrange(0x1000000)
        if type_id == i104.M_SP_NA_1:
            objects.append(
                i104.InformationObject(ioa, value=float(rng.randint(0, 1)), quality=rng.randrange(256) & 0xFE)
            )
        elif type_id == i104.M_ME_NC_1:
            value = f32(rng.uniform(-1e6, 1e6))
            objects.append(i104.InformationObject(ioa, value=value, quality=rng.randrange(256)))
        elif type_id == i104.C_SE_NC_1:
            value = f32(rng.uniform(-1.5, 1.5))
            objects.append(
                i104.InformationObject(
                    ioa, value=value, quality=rng.randrange(128), select=rng.random() < 0.5
                )
            )
        else:
            objects.append(i104.InformationObject(ioa, value=float(rng.randrange(256))))
    asdu = i104.Asdu(
        type_id=type_id,
        cot=rng.randrange(64),
        common_address=rng.randint(1, 65534),
        objects=tuple(objects),
        originator=rng.randrange(256),
        negative=rng.random() < 0.1,
        test=rng.random() < 0.1,
    )
    return i104.i_frame(rng.randrange(i104.SEQ_MOD), rng.randrange(i104.SEQ_MOD), asdu)


def f32(x: float) -> float:
    """Quantize to the nearest float32-representable value."""
    return struct.unpack("<f", struct.pack("<f", x))[0]


def reference_decode(data: bytes) -> dict:
    """Independent table-driven decoder for cross-checking encode().

    Deliberately written from the field tables alone, sharing no code with
    the package. Returns a plain dict description; raises ValueError on
    anything it does not understand.
    """
    if len(data) < 6 or data[0] != 0x68:
        raise ValueError("bad frame")
    length = data[1]
    if len(data) != 2 + length:
        raise ValueError("length mismatch")
    c1, c2, c3, c4 = data[2:6]
    if c1 & 1 and c1 & 2:  # U
        if length != 4:
            raise ValueError("U length")
        return {"kind": "U", "function": c1}
    if c1 & 1:  # S
        if length != 4:
            raise ValueError("S length")
        return {"kind": "S", "rx": (c4 << 7) | (c3 >> 1)}
    out = {
        "kind": "I",
        "tx": (c2 << 7) | (c1 >> 1),
        "rx": (c4 << 7) | (c3 >> 1),
    }
    body = data[6:]
    type_id, vsq, cot_octet, orig, ca_lo, ca_hi = body[:6]
    out["type_id"] = type_id
    out["n"] = vsq & 0x7F
    out["sq"] = bool(vsq & 0x80)
    out["cot"] = cot_octet & 0x3F
    out["negative"] = bool(cot_octet & 0x40)
    out["test"] = bool(cot_octet & 0x80)
    out["originator"] = orig
    out["ca"] = ca_lo | (ca_hi << 8)
    sizes = {1: 1, 13: 5, 50: 5, 100: 1}
    if type_id not in sizes or out["sq"]:
        raise ValueError("unsupported asdu")
    pos = 6
    objs = []
    for _ in range(out["n"]):
        ioa = body[pos] | (body[pos + 1] << 8) | (body[pos + 2] << 16)
        pos += 3
        if type_id == 1:
            objs.append({"ioa": ioa, "siq": body[pos]})
            pos += 1
        elif type_id in (13, 50):
            (value,) = struct.unpack("<f", body[pos : pos + 4])
            objs.append({"ioa": ioa, "value": value, "tail": body[pos + 4]})
            pos += 5
        else:
            objs.append({"ioa": ioa, "qoi": body[pos]})
            pos += 1
    if pos != len(body):
        raise ValueError("trailing octets")
    out["objects"] = objs
    return out
