"""Bit-exact encoding of resource-management cells and their rate fields.

Three layers live here, each usable on its own:

* the 16-bit floating-point rate format (``encode_rate`` / ``decode_rate``),
* the 53-byte RM cell layout (``encode_cell`` / ``decode_cell``) with its
  CRC-10 trailer,
* the binary trace record stream written by the simulator
  (``write_trace`` / ``read_trace``).

Rate field layout, within a 16-bit big-endian word::

    bit 15      nonzero flag (nz)
    bits 14-10  exponent e (unsigned, 0..31)
    bits 9-1    mantissa m (unsigned, 0..511)
    bit 0       reserved, ignored on decode, emitted 0

The encoded value is ``nz * 2**e * (1 + m/512)`` cells/s.  Encoding rounds
down: the result is the largest representable value not exceeding the input,
so a rate is never overstated.  ``nz == 0`` encodes rate 0 and is emitted in
canonical all-zero form.

Cell layout (53 bytes): a 5-byte header followed by a 48-byte payload.

======  ========================================================
octet   payload content
======  ========================================================
0       protocol identifier, always 1
1       bit 7 DIR (0 forward / 1 backward), bit 6 BN, bit 5 CI,
        bit 4 NI, bit 3 RA, bits 2-0 reserved 0
2-3     ER, 16-bit rate field
4-5     CCR, 16-bit rate field
6-7     MCR, 16-bit rate field
8-11    QL, emitted 0
12-15   sequence number, 32-bit big-endian
16-45   reserved, 0
46-47   low 10 bits carry CRC-10 over octets 0-47 (CRC bits
        zeroed during computation); top 6 bits reserved 0
======  ========================================================

The header carries addressing that a real network would keep in VPI/VCI
space.  The default layout used by both directions of the codec is: octet 0
origin (255 = merged/unknown), octets 1-2 VC id big-endian, octet 3 payload
type (6, RM cell), octet 4 reserved 0.

Trace records are fixed 65-byte units: 8-byte unsigned little-endian
timestamp in nanoseconds, 4-byte unsigned little-endian link id, then the 53
cell bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Iterable, Iterator

CELL_BYTES = 53
PAYLOAD_BYTES = 48
HEADER_BYTES = 5
PROTOCOL_ID = 1
MERGED_ORIGIN = 255

#: generator x^10 + x^9 + x^5 + x^4 + x + 1, top bit implicit
CRC10_POLY = 0x233
RATE_MAX = float(2**31) * (1 + 511 / 512)

_TRACE_HEAD = struct.Struct("<QI")
TRACE_RECORD_BYTES = _TRACE_HEAD.size + CELL_BYTES


class CodecError(ValueError):
    """Raised when a byte string cannot be decoded as an RM cell."""


class Direction(Enum):
    FORWARD = 0
    BACKWARD = 1


@dataclass(frozen=True)
class RateField16:
    """Decomposed 16-bit rate field."""

    nz: int
    exponent: int
    mantissa: int

    def pack(self) -> int:
        if self.nz not in (0, 1):
            raise ValueError("nz must be 0 or 1")
        if not 0 <= self.exponent <= 31:
            raise ValueError("exponent out of range")
        if not 0 <= self.mantissa <= 511:
            raise ValueError("mantissa out of range")
        return (self.nz << 15) | (self.exponent << 10) | (self.mantissa << 1)

    @classmethod
    def unpack(cls, word: int) -> "RateField16":
        if not 0 <= word <= 0xFFFF:
            raise ValueError("rate field must fit 16 bits")
        return cls(nz=(word >> 15) & 1, exponent=(word >> 10) & 0x1F, mantissa=(word >> 1) & 0x1FF)

    def value(self) -> float:
        if self.nz == 0:
            return 0.0
        return float(2**self.exponent) * (1 + self.mantissa / 512)


def encode_rate(rate: float) -> int:
    """Quantize ``rate`` (cells/s) to the 16-bit field, rounding down.

    Rates above the format maximum saturate; use :func:`encode_rate_checked`
    to observe saturation.  Rates below 1 (the smallest nonzero value) encode
    as zero.
    """
    return encode_rate_checked(rate)[0]


def encode_rate_checked(rate: float) -> tuple[int, bool]:
    """Like :func:`encode_rate` but also reports whether saturation occurred."""
    if rate < 0 or rate != rate:
        raise ValueError("rate must be a non-negative number")
    if rate < 1.0:
        return 0, False
    if rate >= RATE_MAX:
        return RateField16(1, 31, 511).pack(), rate > RATE_MAX
    # mantissa steps are exact in binary floating point, so the arithmetic
    # below is exact for e <= 31
    exponent = 0
    scaled = rate
    while scaled >= 2.0:
        scaled /= 2.0
        exponent += 1
    mantissa = int((scaled - 1.0) * 512)
    if mantissa > 511:
        mantissa = 511
    field = RateField16(1, exponent, mantissa)
    if field.value() > rate:
        mantissa -= 1
        if mantissa < 0:
            exponent -= 1
            mantissa = 511
        field = RateField16(1, exponent, mantissa)
    return field.pack(), False


def decode_rate(word: int) -> float:
    """Decode a 16-bit rate field to cells/s. The reserved bit is ignored."""
    return RateField16.unpack(word).value()


def _crc10_table() -> list[int]:
    table = []
    for byte in range(256):
        reg = byte << 2
        for _ in range(8):
            reg <<= 1
            if reg & 0x400:
                reg ^= 0x400 | CRC10_POLY
        table.append(reg & 0x3FF)
    return table


_CRC10_TABLE = _crc10_table()


def crc10(data: bytes) -> int:
    """CRC-10 remainder of ``data`` read MSB-first, initial remainder 0."""
    reg = 0
    for byte in data:
        reg = ((reg << 8) & 0x3FF | byte) ^ _CRC10_TABLE[reg >> 2]
    return reg & 0x3FF


@dataclass
class RMCellFields:
    """Field view of one RM cell, forward or backward."""

    direction: Direction
    bn: int
    ci: int
    ni: int
    er: float
    ccr: float
    mcr: float
    vc: int
    origin: int
    seq: int


def _default_header(fields: RMCellFields) -> bytes:
    if not 0 <= fields.origin <= 255:
        raise ValueError("origin must fit one octet (255 = merged)")
    if not 0 <= fields.vc <= 0xFFFF:
        raise ValueError("vc must fit 16 bits")
    return bytes([fields.origin, (fields.vc >> 8) & 0xFF, fields.vc & 0xFF, 6, 0])


def encode_cell(fields: RMCellFields, header: bytes | None = None) -> bytes:
    """Serialize ``fields`` to the 53-byte wire form.

    ``header`` overrides the default 5-byte header; addressing is then the
    caller's problem and ``decode_cell`` will read whatever was supplied.
    """
    if header is None:
        header = _default_header(fields)
    elif len(header) != HEADER_BYTES:
        raise ValueError("header must be exactly 5 bytes")
    payload = bytearray(PAYLOAD_BYTES)
    payload[0] = PROTOCOL_ID
    payload[1] = (
        ((1 if fields.direction is Direction.BACKWARD else 0) << 7)
        | ((fields.bn & 1) << 6)
        | ((fields.ci & 1) << 5)
        | ((fields.ni & 1) << 4)
    )
    struct.pack_into(">HHH", payload, 2, encode_rate(fields.er), encode_rate(fields.ccr), encode_rate(fields.mcr))
    struct.pack_into(">I", payload, 12, fields.seq & 0xFFFFFFFF)
    crc = crc10(bytes(payload))
    payload[46] = (crc >> 8) & 0x03
    payload[47] = crc & 0xFF
    return bytes(header) + bytes(payload)


def decode_cell(data: bytes) -> tuple[RMCellFields, bytes]:
    """Parse 53 wire bytes; returns the fields and the raw 5-byte header.

    Raises :class:`CodecError` on short input, an unknown protocol id, or a
    CRC mismatch.
    """
    if len(data) != CELL_BYTES:
        raise CodecError(f"RM cell must be {CELL_BYTES} bytes, got {len(data)}")
    header, payload = data[:HEADER_BYTES], bytearray(data[HEADER_BYTES:])
    if payload[0] != PROTOCOL_ID:
        raise CodecError(f"unknown protocol id {payload[0]}")
    found = ((payload[46] & 0x03) << 8) | payload[47]
    payload[46] &= ~0x03
    payload[47] = 0
    expected = crc10(bytes(payload))
    if found != expected:
        raise CodecError(f"CRC mismatch: expected {expected:#05x}, found {found:#05x}")
    flags = payload[1]
    er, ccr, mcr = struct.unpack_from(">HHH", payload, 2)
    (seq,) = struct.unpack_from(">I", payload, 12)
    fields = RMCellFields(
        direction=Direction.BACKWARD if flags & 0x80 else Direction.FORWARD,
        bn=(flags >> 6) & 1,
        ci=(flags >> 5) & 1,
        ni=(flags >> 4) & 1,
        er=decode_rate(er),
        ccr=decode_rate(ccr),
        mcr=decode_rate(mcr),
        vc=(header[1] << 8) | header[2],
        origin=header[0],
        seq=seq,
    )
    return fields, header


def write_trace(stream: BinaryIO, records: Iterable[tuple[int, int, bytes]]) -> int:
    """Append ``(t_ns, link_id, cell)`` records to ``stream``; returns the count."""
    n = 0
    for t_ns, link_id, cell in records:
        if len(cell) != CELL_BYTES:
            raise ValueError("trace cell must be 53 bytes")
        stream.write(_TRACE_HEAD.pack(t_ns, link_id))
        stream.write(cell)
        n += 1
    return n


def read_trace(stream: BinaryIO) -> Iterator[tuple[int, int, bytes]]:
    """Yield ``(t_ns, link_id, cell)`` records until the stream is exhausted."""
    while True:
        head = stream.read(_TRACE_HEAD.size)
        if not head:
            return
        if len(head) < _TRACE_HEAD.size:
            raise CodecError("truncated trace record header")
        cell = stream.read(CELL_BYTES)
        if len(cell) < CELL_BYTES:
            raise CodecError("truncated trace record cell")
        t_ns, link_id = _TRACE_HEAD.unpack(head)
        yield t_ns, link_id, cell
