"""Fixed-point process data codec.

One cyclic frame carries a node's central accelerometer plus up to three rod
channels, packed little-endian:

    byte 0      status: bit0 central accel valid, bits 1..3 rod i valid,
                bits 4..7 reserved (zero)
    bytes 1..6  accel 0 as three int16, 1 mg per LSB
    per rod i   three int16 accel (1 mg/LSB) then one uint16 distance
                (10 um per LSB)

Total length is 1 + 6*(k+1) + 2*k bytes for k assigned rods, 31 bytes at
k=3. Encoding rounds to the nearest LSB with ties away from zero; a value
outside the representable range saturates to the extreme and clears its
channel's validity bit rather than wrapping.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

ACCEL_LSB_G = 0.001
DISTANCE_LSB_MM = 0.01
ACCEL_RAW_MIN = -32767
ACCEL_RAW_MAX = 32767
DISTANCE_RAW_MAX = 0xFFFF
MAX_RODS = 3

_RESERVED_MASK = 0xF0


class CodecError(ValueError):
    pass


class ChannelCountMismatch(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class ReservedBitsSet(CodecError):
    pass


@dataclass(frozen=True)
class PhysicalReading:
    """Decoded channel values; accel_g has k+1 entries, the rest k."""

    accel_g: tuple[tuple[float, float, float], ...]
    distance_mm: tuple[float, ...]
    central_valid: bool = True
    rod_valid: tuple[bool, ...] = ()

    @property
    def rod_count(self) -> int:
        return len(self.distance_mm)


def frame_length(k: int) -> int:
    return 1 + 6 * (k + 1) + 2 * k


def _struct_format(k: int) -> str:
    return "<B" + "3h" + "3hH" * k


def _quantize(value: float) -> int:
    # Nearest LSB count, ties away from zero.
    if value >= 0.0:
        return math.floor(value + 0.5)
    return math.ceil(value - 0.5)


def encode_frame(reading: PhysicalReading, k: int) -> bytes:
    """Pack a reading for k assigned rods; see the module layout."""
    if not 0 <= k <= MAX_RODS:
        raise ChannelCountMismatch(f"rod count {k} outside 0..{MAX_RODS}")
    if len(reading.accel_g) != k + 1 or len(reading.distance_mm) != k or \
            len(reading.rod_valid) != k:
        raise ChannelCountMismatch(
            f"reading has {len(reading.accel_g)} accel / "
            f"{len(reading.distance_mm)} distance / {len(reading.rod_valid)} "
            f"validity channels, expected {k + 1}/{k}/{k}")

    status = 0
    fields: list[int] = []

    def accel_raw(vec: tuple[float, float, float]) -> tuple[list[int], bool]:
        raws, ok = [], True
        for component in vec:
            raw = _quantize(component / ACCEL_LSB_G)
            if raw < ACCEL_RAW_MIN:
                raw, ok = ACCEL_RAW_MIN, False
            elif raw > ACCEL_RAW_MAX:
                raw, ok = ACCEL_RAW_MAX, False
            raws.append(raw)
        return raws, ok

    raws, in_range = accel_raw(reading.accel_g[0])
    fields.extend(raws)
    if reading.central_valid and in_range:
        status |= 0x01
    for i in range(1, k + 1):
        raws, accel_ok = accel_raw(reading.accel_g[i])
        fields.extend(raws)
        raw_d = _quantize(reading.distance_mm[i - 1] / DISTANCE_LSB_MM)
        dist_ok = True
        if raw_d < 0:
            raw_d, dist_ok = 0, False
        elif raw_d > DISTANCE_RAW_MAX:
            raw_d, dist_ok = DISTANCE_RAW_MAX, False
        fields.append(raw_d)
        if reading.rod_valid[i - 1] and accel_ok and dist_ok:
            status |= 1 << i
    return struct.pack(_struct_format(k), status, *fields)


def decode_frame(data: bytes, k: int) -> PhysicalReading:
    """Unpack a frame for k assigned rods; exact inverse of the LSB grids.

    Rejects any length other than frame_length(k) and any set status bit
    that cannot belong to the frame: the reserved bits 4..7 and validity
    bits for rods beyond k, which an absent rod cannot assert.
    """
    if not 0 <= k <= MAX_RODS:
        raise ChannelCountMismatch(f"rod count {k} outside 0..{MAX_RODS}")
    expected = frame_length(k)
    if len(data) != expected:
        raise LengthMismatch(f"frame is {len(data)} bytes, expected {expected}")
    status, *fields = struct.unpack(_struct_format(k), data)
    absent_rod_mask = sum(1 << i for i in range(k + 1, MAX_RODS + 1))
    if status & (_RESERVED_MASK | absent_rod_mask):
        raise ReservedBitsSet(f"status 0x{status:02X} sets bits outside the "
                              f"{k}-rod layout")
    accel = []
    distance = []
    pos = 0
    for i in range(k + 1):
        accel.append(tuple(raw * ACCEL_LSB_G for raw in fields[pos:pos + 3]))
        pos += 3
        if i > 0:
            distance.append(fields[pos] * DISTANCE_LSB_MM)
            pos += 1
    return PhysicalReading(
        accel_g=tuple(accel),
        distance_mm=tuple(distance),
        central_valid=bool(status & 0x01),
        rod_valid=tuple(bool(status & (1 << i)) for i in range(1, k + 1)),
    )
