"""Covert message bits, framing and CRC integrity.

Bits are ``numpy.uint8`` arrays holding 0/1 values, MSB-first within each
octet.  A frame is ``16-bit length | payload | 16-bit CRC-16/CCITT``.
"""
from __future__ import annotations

import binascii

import numpy as np

MAX_FRAME_PAYLOAD = 0xFFFF
FRAME_OVERHEAD = 32
CRC_INIT = 0xFFFF


class FrameError(ValueError):
    """Base class for framing problems."""


class FrameSizeError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class IntegrityError(FrameError):
    """CRC (or length) check failed: the frame was not delivered intact."""


def as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if arr.size and arr.max() > 1:
        raise ValueError("bit arrays may only contain 0 and 1")
    return arr


def bits_from_bytes(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8))


def bytes_from_bits(bits) -> bytes:
    """Pack bits into octets; a trailing partial octet is zero-filled on the right."""
    return np.packbits(as_bits(bits)).tobytes()


def bits_from_hex(text: str) -> np.ndarray:
    text = text.strip().lower()
    if text.startswith("0x"):
        text = text[2:]
    return bits_from_bytes(bytes.fromhex(text))


def int_to_bits(value: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(0, dtype=np.uint8)
    if value < 0 or value >> width:
        raise ValueError(f"value {value} does not fit in {width} bits")
    nbytes = (width + 7) // 8
    raw = np.frombuffer((value << (8 * nbytes - width)).to_bytes(nbytes, "big"), np.uint8)
    return np.unpackbits(raw)[:width]


def bits_to_int(bits) -> int:
    bits = as_bits(bits)
    if not bits.size:
        return 0
    pad = -bits.size % 8
    return int.from_bytes(np.packbits(bits).tobytes(), "big") >> pad


def crc16_ccitt(bits, crc: int = CRC_INIT) -> int:
    """CRC-16/CCITT (poly 0x1021, no reflection) over an arbitrary-length bit string."""
    bits = as_bits(bits)
    whole = bits.size - bits.size % 8
    if whole:
        crc = binascii.crc_hqx(np.packbits(bits[:whole]).tobytes(), crc)
    for b in bits[whole:].tolist():
        top = ((crc >> 15) & 1) ^ b
        crc = (crc << 1) & 0xFFFF
        if top:
            crc ^= 0x1021
    return crc


class CovertMessage:
    """A queue of covert bits consumed front-to-back by the channels."""

    def __init__(self, bits=()):
        self._bits = as_bits(bits).copy()
        self._pos = 0
        self.short_read = False

    @classmethod
    def from_bytes(cls, data: bytes) -> "CovertMessage":
        return cls(bits_from_bytes(data))

    @classmethod
    def from_hex(cls, text: str) -> "CovertMessage":
        return cls(bits_from_hex(text))

    @classmethod
    def random(cls, nbits: int, rng: np.random.Generator) -> "CovertMessage":
        return cls(rng.integers(0, 2, size=nbits, dtype=np.uint8))

    @property
    def length(self) -> int:
        """Bits not yet consumed."""
        return self._bits.size - self._pos

    def __len__(self) -> int:
        return self.length

    @property
    def bits(self) -> np.ndarray:
        return self._bits[self._pos:]

    def take(self, k: int) -> np.ndarray:
        if k < 0:
            raise ValueError("cannot take a negative number of bits")
        got = self._bits[self._pos:self._pos + k]
        self._pos += got.size
        self.short_read = got.size < k
        return got

    def __eq__(self, other) -> bool:
        if not isinstance(other, CovertMessage):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return f"CovertMessage(length={self.length})"


def take_bits(message: CovertMessage, k: int) -> np.ndarray:
    """Consume up to ``k`` bits; ``message.short_read`` reports a short read."""
    return message.take(k)


def frame_encode(message) -> np.ndarray:
    payload = message.bits if isinstance(message, CovertMessage) else as_bits(message)
    if payload.size > MAX_FRAME_PAYLOAD:
        raise FrameSizeError(f"message of {payload.size} bits exceeds {MAX_FRAME_PAYLOAD}")
    return np.concatenate([
        int_to_bits(payload.size, 16),
        payload,
        int_to_bits(crc16_ccitt(payload), 16),
    ])


def frame_decode(bits) -> CovertMessage:
    """Decode one frame from the front of ``bits``; trailing bits are ignored.

    Raises:
        TruncatedFrameError: fewer bits than the frame header announces.
        IntegrityError: CRC mismatch.
    """
    bits = as_bits(bits)
    if bits.size < FRAME_OVERHEAD:
        raise TruncatedFrameError(f"{bits.size} bits is shorter than an empty frame")
    n = bits_to_int(bits[:16])
    if bits.size < n + FRAME_OVERHEAD:
        raise TruncatedFrameError(f"frame announces {n} payload bits, only {bits.size - 32} present")
    payload = bits[16:16 + n]
    if bits_to_int(bits[16 + n:32 + n]) != crc16_ccitt(payload):
        raise IntegrityError("CRC mismatch")
    return CovertMessage(payload)


def frame_stream(payload_bits, frame_payload_bits: int) -> np.ndarray:
    """Split a payload into consecutive frames of at most ``frame_payload_bits``."""
    payload_bits = as_bits(payload_bits)
    if not 0 < frame_payload_bits <= MAX_FRAME_PAYLOAD:
        raise FrameSizeError("frame payload size must be in 1..65535")
    chunks = [payload_bits[i:i + frame_payload_bits]
              for i in range(0, payload_bits.size, frame_payload_bits)] or [payload_bits]
    return np.concatenate([frame_encode(c) for c in chunks])


def fill_frames(capacity_bits: int, frame_payload_bits: int,
                rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    """Random framed traffic filling ``capacity_bits`` as closely as framing allows.

    Returns the framed bits and the payload size of each frame.
    """
    frame_bits = frame_payload_bits + FRAME_OVERHEAD
    full, rest = divmod(capacity_bits, frame_bits)
    sizes = [frame_payload_bits] * full
    if rest > FRAME_OVERHEAD:
        sizes.append(rest - FRAME_OVERHEAD)
    if not sizes:
        return np.zeros(0, dtype=np.uint8), []
    payload = rng.integers(0, 2, size=sum(sizes), dtype=np.uint8)
    out, start = [], 0
    for s in sizes:
        out.append(frame_encode(payload[start:start + s]))
        start += s
    return np.concatenate(out), sizes


def frame_sizes(payload_bits: int, frame_payload_bits: int) -> list[int]:
    """Payload sizes produced by :func:`frame_stream` for a payload of this length."""
    full, rest = divmod(payload_bits, frame_payload_bits)
    sizes = [frame_payload_bits] * full
    if rest or not sizes:
        sizes.append(rest)
    return sizes


def decode_frames(bits, sizes) -> list[CovertMessage | None]:
    """Decode back-to-back frames whose payload sizes are known to the receiver.

    Each frame that is missing, truncated, announces the wrong length or
    fails its CRC comes back as ``None``.
    """
    bits = as_bits(bits)
    results: list[CovertMessage | None] = []
    pos = 0
    for size in sizes:
        end = pos + size + FRAME_OVERHEAD
        chunk = bits[pos:end]
        pos = end
        if chunk.size < size + FRAME_OVERHEAD or bits_to_int(chunk[:16]) != size:
            results.append(None)
            continue
        try:
            results.append(frame_decode(chunk))
        except IntegrityError:
            results.append(None)
    return results
