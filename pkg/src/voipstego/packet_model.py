"""Conversation-phase traffic model: codecs, RTP streams, RTCP compounds.

Encapsulation headers are not serialized.  Every writable header field is a
named bit *slot* of fixed width, and a steganographic channel addresses a
slot (or a bit range inside it) through a :class:`FieldRef`.

Single datagrams (:class:`VoipPacket`, :class:`RtcpCompound`) keep slot
values as Python ints.  Whole streams live in a :class:`PacketBatch`, which
stores each slot as an ``(n, width)`` bit matrix so channels can run over a
nine-minute call without a per-packet Python loop.
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .bitstream import as_bits, bits_to_int, int_to_bits

US_PER_MS = 1000
US_PER_S = 1_000_000

RTP_SLOT_WIDTHS = {
    "ip_id": 16,
    "udp_checksum": 16,
    "seq": 16,
    "timestamp": 32,
    "padding_count": 8,
    "extension": 32,
}
RTCP_SLOT_WIDTHS = {
    "ip_id": 16,
    "udp_checksum": 16,
    "ntp_lsw": 32,
}
HEADER_SLOTS = ("ip_id", "udp_checksum")


class FieldError(LookupError):
    """Unknown slot name."""


def to_fraction(value) -> Fraction:
    """Exact conversion that keeps decimal literals such as ``0.6`` exact."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def ms_to_us(ms) -> int:
    return int(round(to_fraction(ms) * US_PER_MS))


def s_to_us(s) -> int:
    return int(round(to_fraction(s) * US_PER_S))


@dataclass(frozen=True)
class CodecProfile:
    name: str
    rate_r: int                 # bit/s
    frame_interval_If: int      # ms
    payload_bytes: int
    loss_tolerance_pLmax: float
    plc_enabled: bool = False
    sample_rate: int = 8000

    def __post_init__(self):
        if Fraction(self.rate_r * self.frame_interval_If, 8000) != self.payload_bytes:
            raise ValueError(
                f"{self.name}: rate {self.rate_r} b/s x {self.frame_interval_If} ms "
                f"is not {self.payload_bytes} octets")
        if not 0 < self.loss_tolerance_pLmax <= 0.05:
            raise ValueError(f"{self.name}: loss tolerance must be in (0, 0.05]")

    @property
    def frame_interval_us(self) -> int:
        return self.frame_interval_If * US_PER_MS

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate * self.frame_interval_If // 1000

    @property
    def payload_bits(self) -> int:
        return self.payload_bytes * 8


CODECS = {
    "G.711": CodecProfile("G.711", 64000, 20, 160, 0.03),
    "G.711-PLC": CodecProfile("G.711-PLC", 64000, 20, 160, 0.05, plc_enabled=True),
    "G.711-10ms": CodecProfile("G.711-10ms", 64000, 10, 80, 0.03),
    "G.729A": CodecProfile("G.729A", 8000, 20, 20, 0.02),
}


_REF_RE = re.compile(r"^\s*([A-Za-z_][\w]*)\s*(?:\[\s*(\d+)\s*:\s*(\d+)\s*\])?\s*$")


@dataclass(frozen=True)
class FieldRef:
    """A slot, or the bit range ``[lo, hi)`` of it counted from the LSB."""

    slot: str
    lo: int = 0
    hi: int | None = None

    @classmethod
    def parse(cls, text: "str | FieldRef") -> "FieldRef":
        if isinstance(text, FieldRef):
            return text
        m = _REF_RE.match(text)
        if not m:
            raise ValueError(f"bad field reference {text!r}; expected name or name[lo:hi]")
        name, lo, hi = m.groups()
        if lo is None:
            return cls(name)
        return cls(name, int(lo), int(hi))

    def span(self, widths: dict[str, int]) -> tuple[int, int]:
        if self.slot not in widths:
            raise FieldError(f"unknown slot {self.slot!r}")
        width = widths[self.slot]
        hi = width if self.hi is None else self.hi
        if not 0 <= self.lo < hi <= width:
            raise ValueError(f"bit range [{self.lo}:{hi}] outside {self.slot} ({width} bits)")
        return self.lo, hi

    def width(self, widths: dict[str, int]) -> int:
        lo, hi = self.span(widths)
        return hi - lo

    def columns(self, widths: dict[str, int]) -> slice:
        """Columns of the slot's MSB-first bit matrix covered by this range."""
        lo, hi = self.span(widths)
        w = widths[self.slot]
        return slice(w - hi, w - lo)

    def overlaps(self, other: "FieldRef", widths: dict[str, int]) -> bool:
        if self.slot != other.slot:
            return False
        a, b = self.span(widths)
        c, d = other.span(widths)
        return a < d and c < b

    def __str__(self) -> str:
        if self.hi is None:
            return self.slot
        return f"{self.slot}[{self.lo}:{self.hi}]"


@dataclass
class Datagram:
    kind: str
    fields: dict[str, int]
    widths: dict[str, int]
    send_time: int = 0          # us, actual transmission instant
    nominal_time: int = 0       # us, undelayed schedule position
    index: int = 0

    def copy(self):
        return copy.deepcopy(self)

    @property
    def header_slots(self) -> dict[str, int]:
        return {k: self.fields[k] for k in HEADER_SLOTS if k in self.fields}

    @property
    def auth_tag(self) -> int | None:
        return self.fields.get("auth_tag")


@dataclass
class VoipPacket(Datagram):
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    ssrc: int = 0
    padding_flag: int = 0
    extension_flag: int = 0

    @property
    def seq(self) -> int:
        return self.fields["seq"]

    @property
    def timestamp(self) -> int:
        return self.fields["timestamp"]

    @property
    def ip_id(self) -> int:
        return self.fields["ip_id"]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoipPacket):
            return NotImplemented
        return (self.kind == other.kind and self.fields == other.fields
                and self.widths == other.widths and self.send_time == other.send_time
                and self.nominal_time == other.nominal_time and self.index == other.index
                and self.ssrc == other.ssrc and self.padding_flag == other.padding_flag
                and self.extension_flag == other.extension_flag
                and np.array_equal(self.payload, other.payload))


@dataclass
class RtcpCompound(Datagram):
    packet_types: int = 2           # S_CP of the compound as sent
    report_blocks_per_type: int = 1  # N_RB
    bits_per_block: int = 160        # S_RB

    @property
    def ntp_ts_slot(self) -> int:
        return self.fields["ntp_lsw"]

    @property
    def report_capacity(self) -> int:
        return self.packet_types * self.report_blocks_per_type * self.bits_per_block


def field_read_bits(packet: Datagram, ref) -> np.ndarray:
    ref = FieldRef.parse(ref)
    lo, hi = ref.span(packet.widths)
    value = packet.fields[ref.slot]
    return int_to_bits((value >> lo) & ((1 << (hi - lo)) - 1), hi - lo)


def field_write_bits(packet: Datagram, ref, bits) -> Datagram:
    """Return a copy of ``packet`` with exactly the addressed bits replaced."""
    ref = FieldRef.parse(ref)
    lo, hi = ref.span(packet.widths)
    bits = as_bits(bits)
    if bits.size != hi - lo:
        raise ValueError(f"{ref} holds {hi - lo} bits, got {bits.size}")
    mask = ((1 << (hi - lo)) - 1) << lo
    out = packet.copy()
    out.fields[ref.slot] = (packet.fields[ref.slot] & ~mask) | (bits_to_int(bits) << lo)
    return out


def ints_to_bits(values, width: int) -> np.ndarray:
    """``(n,)`` non-negative ints (< 2**63) to an ``(n, width)`` MSB-first bit matrix."""
    values = np.asarray(values, dtype=np.uint64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    return ((values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)


def bits_to_ints(matrix: np.ndarray) -> np.ndarray:
    width = matrix.shape[1]
    if width > 63:
        raise ValueError("columns wider than 63 bits cannot be packed into int64")
    weights = (np.int64(1) << np.arange(width - 1, -1, -1, dtype=np.int64))
    return matrix.astype(np.int64) @ weights


class PacketBatch:
    """Column store for a run of datagrams of one kind."""

    def __init__(self, kind, widths, bits, send_time, nominal_time, payload=None,
                 ssrc=0, padding_flag=None, extension_flag=None, meta=None):
        self.kind = kind
        self.widths = dict(widths)
        self.bits = bits
        self.send_time = np.asarray(send_time, dtype=np.int64)
        self.nominal_time = np.asarray(nominal_time, dtype=np.int64)
        self.payload = payload
        self.ssrc = ssrc
        n = self.send_time.size
        self.padding_flag = np.zeros(n, np.uint8) if padding_flag is None else padding_flag
        self.extension_flag = np.zeros(n, np.uint8) if extension_flag is None else extension_flag
        self.meta = dict(meta or {})

    @property
    def n(self) -> int:
        return self.send_time.size

    def __len__(self) -> int:
        return self.n

    def read_bits(self, ref, rows=None) -> np.ndarray:
        ref = FieldRef.parse(ref)
        cols = ref.columns(self.widths)
        mat = self.bits[ref.slot]
        return mat[:, cols] if rows is None else mat[rows, cols]

    def write_bits(self, ref, matrix, rows=None) -> None:
        ref = FieldRef.parse(ref)
        cols = ref.columns(self.widths)
        if rows is None:
            self.bits[ref.slot][:, cols] = matrix
        else:
            self.bits[ref.slot][rows, cols] = matrix

    def column(self, slot: str) -> np.ndarray:
        return bits_to_ints(self.bits[slot])

    def copy(self) -> "PacketBatch":
        new = copy.copy(self)
        new.bits = {k: v.copy() for k, v in self.bits.items()}
        new.send_time = self.send_time.copy()
        new.nominal_time = self.nominal_time.copy()
        new.payload = None if self.payload is None else self.payload.copy()
        new.padding_flag = self.padding_flag.copy()
        new.extension_flag = self.extension_flag.copy()
        new.meta = dict(self.meta)
        return new

    def packet(self, i: int) -> Datagram:
        fields = {k: bits_to_int(v[i]) for k, v in self.bits.items()}
        common = dict(kind=self.kind, fields=fields, widths=dict(self.widths),
                      send_time=int(self.send_time[i]),
                      nominal_time=int(self.nominal_time[i]), index=i)
        if self.kind == "rtcp":
            return RtcpCompound(**common, **self.meta)
        return VoipPacket(**common,
                          payload=self.payload[i].copy() if self.payload is not None
                          else np.zeros(0, np.uint8),
                          ssrc=self.ssrc, padding_flag=int(self.padding_flag[i]),
                          extension_flag=int(self.extension_flag[i]))

    def packets(self) -> list[Datagram]:
        return [self.packet(i) for i in range(self.n)]

    @classmethod
    def from_packets(cls, packets) -> "PacketBatch":
        packets = list(packets)
        if not packets:
            raise ValueError("cannot build a batch from no packets")
        first = packets[0]
        widths = first.widths
        bits = {k: np.stack([int_to_bits(p.fields[k], w) for p in packets]) if w
                else np.zeros((len(packets), 0), np.uint8)
                for k, w in widths.items()}
        send = [p.send_time for p in packets]
        nominal = [p.nominal_time for p in packets]
        if isinstance(first, RtcpCompound):
            meta = dict(packet_types=first.packet_types,
                        report_blocks_per_type=first.report_blocks_per_type,
                        bits_per_block=first.bits_per_block)
            return cls("rtcp", widths, bits, send, nominal, meta=meta)
        payload = np.stack([np.asarray(p.payload, np.uint8) for p in packets])
        return cls(first.kind, widths, bits, send, nominal, payload=payload,
                   ssrc=first.ssrc,
                   padding_flag=np.array([p.padding_flag for p in packets], np.uint8),
                   extension_flag=np.array([p.extension_flag for p in packets], np.uint8))


class RtpStream(PacketBatch):
    """One direction of an RTP audio stream: packets a_1..a_n over T seconds."""

    def __init__(self, *args, profile: CodecProfile, duration_T, **kw):
        super().__init__("rtp", *args, **kw)
        self.meta.setdefault("seq_step", 1)
        self.meta.setdefault("timestamp_step", profile.samples_per_frame)
        self.profile = profile
        self.duration_T = duration_T

    @property
    def seq(self) -> np.ndarray:
        return self.column("seq")

    @property
    def timestamp(self) -> np.ndarray:
        return self.column("timestamp")

    def copy(self) -> "RtpStream":
        return super().copy()


def packet_count(duration_T, frame_interval_If) -> int:
    return int(to_fraction(duration_T) * 1000 // to_fraction(frame_interval_If))


_ALAW_SEG_END = np.array([0x1F, 0x3F, 0x7F, 0xFF, 0x1FF, 0x3FF, 0x7FF, 0xFFF])


def _alaw_formula(x: np.ndarray) -> np.ndarray:
    neg = x < 0
    mask = np.where(neg, 0x55, 0xD5)
    x = np.where(neg, -x - 1, x)
    seg = np.searchsorted(_ALAW_SEG_END, x, side="left")
    shift = np.where(seg < 2, 1, seg)
    aval = (np.minimum(seg, 7) << 4) | ((x >> shift) & 0x0F)
    aval = np.where(seg >= 8, 0x7F, aval)
    return (aval ^ mask).astype(np.uint8)


# every 13-bit input, so encoding is a single table lookup
_ALAW_TABLE = _alaw_formula(np.arange(-4096, 4096))


def alaw_encode(pcm: np.ndarray) -> np.ndarray:
    """G.711 A-law compression of 16-bit linear PCM samples."""
    x = np.asarray(pcm, dtype=np.int32) >> 3
    return _ALAW_TABLE[x + 4096]


_LAPLACE_SCALE = 1200.0


def _speech_code_table(levels: int = 1 << 16) -> np.ndarray:
    # A-law code of the Laplace quantile at each level midpoint
    u = (np.arange(levels) + 0.5) / levels
    pcm = -_LAPLACE_SCALE * np.sign(u - 0.5) * np.log1p(-2 * np.abs(u - 0.5))
    return alaw_encode(np.clip(np.round(pcm), -32768, 32767).astype(np.int32))


_SPEECH_CODES = _speech_code_table()


def synthetic_payload(rng: np.random.Generator, n: int, profile: CodecProfile) -> np.ndarray:
    """Speech-like Laplacian samples, A-law coded, one row per packet."""
    idx = rng.integers(0, _SPEECH_CODES.size, size=(n, profile.payload_bytes), dtype=np.uint16)
    return _SPEECH_CODES[idx]


def make_rtp_stream(profile: CodecProfile, duration_T, seed: int, *,
                    auth_tag_bits: int = 0, extra_slots: dict[str, int] | None = None
                    ) -> RtpStream:
    """Generate ``floor(T / I_f)`` RTP packets with seeded header values and payloads."""
    if to_fraction(duration_T) <= 0:
        raise ValueError("call duration must be positive")
    n = packet_count(duration_T, profile.frame_interval_If)
    rng = np.random.default_rng(seed)
    seq0 = int(rng.integers(0, 1 << 16))
    ts0 = int(rng.integers(0, 1 << 32))
    ssrc = int(rng.integers(0, 1 << 32))
    ip_id0 = int(rng.integers(0, 1 << 16))
    idx = np.arange(n, dtype=np.int64)

    widths = dict(RTP_SLOT_WIDTHS)
    widths.update(extra_slots or {})
    if auth_tag_bits:
        widths["auth_tag"] = auth_tag_bits
    bits = {
        "ip_id": ints_to_bits((ip_id0 + idx) % (1 << 16), 16),
        "udp_checksum": ints_to_bits(rng.integers(0, 1 << 16, size=n), 16),
        "seq": ints_to_bits((seq0 + idx) % (1 << 16), 16),
        "timestamp": ints_to_bits((ts0 + idx * profile.samples_per_frame) % (1 << 32), 32),
        "padding_count": np.zeros((n, 8), np.uint8),
        "extension": np.zeros((n, 32), np.uint8),
    }
    for name, w in (extra_slots or {}).items():
        bits[name] = rng.integers(0, 2, size=(n, w), dtype=np.uint8)
    if auth_tag_bits:
        bits["auth_tag"] = rng.integers(0, 2, size=(n, auth_tag_bits), dtype=np.uint8)
    t = idx * profile.frame_interval_us
    return RtpStream(widths, bits, t, t.copy(), payload=synthetic_payload(rng, n, profile),
                     ssrc=ssrc, profile=profile, duration_T=duration_T)


def _random_int(rng: np.random.Generator, width: int) -> int:
    nbytes = (width + 7) // 8
    return int.from_bytes(rng.bytes(nbytes), "big") >> (nbytes * 8 - width)


def make_rtcp_schedule(interval, duration_T, seed: int = 0, *, packet_types: int = 2,
                       report_blocks_per_type: int = 1, bits_per_block: int = 160,
                       auth_tag_bits: int = 0) -> list[RtcpCompound]:
    """One compound report every ``interval`` seconds, the first after one interval."""
    if to_fraction(interval) <= 0:
        raise ValueError("RTCP interval must be positive")
    count = int(to_fraction(duration_T) // to_fraction(interval))
    rng = np.random.default_rng(seed)
    widths = dict(RTCP_SLOT_WIDTHS)
    widths["report_blocks"] = packet_types * report_blocks_per_type * bits_per_block
    if auth_tag_bits:
        widths["auth_tag"] = auth_tag_bits
    step = s_to_us(interval)
    out = []
    for k in range(count):
        fields = {name: _random_int(rng, w) for name, w in widths.items()}
        t = (k + 1) * step
        out.append(RtcpCompound("rtcp", fields, dict(widths), send_time=t, nominal_time=t,
                                index=k, packet_types=packet_types,
                                report_blocks_per_type=report_blocks_per_type,
                                bits_per_block=bits_per_block))
    return out


def make_signaling(duration_T, count: int = 4) -> list[Datagram]:
    """Opaque signalling packets, half at call set-up and half at tear-down."""
    end = s_to_us(duration_T)
    times = [0] * (count - count // 2) + [end] * (count // 2)
    return [Datagram("signaling", {}, {}, send_time=t, nominal_time=t, index=i)
            for i, t in enumerate(times)]

