"""Per-packet covert channels and their closed-form bandwidths.

Every channel kind shares one contract: a per-packet capacity, ``embed``
which writes the next message bits into the packet's carrier space, and
``extract`` which reads them back.  Carrier space is

* ``header``      -- IP/UDP header slots (``ip_id``, ``udp_checksum`` ...)
* ``rtp_field``   -- RTP header bits (timestamp LSBs, padding count ...)
* ``auth_tag``    -- the SRTP/SRTCP authentication tag, an opaque field
* ``rtcp_report`` -- RTCP report-block bits plus optional extra slots
* ``watermark``   -- payload samples, QIM-coded, at a possibly fractional
  rate per packet realised by credit accumulation

Single-packet functions work on :class:`~voipstego.packet_model.VoipPacket`
values; the ``*_batch`` functions do the same over a whole
:class:`~voipstego.packet_model.PacketBatch`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil

import numpy as np

from .bitstream import CovertMessage, as_bits, bits_to_int
from .packet_model import (
    Datagram,
    FieldRef,
    PacketBatch,
    bits_to_ints,
    field_read_bits,
    field_write_bits,
    ints_to_bits,
    to_fraction,
)

KINDS = ("header", "rtp_field", "auth_tag", "rtcp_report", "watermark")
REBASED_SLOTS = ("seq", "timestamp")
VIRTUAL_WATERMARK_SLOT = "watermark"

# Reported watermarking rates in bit/s, two sources per algorithm.
WATERMARK_RATES = {
    "lsb": (1000.0, 4000.0),
    "dsss": (4.0, 22.5),
    "fhss": (None, 20.2),
    "echo": (16.0, 22.3),
}


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    name: str
    kind: str
    field_map: tuple[FieldRef, ...] = ()
    first_field_map: tuple[FieldRef, ...] = ()
    carrier: str = "rtp"
    per_packet_bits_SBj: int | None = None
    first_packet_bits_SB0: int | None = None
    auth_tag_bits_SBAT: int = 0
    rtcp_SCP: int = 0
    rtcp_NRB: int = 0
    rtcp_SRB: int = 0
    watermark_bits_per_packet: Fraction = Fraction(0)
    watermark_mode: str = "qim"
    qim_step: int = 2
    frame_payload_bits: int = 992

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ChannelError(f"unknown channel kind {self.kind!r}")
        if self.carrier not in ("rtp", "rtcp"):
            raise ChannelError(f"{self.name}: carrier must be rtp or rtcp")
        object.__setattr__(self, "field_map", tuple(FieldRef.parse(f) for f in self.field_map))
        object.__setattr__(self, "first_field_map",
                           tuple(FieldRef.parse(f) for f in self.first_field_map))
        rate = to_fraction(self.watermark_bits_per_packet)
        object.__setattr__(self, "watermark_bits_per_packet", rate)
        if rate < 0:
            raise ChannelError(f"{self.name}: watermark rate must be non-negative")
        if self.kind == "watermark":
            if self.watermark_mode not in ("qim", "abstract"):
                raise ChannelError(f"{self.name}: watermark mode must be qim or abstract")
            if self.qim_step < 2 or self.qim_step % 2:
                raise ChannelError(f"{self.name}: QIM step must be an even number >= 2")
        if self.kind in ("rtp_field", "watermark") and self.carrier != "rtp":
            raise ChannelError(f"{self.name}: {self.kind} channels ride on RTP packets")
        if self.kind == "rtcp_report" and self.carrier != "rtcp":
            raise ChannelError(f"{self.name}: rtcp_report channels ride on RTCP packets")

    @classmethod
    def header(cls, name, field_map=("ip_id", "udp_checksum"), **kw):
        return cls(name, "header", field_map=tuple(field_map), **kw)

    @classmethod
    def rtp_field(cls, name, field_map=("timestamp[0:9]", "padding_count[0:7]"), **kw):
        return cls(name, "rtp_field", field_map=tuple(field_map), **kw)

    @classmethod
    def auth_tag(cls, name, bits, carrier="rtp", **kw):
        return cls(name, "auth_tag", field_map=("auth_tag",), auth_tag_bits_SBAT=bits,
                   carrier=carrier, **kw)

    @classmethod
    def rtcp_report(cls, name, S_CP=1, N_RB=1, S_RB=160, extra_slots=("ntp_lsw",),
                    report_slot_bits=None, **kw):
        """Report-block channel using the top ``S_CP*N_RB*S_RB`` bits of the report slot.

        ``report_slot_bits`` is the width of the compound's report-block slot
        (defaults to exactly the channel's use).
        """
        used = S_CP * N_RB * S_RB
        width = used if report_slot_bits is None else report_slot_bits
        refs = ([FieldRef("report_blocks", width - used, width)] if used else [])
        refs += [FieldRef.parse(s) for s in extra_slots]
        return cls(name, "rtcp_report", field_map=tuple(refs), carrier="rtcp",
                   rtcp_SCP=S_CP, rtcp_NRB=N_RB, rtcp_SRB=S_RB, **kw)

    @classmethod
    def watermark(cls, name, bits_per_packet, mode="qim", **kw):
        return cls(name, "watermark", watermark_bits_per_packet=to_fraction(bits_per_packet),
                   watermark_mode=mode, **kw)

    @property
    def uses_payload(self) -> bool:
        return self.kind == "watermark" and self.watermark_mode == "qim"

    @property
    def watermark_slot_width(self) -> int:
        return max(ceil(self.watermark_bits_per_packet), 1)

    def map_width(self, widths: dict[str, int], first: bool = False) -> int:
        refs = (self.first_field_map + self.field_map) if first else self.field_map
        return sum(r.width(widths) for r in refs)

    def check_against(self, widths: dict[str, int]) -> list[str]:
        """Problems with this channel's field maps for a carrier with ``widths``."""
        problems = []
        if self.kind == "watermark":
            return problems
        for ref in self.first_field_map + self.field_map:
            try:
                ref.span(widths)
            except (LookupError, ValueError) as exc:
                problems.append(f"channel {self.name}: {exc}")
        if problems:
            return problems
        if self.kind == "auth_tag" and widths.get("auth_tag", 0) != self.auth_tag_bits_SBAT:
            problems.append(f"channel {self.name}: auth tag is {widths.get('auth_tag', 0)} "
                            f"bits on the wire, channel expects {self.auth_tag_bits_SBAT}")
        if self.per_packet_bits_SBj is not None and \
                self.map_width(widths) != self.per_packet_bits_SBj:
            problems.append(f"channel {self.name}: field map covers {self.map_width(widths)} "
                            f"bits, configured per-packet bits is {self.per_packet_bits_SBj}")
        if self.first_packet_bits_SB0 is not None and \
                self.map_width(widths, first=True) != self.first_packet_bits_SB0:
            problems.append(f"channel {self.name}: first-packet map covers "
                            f"{self.map_width(widths, first=True)} bits, configured "
                            f"first-packet bits is {self.first_packet_bits_SB0}")
        refs = self.first_field_map + self.field_map
        for i, a in enumerate(refs):
            for b in refs[i + 1:]:
                if a.overlaps(b, widths):
                    problems.append(f"channel {self.name}: {a} overlaps {b}")
        return problems


def find_conflicts(channels, widths_by_carrier: dict[str, dict[str, int]]) -> list[str]:
    """Pairs of channels claiming overlapping carrier space."""
    problems = []
    channels = list(channels)
    for i, a in enumerate(channels):
        for b in channels[i + 1:]:
            if a.carrier != b.carrier:
                continue
            if a.uses_payload and b.uses_payload:
                problems.append(f"channels {a.name} and {b.name} both watermark the payload")
                continue
            widths = widths_by_carrier.get(a.carrier, {})
            for ra in a.first_field_map + a.field_map:
                for rb in b.first_field_map + b.field_map:
                    try:
                        hit = ra.overlaps(rb, widths)
                    except (LookupError, ValueError):
                        continue
                    if hit:
                        problems.append(f"channels {a.name} and {b.name} overlap on "
                                        f"{ra} / {rb}")
    return problems


# ---------------------------------------------------------------- formulas

def prbr_ns(SB0, SBj, l):
    """Average covert bits per packet of a header channel over ``l + 1`` packets."""
    if l < 0:
        raise ValueError("l must be non-negative")
    return (SB0 + l * SBj) / (l + 1)


def rbr_srtp(SB_AT, Ip):
    """Bit rate of an authentication-tag channel; ``Ip`` in milliseconds."""
    if Ip <= 0:
        raise ValueError("packet interval must be positive")
    return SB_AT * 1000 / Ip


def prbr_rtcp(S_CP, N_RB, S_RB):
    if min(S_CP, N_RB, S_RB) < 0:
        raise ValueError("RTCP counts must be non-negative")
    return S_CP * N_RB * S_RB


def rbr_srtcp(SB_AT, l, T):
    """Bit rate of the SRTCP tag channel: ``l`` reports over ``T`` seconds."""
    if T <= 0:
        raise ValueError("call duration must be positive")
    return SB_AT * l / T


# ------------------------------------------------------------ QIM samples

def qim_embed(samples: np.ndarray, bits: np.ndarray, step: int = 2) -> np.ndarray:
    """Move each sample to the nearest point of the lattice selected by its bit."""
    x = samples.astype(np.int64)
    off = bits.astype(np.int64) * (step // 2)
    q = step * np.floor((x - off) / step + 0.5).astype(np.int64) + off
    q = np.where(q < 0, q + step, q)
    q = np.where(q > 255, q - step, q)
    return q.astype(np.uint8)


def qim_detect(samples: np.ndarray, step: int = 2) -> np.ndarray:
    r = samples.astype(np.int64) % step
    half = step // 2
    return (np.abs(r - half) < np.minimum(r, step - r)).astype(np.uint8)


# ------------------------------------------------------ capacity, 1 packet

def watermark_capacity(rate: Fraction, position: int) -> int:
    """Bits carried by the ``position``-th (0-based) carrier packet."""
    rate = to_fraction(rate)
    p, q = rate.numerator, rate.denominator
    return (p * (position + 1)) // q - (p * position) // q


def channel_capacity(config: ChannelConfig, packet: Datagram, is_first: bool = False,
                     position: int | None = None) -> int:
    if packet.kind != config.carrier:
        raise ChannelError(f"channel {config.name} cannot ride on a {packet.kind} packet")
    if config.kind == "watermark":
        return watermark_capacity(config.watermark_bits_per_packet,
                                  packet.index if position is None else position)
    return config.map_width(packet.widths, first=is_first)


def _refs(config: ChannelConfig, is_first: bool):
    return (config.first_field_map + config.field_map) if is_first else config.field_map


def embed(config: ChannelConfig, packet: Datagram, message: CovertMessage,
          is_first: bool = False, position: int | None = None) -> tuple[Datagram, int]:
    """Write the next ``min(capacity, remaining)`` message bits into ``packet``."""
    cap = channel_capacity(config, packet, is_first, position)
    bits = message.take(cap)
    out = packet.copy()
    if config.kind == "watermark":
        if config.watermark_mode == "qim":
            k = bits.size
            out.payload[:k] = qim_embed(out.payload[:k], bits, config.qim_step)
        else:
            w = config.watermark_slot_width
            out.widths[VIRTUAL_WATERMARK_SLOT] = w
            padded = np.concatenate([bits, np.zeros(w - bits.size, np.uint8)])
            out.fields[VIRTUAL_WATERMARK_SLOT] = bits_to_int(padded)
        return out, bits.size
    pos = 0
    for ref in _refs(config, is_first):
        if pos >= bits.size:
            break
        w = ref.width(out.widths)
        chunk = bits[pos:pos + w]
        if chunk.size < w:
            chunk = np.concatenate([chunk, field_read_bits(out, ref)[chunk.size:]])
        out = field_write_bits(out, ref, chunk)
        pos += w
    return out, bits.size


def extract(config: ChannelConfig, packet: Datagram, is_first: bool = False,
            position: int | None = None) -> np.ndarray:
    """Read the channel's full per-packet capacity out of ``packet``."""
    cap = channel_capacity(config, packet, is_first, position)
    if config.kind == "watermark":
        if config.watermark_mode == "qim":
            return qim_detect(packet.payload[:cap], config.qim_step)
        if VIRTUAL_WATERMARK_SLOT not in packet.fields:
            return np.zeros(cap, np.uint8)
        return field_read_bits(packet, VIRTUAL_WATERMARK_SLOT)[:cap]
    parts = [field_read_bits(packet, ref) for ref in _refs(config, is_first)]
    return np.concatenate(parts) if parts else np.zeros(0, np.uint8)


# --------------------------------------------------------- batch variants

def batch_capacities(config: ChannelConfig, batch: PacketBatch, eligible=None,
                     first_row: int | None = 0) -> np.ndarray:
    """Per-row capacity; rows outside ``eligible`` carry nothing.

    ``first_row`` is the row holding the stream's first packet (``None`` if
    the batch does not contain it).
    """
    n = batch.n
    eligible = np.ones(n, bool) if eligible is None else np.asarray(eligible, bool)
    caps = np.zeros(n, np.int64)
    if config.kind == "watermark":
        rate = config.watermark_bits_per_packet
        p, q = rate.numerator, rate.denominator
        m = np.cumsum(eligible) - 1
        caps[eligible] = (p * (m[eligible] + 1)) // q - (p * m[eligible]) // q
        return caps
    caps[eligible] = config.map_width(batch.widths)
    if first_row is not None and n and eligible[first_row]:
        caps[first_row] = config.map_width(batch.widths, first=True)
    return caps


def _carrier_width(config: ChannelConfig, caps: np.ndarray) -> int:
    return int(caps.max()) if caps.size else 0


def _read_carrier(config, batch, rows, refs, width):
    if config.kind == "watermark":
        if config.watermark_mode == "qim":
            return qim_detect(batch.payload[rows, :width], config.qim_step)
        return batch.bits[VIRTUAL_WATERMARK_SLOT][rows, :width].copy()
    return np.hstack([batch.read_bits(r, rows) for r in refs])


def _write_carrier(config, batch, rows, refs, matrix, written):
    if config.kind == "watermark":
        width = matrix.shape[1]
        if config.watermark_mode == "qim":
            cur = batch.payload[rows, :width]
            batch.payload[rows, :width] = np.where(
                written, qim_embed(cur, matrix, config.qim_step), cur)
        else:
            batch.bits[VIRTUAL_WATERMARK_SLOT][rows, :width] = matrix
        return
    col = 0
    for r in refs:
        w = r.width(batch.widths)
        batch.write_bits(r, matrix[:, col:col + w], rows)
        col += w


def _ensure_virtual_slot(config, batch):
    if config.kind == "watermark" and config.watermark_mode == "abstract" \
            and VIRTUAL_WATERMARK_SLOT not in batch.bits:
        w = config.watermark_slot_width
        batch.bits[VIRTUAL_WATERMARK_SLOT] = np.zeros((batch.n, w), np.uint8)
        batch.widths[VIRTUAL_WATERMARK_SLOT] = w


def embed_batch(config: ChannelConfig, batch: PacketBatch, message: CovertMessage,
                eligible=None, first_row: int | None = 0) -> np.ndarray:
    """Embed into every eligible row in order; returns bits written per row."""
    _ensure_virtual_slot(config, batch)
    caps = batch_capacities(config, batch, eligible, first_row)
    used = np.zeros(batch.n, np.int64)
    groups = []
    if config.first_field_map and first_row is not None and caps[first_row]:
        groups.append((np.array([first_row]), config.first_field_map + config.field_map))
        rest = np.flatnonzero(caps)
        groups.append((rest[rest != first_row], config.field_map))
    else:
        groups.append((np.flatnonzero(caps), config.field_map))
    for rows, refs in groups:
        if not rows.size or message.length == 0:
            continue
        rcaps = caps[rows]
        width = _carrier_width(config, rcaps)
        mask = np.arange(width) < rcaps[:, None]
        flat = np.flatnonzero(mask)
        bits = message.take(flat.size)
        flat = flat[:bits.size]
        if not flat.size:
            continue
        carrier = np.ascontiguousarray(_read_carrier(config, batch, rows, refs, width))
        carrier.reshape(-1)[flat] = bits
        written = np.zeros(carrier.shape, bool)
        written.reshape(-1)[flat] = True
        _write_carrier(config, batch, rows, refs, carrier, written)
        used[rows] = np.bincount(flat // width, minlength=rows.size)
        if refs is not config.field_map:
            _rebase(config, batch, first_row)
    return used


def _rebase(config: ChannelConfig, batch: PacketBatch, first_row: int) -> None:
    """Keep seq/timestamp cadence after the first packet's initial value changed."""
    for ref in config.first_field_map:
        if ref.slot not in REBASED_SLOTS:
            continue
        w = batch.widths[ref.slot]
        vals = bits_to_ints(batch.bits[ref.slot])
        step = batch.meta.get(f"{ref.slot}_step", 1 if ref.slot == "seq" else None)
        if step is None:
            continue
        k = np.arange(batch.n) - first_row
        vals = (vals[first_row] + k * step) % (1 << w)
        others = np.ones(batch.n, bool)
        others[first_row] = False
        batch.bits[ref.slot][others] = ints_to_bits(vals[others], w)


def extract_batch(config: ChannelConfig, batch: PacketBatch, rows, caps,
                  first_row: int | None = None) -> list[np.ndarray]:
    """Bits of each listed row, reading ``caps[i]`` bits from row ``rows[i]``.

    ``caps`` are the receiver's expected capacities; ``first_row`` marks the
    batch row holding the stream's first packet, whose initial-value slots
    are read too.
    """
    rows = np.asarray(rows, np.int64)
    caps = np.asarray(caps, np.int64)
    if config.kind == "watermark" and config.watermark_mode == "abstract" \
            and VIRTUAL_WATERMARK_SLOT not in batch.bits:
        return [np.zeros(c, np.uint8) for c in caps]
    out: list[np.ndarray] = [np.zeros(0, np.uint8)] * rows.size
    is_first = (rows == first_row) if (first_row is not None and config.first_field_map) \
        else np.zeros(rows.size, bool)
    for sel, refs in ((~is_first, config.field_map),
                      (is_first, config.first_field_map + config.field_map)):
        idx = np.flatnonzero(sel & (caps > 0))
        if not idx.size:
            continue
        width = int(caps[idx].max())
        mat = _read_carrier(config, batch, rows[idx], refs, width)
        for j, i in enumerate(idx):
            out[i] = mat[j, :caps[i]]
    return out


# ------------------------------------------------------------------ ledger

@dataclass
class ChannelLedger:
    """Embedded/extracted bit accounting for one call, keyed by channel name."""

    embedded: dict[str, int] = field(default_factory=dict)
    extracted: dict[str, int] = field(default_factory=dict)
    log: list[tuple[str, int, int]] = field(default_factory=list)

    def record_embed(self, name: str, send_times, bits) -> None:
        bits = np.asarray(bits)
        self.embedded[name] = self.embedded.get(name, 0) + int(bits.sum())
        nz = np.flatnonzero(bits)
        self.log.extend((name, int(t), int(b)) for t, b in
                        zip(np.asarray(send_times)[nz], bits[nz]))

    def record_extract(self, name: str, bits) -> None:
        self.extracted[name] = self.extracted.get(name, 0) + int(np.asarray(bits).sum())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "send_time_us", "bits"])
            w.writerows(self.log)


def concat_bits(parts) -> np.ndarray:
    parts = [as_bits(p) for p in parts]
    return np.concatenate(parts) if parts else np.zeros(0, np.uint8)
