"""Wardens: an in-path normalizer/dropper and a passive loss-rate detector.

The active warden rewrites header fields that carry no overt meaning for the
endpoints and discards RTP packets that are already far too late to be
useful.  It never touches payload octets, sequence numbers or the SSRC.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .packet_model import Datagram, PacketBatch, bits_to_ints, ints_to_bits, ms_to_us

# how each slot is rewritten; unlisted slots are zeroed
ACTIONS = ("zero", "random", "quantize")
DEFAULT_ACTIONS = {
    "ip_id": "random",
    "udp_checksum": "zero",     # 0 means "no checksum" for UDP over IPv4
    "timestamp": "quantize",    # snap to a whole frame, cadence is kept
    "padding_count": "zero",
    "extension": "zero",
    "auth_tag": "zero",
}
DEFAULT_SLOTS = ("ip_id", "udp_checksum", "timestamp")
PROTECTED_SLOTS = ("seq", "ssrc")


class WardenPolicyError(ValueError):
    pass


@dataclass(frozen=True)
class WardenPolicy:
    normalize_slots: tuple[str, ...] = DEFAULT_SLOTS
    strip_padding_extension: bool = True
    drop_expired_threshold: float | None = None      # ms of lateness
    loss_alarm_alpha: float = 0.01
    strip_auth_tag: bool = False                     # aggressive, breaks SRTP integrity
    timestamp_quantum: int = 160                     # samples per frame
    actions: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "normalize_slots", tuple(self.normalize_slots))
        for slot in self.normalize_slots:
            if slot in PROTECTED_SLOTS:
                raise WardenPolicyError(f"{slot} carries overt meaning and cannot be normalized")
            if slot == "auth_tag" and not self.strip_auth_tag:
                raise WardenPolicyError("stripping auth tags needs strip_auth_tag = true")
        for slot, act in self.actions.items():
            if act not in ACTIONS:
                raise WardenPolicyError(f"unknown action {act!r} for {slot}")
        if not 0 < self.loss_alarm_alpha < 1:
            raise WardenPolicyError("alpha must lie in (0, 1)")
        if self.timestamp_quantum < 1:
            raise WardenPolicyError("timestamp quantum must be positive")

    def slots(self) -> tuple[str, ...]:
        out = list(self.normalize_slots)
        if self.strip_padding_extension:
            out += [s for s in ("padding_count", "extension") if s not in out]
        if self.strip_auth_tag and "auth_tag" not in out:
            out.append("auth_tag")
        return tuple(out)

    def action(self, slot: str) -> str:
        return self.actions.get(slot, DEFAULT_ACTIONS.get(slot, "zero"))


def _new_values(slot: str, values: np.ndarray, width: int, index: np.ndarray,
                policy: WardenPolicy, seed: int, stream: int) -> np.ndarray:
    act = policy.action(slot)
    if act == "zero":
        return np.zeros_like(values)
    if act == "quantize":
        return values - values % policy.timestamp_quantum
    from .netsim import keyed_uniform
    u = keyed_uniform(seed, stream, index)
    return np.floor(u * float(1 << width)).astype(np.int64)


def _stream_id(kind: str, slot: str) -> int:
    return 64 + 8 * {"rtp": 0, "rtcp": 1}.get(kind, 2) + sum(map(ord, slot)) % 8


def normalize(packet: Datagram, policy: WardenPolicy, seed: int = 0) -> Datagram:
    """Copy of ``packet`` with the policy's slots rewritten."""
    out = packet.copy()
    slots = [s for s in policy.slots() if s in packet.fields]
    for slot in slots:
        w = packet.widths[slot]
        if w == 0 or w > 63:
            out.fields[slot] = 0
            continue
        v = _new_values(slot, np.array([packet.fields[slot]], np.int64), w,
                        np.array([packet.index]), policy, seed, _stream_id(packet.kind, slot))
        out.fields[slot] = int(v[0])
    if policy.strip_padding_extension and hasattr(out, "padding_flag"):
        out.padding_flag = 0
        out.extension_flag = 0
    return out


def normalize_batch(batch: PacketBatch, policy: WardenPolicy, seed: int = 0) -> np.ndarray:
    """In-place :func:`normalize` over a batch; returns a per-row "changed" mask."""
    changed = np.zeros(batch.n, bool)
    index = np.arange(batch.n)
    for slot in policy.slots():
        if slot not in batch.bits:
            continue
        w = batch.widths[slot]
        before = batch.bits[slot].copy()
        if w == 0 or w > 63:
            batch.bits[slot][:] = 0
        else:
            vals = _new_values(slot, bits_to_ints(before), w, index, policy, seed,
                               _stream_id(batch.kind, slot))
            batch.bits[slot] = ints_to_bits(vals, w)
        changed |= np.any(before != batch.bits[slot], axis=1)
    if policy.strip_padding_extension:
        changed |= (batch.padding_flag != 0) | (batch.extension_flag != 0)
        batch.padding_flag[:] = 0
        batch.extension_flag[:] = 0
    return changed


@dataclass
class DropReport:
    dropped: np.ndarray           # bool per packet (input order)
    lateness_us: np.ndarray       # -1 where the packet never reached the warden

    @property
    def dropped_indices(self) -> np.ndarray:
        return np.flatnonzero(self.dropped)


def drop_expired(seq, arrival_us, policy: WardenPolicy, frame_interval_us: int) -> DropReport:
    """Drop RTP packets running later than the threshold behind the stream's cadence.

    The warden knows nothing about the receiver's buffer.  It sees packets in
    arrival order, unwraps their 16-bit sequence numbers, and measures each
    packet's offset ``arrival - k * I_f`` against the smallest offset seen so
    far.  ``arrival_us < 0`` marks packets lost upstream.
    """
    seq = np.asarray(seq, np.int64)
    arrival = np.asarray(arrival_us, np.int64)
    n = seq.size
    lateness = np.full(n, -1, np.int64)
    dropped = np.zeros(n, bool)
    seen = np.flatnonzero(arrival >= 0)
    if policy.drop_expired_threshold is None or not seen.size:
        return DropReport(dropped, lateness)
    order = seen[np.lexsort((seq[seen], arrival[seen]))]
    s = seq[order]
    step = np.diff(s)
    step = (step + 0x8000) % 0x10000 - 0x8000       # shortest signed distance
    k = np.concatenate([[0], np.cumsum(step)])
    offset = arrival[order] - k * frame_interval_us
    late = offset - np.minimum.accumulate(offset)
    lateness[order] = late
    dropped[order] = late > ms_to_us(policy.drop_expired_threshold)
    return DropReport(dropped, lateness)


@dataclass(frozen=True)
class AnomalyResult:
    flagged: bool
    p_value: float
    observed: int
    expected: float

    def __str__(self) -> str:
        state = "FLAGGED" if self.flagged else "clear"
        return f"{state}: {self.observed} losses vs {self.expected:.1f} expected, p={self.p_value:.3g}"


def loss_anomaly(observed_losses: int, packets: int, expected_pN: float,
                 alpha: float = 0.01) -> AnomalyResult:
    """One-sided binomial test: are there more losses than ``p_N`` explains?"""
    if packets <= 0:
        raise ValueError("need at least one packet")
    if not 0 <= observed_losses <= packets:
        raise ValueError("losses must lie in [0, packets]")
    if observed_losses == 0:
        p = 1.0
    else:
        p = float(binomtest(observed_losses, packets, expected_pN, alternative="greater").pvalue)
    return AnomalyResult(p < alpha, p, observed_losses, packets * expected_pN)


def observed_losses(trace) -> tuple[int, int]:
    """(RTP packets the receiver could not play, RTP packets generated) for one trace."""
    rtp = trace.mask("rtp")
    played = trace.columns["classification"][rtp] == "playout"
    return int(rtp.sum() - played.sum()), int(rtp.sum())
