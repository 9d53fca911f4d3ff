"""LACK: covert data in the payloads of intentionally over-delayed RTP packets.

The sender picks packets with probability ``p_i``, holds them back long
enough that the receiver's de-jitter buffer has already given up on them,
and replaces their voice payload with a framed steganogram.  An unaware
receiver counts such packets as lost; an aware one reads the frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .bitstream import (
    FRAME_OVERHEAD,
    CovertMessage,
    FrameError,
    bits_from_bytes,
    frame_decode,
    frame_encode,
)
from .packet_model import CodecProfile, PacketBatch, VoipPacket, ms_to_us, to_fraction

log = logging.getLogger(__name__)

END_TO_END_BUDGET_MS = 150
SCHEDULERS = ("bernoulli", "periodic")


class LackPlanError(ValueError):
    pass


class InfeasibleLossError(ValueError):
    """The network alone already loses more than the tolerated total."""


def total_loss(p_N, p_i):
    """Loss probability seen by the receiver when LACK runs over a lossy network."""
    for p in (p_N, p_i):
        if not 0 <= p <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
    return 1 - (1 - p_N) * (1 - p_i)


def pi_max(p_T, p_N):
    """Largest LACK probability keeping total loss at ``p_T`` given network loss ``p_N``."""
    if not 0 <= p_N < 1:
        raise ValueError("network loss must lie in [0, 1)")
    if p_T < p_N:
        raise InfeasibleLossError(f"network loss {p_N} already exceeds the target {p_T}")
    return (p_T - p_N) / (1 - p_N)


def lack_prbr(r, If, p_i):
    """Average LACK bits per packet for codec rate ``r`` (bit/s) and frame interval ``If`` (ms)."""
    return r * If * p_i / 1000


def lack_rbr(r, p_i):
    return r * p_i


def lack_total(d, r, p_i):
    """Covert bits over a call of ``d`` seconds."""
    if d <= 0:
        raise ValueError("call duration must be positive")
    return d * r * p_i


@dataclass(frozen=True)
class DelayBudget:
    """Sender-side delay components in milliseconds."""

    codec_processing_d1: float = 5.0
    codec_algorithm_d2: float = 0.0
    packetization_d3: float = 20.0
    dejitter_dd: float = 0.0

    def total_dT(self, selected: bool = False) -> float:
        base = self.codec_processing_d1 + self.codec_algorithm_d2 + self.packetization_d3
        return base + self.dejitter_dd if selected else base

    def exceeds_budget(self, selected: bool = False) -> bool:
        return self.total_dT(selected) > END_TO_END_BUDGET_MS


@dataclass(frozen=True)
class LossModel:
    network_pN: float = 0.0
    lack_pi: float = 0.0
    tolerance_pLmax: float = 0.03

    def __post_init__(self):
        if not self.lack_pi < self.tolerance_pLmax:
            raise LackPlanError(f"p_i={self.lack_pi} must stay below p_Lmax={self.tolerance_pLmax}")

    @property
    def total_pT(self) -> float:
        return total_loss(self.network_pN, self.lack_pi)


@dataclass(frozen=True)
class Feasibility:
    ok: bool
    bound: float
    binding: str        # "loss tolerance" or "network headroom"
    strict: bool

    def describe(self, pi) -> str:
        rel = "<" if self.strict else "<="
        state = "ok" if self.ok else "violated"
        return f"p_i={pi} {rel} {self.bound:.6g} ({self.binding}) {state}"


def lack_feasibility(pi, p_Lmax, p_N=0.0) -> Feasibility:
    """Check ``p_i`` against both the codec's loss tolerance and the network headroom.

    The tighter of the two limits is the one that binds.
    """
    headroom = pi_max(p_Lmax, p_N)
    if headroom < p_Lmax:
        return Feasibility(pi <= headroom, headroom, "network headroom", strict=False)
    return Feasibility(pi < p_Lmax, p_Lmax, "loss tolerance", strict=True)


@dataclass(frozen=True)
class LackPlan:
    pi: float
    inject_delay: float = 120.0          # ms
    scheduler: str = "periodic"
    period: int | None = None            # packets, periodic mode

    def __post_init__(self):
        if not 0 <= self.pi < 1:
            raise LackPlanError("p_i must lie in [0, 1)")
        if self.inject_delay <= 0:
            raise LackPlanError("the injected delay must be positive to push packets past the "
                                "receiver's de-jitter buffer")
        if self.scheduler not in SCHEDULERS:
            raise LackPlanError(f"scheduler must be one of {SCHEDULERS}")
        if self.period is not None and self.period < 1:
            raise LackPlanError("period must be at least one packet")

    @property
    def inject_delay_us(self) -> int:
        return ms_to_us(self.inject_delay)

    def spacing(self) -> int:
        if self.period is not None:
            return self.period
        return int(1 / to_fraction(self.pi)) if self.pi else 0

    def check(self, profile: CodecProfile, p_N: float = 0.0,
              buffer_depth: float | None = None) -> list[str]:
        problems = []
        feas = lack_feasibility(self.pi, profile.loss_tolerance_pLmax, p_N)
        if not feas.ok:
            problems.append(f"LACK {feas.describe(self.pi)} for {profile.name}")
        else:
            log.info("LACK %s", feas.describe(self.pi))
        if buffer_depth is not None and self.inject_delay < buffer_depth:
            problems.append(f"LACK delay {self.inject_delay} ms is below the de-jitter "
                            f"buffer depth {buffer_depth} ms")
        return problems


def select_packets(stream, plan: LackPlan, seed: int, *, profile: CodecProfile | None = None,
                   p_N: float = 0.0) -> np.ndarray:
    """Indices of packets chosen to carry LACK frames.

    ``stream`` is an :class:`~voipstego.packet_model.RtpStream` or a packet
    count (then ``profile`` supplies the loss tolerance, if any).
    """
    if isinstance(stream, PacketBatch):
        n = stream.n
        profile = profile or getattr(stream, "profile", None)
    else:
        n = int(stream)
    if profile is not None:
        feas = lack_feasibility(plan.pi, profile.loss_tolerance_pLmax, p_N)
        if not feas.ok:
            raise LackPlanError(f"plan rejected: {feas.describe(plan.pi)}")
    if plan.pi == 0 or n == 0:
        return np.zeros(0, np.int64)
    rng = np.random.default_rng(seed)
    if plan.scheduler == "bernoulli":
        return np.flatnonzero(rng.random(n) < plan.pi).astype(np.int64)
    count = int(n * to_fraction(plan.pi))
    if count == 0:
        return np.zeros(0, np.int64)
    spacing = plan.spacing()
    slack = n - (count - 1) * spacing
    if slack <= 0:
        raise LackPlanError(f"{count} packets at spacing {spacing} do not fit in {n}")
    offset = int(rng.integers(0, slack))
    return offset + spacing * np.arange(count, dtype=np.int64)


@dataclass
class LackOutcome:
    packet: VoipPacket
    original_payload: np.ndarray
    bits: int                  # covert bits carried (frame length), 0 for padding
    total_delay_ms: float
    budget_exceeded: bool
    padded: bool


def lack_frame_bits(payload_bits: int) -> int:
    return payload_bits - FRAME_OVERHEAD


def _lack_payload(message: CovertMessage, payload_bytes: int, rng) -> tuple[np.ndarray, int]:
    chunk = message.take(lack_frame_bits(payload_bytes * 8))
    frame = frame_encode(chunk)
    filler = rng.integers(0, 2, size=payload_bytes * 8 - frame.size, dtype=np.uint8)
    carried = frame.size if chunk.size else 0
    return np.packbits(np.concatenate([frame, filler])), carried


def apply_lack_delay(packet: VoipPacket, plan: LackPlan, budget: DelayBudget,
                     message: CovertMessage, rng: np.random.Generator | None = None
                     ) -> LackOutcome:
    """Delay a selected packet and swap its payload for the next steganogram frame.

    When the message is exhausted the packet is still delayed but carries an
    empty (padding) frame.
    """
    rng = rng or np.random.default_rng(0)
    original = np.asarray(packet.payload, np.uint8).copy()
    payload, carried = _lack_payload(message, original.size, rng)
    if not carried:
        log.info("LACK packet %d carries a padding frame: message exhausted", packet.index)
    out = replace(packet, payload=payload, fields=dict(packet.fields),
                  widths=dict(packet.widths),
                  send_time=packet.send_time + plan.inject_delay_us)
    b = replace(budget, dejitter_dd=plan.inject_delay)
    return LackOutcome(out, original, carried, b.total_dT(selected=True),
                       b.exceeds_budget(selected=True), padded=not carried)


def apply_lack_batch(stream: PacketBatch, rows, plan: LackPlan, message: CovertMessage,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """In-place LACK on the selected rows; returns (bits carried, original payloads)."""
    rows = np.asarray(rows, np.int64)
    originals = stream.payload[rows].copy()
    carried = np.zeros(rows.size, np.int64)
    for j, r in enumerate(rows):
        stream.payload[r], carried[j] = _lack_payload(message, stream.payload.shape[1], rng)
    stream.send_time[rows] += plan.inject_delay_us
    return carried, originals


@dataclass(frozen=True)
class Classification:
    label: str                          # playout | lost | steganogram
    message: CovertMessage | None = None
    bits: int = 0


def read_lack_frame(payload) -> CovertMessage | None:
    try:
        return frame_decode(bits_from_bytes(bytes(np.asarray(payload, np.uint8))))
    except FrameError:
        return None


def receiver_classify(packet: VoipPacket, arrival_time: int, buffer, aware: bool
                      ) -> Classification:
    """Decide what the receiver does with an arrived RTP packet.

    Past the buffer deadline an unaware receiver discards the packet; an aware
    one tries to read a LACK frame and treats the packet as lost if the frame
    does not check out (an ordinary late packet).
    """
    if arrival_time <= buffer.deadline(packet):
        return Classification("playout")
    if not aware:
        return Classification("lost")
    msg = read_lack_frame(packet.payload)
    if msg is None:
        return Classification("lost")
    return Classification("steganogram", msg, msg.length + FRAME_OVERHEAD)


def expected_lack_bits(n: int, plan: LackPlan, payload_bits: int) -> Fraction:
    """Mean LACK bits per call under the plan (periodic mode: exact)."""
    if plan.scheduler == "periodic":
        return Fraction(int(n * to_fraction(plan.pi)) * payload_bits)
    return n * to_fraction(plan.pi) * payload_bits
