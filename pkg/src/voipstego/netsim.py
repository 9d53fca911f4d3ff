"""Deterministic transport, de-jitter buffer and the end-to-end call runner.

Per-packet randomness (loss, jitter) is a pure function of
``(seed, packet kind, packet index)``, so replaying a call reproduces every
decision and a single packet can be pushed through :func:`transit` with the
same outcome it gets inside :func:`run_call`.  Time is integer microseconds.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .bitstream import FRAME_OVERHEAD, CovertMessage, decode_frames, fill_frames, frame_sizes, frame_stream
from .covert_channels import ChannelLedger, batch_capacities, embed_batch, extract_batch
from .lack_engine import apply_lack_batch, lack_frame_bits, read_lack_frame, select_packets
from .packet_model import (
    Datagram,
    PacketBatch,
    make_rtcp_schedule,
    make_rtp_stream,
    make_signaling,
    ms_to_us,
)

KIND_IDS = {"rtp": 0, "rtcp": 1, "signaling": 2}
LABELS = ("playout", "lost", "steganogram", "dropped")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def keyed_uniform(seed: int, stream: int, index) -> np.ndarray:
    """Uniform [0, 1) draws addressed by ``(seed, stream, index)`` (SplitMix64)."""
    index = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    with np.errstate(over="ignore"):
        key = _mix64(np.array([seed & _MASK64], np.uint64) + _GOLDEN * np.uint64(stream + 1))
        z = _mix64(key + (index + np.uint64(1)) * _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


@dataclass(frozen=True)
class NetworkModel:
    base_delay: float = 40.0     # ms
    jitter_J: float = 20.0       # ms, uniform on [0, J]
    loss_pN: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_delay < 0 or self.jitter_J < 0:
            raise ValueError("delays must be non-negative")
        if not 0 <= self.loss_pN <= 1:
            raise ValueError("loss probability must lie in [0, 1]")

    def decide(self, kind: str, index) -> tuple[np.ndarray, np.ndarray]:
        """(dropped, one-way delay in us) for packets of ``kind`` at ``index``."""
        k = KIND_IDS[kind]
        dropped = keyed_uniform(self.seed, 2 * k, index) < self.loss_pN
        jmax = ms_to_us(self.jitter_J)
        jitter = np.floor(keyed_uniform(self.seed, 2 * k + 1, index) * (jmax + 1)).astype(np.int64)
        return dropped, ms_to_us(self.base_delay) + jitter


def transit(packet: Datagram, model: NetworkModel) -> int | None:
    """Arrival time of ``packet`` in us, or ``None`` if the network drops it."""
    dropped, delay = model.decide(packet.kind, packet.index)
    if dropped[0]:
        return None
    return packet.send_time + int(delay[0])


def transit_batch(batch: PacketBatch, model: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`transit`: (dropped mask, arrival times; -1 where dropped)."""
    dropped, delay = model.decide(batch.kind, np.arange(batch.n))
    arrival = np.where(dropped, -1, batch.send_time + delay)
    return dropped, arrival


@dataclass(frozen=True)
class JitterBuffer:
    depth: float = 60.0              # ms
    reference_delay: float = 0.0     # ms, network delay the playout point is set against

    def deadline(self, packet) -> int:
        return packet.nominal_time + ms_to_us(self.reference_delay) + ms_to_us(self.depth)

    def deadlines(self, nominal_time: np.ndarray) -> np.ndarray:
        return nominal_time + ms_to_us(self.reference_delay) + ms_to_us(self.depth)


def classify_rtp(stream: PacketBatch, arrival: np.ndarray, arrived: np.ndarray,
                 buffer: JitterBuffer, aware: bool) -> tuple[np.ndarray, list]:
    """Receiver labels for every RTP row plus the LACK frames an aware receiver read.

    Rows that never arrived are labelled ``dropped``.
    """
    labels = np.full(stream.n, "dropped", dtype=object)
    late = arrived & (arrival > buffer.deadlines(stream.nominal_time))
    labels[arrived & ~late] = "playout"
    labels[late] = "lost"
    frames = [None] * stream.n
    if aware:
        for r in np.flatnonzero(late):
            msg = read_lack_frame(stream.payload[r])
            if msg is not None:
                labels[r] = "steganogram"
                frames[r] = msg
    return labels, frames


@dataclass
class ChannelResult:
    name: str
    label: str
    carrier: str
    frames_total: int = 0
    frames_ok: int = 0
    message: np.ndarray | None = None        # reassembled payload when every frame was intact


@dataclass
class CallTrace:
    """Every generated datagram of one call, one record per datagram."""

    columns: dict[str, np.ndarray]
    channels: list[ChannelResult]
    duration_s: float
    frame_interval_ms: int
    codec: str
    seeds: dict[str, int]
    lack_audit: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    BASE_COLUMNS = ("kind", "index", "seq", "nominal_time_us", "send_time_us",
                    "arrival_time_us", "classification", "lack_selected",
                    "warden_normalized", "warden_dropped")

    @property
    def n(self) -> int:
        return self.columns["kind"].size

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]

    def channel(self, name: str) -> ChannelResult:
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)

    def mask(self, kind: str) -> np.ndarray:
        return self.columns["kind"] == kind

    def counts(self) -> dict[str, int]:
        labels = self.columns["classification"]
        media = ~self.mask("signaling")
        return {lab: int(np.sum((labels == lab) & media)) for lab in LABELS}

    def generated(self) -> int:
        return int(np.sum(~self.mask("signaling")))

    def extracted(self, name: str) -> np.ndarray:
        return self.columns[f"{name}_extracted"]

    def embedded(self, name: str) -> np.ndarray:
        return self.columns[f"{name}_embedded"]

    def total_extracted(self) -> int:
        return int(sum(self.extracted(c).sum() for c in self.channel_names))

    def ledger(self) -> ChannelLedger:
        led = ChannelLedger()
        for c in self.channel_names:
            led.record_embed(c, self.columns["send_time_us"], self.embedded(c))
            led.record_extract(c, self.extracted(c))
        return led

    def received_media(self) -> int:
        """RTP and RTCP datagrams that reached the receiver."""
        arrived = self.columns["arrival_time_us"] >= 0
        return int(np.sum(arrived & ~self.mask("signaling")))

    def csv_header(self) -> list[str]:
        cols = list(self.BASE_COLUMNS)
        for c in self.channel_names:
            cols += [f"{c}_embedded", f"{c}_extracted"]
        return cols

    def write_csv(self, fh) -> None:
        header = self.csv_header()
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        cols = [self.columns[h].tolist() for h in header]
        w.writerows(zip(*cols))

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def write_lack_audit(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["index", "send_time_us", "delay_ms", "bits", "recovered"])
        for row in self.lack_audit:
            w.writerow([row["index"], row["send_time_us"], row["delay_ms"], row["bits"],
                        int(row["recovered"])])


def _call_seeds(seed: int) -> dict[str, int]:
    names = ("stream", "rtcp", "lack", "message", "network", "warden")
    state = np.random.SeedSequence(seed).generate_state(len(names), dtype=np.uint32)
    return {"call": seed, **{n: int(s) for n, s in zip(names, state)}}


def _channel_message(spec, capacity: int, rng) -> tuple[np.ndarray, list[int]]:
    cfg = spec.config
    if spec.message is None:
        return fill_frames(capacity, cfg.frame_payload_bits, rng)
    return (frame_stream(spec.message, cfg.frame_payload_bits),
            frame_sizes(spec.message.size, cfg.frame_payload_bits))


def run_call(scenario, seed: int | None = None) -> CallTrace:
    """Simulate one direction of one call and return its full trace.

    ``scenario`` is a validated :class:`~voipstego.scenario.Scenario`.
    """
    scenario.validate()
    seed = scenario.seeds[0] if seed is None else seed
    seeds = _call_seeds(seed)
    prof = scenario.profile
    T = scenario.duration_s
    msg_rng = np.random.default_rng(seeds["message"])

    stream = make_rtp_stream(prof, T, seeds["stream"], auth_tag_bits=scenario.rtp_auth_tag_bits,
                             extra_slots=scenario.extra_rtp_slots)
    rtcp_list = make_rtcp_schedule(scenario.rtcp_interval_s, T, seeds["rtcp"],
                                   packet_types=scenario.rtcp_packet_types,
                                   report_blocks_per_type=scenario.rtcp_report_blocks,
                                   bits_per_block=scenario.rtcp_block_bits,
                                   auth_tag_bits=scenario.rtcp_auth_tag_bits) \
        if scenario.rtcp_interval_s else []
    rtcp = PacketBatch.from_packets(rtcp_list) if rtcp_list else None
    signaling = make_signaling(T, scenario.signaling_packets)
    batches = {"rtp": stream, "rtcp": rtcp}

    plan = scenario.lack
    selected = np.zeros(0, np.int64)
    if plan is not None:
        selected = select_packets(stream, plan, seeds["lack"], p_N=scenario.network.loss_pN)
    lack_mask = np.zeros(stream.n, bool)
    lack_mask[selected] = True

    # sender: per-packet channels, then LACK
    sent = {}
    for spec in scenario.channels:
        cfg = spec.config
        batch = batches[cfg.carrier]
        if batch is None:
            sent[cfg.name] = None
            continue
        eligible = ~lack_mask if (cfg.kind == "watermark" and cfg.carrier == "rtp") else None
        caps = batch_capacities(cfg, batch, eligible)
        bits, sizes = _channel_message(spec, int(caps.sum()), msg_rng)
        used = embed_batch(cfg, batch, CovertMessage(bits), eligible)
        sent[cfg.name] = (batch, caps, used, sizes)

    lack_bits = np.zeros(stream.n, np.int64)
    if plan is not None and selected.size:
        if scenario.lack_message is None:
            lack_payload = msg_rng.integers(0, 2, size=selected.size *
                                            lack_frame_bits(prof.payload_bits), dtype=np.uint8)
        else:
            lack_payload = scenario.lack_message
        carried, originals = apply_lack_batch(stream, selected, plan, CovertMessage(lack_payload),
                                              msg_rng)
        lack_bits[selected] = carried

    # network
    net = scenario.network_model(seeds["network"])
    rtp_drop, rtp_arr = transit_batch(stream, net)
    if rtcp is not None:
        rtcp_drop, rtcp_arr = transit_batch(rtcp, net)
    else:
        rtcp_drop, rtcp_arr = np.zeros(0, bool), np.zeros(0, np.int64)

    # warden, just ahead of the receiver
    rtp_wdrop = np.zeros(stream.n, bool)
    normalized = {"rtp": np.zeros(stream.n, bool),
                  "rtcp": np.zeros(0 if rtcp is None else rtcp.n, bool)}
    policy = scenario.warden
    if policy is not None:
        from .warden import drop_expired, normalize_batch
        for kind, batch in batches.items():
            if batch is not None:
                normalized[kind] = normalize_batch(batch, policy, seeds["warden"])
        if policy.drop_expired_threshold is not None:
            report = drop_expired(stream.seq, rtp_arr, policy, prof.frame_interval_us)
            rtp_wdrop = report.dropped
        normalized["rtp"] &= ~rtp_drop
        normalized["rtcp"] &= ~rtcp_drop

    # receiver
    rtp_arrived = ~rtp_drop & ~rtp_wdrop
    buffer = JitterBuffer(scenario.buffer_ms, reference_delay=net.base_delay)
    labels, lack_frames = classify_rtp(stream, rtp_arr, rtp_arrived, buffer, scenario.lack_aware)
    arrived = {"rtp": rtp_arrived, "rtcp": ~rtcp_drop}
    arrival = {"rtp": rtp_arr, "rtcp": rtcp_arr}

    results, per_channel = [], {}
    for spec in scenario.channels:
        cfg = spec.config
        res = ChannelResult(cfg.name, spec.label, cfg.carrier)
        results.append(res)
        if sent[cfg.name] is None:
            n = stream.n if cfg.carrier == "rtp" else 0
            per_channel[cfg.name] = (cfg.carrier, np.zeros(n, np.int64), np.zeros(n, np.int64))
            continue
        batch, caps, used, sizes = sent[cfg.name]
        ok = arrived[cfg.carrier]
        # extraction consumes packets in arrival order and files them by position
        order = np.lexsort((np.arange(batch.n), arrival[cfg.carrier]))
        rows = order[ok[order] & (caps[order] > 0)]
        got = extract_batch(cfg, batch, rows, caps[rows], first_row=0)
        starts = np.concatenate([[0], np.cumsum(caps)])
        stream_bits = np.zeros(int(starts[-1]), np.uint8)
        if rows.size:
            lens = np.fromiter((b.size for b in got), np.int64, rows.size)
            flat = np.concatenate(got)
            pos = np.repeat(starts[rows] - (np.cumsum(lens) - lens), lens) + np.arange(flat.size)
            stream_bits[pos] = flat
        frames = decode_frames(stream_bits, sizes)
        res.frames_total = len(sizes)
        res.frames_ok = sum(f is not None for f in frames)
        if sizes and res.frames_ok == len(sizes):
            res.message = np.concatenate([f.bits for f in frames])
        extracted = np.where(ok, used, 0)
        per_channel[cfg.name] = (cfg.carrier, used, extracted)

    if plan is not None:
        res = ChannelResult("lack", scenario.lack_label, "rtp")
        got = np.zeros(stream.n, np.int64)
        for r in selected:
            f = lack_frames[r]
            if f is not None and lack_bits[r]:
                got[r] = f.length + FRAME_OVERHEAD
        res.frames_total = int(np.count_nonzero(lack_bits))
        res.frames_ok = int(np.count_nonzero(got))
        if res.frames_total and res.frames_ok == res.frames_total:
            res.message = np.concatenate([lack_frames[r].bits for r in selected
                                          if lack_bits[r]])
        results.append(res)
        per_channel["lack"] = ("rtp", lack_bits, got)

    # assemble records
    n_rtp, n_rtcp, n_sig = stream.n, (0 if rtcp is None else rtcp.n), len(signaling)
    kind = np.array(["rtp"] * n_rtp + ["rtcp"] * n_rtcp + ["signaling"] * n_sig, dtype=object)
    index = np.concatenate([np.arange(n_rtp), np.arange(n_rtcp), np.arange(n_sig)])
    seq = np.concatenate([stream.seq, -np.ones(n_rtcp + n_sig, np.int64)])
    sig_send = np.array([p.send_time for p in signaling], np.int64)
    nominal = np.concatenate([stream.nominal_time,
                              rtcp.nominal_time if rtcp is not None else [], sig_send])
    send = np.concatenate([stream.send_time, rtcp.send_time if rtcp is not None else [],
                           sig_send])
    sig_arr = sig_send + ms_to_us(net.base_delay)
    arr = np.concatenate([np.where(rtp_arrived, rtp_arr, -1), rtcp_arr, sig_arr])
    rtcp_labels = np.where(rtcp_drop, "dropped", "playout").astype(object)
    classification = np.concatenate([labels, rtcp_labels,
                                     np.full(n_sig, "playout", dtype=object)])
    zeros_other = np.zeros(n_rtcp + n_sig, np.int64)
    cols = {
        "kind": kind,
        "index": index.astype(np.int64),
        "seq": seq.astype(np.int64),
        "nominal_time_us": nominal.astype(np.int64),
        "send_time_us": send.astype(np.int64),
        "arrival_time_us": arr.astype(np.int64),
        "classification": classification,
        "lack_selected": np.concatenate([lack_mask.astype(np.int64), zeros_other]),
        "warden_normalized": np.concatenate([normalized["rtp"], normalized["rtcp"],
                                             np.zeros(n_sig, bool)]).astype(np.int64),
        "warden_dropped": np.concatenate([rtp_wdrop.astype(np.int64), zeros_other]),
    }
    for name, (carrier, emb, ext) in per_channel.items():
        if carrier == "rtp":
            pad = np.zeros(n_rtcp + n_sig, np.int64)
            e, x = np.concatenate([emb, pad]), np.concatenate([ext, pad])
        else:
            pre, post = np.zeros(n_rtp, np.int64), np.zeros(n_sig, np.int64)
            e, x = np.concatenate([pre, emb, post]), np.concatenate([pre, ext, post])
        cols[f"{name}_embedded"] = e.astype(np.int64)
        cols[f"{name}_extracted"] = x.astype(np.int64)

    order = np.lexsort((index, np.vectorize(KIND_IDS.get)(kind), nominal))
    cols = {k: v[order] for k, v in cols.items()}

    audit = []
    if plan is not None:
        for r in selected:
            audit.append({"index": int(r), "send_time_us": int(stream.send_time[r]),
                          "delay_ms": plan.inject_delay, "bits": int(lack_bits[r]),
                          "recovered": bool(per_channel["lack"][2][r])})

    return CallTrace(cols, results, float(T), prof.frame_interval_If, prof.name, seeds,
                     lack_audit=audit, meta={"scenario": scenario.name})
