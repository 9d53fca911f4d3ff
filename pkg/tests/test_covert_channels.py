from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voipstego.bitstream import CovertMessage
from voipstego.covert_channels import (
    ChannelConfig,
    ChannelError,
    batch_capacities,
    channel_capacity,
    embed,
    embed_batch,
    extract,
    extract_batch,
    find_conflicts,
    prbr_ns,
    prbr_rtcp,
    qim_detect,
    qim_embed,
    rbr_srtcp,
    rbr_srtp,
    watermark_capacity,
)
from voipstego.packet_model import (
    CODECS,
    PacketBatch,
    RTP_SLOT_WIDTHS,
    make_rtcp_schedule,
    make_rtp_stream,
)

from oracles import credit_capacities

G711 = CODECS["G.711"]

HEADER = ChannelConfig.header("ipudp")
RTPF = ChannelConfig.rtp_field("rtp")
TAG = ChannelConfig.auth_tag("tag", 32)
WM = ChannelConfig.watermark("wm", "0.6")
WM_ABS = ChannelConfig.watermark("dsss", "2.5", mode="abstract")
RTCP = ChannelConfig.rtcp_report("rtcp", 1, 1, 160, report_slot_bits=320)
RTP_CHANNELS = [HEADER, RTPF, TAG, WM, WM_ABS]


@pytest.fixture
def stream():
    return make_rtp_stream(G711, 1, seed=21, auth_tag_bits=32)


@pytest.fixture
def reports():
    return make_rtcp_schedule(5, 60, seed=2)


# ------------------------------------------------------------- formulas

def test_prbr_ns():
    assert prbr_ns(32, 32, 0) == prbr_ns(32, 32, 5000) == 32
    assert prbr_ns(Fraction(48), 32, 999) == Fraction(32016, 1000)
    assert prbr_ns(100, 0, 0) == 100
    with pytest.raises(ValueError):
        prbr_ns(1, 1, -1)


@given(st.integers(1, 5000), st.data())
def test_prbr_ns_limit(sb0, data):
    # the first packet carries the per-packet fields plus initial values
    sbj = data.draw(st.integers(0, sb0))
    assert abs(prbr_ns(sb0, sbj, 10 * sb0) - sbj) < 0.1


def test_rbr_srtp():
    assert rbr_srtp(32, 20) == 1600
    assert rbr_srtp(80, 20) == 4000
    assert rbr_srtp(80, 10) == 8000
    with pytest.raises(ValueError):
        rbr_srtp(80, 0)


def test_prbr_rtcp():
    assert prbr_rtcp(1, 1, 160) == 160
    assert prbr_rtcp(2, 1, 160) == 320
    assert prbr_rtcp(0, 3, 160) == 0


def test_rbr_srtcp():
    assert rbr_srtcp(80, 108, 540) == 16
    assert rbr_srtcp(80, 0, 540) == 0
    assert round(rbr_srtcp(32, 22, 540), 3) == 1.304
    with pytest.raises(ValueError):
        rbr_srtcp(32, 1, 0)


# ----------------------------------------------------------- capacities

def test_capacities(stream, reports):
    for i in range(5):
        assert channel_capacity(HEADER, stream.packet(i), is_first=(i == 0)) == 32
        assert channel_capacity(RTPF, stream.packet(i)) == 16
        assert channel_capacity(TAG, stream.packet(i)) == 32
    no_extra = ChannelConfig.rtcp_report("r", 1, 1, 160, extra_slots=(), report_slot_bits=320)
    assert channel_capacity(no_extra, reports[0]) == 160
    assert channel_capacity(RTCP, reports[0]) == 192


def test_watermark_credit_pattern():
    caps = [watermark_capacity(Fraction(3, 5), m) for m in range(5)]
    assert caps == credit_capacities(Fraction(3, 5), 5) == [0, 1, 0, 1, 1]
    assert sum(caps) == 3


@given(st.fractions(min_value=0, max_value=8, max_denominator=50), st.integers(0, 3000))
def test_watermark_credit_conservation(rate, n):
    caps = [watermark_capacity(rate, m) for m in range(n)]
    assert caps == credit_capacities(rate, n)
    assert abs(sum(caps) - n * rate) < 1


def test_wrong_carrier_rejected(stream, reports):
    with pytest.raises(ChannelError):
        channel_capacity(HEADER.__class__.rtcp_report("x"), stream.packet(0))
    with pytest.raises(ChannelError):
        channel_capacity(RTPF, reports[0])


def test_config_validation():
    with pytest.raises(ChannelError):
        ChannelConfig("x", "nope")
    with pytest.raises(ChannelError):
        ChannelConfig.watermark("w", -1)
    with pytest.raises(ChannelError):
        ChannelConfig.watermark("w", 1, qim_step=3)
    with pytest.raises(ChannelError):
        ChannelConfig("x", "rtp_field", carrier="rtcp")


def test_check_against_widths():
    widths = dict(RTP_SLOT_WIDTHS)
    assert HEADER.check_against(widths) == []
    bad = ChannelConfig.header("h", ("ip_id",), per_packet_bits_SBj=32)
    assert any("16" in p for p in bad.check_against(widths))
    self_overlap = ChannelConfig.header("h", ("timestamp[0:9]", "timestamp[8:12]"))
    assert any("overlaps" in p for p in self_overlap.check_against(widths))
    assert TAG.check_against(widths)          # no auth tag on the wire


def test_find_conflicts_names_both():
    a = ChannelConfig.rtp_field("alpha", ("timestamp[0:9]",))
    b = ChannelConfig.rtp_field("beta", ("timestamp[8:16]",))
    c = ChannelConfig.rtp_field("gamma", ("timestamp[9:16]",))
    widths = {"rtp": dict(RTP_SLOT_WIDTHS)}
    probs = find_conflicts([a, b], widths)
    assert len(probs) == 1 and "alpha" in probs[0] and "beta" in probs[0]
    assert find_conflicts([a, c], widths) == []
    assert find_conflicts([WM, ChannelConfig.watermark("w2", 1)], widths)


# ------------------------------------------------------------ embedding

@given(st.integers(0, 2**31), st.sampled_from(RTP_CHANNELS), st.integers(0, 40))
def test_single_packet_round_trip(seed, cfg, msg_len):
    s = make_rtp_stream(G711, 0.1, seed=seed % 1000, auth_tag_bits=32)
    rng = np.random.default_rng(seed)
    pos = int(rng.integers(0, 50))
    p = s.packet(pos % s.n)
    bits = rng.integers(0, 2, size=msg_len, dtype=np.uint8)
    q, used = embed(cfg, p, CovertMessage(bits), position=pos)
    cap = channel_capacity(cfg, p, position=pos)
    assert used == min(cap, msg_len)
    assert extract(cfg, q, position=pos)[:used].tolist() == bits[:used].tolist()
    # untouched parts stay put
    assert q.seq == p.seq and q.ssrc == p.ssrc
    if cfg.kind != "watermark":
        assert np.array_equal(q.payload, p.payload)


def test_round_trip_1000_seeded(stream):
    rng = np.random.default_rng(99)
    for trial in range(1000):
        cfg = RTP_CHANNELS[trial % len(RTP_CHANNELS)]
        i = int(rng.integers(0, stream.n))
        p = stream.packet(i)
        bits = rng.integers(0, 2, size=int(rng.integers(0, 40)), dtype=np.uint8)
        q, used = embed(cfg, p, CovertMessage(bits))
        assert extract(cfg, q)[:used].tolist() == bits[:used].tolist()


def test_auth_tag_replaced(stream):
    p = stream.packet(3)
    msg = CovertMessage.from_hex("deadbeef")
    q, used = embed(TAG, p, msg)
    assert used == 32 and q.auth_tag == 0xDEADBEEF
    assert msg.length == 0


def test_header_consumes_32_bit_message(stream):
    msg = CovertMessage.from_hex("0badf00d")
    q, used = embed(HEADER, stream.packet(0), msg, is_first=True)
    assert used == 32 and msg.length == 0
    assert q.fields["ip_id"] == 0x0BAD and q.fields["udp_checksum"] == 0xF00D


def test_unembedded_extract_returns_carrier(stream):
    p = stream.packet(4)
    assert extract(HEADER, p).tolist() == \
        [int(b) for b in f"{p.fields['ip_id']:016b}{p.fields['udp_checksum']:016b}"]


def test_non_interference(stream):
    rng = np.random.default_rng(5)
    p = stream.packet(7)
    msgs = {}
    for cfg in RTP_CHANNELS:
        bits = rng.integers(0, 2, size=40, dtype=np.uint8)
        p, used = embed(cfg, p, CovertMessage(bits))
        msgs[cfg.name] = bits[:used]
    for cfg in RTP_CHANNELS:
        assert extract(cfg, p)[:msgs[cfg.name].size].tolist() == msgs[cfg.name].tolist()


def test_rtcp_round_trip(reports):
    rng = np.random.default_rng(1)
    for r in reports:
        bits = rng.integers(0, 2, size=192, dtype=np.uint8)
        q, used = embed(RTCP, r, CovertMessage(bits))
        assert used == 192 and extract(RTCP, q).tolist() == bits.tolist()
        assert q.fields["report_blocks"] & ((1 << 160) - 1) == \
            r.fields["report_blocks"] & ((1 << 160) - 1)


@given(st.lists(st.integers(0, 255), min_size=1, max_size=64), st.data(),
       st.sampled_from([2, 4, 8]))
def test_qim_round_trip(samples, data, step):
    bits = data.draw(st.lists(st.integers(0, 1), min_size=len(samples), max_size=len(samples)))
    x = np.array(samples, np.uint8)
    y = qim_embed(x, np.array(bits, np.uint8), step)
    assert qim_detect(y, step).tolist() == bits
    assert np.all(np.abs(y.astype(int) - x.astype(int)) <= step)


# ----------------------------------------------------- batch vs single

@pytest.mark.parametrize("cfg", RTP_CHANNELS + [
    ChannelConfig.rtp_field("seqinit", ("padding_count[0:7]",), first_field_map=("seq",
                                                                                 "timestamp"))])
def test_batch_matches_single_packet_route(cfg, stream):
    rng = np.random.default_rng(8)
    eligible = rng.random(stream.n) > 0.2
    caps = batch_capacities(cfg, stream, eligible)
    bits = rng.integers(0, 2, size=int(caps.sum()) - 5, dtype=np.uint8)

    batch = stream.copy()
    used = embed_batch(cfg, batch, CovertMessage(bits), eligible)

    msg = CovertMessage(bits)
    singles, pos = [], 0
    for i in range(stream.n):
        p = stream.packet(i)
        if not eligible[i]:
            singles.append((p, 0))
            continue
        q, u = embed(cfg, p, msg, is_first=(i == 0), position=pos)
        singles.append((q, u))
        pos += 1
    assert used.tolist() == [u for _, u in singles]

    rows = np.flatnonzero(caps)
    got = extract_batch(cfg, batch, rows, caps[rows], first_row=0)
    flat = np.concatenate(got)[:bits.size]
    assert flat.tolist() == bits.tolist()
    if cfg.first_field_map:
        # cadence of rebased slots survives the first packet's rewrite
        assert np.all(np.diff(batch.seq) % 65536 == 1)
        assert np.all(np.diff(batch.timestamp) % (1 << 32) == 160)
    else:
        for i, (q, _) in enumerate(singles):
            b = batch.packet(i)
            assert b.fields == q.fields or cfg.watermark_mode == "abstract"
            assert np.array_equal(b.payload, q.payload)


def test_rtcp_batch_route(reports):
    batch = PacketBatch.from_packets(reports)
    caps = batch_capacities(RTCP, batch)
    assert caps.tolist() == [192] * len(reports)
    bits = np.random.default_rng(3).integers(0, 2, size=int(caps.sum()), dtype=np.uint8)
    embed_batch(RTCP, batch, CovertMessage(bits))
    got = np.concatenate(extract_batch(RTCP, batch, np.arange(batch.n), caps))
    assert got.tolist() == bits.tolist()


def test_first_packet_capacity():
    cfg = ChannelConfig.header("h", ("ip_id",), first_field_map=("seq",),
                               per_packet_bits_SBj=16, first_packet_bits_SB0=32)
    s = make_rtp_stream(G711, 1, seed=1)
    caps = batch_capacities(cfg, s)
    assert caps[0] == 32 and set(caps[1:].tolist()) == {16}
    assert caps.sum() / s.n == prbr_ns(32, 16, s.n - 1)
