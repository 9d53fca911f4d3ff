from fractions import Fraction
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voipstego.packet_model import (
    CODECS,
    RTP_SLOT_WIDTHS,
    CodecProfile,
    FieldError,
    FieldRef,
    PacketBatch,
    VoipPacket,
    alaw_encode,
    bits_to_ints,
    field_read_bits,
    field_write_bits,
    ints_to_bits,
    make_rtcp_schedule,
    make_rtp_stream,
    make_signaling,
    packet_count,
)

G711 = CODECS["G.711"]


@pytest.fixture(scope="module")
def short_stream():
    return make_rtp_stream(G711, 2, seed=5, auth_tag_bits=32)


def test_codec_table():
    assert G711.payload_bytes == 160
    assert G711.samples_per_frame == 160
    assert G711.payload_bits == 1280
    assert CODECS["G.729A"].loss_tolerance_pLmax == 0.02
    for prof in CODECS.values():
        assert Fraction(prof.rate_r) * prof.frame_interval_If / 8000 == prof.payload_bytes
        assert 0 < prof.loss_tolerance_pLmax <= 0.05


def test_codec_invariants_enforced():
    with pytest.raises(ValueError):
        CodecProfile("bad", 64000, 20, 100, 0.03, False)
    with pytest.raises(ValueError):
        CodecProfile("bad", 64000, 20, 160, 0.06, False)
    with pytest.raises(ValueError):
        CodecProfile("bad", 64000, 20, 160, 0.0, False)


@pytest.mark.parametrize("T,n", [(540, 27000), (1, 50), (0.02, 1), (0.019, 0)])
def test_packet_count(T, n):
    assert packet_count(T, 20) == n


@given(st.integers(1, 5000), st.sampled_from([10, 20, 30]))
def test_count_law(k, If):
    T = Fraction(k * If, 1000)
    assert packet_count(T, If) * If == T * 1000


def test_stream_shape():
    s = make_rtp_stream(G711, 540, seed=1)
    assert s.n == 27000
    assert s.payload.shape == (27000, 160)
    seq, ts = s.seq, s.timestamp
    assert np.all(np.diff(seq) % 65536 == 1)
    assert np.all(np.diff(ts) % (1 << 32) == 160)
    assert np.all(np.diff(s.send_time) == 20000)


def test_stream_regeneration_bit_identical():
    a = make_rtp_stream(G711, 3, seed=9, auth_tag_bits=80)
    b = make_rtp_stream(G711, 3, seed=9, auth_tag_bits=80)
    c = make_rtp_stream(G711, 3, seed=10, auth_tag_bits=80)
    assert all(np.array_equal(a.bits[k], b.bits[k]) for k in a.bits)
    assert np.array_equal(a.payload, b.payload)
    assert a.seq[0] != c.seq[0] or a.timestamp[0] != c.timestamp[0]


def test_stream_rejects_non_positive_duration():
    with pytest.raises(ValueError):
        make_rtp_stream(G711, 0, seed=1)


def test_fresh_ip_id_is_seeded(short_stream):
    again = make_rtp_stream(G711, 2, seed=5, auth_tag_bits=32)
    p = short_stream.packet(3)
    assert field_read_bits(p, "ip_id").tolist() == again.read_bits("ip_id", [3])[0].tolist()


@pytest.mark.parametrize("interval,T,count", [(5, 540, 108), (23.5, 540, 22), (5, 4, 0)])
def test_rtcp_schedule(interval, T, count):
    reps = make_rtcp_schedule(interval, T, seed=3)
    assert len(reps) == count
    assert [r.send_time for r in reps] == [int((k + 1) * interval * 1e6) for k in range(count)]
    for r in reps:
        assert r.packet_types >= 2
        assert r.report_capacity == 2 * 1 * 160
        assert r.widths["ntp_lsw"] == 32


def test_rtcp_schedule_rejects_bad_interval():
    with pytest.raises(ValueError):
        make_rtcp_schedule(0, 540)


def test_signaling():
    sig = make_signaling(540)
    assert [p.send_time for p in sig] == [0, 0, 540_000_000, 540_000_000]


def test_write_read_identity(short_stream):
    p = short_stream.packet(0)
    bits = np.random.default_rng(0).integers(0, 2, size=16, dtype=np.uint8)
    q = field_write_bits(p, "ip_id", bits)
    assert field_read_bits(q, "ip_id").tolist() == bits.tolist()
    assert {k: v for k, v in q.fields.items() if k != "ip_id"} == \
        {k: v for k, v in p.fields.items() if k != "ip_id"}


def test_timestamp_low_bits_only(short_stream):
    p = short_stream.packet(1)
    q = field_write_bits(p, "timestamp[0:8]", np.ones(8, np.uint8))
    assert q.fields["timestamp"] >> 8 == p.fields["timestamp"] >> 8
    assert q.fields["timestamp"] & 0xFF == 0xFF


def test_field_errors(short_stream):
    p = short_stream.packet(0)
    with pytest.raises(FieldError):
        field_write_bits(p, "foo", [1])
    with pytest.raises(FieldError):
        field_read_bits(p, "foo")
    with pytest.raises(ValueError):
        field_write_bits(p, "ip_id", np.zeros(15, np.uint8))
    with pytest.raises(ValueError):
        field_read_bits(p, "ip_id[0:17]")
    with pytest.raises(ValueError):
        FieldRef.parse("ip_id[4:2]").span(p.widths)


def test_writes_are_orthogonal(short_stream):
    p = short_stream.packet(2)
    rng = np.random.default_rng(1)
    for a, b in permutations(p.widths, 2):
        bits = rng.integers(0, 2, size=p.widths[a], dtype=np.uint8)
        q = field_write_bits(p, a, bits)
        assert q.fields[b] == p.fields[b], (a, b)
        assert np.array_equal(q.payload, p.payload)
        assert q.seq == p.seq or a == "seq"


@given(st.sampled_from(sorted(RTP_SLOT_WIDTHS)), st.data())
def test_subrange_write_masks(slot, data):
    w = RTP_SLOT_WIDTHS[slot]
    lo = data.draw(st.integers(0, w - 1))
    hi = data.draw(st.integers(lo + 1, w))
    orig = data.draw(st.integers(0, (1 << w) - 1))
    bits = data.draw(st.lists(st.integers(0, 1), min_size=hi - lo, max_size=hi - lo))
    p = VoipPacket("rtp", {slot: orig}, {slot: w})
    q = field_write_bits(p, f"{slot}[{lo}:{hi}]", bits)
    mask = ((1 << (hi - lo)) - 1) << lo
    assert q.fields[slot] & ~mask == orig & ~mask
    assert field_read_bits(q, f"{slot}[{lo}:{hi}]").tolist() == bits


def test_batch_and_packet_views_agree(short_stream):
    rng = np.random.default_rng(4)
    rows = rng.choice(short_stream.n, size=10, replace=False)
    for ref in ("ip_id", "timestamp[0:9]", "auth_tag", "seq[3:11]"):
        mat = short_stream.read_bits(ref, rows)
        for j, r in enumerate(rows):
            assert mat[j].tolist() == field_read_bits(short_stream.packet(int(r)), ref).tolist()


def test_from_packets_round_trip(short_stream):
    again = PacketBatch.from_packets(short_stream.packets())
    assert all(np.array_equal(again.bits[k], short_stream.bits[k]) for k in short_stream.bits)
    assert np.array_equal(again.payload, short_stream.payload)
    reps = make_rtcp_schedule(5, 30, seed=1)
    rb = PacketBatch.from_packets(reps)
    assert [rb.packet(i).fields for i in range(rb.n)] == [r.fields for r in reps]
    assert rb.packet(0).report_capacity == reps[0].report_capacity


@given(st.lists(st.integers(0, (1 << 40) - 1), min_size=1, max_size=20))
def test_int_matrix_round_trip(values):
    assert bits_to_ints(ints_to_bits(values, 40)).tolist() == values


def test_alaw_reference_points():
    # sign bit set for non-negative input, even-bit inversion 0x55
    assert alaw_encode(np.array([0]))[0] == 0xD5
    assert alaw_encode(np.array([-8]))[0] == 0x55
    assert alaw_encode(np.array([32767]))[0] == 0xAA
    assert alaw_encode(np.array([-32768]))[0] == 0x2A
