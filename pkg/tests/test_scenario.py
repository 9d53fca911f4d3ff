import copy

import numpy as np
import pytest

from voipstego.bitstream import bits_from_hex
from voipstego.scenario import BUNDLED, ScenarioError, from_dict, load, loads, with_knob

from builders import table2_doc


def test_bundled_table2_loads_by_name():
    sc = load("table2")
    assert sc.name == "table2"
    assert sc.calls == 30 and sc.seeds[:2] == [1000, 1001]
    assert [c.config.name for c in sc.channels] == ["ipudp", "rtp", "watermark", "rtcp"]
    assert sc.lack.pi == 0.001 and sc.lack_label == "Delayed audio packets"
    assert sc.network.loss_pN == 0 and sc.buffer_ms == 60
    assert len(sc.sha256) == 64
    assert load("table2.scenario").sha256 == sc.sha256


def _problems(doc):
    with pytest.raises(ScenarioError) as exc:
        from_dict(doc)
    return exc.value.problems


def test_overlapping_fields_name_both_channels():
    doc = copy.deepcopy(table2_doc())
    doc["channel"].append({"name": "second", "kind": "header", "fields": ["ip_id"]})
    text = "\n".join(_problems(doc))
    assert "ipudp" in text and "second" in text


def test_every_problem_is_listed():
    doc = copy.deepcopy(table2_doc())
    doc["lack"]["pi"] = 0.05
    doc["call"]["calls"] = 0
    doc["call"]["colour"] = "blue"
    probs = _problems(doc)
    assert len(probs) >= 3
    assert any("colour" in p for p in probs)


def test_lack_over_loss_budget_rejected():
    doc = copy.deepcopy(table2_doc())
    doc["network"]["loss"] = 0.02
    doc["lack"]["pi"] = 0.015
    assert _problems(doc)


def test_unknown_codec_and_channel_kind():
    doc = copy.deepcopy(table2_doc())
    doc["call"]["codec"] = "opus"
    assert "opus" in _problems(doc)[0]
    doc = copy.deepcopy(table2_doc())
    doc["channel"][0]["kind"] = "magic"
    assert any("magic" in p for p in _problems(doc))


def test_auth_tag_channel_needs_wire_tag():
    doc = copy.deepcopy(table2_doc())
    doc["channel"].append({"name": "tag", "kind": "auth_tag", "bits": 32})
    assert any("auth_tag" in p for p in _problems(doc))
    doc["call"]["rtp_auth_tag_bits"] = 32
    assert from_dict(doc).rtp_widths()["auth_tag"] == 32


def test_parse_error():
    with pytest.raises(ScenarioError):
        loads("name = ")


def test_inline_and_file_messages(tmp_path):
    (tmp_path / "msg.bin").write_bytes(b"\x12\x34")
    text = tmp_path / "x.scenario"
    body = (BUNDLED / "table2.scenario").read_text()
    body = body.replace('kind = "header"', 'kind = "header"\nmessage_hex = "beef"', 1)
    body = body.replace('inject_delay_ms = 120', 'inject_delay_ms = 120\nmessage_file = "msg.bin"')
    text.write_text(body)
    sc = load(text)
    assert sc.channels[0].message.tolist() == bits_from_hex("beef").tolist()
    assert sc.lack_message.tolist() == bits_from_hex("1234").tolist()


def test_with_knob_copies():
    doc = table2_doc()
    out = with_knob(doc, "buffer_ms", 30)
    assert out["receiver"]["buffer_ms"] == 30 and doc["receiver"]["buffer_ms"] == 60
    with pytest.raises(KeyError):
        with_knob(doc, "volume", 1)


def test_warden_section():
    doc = copy.deepcopy(table2_doc())
    doc["warden"] = {"drop_expired_ms": 100}
    sc = from_dict(doc)
    assert sc.warden.drop_expired_threshold == 100
    assert sc.warden.timestamp_quantum == 160
    doc["warden"] = {"normalize": ["seq"]}
    assert any("seq" in p for p in _problems(doc))


def test_rtcp_widths_follow_report_shape():
    sc = load("table2")
    assert sc.rtcp_widths()["report_blocks"] == 2 * 1 * 160
    assert np.isclose(sc.rtcp_interval_s, 23.5)
