"""Scenario files: TOML text describing one experiment.

Example::

    name = "demo"
    [call]
    codec = "G.711"
    duration_s = 540
    calls = 30
    seed = 1000

    [[channel]]
    name = "ipudp"
    kind = "header"
    fields = ["ip_id", "udp_checksum"]

See ``scenarios/table2.scenario`` for every recognised key.
"""
from __future__ import annotations

import hashlib
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bitstream import bits_from_bytes, bits_from_hex
from .covert_channels import ChannelConfig, ChannelError, find_conflicts
from .lack_engine import DelayBudget, LackPlan, LackPlanError
from .netsim import NetworkModel
from .packet_model import CODECS, RTCP_SLOT_WIDTHS, RTP_SLOT_WIDTHS, CodecProfile, packet_count
from .warden import WardenPolicy, WardenPolicyError

log = logging.getLogger(__name__)

BUNDLED = Path(__file__).parent / "scenarios"

# knobs reachable from ``sweep --param``: name -> (section, key)
KNOBS = {
    "pi": ("lack", "pi"),
    "inject_delay_ms": ("lack", "inject_delay_ms"),
    "buffer_ms": ("receiver", "buffer_ms"),
    "rtcp_interval_s": ("call", "rtcp_interval_s"),
    "duration_s": ("call", "duration_s"),
    "loss": ("network", "loss"),
    "jitter_ms": ("network", "jitter_ms"),
    "base_delay_ms": ("network", "base_delay_ms"),
    "drop_expired_ms": ("warden", "drop_expired_ms"),
}


class ScenarioError(ValueError):
    """Invalid scenario; ``problems`` lists every violated constraint."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scenario:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class ChannelSpec:
    config: ChannelConfig
    label: str
    message: np.ndarray | None = None      # user payload; random framed fill if None


@dataclass
class Scenario:
    name: str
    profile: CodecProfile
    duration_s: float
    channels: list[ChannelSpec] = field(default_factory=list)
    lack: LackPlan | None = None
    lack_label: str = "LACK"
    lack_message: np.ndarray | None = None
    network: NetworkModel = field(default_factory=NetworkModel)
    buffer_ms: float = 60.0
    lack_aware: bool = True
    warden: WardenPolicy | None = None
    delay_budget: DelayBudget = field(default_factory=DelayBudget)
    rtcp_interval_s: float | None = 23.5
    rtcp_packet_types: int = 2
    rtcp_report_blocks: int = 1
    rtcp_block_bits: int = 160
    rtcp_auth_tag_bits: int = 0
    rtp_auth_tag_bits: int = 0
    extra_rtp_slots: dict[str, int] = field(default_factory=dict)
    signaling_packets: int = 4
    calls: int = 30
    seed: int = 0
    window_s: float = 10.0
    source: dict = field(default_factory=dict)
    sha256: str = ""

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.calls)]

    def rtp_widths(self) -> dict[str, int]:
        w = dict(RTP_SLOT_WIDTHS)
        w.update(self.extra_rtp_slots)
        if self.rtp_auth_tag_bits:
            w["auth_tag"] = self.rtp_auth_tag_bits
        return w

    def rtcp_widths(self) -> dict[str, int]:
        w = dict(RTCP_SLOT_WIDTHS)
        w["report_blocks"] = self.rtcp_packet_types * self.rtcp_report_blocks * self.rtcp_block_bits
        if self.rtcp_auth_tag_bits:
            w["auth_tag"] = self.rtcp_auth_tag_bits
        return w

    def network_model(self, seed: int) -> NetworkModel:
        return replace(self.network, seed=seed)

    def problems(self) -> list[str]:
        out = []
        if self.duration_s <= 0:
            out.append("call duration must be positive")
        elif packet_count(self.duration_s, self.profile.frame_interval_If) == 0:
            out.append("call too short to carry a single RTP packet")
        if self.calls < 1:
            out.append("at least one call is required")
        if self.rtcp_interval_s is not None and self.rtcp_interval_s <= 0:
            out.append("RTCP interval must be positive")
        names = [c.config.name for c in self.channels]
        dup = sorted({n for n in names if names.count(n) > 1} | ({"lack"} & set(names)))
        if dup:
            out.append(f"duplicate or reserved channel names: {', '.join(dup)}")
        widths = {"rtp": self.rtp_widths(), "rtcp": self.rtcp_widths()}
        for spec in self.channels:
            out += spec.config.check_against(widths[spec.config.carrier])
        out += find_conflicts([c.config for c in self.channels], widths)
        if self.lack is not None:
            out += self.lack.check(self.profile, self.network.loss_pN, self.buffer_ms)
        return out

    def validate(self) -> "Scenario":
        problems = self.problems()
        if problems:
            raise ScenarioError(problems)
        return self


def _message(table: dict, base: Path | None):
    if "message_hex" in table:
        return bits_from_hex(str(table["message_hex"]))
    if "message_file" in table:
        p = Path(table["message_file"])
        if base is not None and not p.is_absolute():
            p = base / p
        return bits_from_bytes(p.read_bytes())
    return None


def _channel(t: dict, base: Path | None) -> ChannelSpec:
    t = dict(t)
    name = t.pop("name")
    kind = t.pop("kind")
    label = t.pop("label", name)
    msg = _message(t, base)
    t.pop("message_hex", None)
    t.pop("message_file", None)
    kw = {}
    for key, attr in (("frame_payload_bits", "frame_payload_bits"),
                      ("per_packet_bits", "per_packet_bits_SBj"),
                      ("first_packet_bits", "first_packet_bits_SB0")):
        if key in t:
            kw[attr] = t.pop(key)
    if "first_fields" in t:
        kw["first_field_map"] = tuple(t.pop("first_fields"))
    if kind == "header":
        cfg = ChannelConfig.header(name, tuple(t.pop("fields", ("ip_id", "udp_checksum"))),
                                   carrier=t.pop("carrier", "rtp"), **kw)
    elif kind == "rtp_field":
        cfg = ChannelConfig.rtp_field(
            name, tuple(t.pop("fields", ("timestamp[0:9]", "padding_count[0:7]"))), **kw)
    elif kind == "auth_tag":
        cfg = ChannelConfig.auth_tag(name, t.pop("bits"), carrier=t.pop("carrier", "rtp"), **kw)
    elif kind == "rtcp_report":
        cfg = ChannelConfig.rtcp_report(name, t.pop("S_CP", 1), t.pop("N_RB", 1),
                                        t.pop("S_RB", 160),
                                        extra_slots=tuple(t.pop("extra_fields", ("ntp_lsw",))),
                                        report_slot_bits=t.pop("report_slot_bits", None), **kw)
    elif kind == "watermark":
        cfg = ChannelConfig.watermark(name, str(t.pop("bits_per_packet")),
                                      mode=t.pop("mode", "qim"), qim_step=t.pop("qim_step", 2),
                                      **kw)
    else:
        raise ChannelError(f"channel {name}: unknown kind {kind!r}")
    if t:
        raise ChannelError(f"channel {name}: unknown keys {sorted(t)}")
    return ChannelSpec(cfg, label, msg)


def from_dict(doc: dict, *, base: Path | None = None, sha256: str = "") -> Scenario:
    """Build and validate a scenario from a parsed TOML document."""
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    source = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    problems: list[str] = []
    call = doc.get("call", {})
    codec = call.pop("codec", "G.711")
    if codec not in CODECS:
        raise ScenarioError([f"unknown codec {codec!r}; known: {', '.join(CODECS)}"])
    prof = CODECS[codec]
    rtcp = doc.get("rtcp", {})
    net = doc.get("network", {})
    rx = doc.get("receiver", {})
    budget = doc.get("delay_budget", {})

    channels = []
    for t in doc.get("channel", []):
        try:
            channels.append(_channel(t, base))
        except (ChannelError, KeyError, ValueError, OSError) as exc:
            problems.append(f"channel {t.get('name', '?')}: {exc}")

    lack, lack_label, lack_msg = None, "LACK", None
    if "lack" in doc:
        t = doc["lack"]
        lack_label = t.pop("label", lack_label)
        lack_msg = _message(t, base)
        t.pop("message_hex", None)
        t.pop("message_file", None)
        try:
            lack = LackPlan(pi=t.pop("pi", 0.0), inject_delay=t.pop("inject_delay_ms", 120.0),
                            scheduler=t.pop("scheduler", "periodic"), period=t.pop("period", None))
        except LackPlanError as exc:
            problems.append(str(exc))

    warden = None
    if "warden" in doc:
        t = doc["warden"]
        try:
            warden = WardenPolicy(
                normalize_slots=tuple(t.pop("normalize", ("ip_id", "udp_checksum", "timestamp"))),
                strip_padding_extension=t.pop("strip_padding_extension", True),
                drop_expired_threshold=t.pop("drop_expired_ms", None),
                loss_alarm_alpha=t.pop("alpha", 0.01),
                strip_auth_tag=t.pop("strip_auth_tag", False),
                timestamp_quantum=prof.samples_per_frame,
                actions=dict(t.pop("actions", {})))
        except WardenPolicyError as exc:
            problems.append(str(exc))

    try:
        network = NetworkModel(base_delay=net.pop("base_delay_ms", 40.0),
                               jitter_J=net.pop("jitter_ms", 20.0), loss_pN=net.pop("loss", 0.0))
    except ValueError as exc:
        problems.append(str(exc))
        network = NetworkModel()

    sc = Scenario(
        name=doc.get("name", "scenario"),
        profile=prof,
        duration_s=call.pop("duration_s", 540),
        channels=channels,
        lack=lack,
        lack_label=lack_label,
        lack_message=lack_msg,
        network=network,
        buffer_ms=rx.pop("buffer_ms", 60.0),
        lack_aware=rx.pop("lack_aware", True),
        warden=warden,
        delay_budget=DelayBudget(**{k: budget.pop(k) for k in list(budget)}),
        rtcp_interval_s=call.pop("rtcp_interval_s", 23.5),
        rtcp_packet_types=rtcp.pop("packet_types", 2),
        rtcp_report_blocks=rtcp.pop("report_blocks", 1),
        rtcp_block_bits=rtcp.pop("block_bits", 160),
        rtcp_auth_tag_bits=rtcp.pop("auth_tag_bits", 0),
        rtp_auth_tag_bits=call.pop("rtp_auth_tag_bits", 0),
        extra_rtp_slots=dict(call.pop("extra_rtp_slots", {})),
        signaling_packets=call.pop("signaling_packets", 4),
        calls=call.pop("calls", 30),
        seed=call.pop("seed", 0),
        window_s=doc.get("report", {}).pop("window_s", 10.0),
        source=source,
        sha256=sha256,
    )
    for section, t in (("call", call), ("rtcp", rtcp), ("network", net), ("receiver", rx),
                       ("lack", doc.get("lack", {})), ("warden", doc.get("warden", {})),
                       ("report", doc.get("report", {}))):
        if t:
            problems.append(f"[{section}] unknown keys: {', '.join(sorted(t))}")
    problems += sc.problems()
    if problems:
        raise ScenarioError(problems)
    return sc


def loads(text: str, *, base: Path | None = None) -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError([f"parse error: {exc}"]) from None
    return from_dict(doc, base=base, sha256=hashlib.sha256(text.encode()).hexdigest())


def load(path) -> Scenario:
    """Load a scenario file; bare names resolve to the bundled scenarios."""
    p = Path(path)
    if not p.exists() and (BUNDLED / p.name).exists():
        p = BUNDLED / p.name
    elif not p.exists() and (BUNDLED / f"{p.name}.scenario").exists():
        p = BUNDLED / f"{p.name}.scenario"
    return loads(p.read_text(encoding="utf-8"), base=p.parent)


def with_knob(doc: dict, knob: str, value) -> dict:
    """Copy of a parsed document with one sweep knob set."""
    if knob not in KNOBS:
        raise KeyError(f"unknown parameter {knob!r}; known: {', '.join(KNOBS)}")
    section, key = KNOBS[knob]
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    out.setdefault(section, {})
    out[section][key] = value
    return out


def message_bits(hex_text: str | None = None, path=None):
    if hex_text is not None:
        return bits_from_hex(hex_text)
    if path is not None:
        return bits_from_bytes(Path(path).read_bytes())
    return None


__all__ = ["Scenario", "ChannelSpec", "ScenarioError", "load", "loads", "from_dict",
           "with_knob", "KNOBS", "message_bits"]
