"""Covert-bandwidth measures over call traces: totals, RBR/PRBR, mixes, time series."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from .packet_model import US_PER_S

KIND_LABELS = {"signaling": "SIP messages", "rtp": "RTP packets", "rtcp": "RTCP reports"}


def total_bandwidth(channel_rates) -> float:
    """Aggregate bandwidth of channels running side by side (b/s)."""
    return sum(channel_rates, 0)


@dataclass
class BandwidthReport:
    calls: int
    total_covert_bits: float           # mean over calls
    rbr_avg: float
    prbr_avg: float
    total_std: float
    rbr_std: float
    prbr_std: float
    per_channel_bits: dict[str, float]     # mean extracted bits, keyed by channel name
    labels: dict[str, str]
    carriers: dict[str, str]
    per_call: list[dict] = field(default_factory=list)

    @property
    def fractions(self) -> dict[str, float] | None:
        return bandwidth_fractions(self).shares


@dataclass(frozen=True)
class Fractions:
    shares: dict[str, float] | None        # label -> fraction in [0, 1]; None when undefined
    carrier_shares: dict[str, float] | None = None

    @property
    def undefined(self) -> bool:
        return self.shares is None


def _std(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def call_measures(trace) -> dict:
    total = trace.total_extracted()
    received = trace.received_media()
    return {
        "seed": trace.seeds["call"],
        "total_bits": total,
        "rbr": total / trace.duration_s,
        "prbr": total / received if received else 0.0,
        "received_packets": received,
        **{f"{c}_bits": int(trace.extracted(c).sum()) for c in trace.channel_names},
    }


def summarize(traces) -> BandwidthReport:
    """Mean and sample standard deviation of total bits, RBR and PRBR across calls."""
    traces = list(traces)
    if not traces:
        raise ValueError("summarize needs at least one trace")
    rows = [call_measures(t) for t in traces]
    names = traces[0].channel_names
    first = traces[0]
    return BandwidthReport(
        calls=len(traces),
        total_covert_bits=float(np.mean([r["total_bits"] for r in rows])),
        rbr_avg=float(np.mean([r["rbr"] for r in rows])),
        prbr_avg=float(np.mean([r["prbr"] for r in rows])),
        total_std=_std([r["total_bits"] for r in rows]),
        rbr_std=_std([r["rbr"] for r in rows]),
        prbr_std=_std([r["prbr"] for r in rows]),
        per_channel_bits={c: float(np.mean([r[f"{c}_bits"] for r in rows])) for c in names},
        labels={c.name: c.label for c in first.channels},
        carriers={c.name: c.carrier for c in first.channels},
        per_call=rows,
    )


def bandwidth_fractions(report: BandwidthReport) -> Fractions:
    """Share of the covert total contributed by each method, and by carrier kind."""
    total = sum(report.per_channel_bits.values())
    if total <= 0:
        return Fractions(None, None)
    shares = {report.labels[c]: b / total for c, b in report.per_channel_bits.items()}
    carriers: dict[str, float] = {}
    for c, b in report.per_channel_bits.items():
        k = report.carriers[c]
        carriers[k] = carriers.get(k, 0.0) + b / total
    return Fractions(shares, carriers)


@dataclass(frozen=True)
class TrafficMix:
    percent: dict[str, float]        # kind -> percent
    counts: dict[str, int]
    empty: bool = False


def traffic_mix(traces) -> TrafficMix:
    """Packet-kind shares of one trace, or the per-call average over several."""
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    kinds = tuple(KIND_LABELS)
    pcts, totals = [], {k: 0 for k in kinds}
    for t in traces:
        counts = {k: int(np.sum(t.mask(k))) for k in kinds}
        n = sum(counts.values())
        for k in kinds:
            totals[k] += counts[k]
        if n:
            pcts.append({k: 100.0 * counts[k] / n for k in kinds})
    if not pcts:
        return TrafficMix({k: 0.0 for k in kinds}, totals, empty=True)
    return TrafficMix({k: float(np.mean([p[k] for p in pcts])) for k in kinds}, totals)


@dataclass
class TimeSeries:
    window: float                      # seconds
    start_s: np.ndarray
    rbr: np.ndarray
    prbr: np.ndarray
    bits: np.ndarray
    packets: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.start_s.tolist(), self.rbr.tolist(), self.prbr.tolist()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["window_start_s", "rbr_bps", "prbr_bits_per_packet"])
        for s, r, p in self.points():
            w.writerow([f"{s:g}", f"{r:.6f}", f"{p:.6f}"])
        return buf.getvalue()


def flow_timeseries(trace, window: float) -> TimeSeries:
    """Per-window RBR and PRBR of extracted covert bits.

    Bits and packets are filed under their media (nominal) time, so every
    window of a call lines up with the call's own clock.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    nwin = max(ceil(trace.duration_s / window), 1)
    t = trace.columns["nominal_time_us"]
    b = np.minimum((t * 1.0 / (window * US_PER_S)).astype(np.int64), nwin - 1)
    bits = np.zeros(trace.n, np.int64)
    for c in trace.channel_names:
        bits += trace.extracted(c)
    media = (trace.columns["arrival_time_us"] >= 0) & ~trace.mask("signaling")
    wbits = np.bincount(b, weights=bits, minlength=nwin).astype(np.int64)
    wpk = np.bincount(b, weights=media, minlength=nwin).astype(np.int64)
    rbr = wbits / window
    prbr = np.divide(wbits, wpk, out=np.zeros(nwin), where=wpk > 0)
    return TimeSeries(window, np.arange(nwin) * window, rbr, prbr, wbits, wpk)


def average_timeseries(series: list[TimeSeries]) -> TimeSeries:
    """Window-by-window mean over calls of equal length."""
    if not series:
        raise ValueError("no series to average")
    w = series[0].window
    n = min(s.rbr.size for s in series)
    stack = lambda attr: np.mean([getattr(s, attr)[:n] for s in series], axis=0)
    return TimeSeries(w, series[0].start_s[:n], stack("rbr"), stack("prbr"),
                      stack("bits"), stack("packets"))


def find_peaks(series: TimeSeries, min_rise: float, baseline_pct: float = 10) -> np.ndarray:
    """Windows whose RBR rises at least ``min_rise`` above the baseline.

    The baseline is a low percentile, not the median: a periodic scheduler can
    put a peak in half of all windows or more.
    """
    base = np.percentile(series.rbr, baseline_pct)
    return np.flatnonzero(series.rbr >= base + min_rise)


# ------------------------------------------------------------- rendering

def _numeric(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def text_table(title: str, header, rows) -> str:
    rows = [[str(c) for c in r] for r in rows]
    header = [str(h) for h in header]
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    fmt = lambda r: "  ".join(c.rjust(w) if _numeric(c) else c.ljust(w)
                              for c, w in zip(r, widths))
    rule = "-" * len(fmt(header))
    return "\n".join([title, rule, fmt(header), rule, *map(fmt, rows), rule]) + "\n"


def render_report(report: BandwidthReport) -> str:
    rows = [
        ["Average total amount of covert data [bits]", f"{report.total_covert_bits:.2f}",
         f"{report.total_std:.3f}"],
        ["Average RBR [bits/s]", f"{report.rbr_avg:.2f}", f"{report.rbr_std:.3f}"],
        ["Average PRBR [bits/packet]", f"{report.prbr_avg:.2f}", f"{report.prbr_std:.3f}"],
    ]
    return text_table(f"Covert bandwidth, {report.calls} call(s), one direction",
                      ["Measure", "Value", "Std dev"], rows)


def render_traffic_mix(mix: TrafficMix) -> str:
    rows = [[KIND_LABELS[k], f"{p:.3f}"] for k, p in mix.percent.items()]
    title = "Traffic mix" + (" (empty trace)" if mix.empty else "")
    return text_table(title, ["Type of traffic", "Percent [%]"], rows)


def render_fractions(report: BandwidthReport) -> str:
    fr = bandwidth_fractions(report)
    if fr.undefined:
        return text_table("Covert bandwidth fractions (undefined: no covert bits)",
                          ["Method", "Fraction [%]"], [])
    rows = []
    for kind in ("rtp", "rtcp"):
        names = [c for c in report.per_channel_bits if report.carriers[c] == kind]
        for i, c in enumerate(names):
            share = fr.carrier_shares.get(kind, 0.0)
            rows.append([KIND_LABELS[kind] if i == 0 else "",
                         f"{100 * share:.3f}" if i == 0 else "",
                         report.labels[c], f"{100 * fr.shares[report.labels[c]]:.3f}"])
    return text_table("Covert bandwidth fractions",
                      ["Type of traffic", "Fraction [%]", "Method", "Fraction [%]"], rows)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_csv(report: BandwidthReport) -> str:
    return _csv(["measure", "value", "std_dev"], [
        ["total_covert_bits", f"{report.total_covert_bits:.6f}", f"{report.total_std:.6f}"],
        ["rbr_bps", f"{report.rbr_avg:.6f}", f"{report.rbr_std:.6f}"],
        ["prbr_bits_per_packet", f"{report.prbr_avg:.6f}", f"{report.prbr_std:.6f}"],
    ])


def per_call_csv(report: BandwidthReport) -> str:
    if not report.per_call:
        return _csv([], [])
    header = list(report.per_call[0])
    return _csv(header, [[r[h] if not isinstance(r[h], float) else f"{r[h]:.6f}"
                          for h in header] for r in report.per_call])


def traffic_mix_csv(mix: TrafficMix) -> str:
    return _csv(["kind", "count", "percent"],
                [[k, mix.counts[k], f"{p:.6f}"] for k, p in mix.percent.items()])


def fractions_csv(report: BandwidthReport) -> str:
    fr = bandwidth_fractions(report)
    rows = []
    if not fr.undefined:
        rows = [[c, report.labels[c], report.carriers[c], f"{report.per_channel_bits[c]:.6f}",
                 f"{100 * fr.shares[report.labels[c]]:.6f}"] for c in report.per_channel_bits]
    return _csv(["channel", "method", "carrier", "mean_bits", "percent"], rows)
