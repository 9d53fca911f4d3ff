"""Command line: ``voipstego run | calc | sweep``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, analytics
from .bitstream import bytes_from_bits
from .covert_channels import prbr_ns, prbr_rtcp, rbr_srtcp, rbr_srtp
from .lack_engine import lack_prbr, lack_rbr, lack_total, pi_max, total_loss
from .netsim import run_call
from .scenario import (
    BUNDLED,
    KNOBS,
    ScenarioError,
    from_dict,
    load,
    message_bits,
    tomllib,
    with_knob,
)

log = logging.getLogger("voipstego")

# name -> (function, ordered parameter names as typed on the command line)
FORMULAS = {
    "prbr_ns": (prbr_ns, ("SB0", "SBj", "l")),
    "rbr_srtp": (rbr_srtp, ("SB_AT", "Ip")),
    "prbr_rtcp": (prbr_rtcp, ("S_CP", "N_RB", "S_RB")),
    "rbr_srtcp": (rbr_srtcp, ("SB_AT", "l", "T")),
    "total_loss": (total_loss, ("pN", "pi")),
    "pi_max": (pi_max, ("pT", "pN")),
    "lack_prbr": (lack_prbr, ("r", "If", "pi")),
    "lack_rbr": (lack_rbr, ("r", "pi")),
    "lack_total": (lack_total, ("d", "r", "pi")),
    "total_bandwidth": (analytics.total_bandwidth, ("rates",)),
}


class UsageError(Exception):
    pass


def format_exact(value) -> str:
    """Exact decimal for terminating fractions, else 12 significant digits."""
    q = Fraction(value)
    den = q.denominator
    for p in (2, 5):
        while den % p == 0:
            den //= p
    if den != 1:
        return f"{float(q):.12g}"
    sign = "-" if q < 0 else ""
    q = abs(q)
    whole, rest = divmod(q.numerator, q.denominator)
    digits = ""
    while rest:
        rest *= 10
        d, rest = divmod(rest, q.denominator)
        digits += str(d)
    return f"{sign}{whole}" + (f".{digits}" if digits else "")


def calc(name: str, assignments: list[str]) -> str:
    if name not in FORMULAS:
        raise UsageError(f"unknown formula {name!r}; choose from {', '.join(FORMULAS)}")
    fn, params = FORMULAS[name]
    given = {}
    for a in assignments:
        key, sep, val = a.partition("=")
        if not sep:
            raise UsageError(f"expected name=value, got {a!r}")
        if key not in params:
            raise UsageError(f"{name} takes {', '.join(params)}; unknown parameter {key!r}")
        try:
            if key == "rates":
                given[key] = [Fraction(v) for v in val.split(",") if v.strip()]
            else:
                given[key] = Fraction(val)
        except ValueError:
            raise UsageError(f"{key}: not a number: {val!r}") from None
    missing = [p for p in params if p not in given]
    if missing:
        raise UsageError(f"{name}: missing parameter(s) {', '.join(missing)}")
    try:
        return format_exact(fn(*(given[p] for p in params)))
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"{name}: {exc}") from None


# ------------------------------------------------------------------ run

def run_batch(scenario, calls: int | None = None, seed: int | None = None):
    calls = scenario.calls if calls is None else calls
    base = scenario.seed if seed is None else seed
    seeds = [base + i for i in range(calls)]
    return [run_call(scenario, s) for s in seeds], seeds


def _apply_message(scenario, channel: str, bits):
    if channel == "lack":
        if scenario.lack is None:
            raise UsageError("scenario has no LACK plan")
        scenario.lack_message = bits
        return
    for i, spec in enumerate(scenario.channels):
        if spec.config.name == channel:
            scenario.channels[i] = replace(spec, message=bits)
            return
    raise UsageError(f"no channel named {channel!r}")


def _write(root: Path, rel: str, text: str, files: dict) -> None:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    path.write_bytes(data)
    files[rel] = hashlib.sha256(data).hexdigest()


def build_outputs(scenario, traces, seeds) -> dict[str, str]:
    """Every artifact of a batch run as ``relative path -> text``."""
    report = analytics.summarize(traces)
    mix = analytics.traffic_mix(traces)
    series = analytics.average_timeseries(
        [analytics.flow_timeseries(t, scenario.window_s) for t in traces])
    parts = [analytics.render_report(report), analytics.render_traffic_mix(mix),
             analytics.render_fractions(report)]
    frames = [[c.name, c.label, sum(t.channel(c.name).frames_total for t in traces),
               sum(t.channel(c.name).frames_ok for t in traces)] for c in traces[0].channels]
    parts.append(analytics.text_table("Covert frames delivered intact",
                                      ["Channel", "Method", "Frames", "Intact"], frames))
    if scenario.warden is not None:
        from .warden import loss_anomaly, observed_losses
        rows = []
        for t in traces:
            lost, n = observed_losses(t)
            res = loss_anomaly(lost, n, scenario.network.loss_pN,
                               scenario.warden.loss_alarm_alpha)
            rows.append([t.seeds["call"], lost, n, f"{res.p_value:.4g}",
                         "flagged" if res.flagged else "clear"])
        parts.append(analytics.text_table("Passive warden loss test",
                                          ["Seed", "Losses", "Packets", "p-value", "Verdict"],
                                          rows))
    out = {
        "report.txt": "\n".join(parts),
        "bandwidth.csv": analytics.report_csv(report),
        "per_call.csv": analytics.per_call_csv(report),
        "traffic_mix.csv": analytics.traffic_mix_csv(mix),
        "fractions.csv": analytics.fractions_csv(report),
        "timeseries.csv": series.to_csv(),
    }
    audit = io.StringIO()
    w = csv.writer(audit, lineterminator="\r\n")
    w.writerow(["seed", "index", "send_time_us", "delay_ms", "bits", "recovered"])
    for t in traces:
        for row in t.lack_audit:
            w.writerow([t.seeds["call"], row["index"], row["send_time_us"], row["delay_ms"],
                        row["bits"], int(row["recovered"])])
    out["lack_audit.csv"] = audit.getvalue()
    for t in traces:
        out[f"traces/call_{t.seeds['call']}.csv"] = t.to_csv()
        ts = analytics.flow_timeseries(t, scenario.window_s)
        out[f"traces/timeseries_{t.seeds['call']}.csv"] = ts.to_csv()
    return out


def cmd_run(args) -> int:
    sc = load(args.scenario)
    if args.message_hex or args.message_file:
        _apply_message(sc, args.channel, message_bits(args.message_hex, args.message_file))
    traces, seeds = run_batch(sc, args.calls, args.seed)
    outputs = build_outputs(sc, traces, seeds)
    root = Path(args.out or f"runs/{sc.name}")
    files: dict[str, str] = {}
    for rel, text in outputs.items():
        _write(root, rel, text, files)
    for spec in [c for c in traces[0].channels if c.name == args.channel]:
        if spec.message is not None and (args.message_hex or args.message_file):
            _write(root, "recovered.hex", bytes_from_bits(spec.message).hex() + "\n", files)
    manifest = {
        "tool": "voipstego",
        "version": __version__,
        "scenario": {"name": sc.name, "path": str(args.scenario), "sha256": sc.sha256},
        "calls": len(seeds),
        "seeds": seeds,
        "overrides": {"calls": args.calls, "seed": args.seed, "channel": args.channel,
                      "message_hex": args.message_hex, "message_file": args.message_file},
        "numpy": np.__version__,
        "files": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    print(outputs["report.txt"])
    print(f"wrote {len(files) + 1} files to {root}")
    return 0


# ---------------------------------------------------------------- sweep

SWEEP_COLUMNS = ["value", "calls", "total_bits", "rbr_bps", "prbr_bits_per_packet",
                 "lack_rbr_bps", "lack_recovery"]


def sweep(path, param: str, values: list[str], calls: int | None = None,
          seed: int | None = None) -> str:
    if param not in KNOBS:
        raise UsageError(f"unknown parameter {param!r}; known: {', '.join(KNOBS)}")
    nums = []
    for v in values:
        try:
            nums.append(int(v) if v.lstrip("-").isdigit() else float(v))
        except ValueError:
            raise UsageError(f"not a number: {v!r}") from None
    p = Path(path)
    if not p.exists():
        p = BUNDLED / (p.name if p.suffix else f"{p.name}.scenario")
    doc = tomllib.loads(p.read_text(encoding="utf-8"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(SWEEP_COLUMNS)
    for v in nums:
        sc = from_dict(with_knob(doc, param, v), base=p.parent)
        traces, _ = run_batch(sc, calls, seed)
        rep = analytics.summarize(traces)
        lack_bits = rep.per_channel_bits.get("lack", 0.0)
        frames = [t.channel("lack") for t in traces if "lack" in t.channel_names]
        total = sum(f.frames_total for f in frames)
        recovery = sum(f.frames_ok for f in frames) / total if total else 0.0
        w.writerow([v, rep.calls, f"{rep.total_covert_bits:.6f}", f"{rep.rbr_avg:.6f}",
                    f"{rep.prbr_avg:.6f}", f"{lack_bits / sc.duration_s:.6f}", f"{recovery:.6f}"])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    text = sweep(args.scenario, args.param, values, args.calls, args.seed)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_calc(args) -> int:
    print(calc(args.formula, args.params))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voipstego", description="VoIP covert channel lab")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a batch of calls and write reports")
    r.add_argument("scenario")
    r.add_argument("--calls", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--channel", default="ipudp",
                   help="channel that carries --message-hex/--message-file ('lack' for LACK)")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--message-hex")
    g.add_argument("--message-file")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calc", help="evaluate a bandwidth formula exactly")
    c.add_argument("formula")
    c.add_argument("params", nargs="*", metavar="k=v")
    c.set_defaults(func=cmd_calc)

    s = sub.add_parser("sweep", help="run a batch per parameter value")
    s.add_argument("scenario")
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, help="comma-separated list")
    s.add_argument("--calls", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.error(str(exc))
    except ScenarioError as exc:
        print(exc, file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
