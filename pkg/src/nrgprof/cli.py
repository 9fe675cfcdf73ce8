"""Command line interface.

Exit status: 0 on success, 1 on runtime errors, 2 on usage errors.
Documents go to stdout (or ``-o``); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import threading
from pathlib import Path
from typing import Sequence

from nrgprof import __version__
from nrgprof.counters import (
    POWERCAP_ROOT_ENV,
    CapConstraint,
    PowercapSource,
    enforce_cap_sim,
    set_power_cap,
)
from nrgprof.domains import PKG, EnergyDomain
from nrgprof.errors import NrgProfError
from nrgprof.harness import PduMeter, Sweep, load_sweep_config, run_sweep
from nrgprof.meters import PduEndpoint, export_csv, ingest_csv, integrate, measure_idle_baseline, net_energy, poll_pdu
from nrgprof.report import (
    SCHEMA,
    compare_documents,
    dump_json,
    profile_from_document,
    render_flat,
    render_spans,
    render_sweep,
    span_from_dict,
    sweeps_from_document,
)
from nrgprof.sampler import DEFAULT_PERIOD_US, LiveSampler, SamplerConfig, calibrate_threshold, replay
from nrgprof.spans import SpanProfiler
from nrgprof.trace import dumps_trace, load_trace
from nrgprof.units import parse_duration_us, parse_energy_uj, parse_power_uw

logger = logging.getLogger("nrgprof")


class UsageError(Exception):
    """Bad flag value detected after argparse accepted the syntax."""


def _parse_thresholds(items: Sequence[str] | None, domains: Sequence[EnergyDomain]) -> dict[EnergyDomain, int]:
    """``10uj`` applies to every domain; ``pkg=10uj`` to one."""
    out: dict[EnergyDomain, int] = {}
    for item in items or ():
        try:
            if "=" in item:
                dom, _, qty = item.partition("=")
                out[EnergyDomain.parse(dom)] = parse_energy_uj(qty)
            else:
                value = parse_energy_uj(item)
                for d in domains:
                    out.setdefault(d, value)
        except ValueError as exc:
            raise UsageError(f"--threshold: {exc}") from None
    return out


def _parse_domains(text: str | None) -> list[EnergyDomain] | None:
    if not text:
        return None
    try:
        return [EnergyDomain.parse(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--domains: {exc}") from None


def _quantity(parser, what: str):
    def conv(text: str) -> int:
        try:
            return parser(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    conv.__name__ = what
    return conv


def _emit(args, text: str) -> None:
    if getattr(args, "output", None):
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _read_json(path: str) -> dict:
    with open(path) as fp:
        doc = json.load(fp)
    if doc.get("schema") != SCHEMA:
        raise UsageError(f"{path}: not a {SCHEMA} document")
    return doc


# --- subcommands -----------------------------------------------------------


def cmd_replay(args) -> int:
    with open(args.trace) as fp:
        trace = load_trace(fp)
    domains = _parse_domains(args.domains) or list(trace.domains)
    thresholds = _parse_thresholds(args.threshold, domains)
    if not thresholds:
        raise UsageError("--threshold is required for replay")
    config = SamplerConfig(thresholds, period_us=args.period, domains=tuple(domains))
    profile = replay(trace, config, args.duration)
    _emit(args, render_flat(profile, args.format, per_socket=args.per_socket))
    return 0


def cmd_sample(args) -> int:
    source = PowercapSource(args.powercap_root)
    domains = _parse_domains(args.domains) or [d for d, _ in source.domains()]
    if args.threshold in (None, ["auto"]):
        thresholds = calibrate_threshold(source, args.period, domains=domains)
        logger.info("calibrated thresholds: %s", {str(d): v for d, v in thresholds.items()})
    else:
        thresholds = _parse_thresholds(args.threshold, domains)
    config = SamplerConfig(thresholds, period_us=args.period, domains=tuple(domains))
    spans = SpanProfiler(source, domains)
    sampler = LiveSampler(source, spans.current_function, config).start()
    status = 0
    if args.command:
        name = os.path.basename(args.command[0])
        with spans.span(name):
            status = subprocess.call(args.command)
    else:
        threading.Event().wait(args.duration / 1e6)
    profile = sampler.stop()
    _emit(args, render_flat(profile, args.format, per_socket=args.per_socket))
    if status:
        logger.error("command exited with status %d", status)
        return 1
    return 0


def cmd_span_run(args) -> int:
    if not args.command:
        raise UsageError("span-run needs a command after --")
    source = PowercapSource(args.powercap_root)
    spans = SpanProfiler(source, _parse_domains(args.domains))
    with spans.span(args.name or os.path.basename(args.command[0])):
        status = subprocess.call(args.command)
    _emit(args, render_spans(spans.span_tree(), args.format))
    if status:
        logger.error("command exited with status %d", status)
        return 1
    return 0


def cmd_sweep(args) -> int:
    spec = load_sweep_config(args.config)
    if args.cooldown is not None:
        spec.cooldown_s = args.cooldown
    source = PowercapSource(args.powercap_root)
    meter = None
    if args.pdu_url or args.pdu_config:
        ep = PduEndpoint.from_config(args.pdu_config) if args.pdu_config else PduEndpoint.from_env(url=args.pdu_url)
        meter = PduMeter(ep)
    results = run_sweep(spec, source, meter=meter)
    _emit(args, render_sweep([Sweep.from_spec(spec, results)], args.format))
    return 0 if all(r.ok for r in results) else 1


def cmd_meter_ingest(args) -> int:
    with open(args.csv) as fp:
        series = ingest_csv(fp)
    out: dict = {"schema": SCHEMA, "kind": "meter", "points": len(series)}
    if series.points:
        t0 = series.points[0][0] if args.t0 is None else args.t0
        t1 = series.points[-1][0] if args.t1 is None else args.t1
        out["interval_us"] = [t0, t1]
        out["energy_j"] = integrate(series, t0, t1, step=args.step, allow_gaps=args.allow_gaps)
        if args.baseline:
            b0, _, b1 = args.baseline.partition(":")
            base = measure_idle_baseline(series, (parse_duration_us(b0), parse_duration_us(b1)))
            out["idle_power_w"] = base.idle_power_uw / 1e6
            out["idle_stddev_w"] = base.stddev_uw / 1e6
            out["net_energy_j"] = net_energy(series, (t0, t1), base, step=args.step, allow_gaps=args.allow_gaps)
    _emit(args, dump_json(out))
    return 0


def cmd_meter_poll(args) -> int:
    if args.config:
        ep = PduEndpoint.from_config(args.config)
    else:
        ep = PduEndpoint.from_env(url=args.url)
    if args.interval is not None:
        ep.interval_s = args.interval / 1e6
    series = poll_pdu(ep, args.duration / 1e6)
    for g in series.gaps:
        logger.warning("gap: %d poll(s) missing between %d and %d", g.missing, g.after_us, g.before_us)
    if args.output:
        with open(args.output, "w", newline="") as fp:
            export_csv(series, fp)
    else:
        export_csv(series, sys.stdout)
    return 0


def cmd_report(args) -> int:
    if args.compare:
        a, b = (_read_json(p) for p in args.compare)
        _emit(args, render_sweep(compare_documents(a, b), "text" if args.format == "svg" else args.format))
        return 0
    if not args.input:
        raise UsageError("report needs an input document or --compare A B")
    doc = _read_json(args.input)
    kind = doc.get("kind")
    if kind == "flat":
        _emit(args, render_flat(profile_from_document(doc), args.format))
    elif kind == "spans":
        _emit(args, render_spans(span_from_dict(doc["root"]), args.format))
    elif kind == "sweep":
        _emit(args, render_sweep(sweeps_from_document(doc), args.format))
    else:
        raise UsageError(f"cannot render document kind {kind!r}")
    return 0


def cmd_cap(args) -> int:
    try:
        domain = EnergyDomain.parse(args.domain)
    except ValueError as exc:
        raise UsageError(f"--domain: {exc}") from None
    cap = CapConstraint(domain, args.limit, args.window)
    if args.trace:
        with open(args.trace) as fp:
            trace = load_trace(fp)
        _emit(args, dumps_trace(enforce_cap_sim(trace, cap)))
    else:
        set_power_cap(PowercapSource(args.powercap_root), cap)
        print(f"capped {domain} to {cap.limit_uw} uW over {cap.window_us} us", file=sys.stderr)
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nrgprof", description="Function-level energy profiling.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--powercap-root", default=None,
                   help=f"powercap sysfs root (default ${POWERCAP_ROOT_ENV} or /sys/class/powercap)")
    sub = p.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    def out_opts(sp, formats=("text", "json", "csv", "svg")) -> None:
        sp.add_argument("--format", choices=formats, default="text")
        sp.add_argument("-o", "--output", help="write the document here instead of stdout")

    duration = _quantity(parse_duration_us, "duration")

    sp = sub.add_parser("replay", help="sample a trace file on a virtual clock")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--period", type=duration, default=DEFAULT_PERIOD_US)
    sp.add_argument("--threshold", action="append", help="e.g. 10uj, or pkg=10uj (repeatable)")
    sp.add_argument("--domains", help="comma-separated, e.g. pkg,pp0,pp1")
    sp.add_argument("--duration", type=duration, default=None, help="default: whole trace")
    sp.add_argument("--per-socket", action="store_true")
    out_opts(sp)
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("sample", help="live sampling of RAPL counters")
    sp.add_argument("--period", type=duration, default=DEFAULT_PERIOD_US)
    sp.add_argument("--threshold", action="append", help="e.g. 10uj, pkg=10uj, or auto (default)")
    sp.add_argument("--domains")
    sp.add_argument("--duration", type=duration, default=10_000_000, help="when no command is given")
    sp.add_argument("--per-socket", action="store_true")
    sp.add_argument("command", nargs=argparse.REMAINDER)
    out_opts(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("span-run", help="run a command inside one instrumentation span")
    sp.add_argument("--name")
    sp.add_argument("--domains")
    sp.add_argument("command", nargs=argparse.REMAINDER)
    out_opts(sp, ("text", "json", "csv"))
    sp.set_defaults(func=cmd_span_run)

    sp = sub.add_parser("sweep", help="thread-count sweep of a workload")
    sp.add_argument("--config", required=True)
    sp.add_argument("--cooldown", type=float, default=None, help="seconds between runs")
    sp.add_argument("--pdu-url")
    sp.add_argument("--pdu-config")
    out_opts(sp, ("text", "json", "csv"))
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("meter", help="external power meter data")
    msub = sp.add_subparsers(dest="meter_cmd", required=True, metavar="ACTION")
    mp = msub.add_parser("ingest", help="integrate a timestamp_us,power_uw CSV log")
    mp.add_argument("csv")
    mp.add_argument("--t0", type=duration)
    mp.add_argument("--t1", type=duration)
    mp.add_argument("--baseline", help="idle window T0:T1")
    mp.add_argument("--step", action="store_true", help="samples are interval means")
    mp.add_argument("--allow-gaps", action="store_true")
    mp.add_argument("-o", "--output")
    mp.set_defaults(func=cmd_meter_ingest)
    mp = msub.add_parser("poll", help="poll a PDU HTTP endpoint into CSV")
    mp.add_argument("--url")
    mp.add_argument("--config")
    mp.add_argument("--duration", type=duration, required=True)
    mp.add_argument("--interval", type=duration, default=None)
    mp.add_argument("-o", "--output")
    mp.set_defaults(func=cmd_meter_poll)

    sp = sub.add_parser("report", help="re-render a saved JSON document")
    sp.add_argument("input", nargs="?")
    sp.add_argument("--compare", nargs=2, metavar=("A", "B"), help="compare two sweep documents (B / A)")
    out_opts(sp)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("cap", help="set a RAPL power cap, or simulate one on a trace")
    sp.add_argument("--domain", default=PKG.label)
    sp.add_argument("--limit", type=_quantity(parse_power_uw, "power"), required=True)
    sp.add_argument("--window", type=duration, required=True)
    sp.add_argument("--trace", help="simulate on this trace file and print the capped trace")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_cap)
    return p


def cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) and args.command[0] == "--":
        args.command = args.command[1:]
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="nrgprof: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nrgprof: error: {exc}", file=sys.stderr)
        return 2
    except (NrgProfError, OSError, ValueError) as exc:
        print(f"nrgprof: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
