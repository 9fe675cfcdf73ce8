"""Emitters for flat profiles, span trees and sweep tables.

Documents are plain strings.  JSON is byte-stable: keys are sorted and
every float is rounded to 6 significant digits before encoding; CSV cells
use exactly the same number spelling, so both formats carry identical
values.  Energies are shown in joules only here, at the edge.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Any, Sequence
from xml.sax.saxutils import escape, quoteattr

from nrgprof.domains import PKG, DomainKind, EnergyDomain, sorted_domains
from nrgprof.harness import Comparison, RunResult, Sweep, compare_runs, median_metrics
from nrgprof.sampler import Profile, SamplerConfig
from nrgprof.spans import SpanReport

SCHEMA = "joulescope-prof/v1"
FORMATS = ("text", "json", "csv", "svg")


def num(x: float | int) -> float | int:
    """Canonical number: ints unchanged, floats rounded to 6 significant digits."""
    if isinstance(x, bool) or isinstance(x, int):
        return x
    return float(f"{x:.6g}")


def fmt_num(x: float | int) -> str:
    return json.dumps(num(x))


def _canon(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, float):
        return num(obj)
    return obj


def dump_json(doc: dict) -> str:
    return json.dumps(_canon(doc), sort_keys=True, indent=2) + "\n"


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_num(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else
                    ("true" if v is True else "false" if v is False else v) for v in row])
    return buf.getvalue()


def _check_format(fmt: str, allowed: Sequence[str] = FORMATS) -> None:
    if fmt not in allowed:
        raise ValueError(f"unknown format {fmt!r} (choose from {', '.join(allowed)})")


# --- flat profiles ---------------------------------------------------------


@dataclass
class FlatProfileRow:
    function: str
    perf_ticks: int
    hits: dict[str, int]
    energy_uj: dict[str, int]
    share: dict[str, float]


def _columns(config: SamplerConfig, per_socket: bool) -> dict[str, list[EnergyDomain]]:
    cols: dict[str, list[EnergyDomain]] = {}
    for d in config.tracked:
        key = d.label if per_socket else d.kind.value
        cols.setdefault(key, []).append(d)
    return cols


def flat_rows(profile: Profile, per_socket: bool = False) -> tuple[list[str], list[FlatProfileRow]]:
    """Rows sorted by package energy, descending.

    By default sockets are summed per domain kind; ``per_socket`` keeps
    one column per (kind, socket).
    """
    cols = _columns(profile.config, per_socket)
    th = profile.config.threshold_uj
    rows = []
    for name in profile.hits:
        hits = {c: sum(profile.hits[name].get(d, 0) for d in ds) for c, ds in cols.items()}
        energy = {c: sum(profile.hits[name].get(d, 0) * th[d] for d in ds) for c, ds in cols.items()}
        rows.append(FlatProfileRow(name, profile.perf_ticks.get(name, 0), hits, energy, {}))
    for c in cols:
        total = sum(r.energy_uj[c] for r in rows)
        for r in rows:
            r.share[c] = r.energy_uj[c] / total if total else 0.0
    key = PKG.label if PKG.label in cols else next(iter(cols), None)
    rows.sort(key=lambda r: (-(r.energy_uj.get(key, 0) if key else 0), -r.perf_ticks, r.function))
    return list(cols), rows


def flat_document(profile: Profile, per_socket: bool = False) -> dict:
    cols, rows = flat_rows(profile, per_socket)
    cfg = profile.config
    return {
        "schema": SCHEMA,
        "kind": "flat",
        "config": {
            "period_us": cfg.period_us,
            "threshold_uj": {d.label: cfg.threshold_uj[d] for d in cfg.tracked},
        },
        "columns": cols,
        "totals": {
            "perf_ticks": profile.total_ticks,
            "wall_time_us": profile.wall_time_us,
            "overhead_us": profile.overhead_us,
            "hits": {d.label: profile.total_hits(d) for d in cfg.tracked},
            "measured_uj": {d.label: profile.measured_uj[d] for d in cfg.tracked},
            "residual_uj": {d.label: profile.residual_uj[d] for d in cfg.tracked},
        },
        "rows": [
            {
                "function": r.function,
                "perf_ticks": r.perf_ticks,
                "hits": r.hits,
                "energy_uj": r.energy_uj,
                "energy_j": {c: e / 1e6 for c, e in r.energy_uj.items()},
                "share": r.share,
                # per tracked domain, so the document can be loaded back losslessly
                "raw_hits": {d.label: profile.hits[r.function].get(d, 0) for d in cfg.tracked},
            }
            for r in rows
        ],
    }


def profile_from_document(doc: dict) -> Profile:
    if doc.get("schema") != SCHEMA or doc.get("kind") != "flat":
        raise ValueError("not a flat profile document")
    th = {EnergyDomain.parse(k): int(v) for k, v in doc["config"]["threshold_uj"].items()}
    config = SamplerConfig(th, period_us=int(doc["config"]["period_us"]), domains=tuple(th))
    totals = doc["totals"]
    profile = Profile(
        config,
        total_ticks=totals["perf_ticks"], wall_time_us=totals["wall_time_us"],
        overhead_us=totals.get("overhead_us", 0),
        residual_uj={EnergyDomain.parse(k): v for k, v in totals["residual_uj"].items()},
        measured_uj={EnergyDomain.parse(k): v for k, v in totals["measured_uj"].items()},
    )
    for row in doc["rows"]:
        profile.hits[row["function"]] = {EnergyDomain.parse(k): v for k, v in row["raw_hits"].items()}
        profile.perf_ticks[row["function"]] = row["perf_ticks"]
    return profile


def _col_title(col: str) -> str:
    return f"nrg_{col}"


def render_flat(profile: Profile, fmt: str = "text", per_socket: bool = False) -> str:
    """Render a flat per-function profile.

    An empty profile renders as a document with no rows and a totals line.
    """
    _check_format(fmt)
    if fmt == "json":
        return dump_json(flat_document(profile, per_socket))
    cols, rows = flat_rows(profile, per_socket)
    if fmt == "csv":
        header = ["function", "perf_ticks"]
        for c in cols:
            header += [f"{c}_hits", f"{c}_energy_uj", f"{c}_share"]
        body = []
        for r in rows:
            line: list[Any] = [r.function, r.perf_ticks]
            for c in cols:
                line += [r.hits[c], r.energy_uj[c], r.share[c]]
            body.append(line)
        return _csv_text(header, body)
    if fmt == "svg":
        return _flat_svg(profile, cols, rows)
    return _flat_text(profile, cols, rows)


def _flat_text(profile: Profile, cols: list[str], rows: list[FlatProfileRow]) -> str:
    total_ticks = profile.total_ticks
    head = f"{'perf_ticks':>10} {'time%':>7}"
    for c in cols:
        head += f" {_col_title(c) + ' [J]':>14} {c + '%':>7}"
    lines = [
        f"# flat energy profile: period {profile.config.period_us} us, "
        + ", ".join(f"{d.label} threshold {profile.config.threshold_uj[d]} uJ" for d in profile.config.tracked),
        head + "  function",
    ]
    for r in rows:
        line = f"{r.perf_ticks:>10} {100 * r.perf_ticks / total_ticks if total_ticks else 0:>7.2f}"
        for c in cols:
            line += f" {r.energy_uj[c] / 1e6:>14.6g} {100 * r.share[c]:>7.2f}"
        lines.append(line + "  " + r.function)
    totals = f"{total_ticks:>10} {100.0 if rows else 0:>7.2f}"
    for c in cols:
        totals += f" {sum(r.energy_uj[c] for r in rows) / 1e6:>14.6g} {'':>7}"
    lines.append(totals + "  [total: %d functions, wall %.6g s]" % (len(rows), profile.wall_time_us / 1e6))
    return "\n".join(lines) + "\n"


_PALETTE = {"pkg": "#d62728", "pp0": "#1f77b4", "pp1": "#2ca02c", "dram": "#9467bd", "node": "#8c564b"}


def _color(col: str) -> str:
    return _PALETTE.get(col.split(":")[0], "#ff7f0e")


def _nice_max(v: float) -> float:
    if v <= 0:
        return 1.0
    mag = 10 ** math.floor(math.log10(v))
    for m in (1, 2, 2.5, 5, 10):
        if v <= m * mag:
            return m * mag
    return 10 * mag


def _flat_svg(profile: Profile, cols: list[str], rows: list[FlatProfileRow]) -> str:
    """Functions on X; perf ticks as bars on the left axis; energy per domain on the right axis."""
    width, height = 160 + 110 * max(1, len(rows)), 420
    left, right, top, bottom = 80, 80, 40, 60
    pw, ph = width - left - right, height - top - bottom
    tmax = _nice_max(max((r.perf_ticks for r in rows), default=0))
    emax = _nice_max(max((r.energy_uj[c] / 1e6 for r in rows for c in cols), default=0))
    slot = pw / max(1, len(rows))
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" data-schema="{SCHEMA}" data-kind="flat" '
        f'data-total-ticks="{profile.total_ticks}" data-period-us="{profile.config.period_us}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left + pw}" y1="{top}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        frac = i / 5
        y = top + ph - frac * ph
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{fmt_num(tmax * frac)}</text>')
        out.append(f'<text x="{left + pw + 6}" y="{y + 4:.1f}" font-size="11">{fmt_num(emax * frac)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" font-size="12" transform="rotate(-90 16 {top + ph / 2})" '
               'text-anchor="middle">perf_ticks</text>')
    out.append(f'<text x="{width - 14}" y="{top + ph / 2}" font-size="12" '
               f'transform="rotate(90 {width - 14} {top + ph / 2})" text-anchor="middle">energy [J]</text>')
    series: dict[str, list[str]] = {c: [] for c in cols}
    for i, r in enumerate(rows):
        cx = left + slot * (i + 0.5)
        bh = ph * r.perf_ticks / tmax
        attrs = " ".join(f'data-energy-uj-{c.replace(":", "-")}="{r.energy_uj[c]}" '
                         f'data-hits-{c.replace(":", "-")}="{r.hits[c]}"' for c in cols)
        out.append(f'<g class="function" data-name={quoteattr(r.function)} data-perf-ticks="{r.perf_ticks}" {attrs}>')
        out.append(f'<rect x="{cx - slot * 0.3:.1f}" y="{top + ph - bh:.1f}" width="{slot * 0.6:.1f}" '
                   f'height="{bh:.1f}" fill="#bbbbbb"/>')
        out.append(f'<text x="{cx:.1f}" y="{top + ph + 18}" font-size="12" text-anchor="middle">'
                   f'{escape(r.function)}</text>')
        for c in cols:
            y = top + ph - ph * (r.energy_uj[c] / 1e6) / emax
            series[c].append(f"{cx:.1f},{y:.1f}")
            out.append(f'<circle cx="{cx:.1f}" cy="{y:.1f}" r="4" fill="{_color(c)}"/>')
        out.append("</g>")
    for j, c in enumerate(cols):
        if len(series[c]) > 1:
            out.append(f'<polyline class="series" data-domain="{c}" points="{" ".join(series[c])}" '
                       f'fill="none" stroke="{_color(c)}"/>')
        lx = left + 10 + 110 * (j + 1)
        out.append(f'<text x="{lx}" y="{top - 14}" font-size="12" fill="{_color(c)}">{_col_title(c)}</text>')
    out.append(f'<text x="{left + 10}" y="{top - 14}" font-size="12" fill="#777777">perf_ticks</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- span trees ------------------------------------------------------------


def span_dict(report: SpanReport) -> dict:
    return {
        "name": report.name,
        "start_us": report.start_us,
        "duration_us": report.duration_us,
        "energy_uj": {d.label: v for d, v in report.energy_uj.items()},
        "energy_uj_exclusive": {d.label: v for d, v in report.energy_uj_exclusive.items()},
        "avg_power_uw": {d.label: v for d, v in report.avg_power_uw.items()},
        "degenerate": report.degenerate,
        "low_confidence": report.low_confidence,
        "shared_counter": report.shared_counter,
        "children": [span_dict(c) for c in report.children],
    }


def span_from_dict(doc: dict) -> SpanReport:
    def dom(m: dict) -> dict:
        return {EnergyDomain.parse(k): v for k, v in m.items()}

    return SpanReport(
        name=doc["name"], start_us=doc["start_us"], end_us=doc["start_us"] + doc["duration_us"],
        energy_uj=dom(doc["energy_uj"]), energy_uj_exclusive=dom(doc["energy_uj_exclusive"]),
        avg_power_uw=dom(doc["avg_power_uw"]), children=[span_from_dict(c) for c in doc["children"]],
        degenerate=doc["degenerate"], low_confidence=doc["low_confidence"], shared_counter=doc["shared_counter"],
    )


def render_spans(report: SpanReport, fmt: str = "text") -> str:
    _check_format(fmt, ("text", "json", "csv"))
    if fmt == "json":
        return dump_json({"schema": SCHEMA, "kind": "spans", "root": span_dict(report)})
    doms = sorted_domains(report.energy_uj)
    flat: list[tuple[int, str, SpanReport]] = []

    def visit(node: SpanReport, depth: int, path: str) -> None:
        flat.append((depth, path, node))
        for c in node.children:
            visit(c, depth + 1, f"{path}/{c.name}")

    visit(report, 0, report.name)
    if fmt == "csv":
        header = ["path", "depth", "duration_us"]
        for d in doms:
            header += [f"{d.label}_energy_uj", f"{d.label}_exclusive_uj", f"{d.label}_avg_power_uw"]
        header += ["flags"]
        rows = []
        for depth, path, n in flat:
            line: list[Any] = [path, depth, n.duration_us]
            for d in doms:
                line += [n.energy_uj[d], n.energy_uj_exclusive[d], n.avg_power_uw[d]]
            line.append(_flags(n))
            rows.append(line)
        return _csv_text(header, rows)
    head = f"{'duration [s]':>12}"
    for d in doms:
        head += f" {d.label + ' [J]':>12} {d.label + ' excl':>12} {d.label + ' [W]':>10}"
    lines = [head + "  span"]
    for depth, _, n in flat:
        line = f"{n.duration_us / 1e6:>12.6g}"
        for d in doms:
            line += (f" {n.energy_uj[d] / 1e6:>12.6g} {n.energy_uj_exclusive[d] / 1e6:>12.6g}"
                     f" {n.avg_power_uw[d] / 1e6:>10.4g}")
        flags = _flags(n)
        lines.append(line + "  " + "  " * depth + n.name + (f"  [{flags}]" if flags else ""))
    return "\n".join(lines) + "\n"


def _flags(n: SpanReport) -> str:
    return ",".join(f for f, on in (("degenerate", n.degenerate), ("low_confidence", n.low_confidence),
                                     ("shared_counter", n.shared_counter)) if on)


# --- sweeps ----------------------------------------------------------------


def run_dict(r: RunResult) -> dict:
    return {
        "threads": r.threads, "repetition": r.repetition, "wall_time_us": r.wall_time_us, "events": r.events,
        "energy_uj": {d.label: v for d, v in r.energy_uj.items()}, "external_j": r.external_j,
        "exit_status": r.exit_status, "events_declared": r.events_declared, "error": r.error,
    }


def run_from_dict(doc: dict) -> RunResult:
    return RunResult(
        threads=doc["threads"], wall_time_us=doc["wall_time_us"], events=doc["events"],
        energy_uj={EnergyDomain.parse(k): v for k, v in doc["energy_uj"].items()},
        external_j=doc.get("external_j"), exit_status=doc.get("exit_status", 0),
        repetition=doc.get("repetition", 0), events_declared=doc.get("events_declared", True),
        error=doc.get("error"),
    )


def sweep_rows(sweeps: Sequence[Sweep]) -> tuple[list[str], list[dict]]:
    rows = []
    for sw in sweeps:
        for threads in sorted({r.threads for r in sw.results}):
            runs = [r for r in sw.results if r.threads == threads]
            rows.append({
                "machine": sw.label, "threads": threads, "cores": sw.cores, "overcommit": threads > sw.cores,
                "runs": len(runs), "failed": sum(not r.ok for r in runs),
                "metrics": median_metrics(runs, sw.cores),
            })
    keys = _metric_order({k for row in rows for k in row["metrics"]})
    return keys, rows


def _metric_order(keys: set[str]) -> list[str]:
    def key(k: str) -> tuple:
        base, _, dom = k.partition("[")
        order = ["events_per_second", "events_per_second_per_core", "joules_per_event", "events_per_joule"]
        kind = dom.rstrip("]").split(":")[0]
        kinds = [k.value for k in DomainKind]
        return (order.index(base) if base in order else 99, kinds.index(kind) if kind in kinds else -1, k)
    return sorted(keys, key=key)


def render_sweep(data: Sequence[Sweep] | Comparison, fmt: str = "text") -> str:
    """Sweep table (median per machine and thread count) or a two-machine comparison."""
    _check_format(fmt, ("text", "json", "csv"))
    if isinstance(data, Comparison):
        return _render_comparison(data, fmt)
    keys, rows = sweep_rows(data)
    if fmt == "json":
        return dump_json({
            "schema": SCHEMA, "kind": "sweep",
            "machines": [{"label": sw.label, "cores": sw.cores, "runs": [run_dict(r) for r in sw.results]}
                         for sw in data],
            "rows": rows,
        })
    if fmt == "csv":
        header = ["machine", "threads", "cores", "overcommit", "runs", "failed"] + keys
        body = [[r["machine"], r["threads"], r["cores"], r["overcommit"], r["runs"], r["failed"]]
                + [r["metrics"].get(k, "") for k in keys] for r in rows]
        return _csv_text(header, body)
    lines = [f"{'machine':<12} {'threads':>7} " + " ".join(f"{k:>26}" for k in keys)]
    for r in rows:
        mark = " *overcommit*" if r["overcommit"] else ""
        vals = " ".join(f"{fmt_num(r['metrics'][k]) if k in r['metrics'] else '-':>26}" for k in keys)
        lines.append(f"{r['machine']:<12} {r['threads']:>7} {vals}{mark}")
    return "\n".join(lines) + "\n"


def sweeps_from_document(doc: dict) -> list[Sweep]:
    if doc.get("schema") != SCHEMA or doc.get("kind") != "sweep":
        raise ValueError("not a sweep document")
    return [Sweep(m["label"], m["cores"], [run_from_dict(r) for r in m["runs"]]) for m in doc["machines"]]


def _render_comparison(cmp: Comparison, fmt: str) -> str:
    keys = _metric_order({k for row in cmp.rows for k in row.ratios})
    if fmt == "json":
        return dump_json({
            "schema": SCHEMA, "kind": "comparison", "a": cmp.a_label, "b": cmp.b_label,
            "rows": [{"threads": r.threads, "a": r.a, "b": r.b, "ratios": r.ratios,
                      "overcommit_a": r.overcommit_a, "overcommit_b": r.overcommit_b} for r in cmp.rows],
        })
    if fmt == "csv":
        header = ["threads", "overcommit_a", "overcommit_b"]
        header += [f"a:{k}" for k in keys] + [f"b:{k}" for k in keys] + [f"ratio:{k}" for k in keys]
        body = []
        for r in cmp.rows:
            body.append([r.threads, r.overcommit_a, r.overcommit_b]
                        + [(r.a or {}).get(k, "") for k in keys] + [(r.b or {}).get(k, "") for k in keys]
                        + [r.ratios.get(k, "") for k in keys])
        return _csv_text(header, body)
    lines = [f"# ratios {cmp.b_label} / {cmp.a_label}", f"{'threads':>7} " + " ".join(f"{k:>26}" for k in keys)]
    for r in cmp.rows:
        marks = "".join(m for m, on in ((f" *overcommit {cmp.a_label}*", r.overcommit_a),
                                        (f" *overcommit {cmp.b_label}*", r.overcommit_b)) if on)
        vals = " ".join(f"{fmt_num(r.ratios[k]) if k in r.ratios else '-':>26}" for k in keys)
        lines.append(f"{r.threads:>7} {vals}{marks}")
    return "\n".join(lines) + "\n"


def compare_documents(a: dict, b: dict) -> Comparison:
    """Compare the first machine of two sweep documents."""
    return compare_runs(sweeps_from_document(a)[0], sweeps_from_document(b)[0])
