"""Render a result bundle into markdown tables and SVG time-series charts.

Everything is recomputed from the CSVs in the bundle, so re-rendering the
same bundle is a no-op. Charts are hand-rolled SVG line plots; no plotting
stack involved.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from . import metrics

TABLE_ROWS = [
    ("End-to-end RTT (ms)", "rtt_mean_ms", "rtt_std_ms"),
    ("Server Processing (ms)", "proc_mean_ms", "proc_std_ms"),
    ("Rate (/s)", "completed_rate_mean", "completed_rate_std"),
    ("DL Bandwidth (Mbit/s)", "dl_mbps_mean", "dl_mbps_std"),
    ("UL Bandwidth (Mbit/s)", "ul_mbps_mean", "ul_mbps_std"),
    ("Frame Drop Rate (%)", "drop_rate_pct", None),
]

PROFILE_ORDER = ["wifi-5ghz", "5g-n77", "ideal"]

SVG_W, SVG_H = 720, 320
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 56, 16, 28, 40
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(mean, std=None) -> str:
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "—"
    if std is None or (isinstance(std, float) and math.isnan(std)):
        return f"{mean:.2f}"
    return f"{mean:.2f} ± {std:.2f}"


def _load_bundle(bundle_dir: Path):
    with open(bundle_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    cells = {}
    for cdef in manifest["plan"]["cells"]:
        cdir = bundle_dir / cdef["name"]
        agg_path = cdir / "aggregate.json"
        rec_path = cdir / "client_records.csv"
        cells[cdef["name"]] = {
            "mode": cdef["mode"],
            "profile": cdef["profile"],
            "aggregate": metrics.Aggregate.from_json(agg_path) if agg_path.exists() else None,
            "records": metrics.read_records(rec_path) if rec_path.exists() else [],
        }
    targets_path = bundle_dir / "targets.json"
    targets = []
    if targets_path.exists():
        with open(targets_path) as fh:
            targets = json.load(fh)
    return manifest, cells, targets


def _mode_table(cells: dict, mode: str) -> str:
    cols = [(name, info) for name, info in cells.items() if info["mode"] == mode]
    cols.sort(key=lambda kv: PROFILE_ORDER.index(kv[1]["profile"])
              if kv[1]["profile"] in PROFILE_ORDER else 99)
    lines = ["| Metric | " + " | ".join(info["profile"] for _, info in cols) + " |",
             "|---" * (len(cols) + 1) + "|"]
    for label, mean_key, std_key in TABLE_ROWS:
        row = [label]
        for _, info in cols:
            agg = info["aggregate"]
            if agg is None or agg.empty:
                row.append("—")
            else:
                row.append(_fmt(getattr(agg, mean_key),
                                getattr(agg, std_key) if std_key else None))
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines)


def svg_line_chart(series: dict[str, tuple[list, list]], title: str,
                   ylabel: str, path) -> None:
    """Minimal multi-series line chart; series maps label -> (xs, ys)."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)
           if not (isinstance(y, float) and math.isnan(y))]
    if pts:
        xmax = max(x for x, _ in pts) or 1.0
        ymax = max(y for _, y in pts) or 1.0
    else:
        xmax = ymax = 1.0
    ymax *= 1.1
    plot_w = SVG_W - MARGIN_L - MARGIN_R
    plot_h = SVG_H - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + x / xmax * plot_w

    def sy(y):
        return MARGIN_T + plot_h - y / ymax * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{SVG_W / 2}" y="16" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#999"/>',
        f'<text x="14" y="{MARGIN_T + plot_h / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MARGIN_T + plot_h / 2})">{ylabel}</text>',
        f'<text x="{MARGIN_L + plot_w / 2}" y="{SVG_H - 8}" '
        'text-anchor="middle">time (s)</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yv = ymax * frac
        xv = xmax * frac
        parts.append(f'<line x1="{MARGIN_L}" y1="{sy(yv):.1f}" x2="{MARGIN_L + plot_w}" '
                     f'y2="{sy(yv):.1f}" stroke="#eee"/>')
        parts.append(f'<text x="{MARGIN_L - 6}" y="{sy(yv) + 4:.1f}" '
                     f'text-anchor="end">{yv:.1f}</text>')
        parts.append(f'<text x="{sx(xv):.1f}" y="{MARGIN_T + plot_h + 14}" '
                     f'text-anchor="middle">{xv:.0f}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys)
                          if not (isinstance(y, float) and math.isnan(y)))
        if coords:
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN_T + 14 + i * 14
        parts.append(f'<line x1="{SVG_W - 150}" y1="{ly - 4}" x2="{SVG_W - 130}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{SVG_W - 126}" y="{ly}">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def render_report(bundle_dir, out_dir=None) -> Path:
    bundle = Path(bundle_dir)
    out = Path(out_dir) if out_dir else bundle
    out.mkdir(parents=True, exist_ok=True)
    manifest, cells, targets = _load_bundle(bundle)

    rtt_s, rate_s, bw_s = {}, {}, {}
    for name, info in cells.items():
        recs = info["records"]
        if not recs:
            continue
        times, rtts = metrics.rtt_series(recs)
        rtt_s[name] = (times, rtts)
        times, completed, _ = metrics.rate_series(recs)
        rate_s[name] = (times, completed)
        times, ul, dl = metrics.bandwidth_series(recs)
        bw_s[f"{name} UL"] = (times, ul)
        bw_s[f"{name} DL"] = (times, dl)
    svg_line_chart(rtt_s, "Round-trip time over time", "RTT (ms)",
                   out / "rtt_over_time.svg")
    svg_line_chart(rate_s, "Completed frame/message rate over time", "rate (/s)",
                   out / "rate_over_time.svg")
    svg_line_chart(bw_s, "Bandwidth usage over time", "Mbit/s",
                   out / "bandwidth_over_time.svg")

    lines = ["# Closed-loop latency report", ""]
    lines += ["## Control mode (compact grip commands)", "",
              _mode_table(cells, "control"), ""]
    lines += ["## AR mode (annotated frame feedback)", "",
              _mode_table(cells, "ar"), ""]
    lines += ["## Figures", "",
              "![RTT](rtt_over_time.svg)", "",
              "![Rate](rate_over_time.svg)", "",
              "![Bandwidth](bandwidth_over_time.svg)", ""]
    if targets:
        lines += ["## Target checks", ""]
        for t in targets:
            mark = "PASS" if t["passed"] else "FAIL"
            lines.append(f"- **{mark}** {t['name']}: {t['detail']}")
        lines.append("")

    # flat CSV with one row per cell for downstream tooling
    csv_lines = ["cell,mode,profile,rtt_mean_ms,rtt_std_ms,proc_mean_ms,proc_std_ms,"
                 "rate_mean,rate_std,ul_mbps,dl_mbps,drop_pct"]
    for name, info in cells.items():
        agg = info["aggregate"]
        if agg is None:
            continue
        csv_lines.append(",".join([
            name, info["mode"], info["profile"],
            f"{agg.rtt_mean_ms:.3f}", f"{agg.rtt_std_ms:.3f}",
            f"{agg.proc_mean_ms:.3f}", f"{agg.proc_std_ms:.3f}",
            f"{agg.completed_rate_mean:.3f}", f"{agg.completed_rate_std:.3f}",
            f"{agg.ul_mbps_mean:.3f}", f"{agg.dl_mbps_mean:.3f}",
            f"{agg.drop_rate_pct:.3f}",
        ]))
    (out / "summary.csv").write_text("\n".join(csv_lines) + "\n")

    report_path = out / "report.md"
    report_path.write_text("\n".join(lines))
    return report_path
