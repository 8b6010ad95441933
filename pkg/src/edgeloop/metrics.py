"""Per-frame records and their statistical summaries.

Turns client-side bookkeeping into the evaluation quantities: RTT and
server-processing mean/std, per-second completed/send rate series,
uplink/downlink bandwidth and drop rates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict

OUTCOMES = ("completed", "window_drop", "net_loss", "expired")


@dataclass
class FrameRecord:
    frame_id: int
    capture_ts_ns: int
    outcome: str
    rtt_ms: float | None = None
    server_proc_ms: float | None = None
    uplink_bytes: int = 0
    downlink_bytes: int = 0


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "capture_ts_ns", "rtt_ms", "server_proc_ms",
                         "uplink_bytes", "downlink_bytes", "outcome"])
        for r in records:
            writer.writerow([
                r.frame_id, r.capture_ts_ns,
                "" if r.rtt_ms is None else f"{r.rtt_ms:.3f}",
                "" if r.server_proc_ms is None else f"{r.server_proc_ms:.3f}",
                r.uplink_bytes, r.downlink_bytes, r.outcome,
            ])


def read_records(path) -> list[FrameRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(FrameRecord(
                frame_id=int(row["frame_id"]),
                capture_ts_ns=int(row["capture_ts_ns"]),
                outcome=row["outcome"],
                rtt_ms=float(row["rtt_ms"]) if row["rtt_ms"] else None,
                server_proc_ms=float(row["server_proc_ms"]) if row["server_proc_ms"] else None,
                uplink_bytes=int(row["uplink_bytes"]),
                downlink_bytes=int(row["downlink_bytes"]),
            ))
    return records


def _mean_std(values) -> tuple[float, float]:
    """Mean and sample std (n-1 denominator); std is 0 for n < 2."""
    vals = list(values)
    n = len(vals)
    if n == 0:
        return math.nan, math.nan
    mean = sum(vals) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var)


def _percentile(values, q: float) -> float:
    vals = sorted(values)
    if not vals:
        return math.nan
    idx = q / 100 * (len(vals) - 1)
    lo = math.floor(idx)
    hi = math.ceil(idx)
    if lo == hi:
        return vals[lo]
    return vals[lo] + (vals[hi] - vals[lo]) * (idx - lo)


@dataclass
class Aggregate:
    n_captured: int = 0
    n_completed: int = 0
    n_window_drop: int = 0
    n_net_loss: int = 0
    n_expired: int = 0
    empty: bool = False
    warmup_excluded_s: float = 2.0
    rtt_mean_ms: float = math.nan
    rtt_std_ms: float = math.nan
    proc_mean_ms: float = math.nan
    proc_std_ms: float = math.nan
    proc_p99_ms: float = math.nan
    drop_rate_pct: float = math.nan
    completed_rate_mean: float = math.nan
    completed_rate_std: float = math.nan
    send_rate_mean: float = math.nan
    send_rate_std: float = math.nan
    ul_mbps_mean: float = math.nan
    ul_mbps_std: float = math.nan
    dl_mbps_mean: float = math.nan
    dl_mbps_std: float = math.nan

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "Aggregate":
        with open(path) as fh:
            doc = json.load(fh)
        agg = cls()
        for k, v in doc.items():
            if hasattr(agg, k):
                setattr(agg, k, v)
        return agg


def _after_warmup(records, warmup_s: float):
    if not records:
        return []
    t0 = min(r.capture_ts_ns for r in records)
    cut = t0 + int(warmup_s * 1e9)
    return [r for r in records if r.capture_ts_ns >= cut]


def aggregate(records, warmup_s: float = 2.0, bucket_s: float = 1.0) -> Aggregate:
    """Mean/std summary over records captured after the warmup window."""
    kept = _after_warmup(records, warmup_s)
    agg = Aggregate(warmup_excluded_s=warmup_s)
    agg.n_captured = len(kept)
    completed = [r for r in kept if r.outcome == "completed"]
    agg.n_completed = len(completed)
    agg.n_window_drop = sum(1 for r in kept if r.outcome == "window_drop")
    agg.n_net_loss = sum(1 for r in kept if r.outcome == "net_loss")
    agg.n_expired = sum(1 for r in kept if r.outcome == "expired")
    if not completed:
        agg.empty = True
        return agg
    agg.rtt_mean_ms, agg.rtt_std_ms = _mean_std(r.rtt_ms for r in completed)
    procs = [r.server_proc_ms for r in completed if r.server_proc_ms is not None]
    agg.proc_mean_ms, agg.proc_std_ms = _mean_std(procs)
    agg.proc_p99_ms = _percentile(procs, 99)
    if agg.n_captured:
        agg.drop_rate_pct = 100.0 * (agg.n_window_drop + agg.n_net_loss
                                     + agg.n_expired) / agg.n_captured
    # the trailing bucket is usually partial; keep it out of the stats
    def full(series):
        return series[:-1] if len(series) > 1 else series

    _, completed_counts, send_counts = rate_series(kept, bucket_s)
    agg.completed_rate_mean, agg.completed_rate_std = _mean_std(full(completed_counts))
    agg.send_rate_mean, agg.send_rate_std = _mean_std(full(send_counts))
    _, ul, dl = bandwidth_series(kept, bucket_s)
    agg.ul_mbps_mean, agg.ul_mbps_std = _mean_std(full(ul))
    agg.dl_mbps_mean, agg.dl_mbps_std = _mean_std(full(dl))
    return agg


def _buckets(records, bucket_s: float):
    t0 = min(r.capture_ts_ns for r in records)
    span = bucket_s * 1e9
    n = int((max(r.capture_ts_ns for r in records) - t0) // span) + 1
    index = [int((r.capture_ts_ns - t0) // span) for r in records]
    return t0, n, index


def rate_series(records, bucket_s: float = 1.0):
    """Per-bucket completed-rate and send-rate, bucketed by capture time."""
    if not records:
        return [], [], []
    t0, n, index = _buckets(records, bucket_s)
    completed = [0] * n
    sent = [0] * n
    for r, b in zip(records, index):
        if r.outcome == "completed":
            completed[b] += 1
        if r.uplink_bytes > 0:
            sent[b] += 1
    times = [i * bucket_s for i in range(n)]
    return times, [c / bucket_s for c in completed], [s / bucket_s for s in sent]


def bandwidth_series(records, bucket_s: float = 1.0):
    """Per-bucket UL and DL application-layer bandwidth in Mbit/s.

    Counts whole wire messages (24-byte header included), transport
    overhead excluded.
    """
    if not records:
        return [], [], []
    t0, n, index = _buckets(records, bucket_s)
    ul = [0] * n
    dl = [0] * n
    for r, b in zip(records, index):
        ul[b] += r.uplink_bytes
        dl[b] += r.downlink_bytes
    times = [i * bucket_s for i in range(n)]
    scale = 8 / (bucket_s * 1e6)
    return times, [v * scale for v in ul], [v * scale for v in dl]


def rtt_series(records, bucket_s: float = 1.0):
    """Per-bucket mean RTT of completed records (NaN for empty buckets)."""
    if not records:
        return [], []
    t0, n, index = _buckets(records, bucket_s)
    sums = [0.0] * n
    counts = [0] * n
    for r, b in zip(records, index):
        if r.outcome == "completed" and r.rtt_ms is not None:
            sums[b] += r.rtt_ms
            counts[b] += 1
    times = [i * bucket_s for i in range(n)]
    return times, [s / c if c else math.nan for s, c in zip(sums, counts)]
