"""Experiment orchestration: server + proxy + client as separate processes.

Each cell of a plan runs the three roles over loopback, collects the CSV
logs, aggregates them and checks the calibration targets. Cells run
sequentially so they never contend for the loopback link.
"""

from __future__ import annotations

import hashlib
import json
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import metrics, netem

SEED_ENV = "EDGELOOP_SEED"

# Mean RTT calibration targets the link profiles are fitted to, keyed by
# (mode, profile).
RTT_TARGETS_MS = {
    ("control", "wifi-5ghz"): 39.57,
    ("control", "5g-n77"): 69.57,
    ("ar", "wifi-5ghz"): 62.54,
    ("ar", "5g-n77"): 112.18,
}
RTT_TOLERANCE = 0.15


@dataclass(frozen=True)
class Cell:
    name: str
    profile: str
    mode: str
    duration_s: float = 60.0
    seed: int = 1


@dataclass
class ExperimentPlan:
    cells: list[Cell] = field(default_factory=list)
    service_time_ms: float = 13.0
    workers: int = 2
    fps: int = 30
    quality: int = 90
    window: int = 4

    @classmethod
    def default(cls, duration_s: float = 60.0, seed: int | None = None) -> "ExperimentPlan":
        base = seed if seed is not None else _env_seed() or 1000
        cells = []
        for i, (mode, profile) in enumerate([
            ("control", "wifi-5ghz"), ("control", "5g-n77"),
            ("ar", "wifi-5ghz"), ("ar", "5g-n77"),
        ]):
            cells.append(Cell(name=f"{mode}-{profile}", profile=profile,
                              mode=mode, duration_s=duration_s, seed=base + i))
        return cls(cells=cells)

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        with open(path) as fh:
            doc = json.load(fh)
        plan = cls(
            service_time_ms=float(doc.get("service_time_ms", 13.0)),
            workers=int(doc.get("workers", 2)),
            fps=int(doc.get("fps", 30)),
            quality=int(doc.get("quality", 90)),
            window=int(doc.get("window", 4)),
        )
        seen = set()
        for c in doc["cells"]:
            cell = Cell(name=c["name"], profile=c["profile"], mode=c["mode"],
                        duration_s=float(c.get("duration_s", 60.0)),
                        seed=int(c.get("seed", 1)))
            if cell.name in seen:
                raise ValueError(f"duplicate cell name: {cell.name}")
            seen.add(cell.name)
            plan.cells.append(cell)
        env = _env_seed()
        if env is not None:
            plan.cells = [Cell(c.name, c.profile, c.mode, c.duration_s, env + i)
                          for i, c in enumerate(plan.cells)]
        return plan


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    return int(raw) if raw else None


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _wait_listening(port: int, timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            with socket.create_connection(("127.0.0.1", port), timeout=0.25):
                return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(f"port {port} never came up")


@dataclass
class CellResult:
    cell: Cell
    ok: bool
    aggregate: metrics.Aggregate | None = None
    error: str = ""


def run_cell(cell: Cell, plan: ExperimentPlan, cell_dir: Path) -> CellResult:
    cell_dir.mkdir(parents=True, exist_ok=True)
    server_port = free_port()
    proxy_port = free_port()
    server_log = cell_dir / "server_log.csv"
    proxy_log = cell_dir / "proxy_log.csv"
    records_csv = cell_dir / "client_records.csv"
    py = [sys.executable, "-m", "edgeloop.cli"]

    server = subprocess.Popen(py + [
        "serve", "--host", "127.0.0.1", "--port", str(server_port),
        "--service-time-ms", str(plan.service_time_ms),
        "--workers", str(plan.workers), "--log", str(server_log),
        "--seed", str(cell.seed),
    ])
    proxy = None
    try:
        _wait_listening(server_port)
        proxy = subprocess.Popen(py + [
            "proxy", "--listen", f"127.0.0.1:{proxy_port}",
            "--forward", f"127.0.0.1:{server_port}",
            "--profile", cell.profile, "--seed", str(cell.seed),
            "--log", str(proxy_log),
        ])
        _wait_listening(proxy_port)
        client = subprocess.run(py + [
            "client", "--server", f"127.0.0.1:{proxy_port}",
            "--mode", cell.mode, "--fps", str(plan.fps),
            "--quality", str(plan.quality), "--window", str(plan.window),
            "--duration", str(cell.duration_s), "--out", str(records_csv),
        ], timeout=cell.duration_s + 60)
        if client.returncode != 0:
            return CellResult(cell, ok=False, error=f"client exited {client.returncode}")
    except (TimeoutError, subprocess.TimeoutExpired) as exc:
        return CellResult(cell, ok=False, error=str(exc))
    finally:
        for proc in (proxy, server):
            if proc is not None:
                proc.terminate()
                try:
                    proc.wait(timeout=10)
                except subprocess.TimeoutExpired:
                    proc.kill()

    records = metrics.read_records(records_csv)
    agg = metrics.aggregate(records)
    agg.to_json(cell_dir / "aggregate.json")
    return CellResult(cell, ok=True, aggregate=agg)


def run_experiment(plan: ExperimentPlan, out_dir) -> dict[str, CellResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, CellResult] = {}
    for cell in plan.cells:
        results[cell.name] = run_cell(cell, plan, out / cell.name)
    manifest = {
        "plan": {
            "service_time_ms": plan.service_time_ms,
            "workers": plan.workers,
            "fps": plan.fps,
            "quality": plan.quality,
            "window": plan.window,
            "cells": [asdict(c) for c in plan.cells],
        },
        "profiles": {
            name: {"uplink": asdict(p.uplink), "downlink": asdict(p.downlink)}
            for name, p in netem.PROFILES.items()
        },
        "cells_ok": {name: r.ok for name, r in results.items()},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    manifest["config_sha256"] = hashlib.sha256(blob).hexdigest()
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    checks = check_targets(results)
    with open(out / "targets.json", "w") as fh:
        json.dump([{"name": n, "passed": p, "detail": d} for n, p, d in checks],
                  fh, indent=2)
    return results


def check_targets(results: dict[str, CellResult]) -> list[tuple[str, bool, str]]:
    """Pass/fail lines for the calibration and throughput targets.

    Only cells whose (mode, profile) pair has a published target are
    checked; extra cells ride along unchecked.
    """
    checks: list[tuple[str, bool, str]] = []
    by_key: dict[tuple[str, str], metrics.Aggregate] = {}
    for r in results.values():
        if r.ok and r.aggregate is not None:
            by_key[(r.cell.mode, r.cell.profile)] = r.aggregate

    for key, target in RTT_TARGETS_MS.items():
        agg = by_key.get(key)
        if agg is None:
            continue
        lo, hi = target * (1 - RTT_TOLERANCE), target * (1 + RTT_TOLERANCE)
        ok = lo <= agg.rtt_mean_ms <= hi
        checks.append((f"rtt-calibration {key[0]}/{key[1]}", ok,
                       f"mean {agg.rtt_mean_ms:.2f} ms vs {target:.2f} ±15%"))

    for key, agg in by_key.items():
        mode, profile = key
        limit = 100.0 if mode == "control" else 125.0
        checks.append((f"natural-control {mode}/{profile}",
                       agg.rtt_mean_ms < limit,
                       f"mean {agg.rtt_mean_ms:.2f} ms < {limit:.0f} ms"))
        checks.append((f"server-budget {mode}/{profile}",
                       13.0 <= agg.proc_mean_ms <= 16.0 and agg.proc_p99_ms < 33.0,
                       f"proc mean {agg.proc_mean_ms:.2f} ms, p99 {agg.proc_p99_ms:.2f} ms"))
        min_rate = 28.0 if mode == "control" else 20.0
        checks.append((f"throughput {mode}/{profile}",
                       agg.completed_rate_mean >= min_rate,
                       f"completed-rate {agg.completed_rate_mean:.2f}/s >= {min_rate}"))
        if mode == "control":
            ok = (abs(agg.dl_mbps_mean - 0.19) <= 0.05
                  and 12.0 <= agg.ul_mbps_mean <= 15.0)
            detail = (f"DL {agg.dl_mbps_mean:.3f} Mbit/s (0.19±0.05), "
                      f"UL {agg.ul_mbps_mean:.2f} Mbit/s (12-15)")
        else:
            ok = 10.0 <= agg.ul_mbps_mean <= 14.0 and 10.0 <= agg.dl_mbps_mean <= 14.0
            detail = (f"UL {agg.ul_mbps_mean:.2f}, DL {agg.dl_mbps_mean:.2f} "
                      f"Mbit/s (10-14)")
        checks.append((f"bandwidth {mode}/{profile}", ok, detail))

    for mode in ("control", "ar"):
        wifi = by_key.get((mode, "wifi-5ghz"))
        cell5g = by_key.get((mode, "5g-n77"))
        if wifi and cell5g:
            checks.append((f"drop-ordering {mode}",
                           cell5g.drop_rate_pct > wifi.drop_rate_pct,
                           f"5G {cell5g.drop_rate_pct:.2f}% > WiFi {wifi.drop_rate_pct:.2f}%"))
    return checks
