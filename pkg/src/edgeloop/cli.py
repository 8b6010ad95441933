"""Command-line entry point: serve / proxy / client / experiment / report."""

from __future__ import annotations

import argparse
import asyncio
import json
import signal
import sys

from . import client as client_mod
from . import experiment, netem, report, server


def _parse_endpoint(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host:
        raise argparse.ArgumentTypeError(f"expected host:port, got {value!r}")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeloop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the edge server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9750)
    p.add_argument("--policy", help="grip policy JSON file")
    p.add_argument("--detector", default="stub", choices=["stub", "external"])
    p.add_argument("--detector-cmd", nargs="+", default=[],
                   help="command for the external detector subprocess")
    p.add_argument("--service-time-ms", type=float, default=13.0)
    p.add_argument("--service-time-std-ms", type=float, default=0.4)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--log", help="server log CSV path")
    p.add_argument("--seed", type=int, help="service-time RNG seed")

    p = sub.add_parser("proxy", help="run the link-emulation proxy")
    p.add_argument("--listen", type=_parse_endpoint, default=("127.0.0.1", 9751))
    p.add_argument("--forward", type=_parse_endpoint, default=("127.0.0.1", 9750))
    p.add_argument("--profile", default="ideal",
                   help="built-in profile name or profile JSON path")
    p.add_argument("--seed", type=int, help="override the profile seed")
    p.add_argument("--log", help="proxy log CSV path")

    p = sub.add_parser("client", help="run the capture/upload client")
    p.add_argument("--server", type=_parse_endpoint, required=True)
    p.add_argument("--mode", default="control", choices=["control", "ar"])
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--quality", type=int, default=90)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--scenes", help="scene corpus file or directory of JPEGs")
    p.add_argument("--frame-pad-bytes", type=int, default=None)
    p.add_argument("--pad-target-bytes", type=int, default=None)
    p.add_argument("--out", help="per-frame records CSV path")

    p = sub.add_parser("experiment", help="orchestrate server+proxy+client cells")
    p.add_argument("--plan", help="plan JSON; defaults to the 2x2 wifi/5g grid")
    p.add_argument("--duration", type=float, default=60.0,
                   help="per-cell duration for the default plan")
    p.add_argument("--out", required=True)
    p.add_argument("--report", action="store_true",
                   help="render the report after the run")

    p = sub.add_parser("report", help="render tables and charts from a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out")

    return parser


def _sigterm_as_interrupt() -> None:
    """Let SIGTERM unwind like Ctrl-C so shutdown paths (log flush) run."""

    def handler(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, handler)


def _cmd_serve(args) -> int:
    _sigterm_as_interrupt()
    policy = server.GripPolicy.from_file(args.policy) if args.policy else None
    spec = server.DetectorSpec(
        kind=args.detector,
        service_time_ms=args.service_time_ms,
        service_time_std_ms=args.service_time_std_ms,
        external_cmd=tuple(args.detector_cmd),
    )
    try:
        asyncio.run(server.run_server(args.host, args.port, policy, spec,
                                      args.workers, args.log, args.seed))
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_proxy(args) -> int:
    _sigterm_as_interrupt()
    profile = netem.load_profile(args.profile, seed=args.seed)
    try:
        asyncio.run(netem.run_proxy(args.listen, args.forward, profile, args.log))
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_client(args) -> int:
    kwargs = dict(
        fps=args.fps, quality=args.quality, mode=args.mode,
        window=args.window, duration_s=args.duration,
        scene_corpus=args.scenes, pad_target_bytes=args.pad_target_bytes,
    )
    if args.frame_pad_bytes is not None:
        kwargs["frame_pad_bytes"] = args.frame_pad_bytes
    config = client_mod.ClientConfig(**kwargs)
    try:
        summary = asyncio.run(client_mod.run_client(
            config, args.server[0], args.server[1], records_path=args.out))
    except client_mod.HandshakeError as exc:
        print(f"handshake failed: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({
        "captured": summary.captured, "uploaded": summary.uploaded,
        "completed": summary.completed, "window_drops": summary.window_drops,
        "expired": summary.expired, "orphans": summary.orphans,
        "aborted": summary.aborted,
    }))
    return 3 if summary.aborted else 0


def _cmd_experiment(args) -> int:
    if args.plan:
        plan = experiment.ExperimentPlan.from_file(args.plan)
    else:
        plan = experiment.ExperimentPlan.default(duration_s=args.duration)
    results = experiment.run_experiment(plan, args.out)
    checks = experiment.check_targets(results)
    for name, passed, detail in checks:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    if args.report:
        report.render_report(args.out)
    all_ok = all(r.ok for r in results.values()) and all(p for _, p, _ in checks)
    return 0 if all_ok else 1


def _cmd_report(args) -> int:
    path = report.render_report(args.bundle, args.out)
    print(path)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "serve": _cmd_serve,
        "proxy": _cmd_proxy,
        "client": _cmd_client,
        "experiment": _cmd_experiment,
        "report": _cmd_report,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
