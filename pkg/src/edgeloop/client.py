"""Prosthesis-side pipeline: paced capture, pipelined upload, correlation.

Three concurrent activities per session share one event loop: the capture
timer (absolute-grid ticks, no drift), the sender, and the receiver. The
in-flight window is the only shared state; capture never waits on the
socket and uploads never wait on result processing.
"""

from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import imaging, protocol
from .metrics import FrameRecord

WINDOW_EXPIRY_S = 1.0  # frames without a result this old are written off


class HandshakeError(RuntimeError):
    pass


@dataclass
class ClientConfig:
    fps: int = 30
    quality: int = 90
    mode: str = "control"  # control | ar
    window: int = 4
    duration_s: float = 10.0
    scene_corpus: str | None = None
    pad_target_bytes: int | None = None  # downlink pad; mode-dependent default
    frame_pad_bytes: int = protocol.DEFAULT_FRAME_PAD

    def __post_init__(self) -> None:
        if not 1 <= self.fps <= 60:
            raise ValueError(f"fps out of range: {self.fps}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.mode not in ("control", "ar"):
            raise ValueError(f"bad mode: {self.mode}")
        if self.pad_target_bytes is None:
            self.pad_target_bytes = (protocol.DEFAULT_CONTROL_PAD
                                     if self.mode == "control"
                                     else protocol.DEFAULT_AR_PAD)


@dataclass
class _InFlightEntry:
    frame_id: int
    capture_ts: int
    send_ts: int = 0
    uplink_bytes: int = 0


class InFlightWindow:
    """Bounded set of uploaded frames awaiting results."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: dict[int, _InFlightEntry] = {}
        self.window_drops = 0

    def admit_or_drop(self, frame_id: int, capture_ts: int) -> _InFlightEntry | None:
        """Tail drop: a frame arriving at a full window is sacrificed."""
        if len(self.entries) >= self.capacity:
            self.window_drops += 1
            return None
        entry = _InFlightEntry(frame_id=frame_id, capture_ts=capture_ts)
        self.entries[frame_id] = entry
        return entry

    def pop(self, frame_id: int) -> _InFlightEntry | None:
        return self.entries.pop(frame_id, None)

    def expired(self, now_ns: int, max_age_s: float = WINDOW_EXPIRY_S) -> list[_InFlightEntry]:
        out = []
        for entry in list(self.entries.values()):
            ref = entry.send_ts or entry.capture_ts
            if (now_ns - ref) / 1e9 > max_age_s:
                out.append(self.entries.pop(entry.frame_id))
        return out


def correlate_result(window: InFlightWindow, frame_id: int, capture_ts_echo: int,
                     send_ts_echo: int, server_proc_us: int,
                     downlink_bytes: int, now_ns: int) -> FrameRecord | None:
    """Match a result to its in-flight frame; None marks an orphan."""
    entry = window.pop(frame_id)
    if entry is None:
        return None
    return FrameRecord(
        frame_id=frame_id,
        capture_ts_ns=entry.capture_ts,
        outcome="completed",
        rtt_ms=protocol.rtt_from_echo(now_ns, send_ts_echo),
        server_proc_ms=server_proc_us / 1e3,
        uplink_bytes=entry.uplink_bytes,
        downlink_bytes=downlink_bytes,
    )


@dataclass
class ClientSummary:
    records: list[FrameRecord]
    captured: int = 0
    uploaded: int = 0
    completed: int = 0
    window_drops: int = 0
    expired: int = 0
    orphans: int = 0
    crc_errors: int = 0
    aborted: bool = False
    tick_deviation_ms: list[float] = field(default_factory=list)


class _SessionState:
    def __init__(self, config: ClientConfig):
        self.config = config
        self.window = InFlightWindow(config.window)
        self.records: list[FrameRecord] = []
        self.orphans = 0
        self.crc_errors = 0
        self.uploaded = 0
        self.captured = 0
        self.expired = 0
        self.tick_deviation_ms: list[float] = []
        self.send_queue: asyncio.Queue = asyncio.Queue()
        self.aborted = False


def _load_frames(config: ClientConfig) -> list[imaging.CompressedFrame | imaging.SyntheticScene]:
    """Scene corpus (rendered per tick) or a directory of user JPEGs."""
    if config.scene_corpus:
        path = Path(config.scene_corpus)
        if path.is_dir():
            frames = []
            for jpg in sorted(path.glob("*.jpg")) + sorted(path.glob("*.jpeg")):
                data = jpg.read_bytes()
                imaging.decode_image(data)  # validate early
                frames.append(imaging.CompressedFrame(0, 0, config.quality, data))
            if not frames:
                raise imaging.SceneError(f"no JPEGs in {path}")
            return frames
        return imaging.load_scene_corpus(path)
    return imaging.make_default_corpus()


async def run_client(config: ClientConfig, host: str, port: int,
                     records_path=None) -> ClientSummary:
    sources = _load_frames(config)
    # raw renders are pure functions of the scene: cache them once
    rendered = {
        i: imaging.generate_frame(src, 0, 0).pixels
        for i, src in enumerate(sources) if isinstance(src, imaging.SyntheticScene)
    }

    try:
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(host, port), timeout=5.0)
    except (OSError, asyncio.TimeoutError) as exc:
        raise HandshakeError(f"cannot reach server: {exc}") from exc

    state = _SessionState(config)
    mode = protocol.MODE_CONTROL if config.mode == "control" else protocol.MODE_AR
    writer.write(protocol.encode_message(protocol.WireMessage(
        protocol.MSG_HELLO,
        payload=protocol.build_hello(mode, config.quality, imaging.FRAME_WIDTH,
                                     imaging.FRAME_HEIGHT, config.fps,
                                     config.pad_target_bytes))))
    await writer.drain()

    decoder = protocol.StreamDecoder()
    deadline = asyncio.get_running_loop().time() + 5.0
    acked = False
    while not acked:
        timeout = deadline - asyncio.get_running_loop().time()
        if timeout <= 0:
            raise HandshakeError("HELLO_ACK timeout")
        try:
            chunk = await asyncio.wait_for(reader.read(65536), timeout=timeout)
        except asyncio.TimeoutError:
            raise HandshakeError("HELLO_ACK timeout") from None
        if not chunk:
            raise HandshakeError("server closed during handshake")
        for ev in decoder.feed(chunk):
            if isinstance(ev, protocol.WireMessage) and ev.msg_type == protocol.MSG_HELLO_ACK:
                acked = True

    sender = asyncio.ensure_future(_send_loop(state, writer))
    receiver = asyncio.ensure_future(_recv_loop(state, reader, decoder))
    reaper = asyncio.ensure_future(_expiry_loop(state))
    try:
        await _capture_loop(state, sources, rendered)
        await _drain_window(state)
    finally:
        reaper.cancel()
        await state.send_queue.put(None)
        await sender
        try:
            writer.write(protocol.encode_message(protocol.WireMessage(protocol.MSG_BYE)))
            await writer.drain()
            writer.close()
        except (ConnectionError, OSError):
            pass
        receiver.cancel()
        for task in (receiver, reaper):
            try:
                await task
            except (asyncio.CancelledError, ConnectionError, OSError):
                pass

    records = sorted(state.records, key=lambda r: r.frame_id)
    summary = ClientSummary(
        records=records,
        captured=state.captured,
        uploaded=state.uploaded,
        completed=sum(1 for r in records if r.outcome == "completed"),
        window_drops=state.window.window_drops,
        expired=state.expired,
        orphans=state.orphans,
        crc_errors=state.crc_errors,
        aborted=state.aborted,
        tick_deviation_ms=state.tick_deviation_ms,
    )
    if records_path:
        from .metrics import write_records
        write_records(records, records_path)
    return summary


async def _capture_loop(state: _SessionState, sources, rendered) -> None:
    config = state.config
    loop = asyncio.get_running_loop()
    n_ticks = round(config.fps * config.duration_s)
    t0 = loop.time()
    ns0 = time.monotonic_ns()
    for k in range(n_ticks):
        target = t0 + k / config.fps
        # coarse sleep, then yield-spin over the timer's overshoot region
        delay = target - loop.time() - 0.002
        if delay > 0:
            await asyncio.sleep(delay)
        while loop.time() < target:
            await asyncio.sleep(0)
        if state.aborted:
            return
        capture_ts = time.monotonic_ns()
        state.tick_deviation_ms.append(
            abs((capture_ts - ns0) / 1e6 - (target - t0) * 1e3))
        state.captured += 1
        frame_id = k
        src = sources[k % len(sources)]
        entry = state.window.admit_or_drop(frame_id, capture_ts)
        if entry is None:
            state.records.append(FrameRecord(
                frame_id=frame_id, capture_ts_ns=capture_ts,
                outcome="window_drop", uplink_bytes=0, downlink_bytes=0))
            continue
        if isinstance(src, imaging.CompressedFrame):
            jpeg = src.data
        else:
            raw = imaging.RawFrame(pixels=rendered[k % len(sources)],
                                   frame_id=frame_id, capture_ts=capture_ts)
            jpeg = imaging.encode_image(raw, config.quality).data
        jpeg = imaging.pad_jpeg(jpeg, config.frame_pad_bytes)
        await state.send_queue.put((entry, jpeg))


async def _send_loop(state: _SessionState, writer: asyncio.StreamWriter) -> None:
    while True:
        item = await state.send_queue.get()
        if item is None:
            return
        entry, jpeg = item
        entry.send_ts = time.monotonic_ns()
        msg = protocol.WireMessage(
            protocol.MSG_FRAME_UPLOAD, frame_id=entry.frame_id,
            payload=protocol.build_frame_upload(entry.capture_ts, entry.send_ts, jpeg))
        data = protocol.encode_message(msg)
        entry.uplink_bytes = len(data)
        state.uploaded += 1
        try:
            writer.write(data)
            await writer.drain()
        except (ConnectionError, OSError):
            state.aborted = True
            return


async def _recv_loop(state: _SessionState, reader: asyncio.StreamReader,
                     decoder: protocol.StreamDecoder) -> None:
    while True:
        chunk = await reader.read(65536)
        if not chunk:
            state.aborted = True
            return
        try:
            events = decoder.feed(chunk)
        except protocol.FramingError:
            state.aborted = True
            return
        now = time.monotonic_ns()
        for ev in events:
            if isinstance(ev, protocol.CrcMismatch):
                state.crc_errors += 1
                continue
            if ev.msg_type in (protocol.MSG_CONTROL_RESULT, protocol.MSG_ANNOTATED_FRAME):
                prefix = protocol.parse_result_prefix(ev.payload)
                record = correlate_result(
                    state.window, ev.frame_id, prefix["capture_ts_echo"],
                    prefix["send_ts_echo"], prefix["server_proc_us"],
                    downlink_bytes=protocol.HEADER_LEN + len(ev.payload), now_ns=now)
                if record is None:
                    state.orphans += 1
                else:
                    state.records.append(record)
            elif ev.msg_type == protocol.MSG_BYE:
                state.aborted = True
                return


async def _expiry_loop(state: _SessionState) -> None:
    while True:
        await asyncio.sleep(0.05)
        now = time.monotonic_ns()
        for entry in state.window.expired(now):
            state.expired += 1
            state.records.append(FrameRecord(
                frame_id=entry.frame_id, capture_ts_ns=entry.capture_ts,
                outcome="expired", uplink_bytes=entry.uplink_bytes, downlink_bytes=0))


async def _drain_window(state: _SessionState) -> None:
    """Let in-flight frames finish or expire so the ledger closes exactly."""
    deadline = asyncio.get_running_loop().time() + WINDOW_EXPIRY_S + 0.5
    while state.window.entries and asyncio.get_running_loop().time() < deadline:
        if state.aborted:
            break
        await asyncio.sleep(0.02)
    now = time.monotonic_ns()
    for entry in state.window.expired(now, max_age_s=0.0 if state.aborted else WINDOW_EXPIRY_S):
        state.expired += 1
        state.records.append(FrameRecord(
            frame_id=entry.frame_id, capture_ts_ns=entry.capture_ts,
            outcome="expired", uplink_bytes=entry.uplink_bytes, downlink_bytes=0))
