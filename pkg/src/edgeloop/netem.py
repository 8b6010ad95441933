"""Link emulation: per-direction delay/jitter/rate/loss and a relay proxy.

The proxy sits between client and server, re-frames the byte stream into
protocol messages and delivers each message after

    max(0, base + N(0, jitter^2)) + bytes * 8 / rate

clamped to the previous delivery time so each direction stays FIFO.
Session control messages (HELLO/HELLO_ACK/BYE) are exempt from loss.
"""

from __future__ import annotations

import asyncio
import csv
import json
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import protocol

LOST = object()  # sentinel returned by sample_delivery_time


@dataclass(frozen=True)
class DirectionModel:
    base_delay_ms: float
    jitter_std_ms: float
    rate_mbps: float
    loss_prob: float

    def validate(self) -> None:
        if self.base_delay_ms < 0 or self.jitter_std_ms < 0:
            raise ValueError("delay/jitter must be >= 0")
        if self.rate_mbps <= 0:
            raise ValueError("rate must be > 0")
        if not 0 <= self.loss_prob < 1:
            raise ValueError("loss_prob must be in [0, 1)")


@dataclass(frozen=True)
class NetProfile:
    name: str
    uplink: DirectionModel
    downlink: DirectionModel
    seed: int = 1


# Defaults fitted so end-to-end mean RTTs land on the calibration targets
# in experiment.RTT_TARGETS_MS; verified by sweep runs on the target host.
PROFILES: dict[str, NetProfile] = {
    "ideal": NetProfile(
        name="ideal",
        uplink=DirectionModel(0.0, 0.0, 1e6, 0.0),
        downlink=DirectionModel(0.0, 0.0, 1e6, 0.0),
        seed=1,
    ),
    "wifi-5ghz": NetProfile(
        name="wifi-5ghz",
        uplink=DirectionModel(9.0, 1.0, 120.0, 0.002),
        downlink=DirectionModel(9.0, 1.0, 20.0, 0.002),
        seed=1,
    ),
    "5g-n77": NetProfile(
        name="5g-n77",
        uplink=DirectionModel(15.5, 4.0, 60.0, 0.005),
        downlink=DirectionModel(29.5, 6.0, 11.4, 0.005),
        seed=1,
    ),
}


def load_profile(name_or_path: str, seed: int | None = None) -> NetProfile:
    """Resolve a built-in profile name or a JSON profile file."""
    if name_or_path in PROFILES:
        prof = PROFILES[name_or_path]
    else:
        with open(name_or_path) as fh:
            doc = json.load(fh)
        prof = NetProfile(
            name=doc["name"],
            uplink=DirectionModel(**doc["uplink"]),
            downlink=DirectionModel(**doc["downlink"]),
            seed=int(doc.get("seed", 1)),
        )
    prof.uplink.validate()
    prof.downlink.validate()
    if seed is not None:
        prof = NetProfile(name=prof.name, uplink=prof.uplink,
                          downlink=prof.downlink, seed=seed)
    return prof


def save_profile(profile: NetProfile, path) -> None:
    doc = {"name": profile.name, "seed": profile.seed,
           "uplink": asdict(profile.uplink), "downlink": asdict(profile.downlink)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def sample_delivery_time(model: DirectionModel, msg_bytes: int, send_time: float,
                         rng: np.random.Generator, prev_delivery: float = float("-inf")):
    """Delivery time in seconds, or LOST.

    FIFO is enforced by clamping to prev_delivery. Deterministic given the
    rng state: one uniform draw for loss (if loss_prob > 0) and one normal
    draw for jitter (if jitter > 0), in that order.
    """
    if msg_bytes <= 0:
        raise ValueError("msg_bytes must be > 0")
    if model.loss_prob > 0 and rng.random() < model.loss_prob:
        return LOST
    delay_ms = model.base_delay_ms
    if model.jitter_std_ms > 0:
        delay_ms += rng.normal(0.0, model.jitter_std_ms)
    delay_s = max(0.0, delay_ms / 1e3) + msg_bytes * 8 / (model.rate_mbps * 1e6)
    return max(send_time + delay_s, prev_delivery)


class _DirectionPump:
    """Relays one direction of a session with injected delay and loss."""

    def __init__(self, name: str, model: DirectionModel, rng: np.random.Generator,
                 reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 log_rows: list, exempt_control: bool = True):
        self.name = name
        self.model = model
        self.rng = rng
        self.reader = reader
        self.writer = writer
        self.log_rows = log_rows
        self.exempt_control = exempt_control
        self._queue: asyncio.Queue = asyncio.Queue()
        self._prev_delivery = float("-inf")

    async def run(self) -> None:
        sender = asyncio.ensure_future(self._send_loop())
        try:
            await self._recv_loop()
        finally:
            await self._queue.put(None)
            await sender
            try:
                self.writer.write_eof()
            except (OSError, RuntimeError):
                pass

    async def _recv_loop(self) -> None:
        loop = asyncio.get_running_loop()
        decoder = protocol.StreamDecoder()
        while True:
            chunk = await self.reader.read(65536)
            if not chunk:
                return
            try:
                events = decoder.feed(chunk)
            except protocol.FramingError:
                return
            for ev in events:
                if isinstance(ev, protocol.CrcMismatch):
                    continue
                data = protocol.encode_message(ev)
                now = loop.time()
                exempt = self.exempt_control and ev.msg_type in protocol.CONTROL_TYPES
                if exempt:
                    delivery = sample_delivery_time(
                        DirectionModel(self.model.base_delay_ms, self.model.jitter_std_ms,
                                       self.model.rate_mbps, 0.0),
                        len(data), now, self.rng, self._prev_delivery)
                else:
                    delivery = sample_delivery_time(self.model, len(data), now,
                                                    self.rng, self._prev_delivery)
                if delivery is LOST:
                    self.log_rows.append((time.monotonic_ns(), self.name,
                                          ev.msg_type, len(data), 0.0, 1))
                    continue
                self._prev_delivery = delivery
                self.log_rows.append((time.monotonic_ns(), self.name, ev.msg_type,
                                      len(data), round((delivery - now) * 1e3, 3), 0))
                await self._queue.put((delivery, data))

    async def _send_loop(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            item = await self._queue.get()
            if item is None:
                return
            delivery, data = item
            dt = delivery - loop.time()
            if dt > 0:
                await asyncio.sleep(dt)
            try:
                self.writer.write(data)
                await self.writer.drain()
            except (ConnectionError, OSError):
                return


class NetemProxy:
    """Store-and-forward proxy applying a NetProfile per direction."""

    def __init__(self, listen_host: str, listen_port: int,
                 forward_host: str, forward_port: int,
                 profile: NetProfile, log_path=None):
        self.listen_host = listen_host
        self.listen_port = listen_port
        self.forward_host = forward_host
        self.forward_port = forward_port
        self.profile = profile
        self.log_path = log_path
        self.log_rows: list = []
        self._server: asyncio.AbstractServer | None = None

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle, self.listen_host, self.listen_port)

    @property
    def port(self) -> int:
        assert self._server is not None
        return self._server.sockets[0].getsockname()[1]

    async def _handle(self, client_reader: asyncio.StreamReader,
                      client_writer: asyncio.StreamWriter) -> None:
        try:
            server_reader, server_writer = await asyncio.open_connection(
                self.forward_host, self.forward_port)
        except OSError:
            client_writer.close()
            return
        seq = np.random.SeedSequence(self.profile.seed)
        ul_rng, dl_rng = (np.random.default_rng(s) for s in seq.spawn(2))
        up = _DirectionPump("ul", self.profile.uplink, ul_rng,
                            client_reader, server_writer, self.log_rows)
        down = _DirectionPump("dl", self.profile.downlink, dl_rng,
                              server_reader, client_writer, self.log_rows)
        await asyncio.gather(up.run(), down.run(), return_exceptions=True)
        for w in (client_writer, server_writer):
            try:
                w.close()
            except OSError:
                pass

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self.log_path:
            self.write_log(self.log_path)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ts_ns", "direction", "msg_type", "bytes", "delay_ms", "lost"])
            writer.writerows(self.log_rows)


async def run_proxy(listen: tuple[str, int], forward: tuple[str, int],
                    profile: NetProfile, log_path=None) -> None:
    """Run the proxy until cancelled."""
    proxy = NetemProxy(listen[0], listen[1], forward[0], forward[1], profile, log_path)
    await proxy.start()
    try:
        await asyncio.Event().wait()
    finally:
        await proxy.close()
