"""The nine headline guarantees of the package, verified end to end.

The latency/throughput/bandwidth checks (1-5) share a single 2x2 grid run
(two link profiles x two feedback modes, 60 s per cell) executed once per
test session; expect roughly five minutes of wall time for the fixture.
"""

import csv
import os
import random
import time

import pytest

from edgeloop import experiment, imaging, metrics, protocol
from edgeloop.experiment import Cell, ExperimentPlan, RTT_TARGETS_MS
from edgeloop.netem import DirectionModel, NetProfile
from edgeloop.protocol import (CrcMismatch, StreamDecoder, WireMessage,
                               encode_message)
from edgeloop.server import GripPolicy, StubDetector, select_grip

GRID_SEED = int(os.environ.get(experiment.SEED_ENV) or 1000)
GRID_CELLS = [("control", "wifi-5ghz"), ("control", "5g-n77"),
              ("ar", "wifi-5ghz"), ("ar", "5g-n77")]


@pytest.fixture(scope="session")
def grid(tmp_path_factory):
    plan = ExperimentPlan.default(duration_s=60.0, seed=GRID_SEED)
    out = tmp_path_factory.mktemp("grid")
    t0 = time.monotonic()
    results = experiment.run_experiment(plan, out)
    elapsed = time.monotonic() - t0
    aggs = {}
    for r in results.values():
        assert r.ok, f"cell {r.cell.name} failed: {r.error}"
        assert not r.aggregate.empty
        aggs[(r.cell.mode, r.cell.profile)] = r.aggregate
    return {"aggs": aggs, "elapsed_s": elapsed}


# -- 1. calibration: mean RTT per cell within +-15% of the fitted targets


@pytest.mark.parametrize("mode,profile", GRID_CELLS)
def test_rtt_calibration(grid, mode, profile):
    target = RTT_TARGETS_MS[(mode, profile)]
    measured = grid["aggs"][(mode, profile)].rtt_mean_ms
    assert target * 0.85 <= measured <= target * 1.15, (
        f"{mode}/{profile}: mean RTT {measured:.2f} ms vs target {target:.2f}")


def test_grid_runtime_under_five_minutes(grid):
    assert grid["elapsed_s"] < 300.0


# -- 2. natural-control threshold: <125 ms everywhere, <100 ms for control


@pytest.mark.parametrize("mode,profile", GRID_CELLS)
def test_natural_control_threshold(grid, mode, profile):
    mean = grid["aggs"][(mode, profile)].rtt_mean_ms
    assert mean < 125.0
    if mode == "control":
        assert mean < 100.0


# -- 3. server budget: mean processing in [13, 16] ms, p99 under 33 ms


@pytest.mark.parametrize("mode,profile", GRID_CELLS)
def test_server_processing_budget(grid, mode, profile):
    agg = grid["aggs"][(mode, profile)]
    assert 13.0 <= agg.proc_mean_ms <= 16.0, f"mean {agg.proc_mean_ms:.2f}"
    assert agg.proc_p99_ms < 33.0, f"p99 {agg.proc_p99_ms:.2f}"


# -- 4. throughput and drop ordering


@pytest.mark.parametrize("mode,profile", GRID_CELLS)
def test_completed_rate(grid, mode, profile):
    rate = grid["aggs"][(mode, profile)].completed_rate_mean
    floor = 28.0 if mode == "control" else 20.0
    assert rate >= floor, f"{mode}/{profile}: {rate:.2f}/s < {floor}"


@pytest.mark.parametrize("mode", ["control", "ar"])
def test_5g_drops_more_than_wifi(grid, mode):
    wifi = grid["aggs"][(mode, "wifi-5ghz")].drop_rate_pct
    g5 = grid["aggs"][(mode, "5g-n77")].drop_rate_pct
    assert g5 > wifi, f"{mode}: 5G {g5:.2f}% vs WiFi {wifi:.2f}%"


# -- 5. bandwidth accounting


@pytest.mark.parametrize("profile", ["wifi-5ghz", "5g-n77"])
def test_control_mode_bandwidth(grid, profile):
    agg = grid["aggs"][("control", profile)]
    assert abs(agg.dl_mbps_mean - 0.19) <= 0.05, f"DL {agg.dl_mbps_mean:.3f}"
    assert 12.0 <= agg.ul_mbps_mean <= 15.0, f"UL {agg.ul_mbps_mean:.2f}"


@pytest.mark.parametrize("profile", ["wifi-5ghz", "5g-n77"])
def test_ar_mode_bandwidth(grid, profile):
    agg = grid["aggs"][("ar", profile)]
    assert 10.0 <= agg.ul_mbps_mean <= 14.0, f"UL {agg.ul_mbps_mean:.2f}"
    assert 10.0 <= agg.dl_mbps_mean <= 14.0, f"DL {agg.dl_mbps_mean:.2f}"


# -- 6. protocol property suite: round-trip identity, chunking invariance,
#       bit-flip detection with stream resynchronization


def test_protocol_roundtrip_and_chunking_10k():
    rng = random.Random(6_0001)
    types = sorted(protocol.VALID_TYPES)
    msgs = [WireMessage(msg_type=rng.choice(types),
                        frame_id=rng.getrandbits(64),
                        payload=rng.randbytes(rng.randrange(0, 256)),
                        flags=rng.getrandbits(16))
            for _ in range(10_000)]
    stream = b"".join(encode_message(m) for m in msgs)
    decoder = StreamDecoder()
    out = []
    i = 0
    while i < len(stream):  # feed in random-sized chunks
        n = rng.randrange(1, 4096)
        out.extend(decoder.feed(stream[i:i + n]))
        i += n
    assert out == msgs


def test_protocol_bit_flip_detected_and_resynced():
    rng = random.Random(6_0002)
    msgs = [WireMessage(protocol.MSG_FRAME_UPLOAD, i, rng.randbytes(64))
            for i in range(3)]
    encoded = [encode_message(m) for m in msgs]
    for _ in range(500):
        byte_idx = rng.randrange(24, len(encoded[1]))  # payload region
        bit = rng.randrange(8)
        corrupted = bytearray(encoded[1])
        corrupted[byte_idx] ^= 1 << bit
        out = StreamDecoder().feed(encoded[0] + bytes(corrupted) + encoded[2])
        assert out[0] == msgs[0]
        assert isinstance(out[1], CrcMismatch)
        assert out[2] == msgs[2], "decoder failed to resynchronize"


# -- 7. pipelining law: at a forced ~100 ms RTT and 30 fps, window=1 is
#       stop-and-wait (10 +- 1 /s) while window=4 sustains the full frame
#       rate (30 +- 1 /s)


def _fixed_delay_profile(base_each_way_ms: float) -> NetProfile:
    leg = DirectionModel(base_delay_ms=base_each_way_ms, jitter_std_ms=0.0,
                         rate_mbps=1e6, loss_prob=0.0)
    return NetProfile("fixed-delay", leg, leg, seed=1)


def _pipelining_cell(window: int, tmp_path):
    # 45 ms per direction; codec + detection bring the measured RTT to just
    # under 100 ms, so the stop-and-wait cycle resolves to three 33 ms ticks
    from edgeloop import netem

    profile_path = tmp_path / "fixed-delay.json"
    netem.save_profile(_fixed_delay_profile(45.0), profile_path)
    plan = ExperimentPlan(service_time_ms=0.0, window=window)
    cell = Cell(f"pipeline-w{window}", str(profile_path), "control", 12.0, 1)
    result = experiment.run_cell(cell, plan, tmp_path / cell.name)
    assert result.ok, result.error
    return result.aggregate


@pytest.mark.parametrize("window,expected", [(1, 10.0), (4, 30.0)])
def test_pipelining_law(window, expected, tmp_path):
    agg = _pipelining_cell(window, tmp_path)
    assert abs(agg.completed_rate_mean - expected) <= 1.0, (
        f"window={window}: {agg.completed_rate_mean:.2f}/s, "
        f"expected {expected} +- 1")


# -- 8. detector and grip selection agree with brute-force oracles over the
#       whole generated corpus after a real encode/decode round trip


def _iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union else 0.0


def _oracle_grip(detections, policy):
    qualifying = [d for d in detections if d.confidence >= policy.min_confidence]
    if not qualifying:
        return "none"
    best = max(qualifying, key=lambda d: (
        d.bbox[2] * d.bbox[3], d.confidence,
        tuple(-ord(c) for c in d.class_name)))
    return policy.grip_map.get(best.class_name, "none")


def test_detector_oracle_equivalence_over_corpus():
    detector = StubDetector()
    policy = GripPolicy()
    corpus = imaging.make_default_corpus()
    assert len(corpus) == 20
    for scene in corpus:
        frame = imaging.generate_frame(scene, 0, 0)
        pixels = imaging.decode_image(imaging.encode_image(frame, 90).data)
        dets = detector.detect(pixels)
        truth = {o.class_name: o.bbox for o in scene.objects}
        assert {d.class_name for d in dets} == set(truth), scene.scene_id
        for d in dets:
            assert _iou(d.bbox, truth[d.class_name]) >= 0.9, scene.scene_id
        assert select_grip(dets, policy).grip == _oracle_grip(dets, policy)


# -- 9. determinism: same cell + same seed => identical per-direction
#       delay/loss decision sequences and identical uploaded-byte totals


def _proxy_decisions(log_path):
    # delay_ms is excluded: the FIFO clamp couples it to wall-clock send
    # spacing, which the host scheduler perturbs between runs
    per_direction = {"ul": [], "dl": []}
    with open(log_path) as fh:
        for row in csv.DictReader(fh):
            per_direction[row["direction"]].append(
                (row["msg_type"], row["bytes"], row["lost"]))
    return per_direction


def test_same_seed_reproduces_link_decisions(tmp_path):
    # window 8 gives enough slack that scheduler noise cannot cause a
    # window drop, so both runs offer the identical message sequence to
    # the link emulator
    plan = ExperimentPlan(window=8)
    cell = Cell("repro", "wifi-5ghz", "control", 6.0, seed=777)
    runs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        result = experiment.run_cell(cell, plan, out)
        assert result.ok, result.error
        records = metrics.read_records(out / "client_records.csv")
        runs.append({
            "decisions": _proxy_decisions(out / "proxy_log.csv"),
            "uploaded_bytes": sum(r.uplink_bytes for r in records),
        })
    assert runs[0]["decisions"]["ul"] == runs[1]["decisions"]["ul"]
    assert runs[0]["decisions"]["dl"] == runs[1]["decisions"]["dl"]
    assert runs[0]["uploaded_bytes"] == runs[1]["uploaded_bytes"]
    assert runs[0]["uploaded_bytes"] > 0
