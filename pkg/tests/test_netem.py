import json
import math

import numpy as np
import pytest

from edgeloop import netem
from edgeloop.netem import (DirectionModel, NetProfile, LOST,
                            sample_delivery_time, load_profile, save_profile)


def rng(seed=1):
    return np.random.default_rng(seed)


def test_ideal_profile_is_near_identity():
    model = netem.PROFILES["ideal"].uplink
    t = sample_delivery_time(model, 50_000, 10.0, rng())
    assert t == pytest.approx(10.0, abs=1e-3)


def test_deterministic_delay_arithmetic():
    model = DirectionModel(base_delay_ms=10.0, jitter_std_ms=0.0,
                           rate_mbps=100.0, loss_prob=0.0)
    t = sample_delivery_time(model, 50_000, 0.0, rng())
    assert t == pytest.approx(0.014, abs=1e-9)  # 10 ms + 400000 bits / 100 Mbps


def test_wifi_uplink_mean_monte_carlo():
    model = netem.PROFILES["wifi-5ghz"].uplink
    g = rng(99)
    samples = [sample_delivery_time(model, 50_041, 0.0, g) for _ in range(10_000)]
    delays = [s * 1e3 for s in samples if s is not LOST]
    mean = sum(delays) / len(delays)
    # base 9.0 + 50041*8/120e6 = 12.34 ms
    assert mean == pytest.approx(12.34, abs=0.15)


def test_loss_probability_applied():
    model = DirectionModel(1.0, 0.0, 100.0, 0.5)
    g = rng(5)
    lost = sum(1 for _ in range(10_000)
               if sample_delivery_time(model, 100, 0.0, g) is LOST)
    assert 4_700 < lost < 5_300


def test_fifo_clamp():
    model = DirectionModel(base_delay_ms=0.0, jitter_std_ms=50.0,
                           rate_mbps=1000.0, loss_prob=0.0)
    g = rng(3)
    prev = float("-inf")
    deliveries = []
    for i in range(500):
        d = sample_delivery_time(model, 100, i * 0.001, g, prev)
        prev = d
        deliveries.append(d)
    assert deliveries == sorted(deliveries)


def test_negative_jitter_truncated_at_zero_delay():
    model = DirectionModel(base_delay_ms=0.1, jitter_std_ms=100.0,
                           rate_mbps=1e6, loss_prob=0.0)
    g = rng(7)
    for i in range(200):
        d = sample_delivery_time(model, 100, 5.0, g)
        assert d >= 5.0


def test_same_seed_same_decisions():
    model = DirectionModel(5.0, 2.0, 50.0, 0.1)
    ga, gb = rng(42), rng(42)
    a = [sample_delivery_time(model, 1000, 0.0, ga) for _ in range(1000)]
    b = [sample_delivery_time(model, 1000, 0.0, gb) for _ in range(1000)]
    assert all((x is LOST and y is LOST) or x == y for x, y in zip(a, b))


def test_zero_bytes_rejected():
    with pytest.raises(ValueError):
        sample_delivery_time(DirectionModel(0, 0, 1, 0), 0, 0.0, rng())


def test_model_validation():
    with pytest.raises(ValueError):
        DirectionModel(-1, 0, 1, 0).validate()
    with pytest.raises(ValueError):
        DirectionModel(0, 0, 0, 0).validate()
    with pytest.raises(ValueError):
        DirectionModel(0, 0, 1, 1.0).validate()


def test_profile_file_roundtrip(tmp_path):
    profile = NetProfile("custom", DirectionModel(1, 2, 30, 0.01),
                         DirectionModel(4, 5, 60, 0.02), seed=77)
    path = tmp_path / "profile.json"
    save_profile(profile, path)
    loaded = load_profile(str(path))
    assert loaded == profile


def test_builtin_profiles_resolve():
    for name in ("ideal", "wifi-5ghz", "5g-n77"):
        prof = load_profile(name)
        assert prof.name == name
    prof = load_profile("wifi-5ghz", seed=9)
    assert prof.seed == 9


def test_unknown_profile_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_profile(str(tmp_path / "nope.json"))
