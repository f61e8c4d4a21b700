import math

import numpy as np
import pytest

from ssbrpe import rir
from ssbrpe.errors import DomainError, EnergyError, InsufficientDecayError, SamplingError


def test_room_validation():
    with pytest.raises(DomainError):
        rir.ShoeboxRoom.uniform((5, -1, 3), 0.3)
    with pytest.raises(DomainError):
        rir.ShoeboxRoom.uniform((5, 4, 3), 1.0)


def test_sabine_hand_value():
    room = rir.ShoeboxRoom.uniform((5, 4, 3), 0.3)
    # V = 60, S = 94
    assert rir.sabine_rt60(room) == pytest.approx(0.161 * 60 / (0.3 * 94))


def test_sabine_rejects_tiny_absorption():
    room = rir.ShoeboxRoom.uniform((5, 4, 3), 0.005)
    with pytest.raises(DomainError):
        rir.sabine_rt60(room)


def test_first_order_image_count_and_positions():
    room = rir.ShoeboxRoom.uniform((5, 4, 3), 0.3)
    src = (1.0, 1.5, 1.2)
    pos, gains, orders = rir.image_sources(room, src, 1)
    assert len(pos) == 7
    expected = {src, (-1.0, 1.5, 1.2), (9.0, 1.5, 1.2), (1.0, -1.5, 1.2), (1.0, 6.5, 1.2),
                (1.0, 1.5, -1.2), (1.0, 1.5, 4.8)}
    got = {tuple(round(float(v), 9) for v in p) for p in pos}
    assert got == expected
    beta = math.sqrt(0.7)
    assert sorted(gains.round(12)) == sorted([1.0] + [round(beta, 12)] * 6)
    assert sorted(orders) == [0] + [1] * 6


@pytest.mark.parametrize("order", [0, 2, 3, 5])
def test_image_count_matches_lattice_formula(order):
    # number of integer points with |a|+|b|+|c| <= N: (2N+1)(2N^2+2N+3)/3
    room = rir.ShoeboxRoom.uniform((5, 4, 3), 0.3)
    pos, _, orders = rir.image_sources(room, (1.0, 1.0, 1.0), order)
    assert len(pos) == (2 * order + 1) * (2 * order ** 2 + 2 * order + 3) // 3
    assert orders.max() == order


def test_direct_path_arrival():
    room = rir.ShoeboxRoom.uniform((6, 5, 4), 0.4)
    src, rcv = (1.0, 1.0, 1.0), (4.0, 2.0, 2.5)
    h = rir.image_source_rir(room, src, rcv, max_order=0).samples
    d = math.dist(src, rcv)
    peak = int(np.argmax(np.abs(h)))
    assert abs(peak - d / 343.0 * 16000) <= 1
    # windowed sinc of a unit impulse sums to ~1 so the area equals 1/(4 pi d)
    assert h.sum() == pytest.approx(1.0 / (4 * math.pi * d), rel=1e-2)


def test_rir_rejects_outside_positions():
    room = rir.ShoeboxRoom.uniform((5, 4, 3), 0.3)
    with pytest.raises(DomainError):
        rir.image_source_rir(room, (6.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    with pytest.raises(DomainError):
        rir.image_source_rir(room, (1.0, 1.0, 1.0), (1.0, 1.0, 1.0))


def test_adaptive_order_capped():
    small = rir.ShoeboxRoom.uniform((2, 2, 2), 0.1)
    assert rir.adaptive_max_order(small) == 60
    big = rir.ShoeboxRoom.uniform((20, 15, 5), 0.6)
    assert 2 < rir.adaptive_max_order(big) < 60


def test_edc_normalisation_and_floor():
    edc = rir.schroeder_edc(rir.exponential_rir(0.05))
    assert edc.values_db[0] == 0.0
    assert np.all(np.diff(edc.values_db) <= 1e-9)
    assert edc.values_db.min() >= rir.EDC_FLOOR_DB


def test_edc_zero_energy():
    with pytest.raises(EnergyError):
        rir.schroeder_edc(np.zeros(100))
    with pytest.raises(EnergyError):
        rir.schroeder_edc(np.zeros(0))


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.2])
def test_exponential_rt60(tau):
    rt, method = rir.measure_rt60(rir.exponential_rir(tau))
    assert method == "T30"
    assert rt == pytest.approx(6.9078 * tau, rel=1e-3)


def test_t20_on_truncated_curve_and_insufficient_decay():
    # a linear EDC that bottoms out at -30 dB: T30 is impossible, T20 works
    fs = 16000
    t = np.arange(fs) / fs
    db = np.maximum(-60.0 * t / 0.5, -30.0)
    edc = rir.EnergyDecayCurve(db, fs)
    with pytest.raises(InsufficientDecayError):
        rir.estimate_rt60(edc, "T30")
    assert rir.estimate_rt60(edc, "T20") == pytest.approx(0.5, rel=1e-3)
    with pytest.raises(InsufficientDecayError):
        rir.estimate_rt60(rir.EnergyDecayCurve(np.maximum(db, -20.0), fs), "T20")


def test_sample_room_ranges():
    cfg = rir.RoomSamplingConfig()
    rng = np.random.default_rng(0)
    for _ in range(50):
        room, src, rcv = rir.sample_room(rng, cfg)
        assert 12.0 <= room.volume <= 21000.0 * (1 + 1e-9)
        for p in (src, rcv):
            assert all(cfg.min_clearance <= c <= d - cfg.min_clearance for c, d in zip(p, room.dims))
        assert math.dist(src, rcv) >= cfg.min_separation
        assert 0.1 <= room.absorption[0] <= 0.6


def test_sample_room_infeasible():
    cfg = rir.RoomSamplingConfig(volume_range=(1.0, 1.0), max_retries=5)
    with pytest.raises(SamplingError):
        rir.sample_room(np.random.default_rng(0), cfg)


def test_labeled_rir_is_deterministic():
    room = rir.ShoeboxRoom.uniform((4, 3, 2.5), 0.4)
    a = rir.labeled_rir(room, (1, 1, 1), (3, 2, 1.5), "r0")
    b = rir.labeled_rir(room, (1, 1, 1), (3, 2, 1.5), "r0")
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.rt60_s == b.rt60_s and a.rt60_method in ("T30", "T20")
    assert a.volume_m3 == pytest.approx(30.0)


def test_degenerate_volume_range_gives_exact_volume():
    cfg = rir.RoomSamplingConfig(volume_range=(60.0, 60.0), aspect_x_range=(1.0, 1.0), aspect_y_range=(1.0, 1.0))
    room, _, _ = rir.sample_room(np.random.default_rng(0), cfg)
    assert room.volume == pytest.approx(60.0, abs=1e-6)


def test_log_uniform_volume_median():
    rng = np.random.default_rng(1)
    vols = [rir.sample_room(rng)[0].volume for _ in range(1000)]
    assert min(vols) >= 12.0 and max(vols) <= 21000.0 * (1 + 1e-9)
    mid = 0.5 * (np.log10(12.0) + np.log10(21000.0))
    assert abs(np.median(np.log10(vols)) - mid) < 0.1


def test_direct_path_peak_sample():
    room = rir.ShoeboxRoom.uniform((8, 6, 4), 0.3)
    h = rir.image_source_rir(room, (2.0, 3.0, 2.0), (5.43, 3.0, 2.0), max_order=0).samples
    assert int(np.argmax(np.abs(h))) == 160


def test_edc_of_impulse_hits_floor():
    h = np.zeros(100)
    h[0] = 1.0
    edc = rir.schroeder_edc(h).values_db
    assert edc[0] == 0.0 and np.all(edc[1:] == -120.0)


def test_edc_slope_of_exponential():
    tau = 0.1
    edc = rir.schroeder_edc(rir.exponential_rir(tau))
    seg = (edc.values_db < -5) & (edc.values_db > -35)
    slope = np.polyfit(edc.times[seg], edc.values_db[seg], 1)[0]
    # energy decays as exp(-2t/tau) for amplitude exp(-t/tau)
    assert slope == pytest.approx(-(20 / np.log(10)) / tau, rel=1e-2)


def test_trailing_zeros_do_not_move_fit_region():
    h = rir.exponential_rir(0.05)
    a = rir.measure_rt60(h)[0]
    b = rir.measure_rt60(np.r_[h, np.zeros(16000)])[0]
    assert a == pytest.approx(b, rel=1e-9)


def test_rt60_gain_invariant():
    h = rir.exponential_rir(0.1)
    assert rir.measure_rt60(10 * h)[0] == pytest.approx(rir.measure_rt60(h)[0], abs=1e-9)


def test_sabine_formula_cases():
    assert rir.sabine_rt60(rir.ShoeboxRoom.uniform((5, 4, 3), 0.3)) == pytest.approx(0.3426, abs=1e-4)
    assert rir.sabine_rt60(rir.ShoeboxRoom.uniform((1, 1, 1), 0.5)) == pytest.approx(0.05367, abs=1e-5)
    a = rir.sabine_rt60(rir.ShoeboxRoom.uniform((5, 4, 3), 0.2))
    b = rir.sabine_rt60(rir.ShoeboxRoom.uniform((5, 4, 3), 0.4))
    assert b == pytest.approx(a / 2)
