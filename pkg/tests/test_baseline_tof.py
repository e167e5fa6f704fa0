import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shearnet.baseline_tof import (
    ArrivalMap,
    local_speed,
    modulus_from_speed,
    reconstruct,
    time_to_peak,
)
from shearnet.phantomgen import add_tracking_jitter
from shearnet.wavesim import (
    ARFPush,
    DisplacementSequence,
    ElasticPhantom,
    calibrate_amplitude,
    extract_roi_frames,
    simulate,
)

ROI = (10.0, 0.0, 20.0, 40.0)


def _series(values, rate=1000.0, t0=0.0):
    v = np.asarray(values, dtype=np.float64)
    return DisplacementSequence(v[:, None, None], rate, (1.0, 1.0), t0)


def test_peak_on_a_frame():
    v = np.zeros(9)
    v[4] = 3.0
    v[3] = v[5] = 1.0
    am = time_to_peak(_series(v, rate=2000.0, t0=0.2))
    assert am.time_ms[0, 0] == pytest.approx(0.2 + 4 / 2000 * 1e3, abs=1e-12)
    assert am.valid[0, 0]


@settings(max_examples=100)
@given(st.floats(1.05, 7.95), st.floats(0.5, 40.0), st.floats(0.01, 5.0))
def test_parabolic_refinement_recovers_subframe_peak(peak, height, width):
    k = np.arange(10, dtype=float)
    v = height - width * (k - peak) ** 2
    am = time_to_peak(_series(v, rate=1000.0), min_peak_um=-np.inf)
    assert am.time_ms[0, 0] == pytest.approx(peak, abs=1e-3)


def test_all_zero_pixel_is_invalid():
    am = time_to_peak(_series(np.zeros(6)))
    assert not am.valid[0, 0] and math.isnan(am.time_ms[0, 0])
    with pytest.raises(ValueError, match="3 frames"):
        time_to_peak(_series(np.ones(2)))


def _plane(c, shape=(10, 24), spacing=(0.5, 0.5), distance="lateral"):
    h, w = shape
    xs = (np.arange(w) + 0.5) * spacing[1]
    zs = (np.arange(h) + 0.5) * spacing[0]
    x0, z0 = w * spacing[1] / 2, h * spacing[0] / 2
    if distance == "lateral":
        r = np.broadcast_to(np.abs(xs - x0)[None], shape)
    else:
        r = np.hypot(xs[None] - x0, zs[:, None] - z0)
    t = 1.0 + r / c  # ms, since mm / (m/s) = ms
    return ArrivalMap(t.copy(), np.ones(shape, bool), np.ones(shape), spacing)


@pytest.mark.parametrize("distance", ["lateral", "radial"])
def test_exact_arrival_plane_gives_exact_speed(distance):
    c = 3.1623
    speed = local_speed(_plane(c, distance=distance), 4, distance=distance)
    assert np.all(np.isfinite(speed))
    assert np.allclose(speed, c, rtol=1e-10)


def test_flat_arrival_is_invalid():
    am = _plane(3.0)
    am.time_ms[:] = 2.0
    assert np.all(np.isnan(local_speed(am, 3, distance="lateral")))
    with pytest.raises(ValueError):
        local_speed(am, 0)


def test_speed_sd_decreases_with_window():
    rng = np.random.default_rng(0)
    sds = {2: [], 4: [], 8: []}
    for _ in range(20):
        am = _plane(3.0, shape=(20, 48), distance="lateral")
        am.time_ms += rng.normal(0, 0.05, am.time_ms.shape)
        for hw in sds:
            s = local_speed(am, hw, distance="lateral")
            sds[hw].append(np.nanstd(s))
    means = [np.mean(sds[hw]) for hw in (2, 4, 8)]
    assert means[0] > means[1] > means[2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
def test_invalid_pixels_propagate(seed, hw):
    rng = np.random.default_rng(seed)
    am = _plane(4.0, shape=(6, 20))
    am.valid = rng.random(am.valid.shape) > 0.2
    am.time_ms = np.where(am.valid, am.time_ms, np.nan)
    speed = local_speed(am, hw)
    w = speed.shape[1]
    side = np.sign((np.arange(w) + 0.5) - w / 2)
    for i, j in zip(*np.nonzero(np.isfinite(speed))):
        cols = [k for k in range(max(0, j - hw), min(w, j + hw + 1)) if side[k] == side[j]]
        assert am.valid[i, cols].all()


def test_modulus_from_speed_examples():
    assert modulus_from_speed(3.1623) == pytest.approx(10.0, rel=1e-4)
    assert modulus_from_speed(4.4721) == pytest.approx(20.0, rel=1e-4)
    assert modulus_from_speed(0.0) == 0.0
    assert math.isnan(modulus_from_speed(np.nan))
    assert modulus_from_speed(2.0, rho=1500) == 6.0


def _homogeneous_seq(mu_pa):
    ph = ElasticPhantom.homogeneous(mu_pa)
    push = ARFPush()
    wave = simulate(ph, push, total_time_ms=9.0)
    seq = extract_roi_frames(wave, ROI)
    return calibrate_amplitude(seq, push)[0]


@pytest.fixture(scope="module")
def homogeneous_seqs():
    return {mu: _homogeneous_seq(mu * 1e3) for mu in (10, 20, 40)}


def test_homogeneous_median_speed(homogeneous_seqs):
    res = reconstruct(homogeneous_seqs[10])
    assert abs(np.nanmedian(res.speed) / math.sqrt(10) - 1) < 0.05


@pytest.mark.parametrize("mu", [10, 20, 40])
def test_homogeneous_median_modulus(homogeneous_seqs, mu):
    res = reconstruct(homogeneous_seqs[mu])
    assert res.valid.mean() > 0.5
    assert abs(np.median(res.modulus_kpa[res.valid]) / mu - 1) < 0.10
    assert np.all(res.filled_kpa[~res.valid] == np.median(res.modulus_kpa[res.valid]))


def test_reconstruction_mse_grows_with_jitter(homogeneous_seqs):
    seq = homogeneous_seqs[20]
    mse = []
    for sd in (0.0, 0.1, 0.5, 1.0):
        vals = []
        for seed in range(3):
            noisy = add_tracking_jitter(seq, sd, np.random.default_rng(seed))
            vals.append(np.mean((reconstruct(noisy).filled_kpa - 20.0) ** 2))
        mse.append(np.mean(vals))
    assert all(a <= b for a, b in zip(mse, mse[1:])), mse


def test_nothing_valid_fills_with_zero():
    seq = DisplacementSequence(np.zeros((5, 8, 8)), 1000.0, (0.5, 0.5))
    res = reconstruct(seq)
    assert not res.valid.any() and np.all(res.filled_kpa == 0)
