import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from ssbrpe import features as fx
from ssbrpe.errors import DataError, DimensionError

from helpers import brute_force_windows

CFG = fx.FeatureConfig()


def test_default_geometry():
    assert CFG.frame_len == 400 and CFG.hop == 160
    assert CFG.n_phase == 33 and CFG.n_rows == 97
    assert CFG.n_frames(64000) == 398
    assert CFG.n_frames(160000) == 998


def test_erb_rate_roundtrip_and_known_value():
    f = np.array([50.0, 1000.0, 8000.0])
    np.testing.assert_allclose(fx.inverse_erb_rate(fx.erb_rate(f)), f, rtol=1e-12)
    assert fx.erb_rate(1000.0) == pytest.approx(21.4 * np.log10(5.37))


def test_center_frequencies_equally_spaced_on_erb_scale():
    cf = fx.erb_center_frequencies(64, 50.0, 8000.0)
    assert cf[0] == 50.0 and cf[-1] == 8000.0
    steps = np.diff(fx.erb_rate(cf))
    np.testing.assert_allclose(steps, steps[0], rtol=1e-9)


def test_center_frequency_validation():
    with pytest.raises(ValueError):
        fx.erb_center_frequencies(64, 50.0, 9000.0)


def test_gammatone_unity_gain_at_center():
    for cf in (100.0, 1000.0, 5000.0):
        sos = fx.gammatone_sos(cf, 16000)
        _, h = signal.sosfreqz(sos, worN=[cf], fs=16000)
        assert abs(h[0]) == pytest.approx(1.0, rel=1e-9)


def test_gammatone_peak_at_center():
    for cf in (200.0, 2000.0, 7000.0):
        w, h = signal.sosfreqz(fx.gammatone_sos(cf, 16000), worN=16000, fs=16000)
        assert abs(w[np.argmax(np.abs(h))] - cf) <= 1.0


def test_channel_selectivity_for_pure_tones():
    cfs = fx.erb_center_frequencies(64, 50.0, 8000.0)
    t = np.arange(16000) / 16000
    for k in (5, 20, 40, 60):
        g = fx.gammatone_spectrogram(np.sin(2 * np.pi * cfs[k] * t))
        energy = g[:, 20:-20].mean(axis=1)
        assert int(np.argmax(energy)) == k


def test_gammatone_log_floor_on_silence():
    g = fx.gammatone_spectrogram(np.zeros(4000))
    np.testing.assert_allclose(g, -10.0)


def test_phase_range_and_shape():
    x = np.random.default_rng(0).standard_normal(64000)
    p = fx.lowfreq_phase_spectrogram(x)
    assert p.shape == (33, 398)
    assert np.all(p >= -np.pi) and np.all(p <= np.pi)


def test_phase_of_cosine_at_bin_center():
    # A cosine sitting exactly on bin 16. Window k starts at sample
    # 160 k + 200 - 512 (centred on frame k), and an on-bin cosine's DFT phase
    # equals its phase at the window start.
    fs, nfft = 16000, 1024
    freq = 16 * fs / nfft
    n = np.arange(8000)
    x = np.cos(2 * np.pi * freq * (n - 200) / fs)
    p = fx.lowfreq_phase_spectrogram(x)
    k = np.arange(5, 20)
    expected = 2 * np.pi * freq * (160 * k - 512) / fs
    np.testing.assert_allclose(np.cos(p[16, k] - expected), 1.0, atol=1e-6)


def test_short_clip_rejected():
    with pytest.raises(DataError):
        fx.extract_features(np.zeros(100))


def test_extract_features_shape_and_row_map():
    block = fx.extract_features(np.random.default_rng(0).standard_normal(64000))
    assert block.shape == (97, 398)
    assert block.values.dtype == np.float32
    assert block.row_map[0]["kind"] == "gammatone" and block.row_map[64]["kind"] == "phase"
    assert block.row_map[96]["hz"] == pytest.approx(32 * 15.625)


def test_normalization_moments_and_guard():
    rng = np.random.default_rng(0)
    blocks = [fx.extract_features(rng.standard_normal(16000)) for _ in range(3)]
    stats = fx.RowStats.fit([b.values[:64] for b in blocks])
    normed = [fx.normalize_block(b, stats) for b in blocks]
    g = np.concatenate([n.values[:64].astype(np.float64) for n in normed], axis=1)
    np.testing.assert_allclose(g.mean(axis=1), 0.0, atol=1e-4)
    np.testing.assert_allclose(g.std(axis=1), 1.0, atol=1e-4)
    # phase rows untouched
    assert normed[0].values[64:].tobytes() == blocks[0].values[64:].tobytes()
    with pytest.raises(DataError):
        fx.normalize_block(normed[0], stats)


def test_sigma_floor_on_constant_rows():
    block = fx.assemble_feature_block(np.ones((64, 10)), np.zeros((33, 10)))
    stats = fx.RowStats(np.ones(64), np.zeros(64))
    out = fx.normalize_block(block, stats)
    assert np.all(np.isfinite(out.values)) and np.all(out.values[:64] == 0)


def test_row_stats_roundtrip():
    s = fx.RowStats(np.arange(3.0), np.ones(3))
    back = fx.RowStats.from_dict(s.to_dict())
    assert np.array_equal(back.mean, s.mean) and np.array_equal(back.std, s.std)


def test_feature_block_file_roundtrip(tmp_path):
    block = fx.extract_features(np.random.default_rng(1).standard_normal(8000))
    fx.write_feature_block(tmp_path / "b.ssbf", block)
    back = fx.read_feature_block(tmp_path / "b.ssbf")
    assert back.values.tobytes() == block.values.tobytes()
    assert back.row_map == block.row_map and back.n_gamma == 64 and back.n_phase == 33
    (tmp_path / "bad.ssbf").write_bytes(b"XXXX")
    with pytest.raises(DataError):
        fx.read_feature_block(tmp_path / "bad.ssbf")


def test_fingerprint_changes_with_config():
    assert CFG.fingerprint() == fx.FeatureConfig().fingerprint()
    assert CFG.fingerprint() != fx.FeatureConfig(nfft=512).fingerprint()


def test_patch_counts_for_clip_lengths():
    assert fx.grid_for((97, 998), "pretrain").n_patches == 7 * 63
    assert fx.grid_for((97, 398), "finetune").n_patches == 10 * 40


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 80), st.integers(1, 120), st.integers(0, 2**31 - 1))
def test_nonoverlap_roundtrip_is_lossless(f, t, seed):
    x = np.random.default_rng(seed).standard_normal((f, t)).astype(np.float32)
    ps = fx.patchify(x, "pretrain")
    assert ps.patches.shape == (ps.grid.n_patches, 256)
    assert fx.unpatchify(ps, crop=True).tobytes() == x.tobytes()


def test_stride10_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        f, t = int(rng.integers(1, 60)), int(rng.integers(1, 90))
        x = rng.standard_normal((f, t)).astype(np.float32)
        ps = fx.patchify(x, "finetune")
        ref = brute_force_windows(x, 10)
        assert ps.patches.shape == ref.shape
        assert ps.patches.tobytes() == ref.tobytes()
        assert fx.unpatchify(ps, crop=True).tobytes() == x.tobytes()


def test_patch_order_is_frequency_major():
    x = np.arange(32 * 48, dtype=np.float32).reshape(32, 48)
    ps = fx.patchify(x, "pretrain")
    assert ps.grid.rows == 2 and ps.grid.cols == 3
    assert ps.patches[1][0] == x[0, 16]
    assert ps.patches[3][0] == x[16, 0]


def test_patchify_errors():
    with pytest.raises(ValueError):
        fx.grid_for((16, 16), "sideways")
    with pytest.raises(DimensionError):
        fx.patchify_batch(np.zeros((16, 16)), "pretrain")


def test_silent_input_has_zero_phase():
    phase = fx.lowfreq_phase_spectrogram(np.zeros(16000))
    assert np.all(phase == 0.0)


@pytest.mark.parametrize("mode,expected", [("pretrain", 24), ("finetune", 54)])
def test_grid_counts_for_small_block(mode, expected):
    # 64 rows pad to 66 at stride 10; 96 columns already satisfy (96 - 16) % 10 == 0
    block = np.random.default_rng(0).standard_normal((1, 64, 96))
    patches, grid = fx.patchify_batch(block, mode)
    assert patches.shape == (1, expected, 256) and grid.n_patches == expected
    ref = brute_force_windows(block[0], grid.stride)
    np.testing.assert_array_equal(patches[0], ref)
