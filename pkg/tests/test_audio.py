"""Frontend tests: WAV round trips, framing arithmetic, FFT vs naive DFT,
mel filterbank geometry, and log-energy behavior."""

import numpy as np
import pytest

from drvec import audio
from drvec.audio import (FeatureSequence, PcmSignal, build_mel_filterbank,
                         frame_signal, hz_to_mel, log_fbank, parse_fbk,
                         parse_wav, rfft, write_fbk, write_wav)
from drvec.errors import ConfigError, DataError, FormatError


def _naive_dft(x):
    """O(n^2) reference DFT, half spectrum."""
    n = len(x)
    bins = n // 2 + 1
    out = np.zeros(bins, dtype=complex)
    for k in range(bins):
        for t in range(n):
            out[k] += x[t] * np.exp(-2j * np.pi * k * t / n)
    return out


def _wav_bytes(samples_i16, rate=16000):
    import struct
    payload = np.asarray(samples_i16, dtype="<i2").tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
                         b"fmt ", 16, 1, 1, rate, rate * 2, 2, 16, b"data", len(payload))
    return header + payload


class TestWav:
    def test_minimal_file_with_zero_samples(self):
        sig = parse_wav(_wav_bytes([0, 0, 0, 0]))
        assert sig.sample_rate == 16000
        np.testing.assert_array_equal(sig.samples, np.zeros(4))

    def test_full_scale_negative_sample(self):
        sig = parse_wav(_wav_bytes([-32768]))
        assert sig.samples[0] == -1.0

    def test_round_trip_bit_identical(self):
        # samples already on the int16 grid survive quantization exactly
        rng = np.random.default_rng(0)
        grid = rng.integers(-32768, 32768, size=400).astype(np.float64) / 32768.0
        sig = PcmSignal(grid, 16000)
        back = parse_wav(write_wav(sig))
        np.testing.assert_array_equal(back.samples, sig.samples)
        assert back.sample_rate == sig.sample_rate

    def test_rejects_non_pcm_codec(self):
        import struct
        data = bytearray(_wav_bytes([0]))
        struct.pack_into("<H", data, 20, 3)  # IEEE float codec
        with pytest.raises(FormatError, match="audio_format"):
            parse_wav(bytes(data))

    def test_rejects_stereo(self):
        import struct
        data = bytearray(_wav_bytes([0, 0]))
        struct.pack_into("<H", data, 22, 2)
        with pytest.raises(FormatError, match="num_channels"):
            parse_wav(bytes(data))

    def test_rejects_truncated_data_chunk(self):
        data = _wav_bytes([1, 2, 3, 4])
        with pytest.raises(FormatError, match="truncated"):
            parse_wav(data[:-3])

    def test_rejects_missing_fmt(self):
        raw = _wav_bytes([0])
        # drop the fmt chunk (24 bytes starting at offset 12)
        broken = raw[:12] + raw[36:]
        with pytest.raises(FormatError, match="fmt"):
            parse_wav(broken)

    def test_skips_unknown_chunks(self):
        import struct
        raw = _wav_bytes([100, -100])
        extra = b"LIST" + struct.pack("<I", 4) + b"info"
        data = raw[:12] + extra + raw[12:]
        sig = parse_wav(data)
        assert sig.samples.size == 2

    def test_out_of_range_samples_rejected(self):
        with pytest.raises(DataError):
            PcmSignal(np.array([1.5]), 16000)


class TestFraming:
    def test_one_second_at_16k(self):
        sig = PcmSignal(np.zeros(16000), 16000)
        assert frame_signal(sig).shape == (98, 400)

    def test_exactly_one_frame(self):
        sig = PcmSignal(np.zeros(400), 16000)
        assert frame_signal(sig).shape[0] == 1

    def test_below_one_frame(self):
        sig = PcmSignal(np.zeros(399), 16000)
        assert frame_signal(sig).shape[0] == 0

    def test_count_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(42)
        for n in rng.integers(0, 8000, size=500):
            sig = PcmSignal(np.zeros(int(n)), 16000)
            # oracle: count positions where a full 400-sample window fits
            count = sum(1 for start in range(0, int(n), 160) if start + 400 <= n)
            assert frame_signal(sig).shape[0] == count

    def test_frame_contents_are_strided_views_of_signal(self):
        rng = np.random.default_rng(1)
        samples = rng.uniform(-1, 1, 900)
        frames = frame_signal(PcmSignal(samples, 16000))
        np.testing.assert_array_equal(frames[0], samples[0:400])
        np.testing.assert_array_equal(frames[3], samples[480:880])

    def test_trailing_samples_without_new_frame_do_not_change_features(self):
        rng = np.random.default_rng(2)
        samples = rng.uniform(-0.5, 0.5, 720)
        f1 = log_fbank(PcmSignal(samples, 16000))
        f2 = log_fbank(PcmSignal(np.concatenate([samples, rng.uniform(-0.5, 0.5, 100)]), 16000))
        assert f1.num_frames == f2.num_frames == 3
        np.testing.assert_array_equal(f1.frames, f2.frames)


class TestRfft:
    def test_zero_frame(self):
        np.testing.assert_array_equal(rfft(np.zeros(64), 64), np.zeros(33, dtype=complex))

    def test_dc_bin_for_constant_frame(self):
        out = rfft(np.full(128, 0.25), 128)
        assert abs(out[0] - 0.25 * 128) < 1e-9
        np.testing.assert_allclose(out[1:], 0.0, atol=1e-9)

    @pytest.mark.parametrize("n", [8, 64, 256, 1024])
    def test_matches_naive_dft(self, n):
        rng = np.random.default_rng(n)
        x = rng.standard_normal(n)
        np.testing.assert_allclose(rfft(x, n), _naive_dft(x), atol=1e-8)

    def test_zero_padding_matches_padded_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(100)
        padded = np.concatenate([x, np.zeros(28)])
        np.testing.assert_allclose(rfft(x, 128), _naive_dft(padded), atol=1e-8)

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ConfigError):
            rfft(np.zeros(100), 100)


class TestMelFilterbank:
    def test_mel_scale_at_zero(self):
        assert hz_to_mel(0.0) == 0.0

    def test_mel_scale_at_700(self):
        np.testing.assert_allclose(hz_to_mel(700.0), 2595.0 * np.log10(2.0))
        assert abs(hz_to_mel(700.0) - 781.17) < 0.01

    def test_centers_increasing_within_band(self):
        fb = build_mel_filterbank(16000, 512)
        assert np.all(np.diff(fb.center_freqs_hz) > 0)
        assert fb.center_freqs_hz[0] > 125.0
        assert fb.center_freqs_hz[-1] < 3800.0

    def test_weights_nonnegative_triangular(self):
        fb = build_mel_filterbank(16000, 512)
        assert np.all(fb.weights >= 0)
        for row in fb.weights:
            nz = np.nonzero(row)[0]
            assert nz.size >= 1
            peak = np.argmax(row)
            assert np.all(np.diff(row[nz[0]:peak + 1]) >= 0)
            assert np.all(np.diff(row[peak:nz[-1] + 1]) <= 0)

    def test_rejects_fmax_above_nyquist(self):
        with pytest.raises(ConfigError):
            build_mel_filterbank(16000, 512, fmax=9000)


class TestLogFbank:
    def test_silence_hits_energy_floor(self):
        feats = log_fbank(PcmSignal(np.zeros(16000), 16000))
        np.testing.assert_array_equal(feats.frames, np.full((98, 40), np.log(1e-10)))

    def test_tone_peaks_in_filter_containing_its_frequency(self):
        rate = 16000
        t = np.arange(rate) / rate
        sig = PcmSignal(0.5 * np.sin(2 * np.pi * 1000.0 * t), rate)
        feats = log_fbank(sig)
        fb = build_mel_filterbank(rate, 512)
        mel_edges = np.linspace(hz_to_mel(125.0), hz_to_mel(3800.0), 42)
        band_lo, band_hi = audio.mel_to_hz(mel_edges[:-2]), audio.mel_to_hz(mel_edges[2:])
        for frame in feats.frames:
            peak_filter = int(np.argmax(frame))
            assert band_lo[peak_filter] <= 1000.0 <= band_hi[peak_filter]

    def test_amplitude_doubling_shifts_by_log4(self):
        rate = 16000
        rng = np.random.default_rng(3)
        samples = 0.25 * rng.uniform(-1, 1, 8000)
        f1 = log_fbank(PcmSignal(samples, rate)).frames
        f2 = log_fbank(PcmSignal(2.0 * samples, rate)).frames
        above = f1 > np.log(1e-10) + 1.5  # comfortably above the floor
        np.testing.assert_allclose((f2 - f1)[above], np.log(4.0), atol=1e-9)

    def test_feature_dim_is_40(self):
        feats = log_fbank(PcmSignal(np.zeros(800), 16000))
        assert feats.dim == 40


class TestFbkFormat:
    def test_round_trip(self):
        rng = np.random.default_rng(9)
        feats = FeatureSequence(rng.standard_normal((17, 40)).astype(np.float32))
        back = parse_fbk(write_fbk(feats))
        np.testing.assert_array_equal(back.frames, feats.frames)

    def test_rejects_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            parse_fbk(b"NOPE" + b"\0" * 20)

    def test_rejects_size_mismatch(self):
        feats = FeatureSequence(np.zeros((3, 40), dtype=np.float32))
        data = write_fbk(feats)
        with pytest.raises(FormatError, match="payload"):
            parse_fbk(data[:-4])
