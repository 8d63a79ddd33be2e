import numpy as np
import pytest

from melodygen import signal as sig
from melodygen.errors import FormatError, ValidationError
from melodygen.melody_codec import BIN_SECONDS, MelodyTriplet, MelodyTripletSeq, bin_duration


def sine(freq, seconds=1.0, sr=16000, amp=1.0):
    t = np.arange(int(seconds * sr)) / sr
    return sig.Waveform(amp * np.sin(2 * np.pi * freq * t), sample_rate=sr)


class TestMelSpectrogram:
    def test_440hz_argmax_is_nearest_center(self):
        m = sig.mel_spectrogram(sine(440.0), n_mels=64)
        _, centers = sig.mel_filterbank(64, 1024, 16000, 0.0, 8000.0)
        expected_bin = int(np.argmin(np.abs(centers - 440.0)))
        argmax = np.argmax(m.values, axis=1)
        assert np.all(argmax == expected_bin)

    def test_all_zero_waveform_hits_floor(self):
        m = sig.mel_spectrogram(sig.Waveform(np.zeros(4000)))
        assert np.all(m.values == sig.DB_FLOOR)

    def test_doubling_amplitude_adds_6db(self):
        quiet = sig.mel_spectrogram(sine(440.0, amp=0.25))
        loud = sig.mel_spectrogram(sine(440.0, amp=0.5))
        above = quiet.values > sig.DB_FLOOR + 12.0  # stay clear of the clamp
        diff = loud.values[above] - quiet.values[above]
        assert np.allclose(diff, 20 * np.log10(2), atol=0.05)

    def test_too_short_input(self):
        with pytest.raises(ValidationError):
            sig.mel_spectrogram(sig.Waveform(np.zeros(100)), n_fft=1024)

    def test_bad_hop(self):
        with pytest.raises(ValidationError):
            sig.mel_spectrogram(sig.Waveform(np.zeros(4000)), hop=0)

    def test_frame_count(self):
        m = sig.mel_spectrogram(sig.Waveform(np.zeros(1024 + 256 * 9)))
        assert m.n_frames == 10

    def test_filterbank_rows_positive_and_triangular(self):
        fb, centers = sig.mel_filterbank(64, 1024, 16000, 0.0, 8000.0)
        assert fb.shape == (64, 513)
        assert np.all(fb.sum(axis=1) > 0)
        assert np.all(fb >= 0)
        fft_freqs = np.linspace(0, 8000, 513)
        mel_pts = sig.mel_to_hz(np.linspace(sig.hz_to_mel(0.0), sig.hz_to_mel(8000.0), 66))
        for m_i in (0, 31, 63):
            outside = (fft_freqs < mel_pts[m_i]) | (fft_freqs > mel_pts[m_i + 2])
            assert np.all(fb[m_i][outside] == 0)


class TestSynthesizeMelody:
    def test_a4_sine_duration_and_frequency(self):
        seq = MelodyTripletSeq((MelodyTriplet("A4", bin_duration(0.5), 0),))
        w = sig.synthesize_melody(seq, (1.0,), 16000)
        target = bin_duration(0.5) * BIN_SECONDS
        assert abs(len(w.samples) / 16000 - target) <= 1 / 16000 + 1e-9
        spec = np.abs(np.fft.rfft(w.samples))
        freqs = np.fft.rfftfreq(len(w.samples), 1 / 16000)
        assert abs(freqs[np.argmax(spec)] - 440.0) <= freqs[1]

    def test_rest_bins_are_exact_zeros(self):
        seq = MelodyTripletSeq((
            MelodyTriplet("C4", 40, 40),
            MelodyTriplet("E4", 40, 0),
        ))
        w = sig.synthesize_melody(seq)
        start = round(40 * BIN_SECONDS * 16000)
        end = round(80 * BIN_SECONDS * 16000)
        assert np.all(w.samples[start:end] == 0.0)

    def test_tone_segments_hit_equal_temperament_freqs(self):
        seq = MelodyTripletSeq((
            MelodyTriplet("C4", 60, 0),
            MelodyTriplet("G4", 60, 0),
        ))
        sr = 16000
        w = sig.synthesize_melody(seq, (1.0,), sr)
        seg = round(60 * BIN_SECONDS * sr)
        for i, expected in enumerate((261.6256, 391.9954)):
            chunk = w.samples[i * seg:(i + 1) * seg]
            spec = np.abs(np.fft.rfft(chunk))
            freqs = np.fft.rfftfreq(len(chunk), 1 / sr)
            assert abs(freqs[np.argmax(spec)] - expected) <= freqs[1]

    def test_total_duration_is_bin_sum(self):
        seq = MelodyTripletSeq(tuple(
            MelodyTriplet("C4", d, r) for d, r in [(17, 5), (33, 0), (90, 12)]
        ))
        w = sig.synthesize_melody(seq)
        expected = (17 + 5 + 33 + 0 + 90 + 12) * BIN_SECONDS
        assert abs(len(w.samples) - expected * 16000) <= 1

    def test_peak_normalized(self):
        seq = MelodyTripletSeq((MelodyTriplet("A4", 100, 0),))
        w = sig.synthesize_melody(seq, (0.01,))
        assert np.max(np.abs(w.samples)) == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            sig.synthesize_melody(MelodyTripletSeq(()))


class TestMelToWaveform:
    def test_single_active_bin_is_pure_tone(self):
        fb, centers = sig.mel_filterbank(64, 1024, 16000, 0.0, 8000.0)
        values = np.full((40, 64), sig.DB_FLOOR)
        values[:, 20] = -6.0
        w = sig.mel_to_waveform(sig.MelGrid(values))
        spec = np.abs(np.fft.rfft(w.samples))
        freqs = np.fft.rfftfreq(len(w.samples), 1 / 16000)
        assert abs(freqs[np.argmax(spec)] - centers[20]) <= 2 * freqs[1]

    def test_all_floor_is_silence(self):
        w = sig.mel_to_waveform(sig.MelGrid(np.full((16, 64), sig.DB_FLOOR)))
        assert np.all(w.samples == 0.0)

    def test_roundtrip_recovers_sparse_argmax(self):
        values = np.full((32, 64), sig.DB_FLOOR)
        values[:, 33] = -3.0
        w = sig.mel_to_waveform(sig.MelGrid(values))
        back = sig.mel_spectrogram(w, n_mels=64)
        assert np.all(np.argmax(back.values, axis=1) == 33)

    def test_output_length(self):
        m = sig.MelGrid(np.full((10, 64), sig.DB_FLOOR))
        w = sig.mel_to_waveform(m)
        assert len(w.samples) == 1024 + 256 * 9


class TestWav:
    def test_roundtrip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(3)
        w = sig.Waveform(rng.uniform(-1, 1, 1000))
        path = tmp_path / "x.wav"
        sig.write_wav(path, w)
        back = sig.read_wav(path)
        assert back.sample_rate == 16000
        assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32767

    def test_golden_bytes(self, tmp_path):
        # 3 samples [0, 0.5, -0.5] at 16 kHz: canonical 44-byte header + 6 bytes.
        # Constructed independently here per the RIFF/PCM layout and frozen.
        import struct
        golden = (
            b"RIFF" + struct.pack("<I", 36 + 6) + b"WAVE"
            + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 16000, 32000, 2, 16)
            + b"data" + struct.pack("<I", 6)
            + struct.pack("<hhh", 0, 16384, -16384)
        )
        assert len(golden) == 50
        path = tmp_path / "g.wav"
        sig.write_wav(path, sig.Waveform(np.array([0.0, 0.5, -0.5])))
        assert path.read_bytes() == golden

    def test_truncated_file_reports_header_error(self, tmp_path):
        path = tmp_path / "t.wav"
        sig.write_wav(path, sig.Waveform(np.zeros(100)))
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(FormatError):
            sig.read_wav(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "b.wav"
        path.write_bytes(b"JUNKJUNKJUNKJUNK")
        with pytest.raises(FormatError) as e:
            sig.read_wav(path)
        assert e.value.offset == 0

    def test_unsupported_encoding_reports_chunk(self, tmp_path):
        import struct
        body = (b"RIFF" + struct.pack("<I", 36) + b"WAVE"
                + b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, 16000, 64000, 4, 32)
                + b"data" + struct.pack("<I", 0))
        path = tmp_path / "f32.wav"
        path.write_bytes(body)
        with pytest.raises(FormatError) as e:
            sig.read_wav(path)
        assert "fmt" in str(e.value) and "3" in str(e.value)

    def test_clipping_on_write(self, tmp_path):
        path = tmp_path / "c.wav"
        sig.write_wav(path, sig.Waveform(np.array([2.0, -2.0])))
        back = sig.read_wav(path)
        assert np.allclose(back.samples, [1.0, -1.0])
