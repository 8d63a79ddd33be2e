"""Mel-spectrogram analysis, deterministic tone synthesis, and WAV I/O.

Analysis: Hann-windowed magnitude STFT, scaled so a full-scale sine peaks
near 0 dB, then an HTK-scale triangular mel filterbank and power-dB with a
floor at -80 dB (the package-wide "silence" value).

Synthesis is an additive oscillator bank in both directions: melody triplets
drive harmonic stacks at equal-temperament frequencies, and mel grids are
resynthesized bin-by-bin at the filterbank center frequencies. Neither path
uses randomness.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError
from .melody_codec import BIN_SECONDS, MelodyTripletSeq, parse_pitch

DB_FLOOR = -80.0
_POWER_FLOOR = 10.0 ** (DB_FLOOR / 10.0)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_N_FFT = 1024
DEFAULT_HOP = 256
DEFAULT_N_MELS = 64

_FADE_SECONDS = 0.010


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValidationError("waveform samples must be 1-D")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be > 0, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelGrid:
    """T x F log-power grid (frames x mel bins, dB, floored at -80)."""

    values: np.ndarray
    frame_hop: int = DEFAULT_HOP
    n_fft: int = DEFAULT_N_FFT
    f_min: float = 0.0
    f_max: float = field(default=DEFAULT_SAMPLE_RATE / 2)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValidationError(f"mel grid must be 2-D and non-empty, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("mel grid contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float, f_max: float):
    """Triangular filters on the HTK mel scale.

    Returns (weights, centers_hz): weights is (n_mels, n_fft//2 + 1) with each
    triangle peaking at 1.0 and zero outside its support.
    """
    if n_mels < 1:
        raise ValidationError("n_mels must be >= 1")
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ValidationError(f"need 0 <= f_min < f_max <= sr/2, got [{f_min}, {f_max}]")
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    weights = np.zeros((n_mels, len(fft_freqs)))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        weights[m] = np.clip(np.minimum(up, down), 0.0, None)
    return weights, hz_pts[1:-1]


def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def mel_spectrogram(
    w: Waveform,
    n_mels: int = DEFAULT_N_MELS,
    n_fft: int = DEFAULT_N_FFT,
    hop: int = DEFAULT_HOP,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> MelGrid:
    if hop <= 0:
        raise ValidationError(f"hop must be > 0, got {hop}")
    if len(w.samples) < n_fft:
        raise ValidationError(
            f"waveform has {len(w.samples)} samples, need at least n_fft={n_fft}"
        )
    if f_max is None:
        f_max = w.sample_rate / 2.0
    window = _hann(n_fft)
    scale = window.sum() / 2.0  # full-scale sine -> magnitude ~1 -> ~0 dB
    n_frames = 1 + (len(w.samples) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * window
    power = np.abs(np.fft.rfft(frames, axis=1) / scale) ** 2
    fb, _ = mel_filterbank(n_mels, n_fft, w.sample_rate, f_min, f_max)
    mel_power = power @ fb.T
    values = 10.0 * np.log10(np.maximum(mel_power, _POWER_FLOOR))
    return MelGrid(values, frame_hop=hop, n_fft=n_fft, f_min=f_min, f_max=f_max,
                   sample_rate=w.sample_rate)


def pitch_to_hz(p: int) -> float:
    """Equal temperament, A4 = 440 Hz at MIDI 69."""
    return 440.0 * 2.0 ** ((p - 69) / 12.0)


def synthesize_melody(
    seq: MelodyTripletSeq,
    timbre: list[float] | tuple[float, ...] = (1.0,),
    sr: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Render a triplet sequence as an additive-harmonic tone sequence.

    Each triplet produces duration_bin * (6.3/512) seconds of tone (harmonic
    weights from ``timbre``, 10 ms linear fades) followed by rest_bin bins of
    exact silence. Segment boundaries are placed on the cumulative-time grid,
    so total length is the rounded total duration. The result is
    peak-normalized once at the end (rests stay exactly zero).
    """
    if len(seq) == 0:
        raise ValidationError("cannot synthesize an empty melody")
    timbre = np.asarray(timbre, dtype=np.float64)
    if timbre.ndim != 1 or timbre.size == 0:
        raise ValidationError("timbre must be a non-empty list of harmonic weights")

    events = []  # (start_sample, end_sample, freq) for tones
    t = 0.0
    for trip in seq:
        t_on = t
        t += trip.duration_bin * BIN_SECONDS
        events.append((round(t_on * sr), round(t * sr), pitch_to_hz(parse_pitch(trip.pitch_token))))
        t += trip.rest_bin * BIN_SECONDS
    total = round(t * sr)
    out = np.zeros(max(total, 1))
    fade_n = int(_FADE_SECONDS * sr)
    for start, end, freq in events:
        n = end - start
        if n <= 0:
            continue
        tt = np.arange(n) / sr
        tone = np.zeros(n)
        for h, weight in enumerate(timbre, start=1):
            tone += weight * np.sin(2.0 * np.pi * h * freq * tt)
        k = min(fade_n, n // 2)
        if k > 0:
            ramp = np.arange(1, k + 1) / k
            tone[:k] *= ramp
            tone[-k:] *= ramp[::-1]
        out[start:end] = tone
    peak = np.max(np.abs(out))
    if peak > 0:
        out /= peak
    return Waveform(out, sample_rate=sr)


def mel_to_waveform(m: MelGrid) -> Waveform:
    """Oscillator-bank resynthesis: one sinusoid per mel bin at its center
    frequency, amplitude 10^(dB/20) interpolated linearly between frame
    centers. Bins at the -80 dB floor are treated as silent. Peak-normalized;
    an all-floor grid comes back as exact silence.
    """
    sr = m.sample_rate
    fb_n_mels = m.n_mels
    _, centers = mel_filterbank(fb_n_mels, m.n_fft, sr, m.f_min, m.f_max)
    n_out = m.n_fft + m.frame_hop * (m.n_frames - 1)
    amps = np.where(m.values <= DB_FLOOR + 1e-9, 0.0, 10.0 ** (m.values / 20.0))
    out = np.zeros(n_out)
    frame_centers = m.frame_hop * np.arange(m.n_frames) + m.n_fft / 2.0
    sample_t = np.arange(n_out)
    for b in range(fb_n_mels):
        if not np.any(amps[:, b] > 0):
            continue
        amp_t = np.interp(sample_t, frame_centers, amps[:, b])
        out += amp_t * np.sin(2.0 * np.pi * centers[b] * sample_t / sr)
    peak = np.max(np.abs(out))
    if peak > 1e-12:
        out /= peak
    else:
        out = np.zeros(n_out)
    return Waveform(out, sample_rate=sr)


# --- WAV I/O (PCM16 mono little-endian) ----------------------------------

_PCM16_MAX = 32767


def write_wav(path, w: Waveform) -> None:
    data = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(data * _PCM16_MAX).astype("<i2")
    payload = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        1,  # PCM
        1,  # mono
        w.sample_rate,
        w.sample_rate * 2,
        2,
        16,
        b"data",
        len(payload),
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_wav(path) -> Waveform:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError("file too short for a RIFF header", len(raw))
    if raw[0:4] != b"RIFF":
        raise FormatError(f"bad magic {raw[0:4]!r}, expected b'RIFF'", 0)
    if raw[8:12] != b"WAVE":
        raise FormatError(f"bad RIFF form {raw[8:12]!r}, expected b'WAVE'", 8)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(
                f"chunk {chunk_id.decode('ascii', 'replace')!r} truncated "
                f"(wants {size} bytes, has {len(body)})",
                pos,
            )
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError("'fmt ' chunk shorter than 16 bytes", pos)
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = (body, pos)
        pos += 8 + size + (size % 2)  # chunks are word-aligned

    if fmt is None:
        raise FormatError("missing 'fmt ' chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise FormatError(f"unsupported encoding {audio_format} in 'fmt ' chunk (PCM only)")
    if channels != 1:
        raise FormatError(f"unsupported channel count {channels} in 'fmt ' chunk (mono only)")
    if bits != 16:
        raise FormatError(f"unsupported bit depth {bits} in 'fmt ' chunk (16-bit only)")
    if data is None:
        raise FormatError("missing 'data' chunk")
    body, dpos = data
    if len(body) % 2 != 0:
        raise FormatError("'data' chunk has an odd byte count", dpos)
    samples = np.frombuffer(body, dtype="<i2").astype(np.float64) / _PCM16_MAX
    return Waveform(samples, sample_rate=sample_rate)
