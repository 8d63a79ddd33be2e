"""Procedural corpus of aligned (text, melody, waveform) triples.

Every record realizes an archetype — pattern x register x tempo x timbre —
as a short melody, renders it to audio with the matching harmonic preset,
and captions it from templates that name all four archetype fields plus the
starting note. That makes the archetype (and the approximate pitch content)
recoverable from each modality on its own, which is what gives the
alignment and retrieval tests something real to measure.

Layout on disk: a JSON Lines manifest plus one 16-bit mono WAV per record
under ``wav/``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import smallnet
from .errors import MelodyGenError, ValidationError
from .melody_codec import (
    MelodyTriplet,
    MelodyTripletSeq,
    bin_duration,
    parse_tokens,
    pitch_name,
    render_tokens,
)
from .signal import Waveform, read_wav, synthesize_melody, write_wav

PATTERNS = ("scale_run", "arpeggio", "drone", "alternating")
REGISTERS = ("low", "mid", "high")
TEMPOS = ("slow", "fast")
TIMBRES = ("pure", "bright", "mellow")

# harmonic stacks kept well below the fundamental so timbre reads as a level
# offset on harmonic bins rather than extra melody pitches
TIMBRE_WEIGHTS = {
    "pure": (1.0,),
    "bright": (1.0, 0.28, 0.14, 0.07),
    "mellow": (1.0, 0.11),
}
# register bands are spaced so the start-pitch buckets stay disjoint even
# after a pattern climbs an octave; bases land on scale degrees of the band
REGISTER_BASE = {"low": 58, "mid": 72, "high": 86}
BASE_OFFSETS = (0, 2, 4, 5, 7, 9)
# slow is legato (no gaps); fast is staccato (short notes with rests), so
# tempo also imprints on the duty cycle of every active bin
TEMPO_NOTE_SECONDS = {"slow": 0.55, "fast": 0.18}
TEMPO_REST_SECONDS = {"slow": 0.0, "fast": 0.08}

# per-record mix level: realistic loudness nuisance that audio carries but
# text and melody never mention (what cross-modal alignment must discard)
GAIN_RANGE = (0.03, 1.0)

# ascending interval steps, relative to the base pitch, cycled as needed
_PATTERN_STEPS = {
    "scale_run": (0, 2, 4, 5, 7, 9, 11, 12),
    "arpeggio": (0, 4, 7, 12),
    "drone": (0,),
    "alternating": (0, 7),
}

_TEXT_TEMPLATES = (
    "A {tempo} {pattern} in a {register} register with a {timbre} timbre, starting on {note}.",
    "{tempo} {pattern} around {note}, {register} register, {timbre} timbre.",
    "This is a {timbre}-timbre {pattern} at a {tempo} pace in the {register} register, from {note}.",
)
_PATTERN_PHRASE = {
    "scale_run": "scale run",
    "arpeggio": "arpeggio",
    "drone": "drone",
    "alternating": "alternating figure",
}


@dataclass(frozen=True)
class Archetype:
    pattern: str
    register: str
    tempo: str
    timbre: str

    def __post_init__(self):
        for value, allowed, name in (
            (self.pattern, PATTERNS, "pattern"),
            (self.register, REGISTERS, "register"),
            (self.tempo, TEMPOS, "tempo"),
            (self.timbre, TIMBRES, "timbre"),
        ):
            if value not in allowed:
                raise ValidationError(f"unknown {name} {value!r}")

    @property
    def label(self) -> str:
        return f"{self.pattern}|{self.register}|{self.tempo}|{self.timbre}"

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern,
            "register": self.register,
            "tempo": self.tempo,
            "timbre": self.timbre,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Archetype":
        return cls(d["pattern"], d["register"], d["tempo"], d["timbre"])


@dataclass
class CorpusRecord:
    id: str
    text: str
    melody_tokens: str
    wav_path: str  # relative to the manifest directory
    archetype: Archetype

    @property
    def melody(self) -> MelodyTripletSeq:
        return parse_tokens(self.melody_tokens)


@dataclass
class RecordError:
    record_id: str
    message: str


@dataclass
class CorpusLoadResult:
    records: list[CorpusRecord] = field(default_factory=list)
    errors: list[RecordError] = field(default_factory=list)


def _melody_for(archetype: Archetype, rng: np.random.Generator) -> MelodyTripletSeq:
    base = REGISTER_BASE[archetype.register] + BASE_OFFSETS[int(rng.integers(0, len(BASE_OFFSETS)))]
    steps = _PATTERN_STEPS[archetype.pattern]
    n_notes = int(rng.integers(8, 13))
    note_s = TEMPO_NOTE_SECONDS[archetype.tempo]
    rest_s = TEMPO_REST_SECONDS[archetype.tempo]
    triplets = []
    for i in range(n_notes):
        pitch = min(base + steps[i % len(steps)], 127)
        dur = note_s * float(rng.uniform(0.9, 1.1))
        triplets.append(MelodyTriplet(pitch_name(pitch), bin_duration(dur), bin_duration(rest_s)))
    return MelodyTripletSeq(tuple(triplets))


def _text_for(archetype: Archetype, melody: MelodyTripletSeq, rng: np.random.Generator) -> str:
    template = _TEXT_TEMPLATES[int(rng.integers(0, len(_TEXT_TEMPLATES)))]
    return template.format(
        tempo=archetype.tempo,
        pattern=_PATTERN_PHRASE[archetype.pattern],
        register=archetype.register,
        timbre=archetype.timbre,
        note=melody.triplets[0].pitch_token,
    )


def _fit_length(w: Waveform, n_samples: int) -> Waveform:
    s = w.samples
    if len(s) >= n_samples:
        s = s[:n_samples]
    else:
        s = np.concatenate([s, np.zeros(n_samples - len(s))])
    return Waveform(s, sample_rate=w.sample_rate)


def make_record(index: int, seed: int, sample_rate: int = 16000,
                clip_samples: int | None = None) -> tuple[CorpusRecord, Waveform]:
    """Deterministically build record ``index`` of the corpus for ``seed``."""
    rng = smallnet.spawn_rng(seed, 909, index)
    archetype = Archetype(
        pattern=PATTERNS[int(rng.integers(0, len(PATTERNS)))],
        register=REGISTERS[int(rng.integers(0, len(REGISTERS)))],
        tempo=TEMPOS[int(rng.integers(0, len(TEMPOS)))],
        timbre=TIMBRES[int(rng.integers(0, len(TIMBRES)))],
    )
    melody = _melody_for(archetype, rng)
    text = _text_for(archetype, melody, rng)
    wave = synthesize_melody(melody, TIMBRE_WEIGHTS[archetype.timbre], sr=sample_rate)
    gain = float(rng.uniform(*GAIN_RANGE))
    wave = Waveform(wave.samples * gain, sample_rate=wave.sample_rate)
    if clip_samples is not None:
        wave = _fit_length(wave, clip_samples)
    record = CorpusRecord(
        id=f"rec{index:05d}",
        text=text,
        melody_tokens=render_tokens(melody),
        wav_path=f"wav/rec{index:05d}.wav",
        archetype=archetype,
    )
    return record, wave


def generate_corpus(n: int, seed: int, out_dir,
                    sample_rate: int = 16000,
                    clip_samples: int | None = None) -> list[CorpusRecord]:
    """Write n records (manifest.jsonl + wav files) under out_dir."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    records = []
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as manifest:
        for i in range(n):
            record, wave = make_record(i, seed, sample_rate, clip_samples)
            write_wav(out / record.wav_path, wave)
            manifest.write(json.dumps({
                "id": record.id,
                "text": record.text,
                "melody": record.melody_tokens,
                "wav": record.wav_path,
                "archetype": record.archetype.to_dict(),
            }, sort_keys=True) + "\n")
            records.append(record)
    return records


def load_corpus(manifest_path) -> CorpusLoadResult:
    """Read and validate a manifest; bad records are reported, good ones kept."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ValidationError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    result = CorpusLoadResult()
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            record_id = f"line {line_no}"
            try:
                doc = json.loads(line)
                record_id = doc.get("id", record_id)
                record = CorpusRecord(
                    id=doc["id"],
                    text=doc["text"],
                    melody_tokens=doc["melody"],
                    wav_path=doc["wav"],
                    archetype=Archetype.from_dict(doc["archetype"]),
                )
                if not record.text.strip():
                    raise ValidationError("text is empty")
                parse_tokens(record.melody_tokens)
                wav_file = base / record.wav_path
                if not wav_file.exists():
                    raise ValidationError(f"wav file missing: {record.wav_path}")
                read_wav(wav_file)
            except (MelodyGenError, KeyError, json.JSONDecodeError) as e:
                msg = f"missing field {e}" if isinstance(e, KeyError) else str(e)
                result.errors.append(RecordError(record_id=str(record_id), message=msg))
                continue
            result.records.append(record)
    return result
