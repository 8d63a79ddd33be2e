import json

import numpy as np
import pytest

from melodygen import corpus, signal
from melodygen.errors import ValidationError
from melodygen.melody_codec import parse_pitch, parse_tokens


class TestGenerate:
    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        corpus.generate_corpus(12, seed=5, out_dir=a)
        corpus.generate_corpus(12, seed=5, out_dir=b)
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for wav in sorted((a / "wav").iterdir()):
            assert wav.read_bytes() == (b / "wav" / wav.name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        corpus.generate_corpus(6, seed=1, out_dir=a)
        corpus.generate_corpus(6, seed=2, out_dir=b)
        assert (a / "manifest.jsonl").read_bytes() != (b / "manifest.jsonl").read_bytes()

    def test_melody_tokens_roundtrip(self, tmp_path):
        records = corpus.generate_corpus(20, seed=7, out_dir=tmp_path)
        for r in records:
            seq = parse_tokens(r.melody_tokens)
            assert len(seq) >= 1

    def test_text_names_all_archetype_fields(self, tmp_path):
        records = corpus.generate_corpus(40, seed=8, out_dir=tmp_path)
        phrase = {"scale_run": "scale run", "arpeggio": "arpeggio",
                  "drone": "drone", "alternating": "alternating"}
        for r in records:
            lower = r.text.lower()
            assert r.archetype.tempo in lower
            assert r.archetype.register in lower
            assert r.archetype.timbre in lower
            assert phrase[r.archetype.pattern] in lower

    def test_text_names_start_note(self, tmp_path):
        records = corpus.generate_corpus(20, seed=9, out_dir=tmp_path)
        for r in records:
            first_pitch = parse_tokens(r.melody_tokens).triplets[0].pitch_token
            assert first_pitch.lower() in r.text.lower()

    def test_register_orders_mean_active_mel_bin(self, tmp_path):
        records = corpus.generate_corpus(60, seed=10, out_dir=tmp_path)
        by_register = {"low": [], "high": []}
        for r in records:
            if r.archetype.register not in by_register:
                continue
            w = signal.read_wav(tmp_path / r.wav_path)
            m = signal.mel_spectrogram(w)
            active = m.values > signal.DB_FLOOR + 20.0
            bins = np.where(active.any(axis=0))[0]
            weights = active.sum(axis=0)[bins]
            by_register[r.archetype.register].append(float(np.average(bins, weights=weights)))
        assert by_register["low"] and by_register["high"]
        assert np.mean(by_register["high"]) > np.mean(by_register["low"])

    def test_melody_pitch_range_matches_register(self, tmp_path):
        records = corpus.generate_corpus(60, seed=11, out_dir=tmp_path)
        for r in records:
            pitches = [parse_pitch(t.pitch_token) for t in parse_tokens(r.melody_tokens)]
            lo, hi = corpus.REGISTER_BASE[r.archetype.register]
            assert min(pitches) >= lo
            assert max(pitches) <= min(hi + 12, 127)  # patterns span up to an octave

    def test_clip_length_enforced(self, tmp_path):
        records = corpus.generate_corpus(4, seed=12, out_dir=tmp_path, clip_samples=20000)
        for r in records:
            w = signal.read_wav(tmp_path / r.wav_path)
            assert len(w.samples) == 20000

    def test_n_zero_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            corpus.generate_corpus(0, seed=0, out_dir=tmp_path)


class TestLoad:
    def test_load_returns_all_valid(self, tmp_path):
        corpus.generate_corpus(10, seed=13, out_dir=tmp_path)
        result = corpus.load_corpus(tmp_path / "manifest.jsonl")
        assert len(result.records) == 10
        assert result.errors == []

    def test_missing_wav_flags_record_others_load(self, tmp_path):
        records = corpus.generate_corpus(6, seed=14, out_dir=tmp_path)
        (tmp_path / records[2].wav_path).unlink()
        result = corpus.load_corpus(tmp_path / "manifest.jsonl")
        assert len(result.records) == 5
        assert len(result.errors) == 1
        assert result.errors[0].record_id == records[2].id
        assert "wav" in result.errors[0].message

    def test_corrupt_melody_reports_id_and_offset(self, tmp_path):
        records = corpus.generate_corpus(4, seed=15, out_dir=tmp_path)
        manifest = tmp_path / "manifest.jsonl"
        lines = manifest.read_text().splitlines()
        doc = json.loads(lines[1])
        doc["melody"] = "|<C4>,<999>,<0>|"
        lines[1] = json.dumps(doc)
        manifest.write_text("\n".join(lines) + "\n")
        result = corpus.load_corpus(manifest)
        assert len(result.records) == 3
        assert result.errors[0].record_id == records[1].id
        assert "999" in result.errors[0].message

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError):
            corpus.load_corpus(tmp_path / "nope.jsonl")

    def test_bad_json_line_collected(self, tmp_path):
        corpus.generate_corpus(3, seed=16, out_dir=tmp_path)
        manifest = tmp_path / "manifest.jsonl"
        with open(manifest, "a") as f:
            f.write("{not json}\n")
        result = corpus.load_corpus(manifest)
        assert len(result.records) == 3
        assert len(result.errors) == 1


class TestArchetype:
    def test_labels_roundtrip(self):
        a = corpus.Archetype("arpeggio", "high", "fast", "bright")
        assert corpus.Archetype.from_dict(a.to_dict()) == a

    def test_invalid_field_rejected(self):
        with pytest.raises(ValidationError):
            corpus.Archetype("waltz", "high", "fast", "bright")
