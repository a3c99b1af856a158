import json
import math
import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acmix.corpus import (SAMPLE_RATE, CorpusManifest, ManifestEntry, SynthSpec, Utterance, _plan, admit_supervised,
                          filter_short, grammar_sentences, load_utterances, load_wav, normalize_transcript,
                          read_manifest, synth_corpus, synth_utterance, vocabulary, word_segments, write_manifest,
                          write_wav)
from acmix.exceptions import ConfigError, DataError, FormatError


# -- transcripts

@pytest.mark.parametrize("raw, expected", [
    ("hello <breath> world", ["hello", "world"]),
    ("(( noise )) yes", ["yes"]),
    ("abc", ["abc"]),
    ("Hello WORLD", ["hello", "world"]),
    ("a <b <c> d> e", ["a", "e"]),
    ("a ((b ((c)) d)) e", ["a", "e"]),
    ("", []),
])
def test_normalize_examples(raw, expected):
    assert normalize_transcript(raw) == expected


def test_normalize_unbalanced_truncates_with_warning(caplog):
    assert normalize_transcript("keep this <cut from here") == ["keep", "this"]
    assert "unbalanced" in caplog.text
    assert normalize_transcript("one ((two three") == ["one"]


def test_normalize_stray_closer_dropped(caplog):
    assert normalize_transcript("a > b )) c") == ["a", "b", "c"]
    assert "stray" in caplog.text


@given(st.text(alphabet="ab <>()", max_size=30))
def test_normalize_idempotent(raw):
    once = normalize_transcript(raw)
    assert normalize_transcript(" ".join(once)) == once


# -- duration filter

def _utt(seconds, transcript=("a",)):
    return Utterance("u", np.zeros(int(round(seconds * SAMPLE_RATE)), np.float32), transcript, "target")


def test_filter_short_boundary():
    assert filter_short([_utt(2.4)]) == []
    kept = _utt(2.5)
    assert filter_short([kept]) == [kept]
    assert filter_short([]) == []


@given(st.lists(st.floats(0.1, 5.0), max_size=8))
def test_filter_short_idempotent(durs):
    utts = [_utt(d) for d in durs]
    once = filter_short(utts)
    assert filter_short(once) == once
    assert len(once) <= len(utts)
    assert [u for u in utts if u in once] == once


def test_admit_supervised_needs_transcript():
    assert admit_supervised([_utt(3.0, ())]) == []
    assert len(admit_supervised([_utt(3.0)])) == 1


def test_duration_matches_samples():
    u = _utt(1.2345)
    assert abs(u.duration_s - len(u.samples) / SAMPLE_RATE) <= 1 / SAMPLE_RATE


# -- synthetic corpus

def test_synth_deterministic():
    spec = SynthSpec(seed=7)
    a, b = synth_corpus(spec, "source", 3), synth_corpus(spec, "source", 3)
    for x, y in zip(a, b):
        assert x.id == y.id and x.transcript == y.transcript
        assert np.array_equal(x.samples, y.samples)


def test_synth_call_order_irrelevant():
    spec = SynthSpec(seed=7)
    late = synth_utterance(spec, "target", 5)
    batch = synth_corpus(spec, "target", 6)
    assert np.array_equal(batch[5].samples, late.samples)


def test_identity_transform_matches_source_path():
    plain = SynthSpec(seed=4, accent_warp=1.0, noise_snr_db=math.inf)
    for i in range(3):
        t = synth_utterance(plain, "target", i)
        ref = synth_utterance(SynthSpec(seed=4), "target", i, transform=False)
        assert np.array_equal(t.samples, ref.samples)


def test_word_spectral_peak():
    spec = SynthSpec(seed=11, words_per_utt=(1, 1), noise_snr_db=math.inf)
    for index in range(4):
        plan = _plan(spec, "source", index)
        spk = plan["speaker"]
        w = plan["words"][0]
        x = synth_utterance(spec, "source", index).samples.astype(np.float64)
        start = int(round(plan["gaps"][0] * spk["rate"] * SAMPLE_RATE))
        freq, dur = word_segments(spec, w)[0]
        n = int(round(dur * spk["rate"] * SAMPLE_RATE))
        seg = x[start : start + n]
        nfft = 1 << 18
        mag = np.abs(np.fft.rfft(seg, nfft))
        peak = np.argmax(mag) * SAMPLE_RATE / nfft
        assert abs(peak - freq * spk["pitch"]) < 2.0


def test_target_differs_by_warp_and_noise():
    spec = SynthSpec(seed=2)
    t = synth_utterance(spec, "target", 0)
    clean = synth_utterance(spec, "target", 0, transform=False)
    assert len(t.samples) == len(clean.samples)
    assert not np.array_equal(t.samples, clean.samples)


def test_synth_samples_valid():
    for u in synth_corpus(SynthSpec(seed=1), "target", 5):
        assert np.isfinite(u.samples).all()
        assert np.abs(u.samples).max() <= 1.0
        assert u.transcript and set(u.transcript) <= set(vocabulary(SynthSpec(seed=1)))


@pytest.mark.parametrize("kw", [{"vocab_size": 1}, {"noise_snr_db": math.nan}, {"words_per_utt": (3, 2)}])
def test_invalid_spec(kw):
    with pytest.raises(ConfigError):
        synth_corpus(SynthSpec(**kw), "source", 1)


def test_count_must_be_positive():
    with pytest.raises(ConfigError):
        synth_corpus(SynthSpec(), "source", 0)


def test_target_transcripts_strip_annotations():
    spec = SynthSpec(seed=0, annotation_rate=1.0)
    u = synth_utterance(spec, "target", 0)
    assert "<" in u.raw_text or "((" in u.raw_text
    assert list(u.transcript) == normalize_transcript(u.raw_text)
    assert all("<" not in t and "(" not in t for t in u.transcript)


def test_grammar_sentences_use_vocabulary():
    spec = SynthSpec(seed=0)
    sents = grammar_sentences(spec, 20)
    assert len(sents) == 20
    assert {w for s in sents for w in s} <= set(vocabulary(spec))


# -- WAV and manifests

def _write_raw(path, values, channels=1, width=2, rate=SAMPLE_RATE):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(np.asarray(values, dtype="<i2" if width == 2 else "<i4").tobytes())


def test_pcm_scaling(tmp_path):
    p = tmp_path / "x.wav"
    _write_raw(p, [32767, 0, -32768])
    x = load_wav(p)
    assert x[0] == pytest.approx(0.99997, abs=1e-5)
    assert x[1] == 0.0
    assert x[2] == -1.0


@pytest.mark.parametrize("kw, field", [({"channels": 2}, "channels"), ({"rate": 8000}, "sample rate"),
                                       ({"width": 4}, "sample width")])
def test_wav_format_errors_name_field(tmp_path, kw, field):
    p = tmp_path / "bad.wav"
    _write_raw(p, [0, 1, 2, 3], **kw)
    with pytest.raises(FormatError, match=field):
        load_wav(p)


def test_missing_wav_names_path(tmp_path):
    with pytest.raises(DataError, match="nope.wav"):
        load_wav(tmp_path / "nope.wav")


def test_wav_round_trip(tmp_path):
    u = synth_utterance(SynthSpec(seed=5), "target", 0)
    write_wav(tmp_path / "u.wav", u.samples)
    back = load_wav(tmp_path / "u.wav")
    assert back.shape == u.samples.shape
    assert np.abs(back - u.samples).max() <= 1 / 32768


def test_manifest_round_trip(tmp_path):
    utts = synth_corpus(SynthSpec(seed=5, annotation_rate=0.5), "target", 3)
    write_manifest(tmp_path / "train.jsonl", utts)
    m = read_manifest(tmp_path / "train.jsonl")
    assert m.split == "train" and len(m) == 3
    back = load_utterances(m)
    for a, b in zip(utts, back):
        assert a.id == b.id and a.transcript == b.transcript and a.domain == b.domain
        assert np.abs(a.samples - b.samples).max() <= 1 / 32768


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(FormatError, match="m.jsonl:1"):
        read_manifest(p)
    p.write_text(json.dumps({"id": "a", "audio": "a.wav", "domain": "source", "text": ""}) + "\n")
    with pytest.raises(FormatError, match="duration_s"):
        read_manifest(p)
    p.write_text(json.dumps({"id": "a", "audio": "a.wav", "duration_s": 1, "domain": "source", "text": ""}) + "\n")
    with pytest.raises(DataError, match="a.wav"):
        read_manifest(p)
    with pytest.raises(DataError):
        read_manifest(tmp_path / "missing.jsonl")


def test_manifest_ids_unique(tmp_path):
    e = ManifestEntry("a", tmp_path / "a.wav", 1.0, "source", "x")
    with pytest.raises(DataError):
        CorpusManifest([e, e], "train")
