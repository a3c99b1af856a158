"""Utterances, synthetic two-domain corpora, WAV/manifest I/O and text cleanup."""

from __future__ import annotations

import json
import logging
import math
import re
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, DataError, FormatError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
DOMAINS = ("source", "target")
SPLITS = ("train", "validation", "test")

_ANGLE = re.compile(r"<[^<>]*>")
# innermost "((...))": content may not itself open or close a double paren
_DPAREN = re.compile(r"\(\((?:(?!\(\(|\)\)).)*\)\)", re.S)


@dataclass(eq=False)
class Utterance:
    id: str
    samples: np.ndarray
    transcript: tuple[str, ...]
    domain: str
    duration_s: float = -1.0
    raw_text: str = ""
    speaker: str = ""

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataError(f"utterance {self.id}: unknown domain {self.domain!r}")
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.duration_s < 0:
            self.duration_s = len(self.samples) / SAMPLE_RATE
        self.transcript = tuple(self.transcript)


@dataclass
class ManifestEntry:
    id: str
    audio: Path
    duration_s: float
    domain: str
    text: str


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DataError(f"duplicate id {e.id!r} in {self.split} manifest")
            seen.add(e.id)

    def __len__(self):
        return len(self.entries)


@dataclass
class SynthSpec:
    """Parameters of the synthetic speech-like corpus.

    Words are short sequences of pure tones. The target domain differs from
    the source by a multiplicative frequency warp (``accent_warp``) and
    additive white noise at ``noise_snr_db``; it also has its own speakers.
    """

    vocab_size: int = 10
    words_per_utt: tuple[int, int] = (5, 9)
    speaker_count: int = 8
    accent_warp: float = 1.12
    noise_snr_db: float = 10.0
    seed: int = 0
    annotation_rate: float = 0.1

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError(f"invalid SynthSpec: vocab_size={self.vocab_size} < 2")
        lo, hi = self.words_per_utt
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid SynthSpec: words_per_utt={self.words_per_utt}")
        if self.speaker_count < 1:
            raise ConfigError("invalid SynthSpec: speaker_count must be >= 1")
        if not math.isfinite(self.accent_warp) or self.accent_warp <= 0:
            raise ConfigError(f"invalid SynthSpec: accent_warp={self.accent_warp}")
        if math.isnan(self.noise_snr_db) or self.noise_snr_db == -math.inf:
            raise ConfigError(f"invalid SynthSpec: noise_snr_db={self.noise_snr_db}")


# --------------------------------------------------------------------------
# transcripts


def normalize_transcript(raw: str) -> list[str]:
    """Remove ``<...>`` and ``((...))`` annotations, lowercase and split.

    Nested annotations are stripped innermost-first until nothing changes.
    An opening delimiter without a partner truncates the text from that
    point on; stray closing delimiters are dropped. Both cases log a warning.
    """
    text = raw
    while True:
        prev = text
        text = _ANGLE.sub(" ", text)
        text = _DPAREN.sub(" ", text)
        if text != prev:
            continue
        cut = [i for i in (text.find("<"), text.find("((")) if i >= 0]
        if cut:
            logger.warning("unbalanced annotation in transcript %r", raw)
            text = text[: min(cut)]
        if ">" in text or "))" in text:
            logger.warning("stray closing delimiter in transcript %r", raw)
            text = text.replace(">", " ").replace("))", " ")
        if text == prev:
            break
    return text.lower().split()


def filter_short(utts: Sequence[Utterance], min_s: float = 2.5) -> list[Utterance]:
    return [u for u in utts if len(u.samples) / SAMPLE_RATE >= min_s]


def admit_supervised(utts: Sequence[Utterance], min_s: float = 2.5) -> list[Utterance]:
    """Utterances usable for fine-tuning: long enough and with a transcript."""
    return [u for u in filter_short(utts, min_s) if u.transcript]


# --------------------------------------------------------------------------
# synthetic corpus

_CONS = "bdgklmnprstvz"
_VOWELS = "aeiou"


def word_name(index: int) -> str:
    name = (
        _CONS[index % 13]
        + _VOWELS[index % 5]
        + _CONS[(index // 5) % 13]
        + _VOWELS[(index // 65) % 5]
    )
    return name if index < 325 else f"{name}{index // 325}"


def vocabulary(spec: SynthSpec) -> list[str]:
    return [word_name(i) for i in range(spec.vocab_size)]


def word_segments(spec: SynthSpec, word: int) -> list[tuple[float, float]]:
    """The (frequency Hz, duration s) tone segments that make up ``word``."""
    rng = np.random.default_rng([spec.seed, 1, word])
    n = int(rng.integers(2, 5))
    freqs = np.exp(rng.uniform(np.log(250.0), np.log(3000.0), size=n))
    durs = rng.uniform(0.06, 0.11, size=n)
    return [(float(f), float(d)) for f, d in zip(freqs, durs)]


def _grammar(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 3])
    start = rng.dirichlet(np.ones(spec.vocab_size))
    trans = rng.dirichlet(np.full(spec.vocab_size, 0.3), size=spec.vocab_size)
    return start, trans


def _speaker(spec: SynthSpec, domain: str, k: int) -> dict:
    rng = np.random.default_rng([spec.seed, 2, DOMAINS.index(domain), k])
    return {
        "name": f"{domain[:3]}{k:02d}",
        "pitch": float(rng.uniform(0.95, 1.05)),
        "rate": float(rng.uniform(0.9, 1.1)),
        "gain": float(rng.uniform(0.25, 0.5)),
    }


def tone(freq: float, n: int, gain: float = 1.0, fade: int = 80) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    x = gain * np.sin(2 * np.pi * freq * t)
    fade = min(fade, n // 2)
    if fade:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[n - fade :] *= ramp[::-1]
    return x


def _plan(spec: SynthSpec, domain: str, index: int) -> dict:
    rng = np.random.default_rng([spec.seed, 4, DOMAINS.index(domain), index])
    start, trans = _grammar(spec)
    lo, hi = spec.words_per_utt
    n_words = int(rng.integers(lo, hi + 1))
    words = [int(rng.choice(spec.vocab_size, p=start))]
    for _ in range(n_words - 1):
        words.append(int(rng.choice(spec.vocab_size, p=trans[words[-1]])))
    speaker = _speaker(spec, domain, int(rng.integers(spec.speaker_count)))
    gaps = rng.uniform(0.02, 0.08, size=n_words + 1)
    gaps[0] = rng.uniform(0.1, 0.2)
    gaps[-1] = rng.uniform(0.1, 0.2)
    annotations = [
        (i, ["<breath>", "((um))", "<laugh>", "((inaudible))"][int(rng.integers(4))])
        for i in range(n_words + 1)
        if rng.random() < spec.annotation_rate
    ]
    return {"words": words, "speaker": speaker, "gaps": gaps, "annotations": annotations}


def _render(spec: SynthSpec, plan: dict, warp: float, snr_db: float, noise_rng) -> np.ndarray:
    spk = plan["speaker"]
    pieces = []
    for i, w in enumerate(plan["words"]):
        pieces.append(np.zeros(int(round(plan["gaps"][i] * spk["rate"] * SAMPLE_RATE))))
        for freq, dur in word_segments(spec, w):
            n = int(round(dur * spk["rate"] * SAMPLE_RATE))
            pieces.append(tone(freq * spk["pitch"] * warp, n, spk["gain"]))
    pieces.append(np.zeros(int(round(plan["gaps"][-1] * spk["rate"] * SAMPLE_RATE))))
    x = np.concatenate(pieces)
    if math.isfinite(snr_db):
        power = float(np.mean(x**2))
        x = x + noise_rng.normal(0.0, math.sqrt(power / 10 ** (snr_db / 10)), size=len(x))
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def synth_utterance(spec: SynthSpec, domain: str, index: int, transform: bool = True) -> Utterance:
    """Generate utterance ``index`` of ``domain``.

    With ``transform=False`` the domain's accent warp and noise are skipped,
    i.e. the content is rendered through the plain source path.
    """
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain {domain!r}")
    plan = _plan(spec, domain, index)
    target = domain == "target" and transform
    warp = spec.accent_warp if target else 1.0
    snr = spec.noise_snr_db if target else math.inf
    noise_rng = np.random.default_rng([spec.seed, 5, DOMAINS.index(domain), index])
    samples = _render(spec, plan, warp, snr, noise_rng)
    names = vocabulary(spec)
    tokens = [names[w] for w in plan["words"]]
    raw = list(tokens)
    if domain == "target":
        for pos, tag in reversed(plan["annotations"]):
            raw.insert(pos, tag)
    raw_text = " ".join(raw)
    return Utterance(
        id=f"{domain}-{index:05d}",
        samples=samples,
        transcript=tuple(normalize_transcript(raw_text)),
        domain=domain,
        raw_text=raw_text,
        speaker=plan["speaker"]["name"],
    )


def synth_corpus(spec: SynthSpec, domain: str, count: int, offset: int = 0) -> list[Utterance]:
    """``count`` utterances of ``domain``; a pure function of its arguments."""
    spec.validate()
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    return [synth_utterance(spec, domain, offset + i) for i in range(count)]


def grammar_sentences(spec: SynthSpec, count: int, seed: int = 0) -> list[list[str]]:
    """Text-only samples from the corpus grammar, for language-model estimation."""
    start, trans = _grammar(spec)
    names = vocabulary(spec)
    rng = np.random.default_rng([spec.seed, 6, seed])
    lo, hi = spec.words_per_utt
    out = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        w = [int(rng.choice(spec.vocab_size, p=start))]
        for _ in range(n - 1):
            w.append(int(rng.choice(spec.vocab_size, p=trans[w[-1]])))
        out.append([names[i] for i in w])
    return out


# --------------------------------------------------------------------------
# WAV + manifest


def load_wav(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise FormatError(f"{path}: channels={f.getnchannels()}, expected 1")
            if f.getsampwidth() != 2:
                raise FormatError(f"{path}: sample width={f.getsampwidth()} bytes, expected 2 (PCM16)")
            if f.getframerate() != SAMPLE_RATE:
                raise FormatError(f"{path}: sample rate={f.getframerate()}, expected {SAMPLE_RATE}")
            data = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    return np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0


def write_wav(path, samples: np.ndarray) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.astype("<i2").tobytes())


def _infer_split(path: Path) -> str:
    stem = path.stem.lower()
    for split in ("validation", "valid", "test", "train"):
        if split in stem:
            return "validation" if split == "valid" else split
    return "train"


def read_manifest(path, split: str | None = None) -> CorpusManifest:
    """Read a JSON-lines manifest with fields id, audio, duration_s, domain, text.

    Relative audio paths are resolved against the manifest's directory. Every
    referenced file must exist and parse as 16 kHz mono PCM16.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = {"id", "audio", "duration_s", "domain", "text"} - rec.keys()
            if missing:
                raise FormatError(f"{path}:{lineno}: missing field(s) {sorted(missing)}")
            if rec["domain"] not in DOMAINS:
                raise FormatError(f"{path}:{lineno}: domain={rec['domain']!r}")
            audio = Path(rec["audio"])
            if not audio.is_absolute():
                audio = path.parent / audio
            _check_wav_header(audio)
            entries.append(
                ManifestEntry(str(rec["id"]), audio, float(rec["duration_s"]), rec["domain"], rec["text"])
            )
    return CorpusManifest(entries, split or _infer_split(path))


def _check_wav_header(path: Path) -> None:
    if not path.exists():
        raise DataError(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as f:
            ok = (f.getnchannels(), f.getsampwidth(), f.getframerate()) == (1, 2, SAMPLE_RATE)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if not ok:
        load_wav(path)  # raises with the offending field named


def write_manifest(path, utts: Iterable[Utterance], audio_dir=None) -> CorpusManifest:
    """Write each utterance as a WAV plus one JSONL manifest line."""
    path = Path(path)
    audio_dir = Path(audio_dir) if audio_dir else path.parent / "wav"
    audio_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(path, "w", encoding="utf-8") as f:
        for u in utts:
            wav = audio_dir / f"{u.id}.wav"
            write_wav(wav, u.samples)
            try:
                rel = wav.relative_to(path.parent)
            except ValueError:
                rel = wav
            text = u.raw_text or " ".join(u.transcript)
            rec = {"id": u.id, "audio": str(rel), "duration_s": round(u.duration_s, 6), "domain": u.domain, "text": text}
            f.write(json.dumps(rec) + "\n")
            entries.append(ManifestEntry(u.id, wav, u.duration_s, u.domain, text))
    return CorpusManifest(entries, _infer_split(path))


def load_utterances(manifest: CorpusManifest) -> list[Utterance]:
    out = []
    for e in manifest.entries:
        samples = load_wav(e.audio)
        out.append(Utterance(e.id, samples, tuple(normalize_transcript(e.text)), e.domain, raw_text=e.text))
    return out
