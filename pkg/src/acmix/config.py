"""Experiment configuration: a sectioned key = value text file.

Every key is typed by the dataclass that owns its section. Unknown sections
or keys are errors, so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .corpus import SynthSpec
from .encoder import FeatureConfig
from .exceptions import ConfigError
from .mixup import ALPHA_GRID, MixupConfig
from .spin import SpinConfig
from .train import TrainConfig

SUBSET_HOURS = {"full": 11.0, "5h": 5.0, "1h": 1.0, "10min": 1.0 / 6.0}
SUBSET_LABELS = {"full": "Full Set", "5h": "5 hours", "1h": "1 hour", "10min": "10 minutes"}


@dataclass
class ExperimentSection:
    seed: int = 0
    name: str = "acmix"
    systems: tuple[str, ...] = ("none", "acmix")
    baseline: str = "none"
    finetune_mode: str = "full_ft"
    sweep_alphas: tuple[float, ...] = ()
    subsets: tuple[str, ...] = ("full",)


@dataclass
class CorpusSection:
    kind: str = "synthetic"
    seed: int = 0
    vocab_size: int = 10
    words_min: int = 6
    words_max: int = 11
    speaker_count: int = 8
    accent_warp: float = 1.12
    noise_snr_db: float = 10.0
    annotation_rate: float = 0.1
    source_count: int = 2000
    target_train: int = 600
    target_valid: int = 100
    target_test: int = 300
    min_duration_s: float = 2.5
    source_manifest: str = ""
    train_manifest: str = ""
    valid_manifest: str = ""
    test_manifest: str = ""

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.vocab_size, (self.words_min, self.words_max), self.speaker_count, self.accent_warp,
                         self.noise_snr_db, self.seed, self.annotation_rate)


@dataclass
class MixupSection:
    alpha: float = 0.3
    strategy: str = "Mixup3"
    rms_match: bool = False


@dataclass
class EncoderSection:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    ffn_mult: int = 2
    n_mels: int = 40
    last_n: int = 2


@dataclass
class SpinSection:
    K: int = 64
    proj_dim: int = 64
    temp: float = 0.1
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3


@dataclass
class AdaptSection:
    steps: int = 2000
    batch_size: int = 8
    peak_lr: float = 1e-4
    final_lr: float = 1e-6
    warmup_steps: int = 200
    clip_norm: float = 5.0


@dataclass
class FinetuneSection:
    steps: int = 5000
    batch_size: int = 8
    peak_lr: float = 3e-4
    final_lr: float = 3e-5
    warmup_steps: int = 250
    clip_norm: float = 5.0
    head_hidden: int = 64


@dataclass
class DecodeSection:
    beam: int = 16
    lm_weight: float = 1.0
    word_bonus: float = 0.0
    sweep_lm_weights: tuple[float, ...] = (0.5, 1.0, 2.0)
    sweep_word_bonuses: tuple[float, ...] = (0.0, 1.0)
    arpa: str = ""
    lm_order: int = 3
    lm_sentences: int = 3000


@dataclass
class EvalSection:
    significance: float = 0.01


SECTIONS = {
    "experiment": ExperimentSection,
    "corpus": CorpusSection,
    "mixup": MixupSection,
    "encoder": EncoderSection,
    "spin": SpinSection,
    "adapt": AdaptSection,
    "finetune": FinetuneSection,
    "decode": DecodeSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    mixup: MixupSection = field(default_factory=MixupSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    spin: SpinSection = field(default_factory=SpinSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: Path = field(default=Path("."), compare=False)

    # -- derived component configs
    @property
    def seed(self) -> int:
        return self.experiment.seed

    def mixup_config(self, alpha: float | None = None) -> MixupConfig:
        a = self.mixup.alpha if alpha is None else alpha
        return MixupConfig(a, self.mixup.strategy, self.seed, self.mixup.rms_match)

    def spin_config(self) -> SpinConfig:
        s = self.spin
        return SpinConfig(s.K, s.proj_dim, s.temp, s.sinkhorn_eps, s.sinkhorn_iters, self.seed)

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(n_mels=self.encoder.n_mels)

    def adapt_train(self) -> TrainConfig:
        a = self.adapt
        return TrainConfig(a.steps, a.batch_size, self.seed * 1000 + 1, a.peak_lr, a.final_lr, a.warmup_steps,
                           a.clip_norm)

    def finetune_train(self, subset: str = "full") -> TrainConfig:
        f = self.finetune
        steps = finetune_steps(f.steps, subset)
        warm = max(1, min(f.warmup_steps, steps // 10))
        return TrainConfig(steps, f.batch_size, self.seed * 1000 + 2, f.peak_lr, f.final_lr, warm, f.clip_norm)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> "ExperimentConfig":
        e, c = self.experiment, self.corpus
        for s in e.systems:
            if s not in ("none", "acmix"):
                raise ConfigError(f"experiment.systems: unknown system {s!r} (use none, acmix)")
        if e.baseline and e.baseline not in e.systems:
            raise ConfigError(f"experiment.baseline {e.baseline!r} is not one of the systems")
        if e.finetune_mode not in ("head_ft", "full_ft"):
            raise ConfigError(f"experiment.finetune_mode: {e.finetune_mode!r}")
        for a in e.sweep_alphas:
            if not any(abs(a - g) < 1e-9 for g in ALPHA_GRID):
                raise ConfigError(f"experiment.sweep_alphas: {a} is not on the 0.0..0.9 grid")
        for s in e.subsets:
            if s not in SUBSET_HOURS:
                raise ConfigError(f"experiment.subsets: unknown subset {s!r}; use {list(SUBSET_HOURS)}")
        self.mixup_config()
        self.spin_config()
        self.feature_config()
        if not 0 <= self.encoder.last_n <= self.encoder.n_layers:
            raise ConfigError("encoder.last_n must lie in [0, n_layers]")
        if c.kind == "synthetic":
            c.synth_spec().validate()
        elif c.kind == "manifest":
            for key in ("source_manifest", "train_manifest", "valid_manifest", "test_manifest"):
                val = getattr(c, key)
                if not val:
                    raise ConfigError(f"corpus.{key} is required when kind = manifest")
                if not self.resolve(val).exists():
                    raise ConfigError(f"corpus.{key}: {self.resolve(val)} does not exist")
        else:
            raise ConfigError(f"corpus.kind must be synthetic or manifest, got {c.kind!r}")
        if self.decode.arpa and not self.resolve(self.decode.arpa).exists():
            raise ConfigError(f"decode.arpa: {self.resolve(self.decode.arpa)} does not exist")
        if self.decode.beam < 1:
            raise ConfigError("decode.beam must be >= 1")
        for w in self.decode.sweep_lm_weights + (self.decode.lm_weight,):
            if not (math.isfinite(w) and w >= 0):
                raise ConfigError(f"decode lm weights must be finite and >= 0, got {w}")
        for b in self.decode.sweep_word_bonuses + (self.decode.word_bonus,):
            if not math.isfinite(b):
                raise ConfigError(f"decode word bonuses must be finite, got {b}")
        self.adapt_train().schedule()
        self.finetune_train().schedule()
        return self

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def finetune_steps(full_steps: int, subset: str) -> int:
    """Desk budget for a supervised subset, keeping the 150:75:15:2.5 ratios."""
    from .train import FULL_SCALE_FT_STEPS

    # two steps is the shortest schedule that has a warmup
    return max(2, int(round(full_steps * FULL_SCALE_FT_STEPS[subset] / FULL_SCALE_FT_STEPS["full"])))


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == tuple[str, ...]:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if typ == tuple[float, ...]:
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def parse_config(text: str, base_dir: Path = Path(".")) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig(base_dir=base_dir)
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        sec = getattr(cfg, name)
        hints = get_type_hints(type(sec))
        known = {f.name for f in fields(sec)}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            setattr(sec, key, _parse(raw, hints[key], f"{name}.{key}"))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


def override(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides (the CLI's ``--set``)."""
    cfg = dataclasses.replace(cfg, **{n: dataclasses.replace(getattr(cfg, n)) for n in SECTIONS})
    for item in assignments:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        name, key = lhs.strip().split(".", 1)
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        sec = getattr(cfg, name)
        hints = get_type_hints(type(sec))
        if key not in hints:
            raise ConfigError(f"unknown key {name}.{key}")
        setattr(sec, key, _parse(raw, hints[key], lhs))
    return cfg
