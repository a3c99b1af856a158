"""Domain adaptation of speech encoders with contrastive mixup (AC-Mix)."""

from .corpus import SynthSpec, Utterance, synth_corpus
from .estimators import ACMixAdapter, CTCRecognizer
from .eval import compare, mapsswe, wer
from .exceptions import ACMixError, ConfigError, DataError, NumericalError
from .mixup import MixupConfig

__version__ = "0.1.0"

__all__ = [
    "ACMixAdapter",
    "ACMixError",
    "CTCRecognizer",
    "ConfigError",
    "DataError",
    "MixupConfig",
    "NumericalError",
    "SynthSpec",
    "Utterance",
    "compare",
    "mapsswe",
    "synth_corpus",
    "wer",
]
