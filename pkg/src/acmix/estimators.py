"""scikit-learn style estimators over the two AC-Mix stages.

``ACMixAdapter`` is a transformer: ``fit`` adapts a speech encoder on
unlabelled source/target utterances and ``transform`` returns frame
embeddings. ``CTCRecognizer`` fine-tunes a CTC head (optionally with the
adapted encoder blocks) and predicts word sequences.

Inputs are lists of :class:`~acmix.corpus.Utterance`.
"""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .arpa import ArpaLm
from .corpus import Utterance, admit_supervised
from .ctc import LabelAlphabet
from .encoder import Encoder, FeatureConfig, encode, logmel, set_trainable
from .eval import wer
from .exceptions import DataError
from .mixup import MixupConfig
from .spin import SpinConfig, SpinHead
from .train import TrainConfig, adapt, decode_all, finetune, log_posteriors


def check_utterances(X, require_transcripts: bool = False, domains: Sequence[str] | None = None) -> list[Utterance]:
    """Validate estimator input: a non-empty sequence of finite utterances."""
    if isinstance(X, Utterance):
        raise DataError("expected a sequence of utterances, got a single Utterance")
    X = list(X)
    if not X:
        raise DataError("empty input")
    for u in X:
        if not isinstance(u, Utterance):
            raise DataError(f"expected Utterance objects, got {type(u).__name__}")
        if not np.isfinite(u.samples).all():
            raise DataError(f"utterance {u.id}: non-finite samples")
        if require_transcripts and not u.transcript:
            raise DataError(f"utterance {u.id}: empty transcript")
        if domains is not None and u.domain not in domains:
            raise DataError(f"utterance {u.id}: domain {u.domain!r} not allowed here")
    return X


class ACMixAdapter(TransformerMixin, BaseEstimator):
    """Self-supervised domain adaptation of an encoder with contrastive mixup.

    Parameters
    ----------
    strategy : {"Mixup1", "Mixup2", "Mixup3", "Mixup4"}
        Batch composition and choice of interpolation partners.
    alpha : float
        Lower bound of the interpolation weight, lambda ~ U(alpha, 1).
    rms_match : bool
        Scale each mixer to the base utterance's RMS before mixing.
    last_n : int
        Number of final encoder blocks that are adapted.
    encoder : Encoder, optional
        Starting encoder; copied, never modified. A fresh seeded encoder of
        the given size is built when omitted.
    """

    def __init__(self, strategy="Mixup3", alpha=0.3, rms_match=False, last_n=2, n_layers=4, d_model=128, n_heads=4, n_mels=40,
                 K=64, proj_dim=64, temp=0.1, sinkhorn_eps=0.05, sinkhorn_iters=3, steps=2000, batch_size=8,
                 peak_lr=1e-4, final_lr=1e-6, warmup_steps=200, clip_norm=5.0, encoder=None, random_state=0,
                 train_seed=None, progress=None):
        self.strategy = strategy
        self.alpha = alpha
        self.rms_match = rms_match
        self.last_n = last_n
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_mels = n_mels
        self.K = K
        self.proj_dim = proj_dim
        self.temp = temp
        self.sinkhorn_eps = sinkhorn_eps
        self.sinkhorn_iters = sinkhorn_iters
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.final_lr = final_lr
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.encoder = encoder
        self.random_state = random_state
        self.train_seed = train_seed
        self.progress = progress

    def _initial_encoder(self) -> Encoder:
        if self.encoder is not None:
            return copy.deepcopy(self.encoder)
        return Encoder(self.n_mels, self.d_model, self.n_layers, self.n_heads, seed=self.random_state)

    def fit(self, X, y=None):
        X = check_utterances(X)
        source = [u for u in X if u.domain == "source"]
        target = [u for u in X if u.domain == "target"]
        enc = set_trainable(self._initial_encoder(), self.last_n)
        spin_cfg = SpinConfig(self.K, self.proj_dim, self.temp, self.sinkhorn_eps, self.sinkhorn_iters,
                              self.random_state)
        head = SpinHead(enc.d_model, spin_cfg).to(next(enc.parameters()).dtype)
        seed = self.random_state if self.train_seed is None else self.train_seed
        run = TrainConfig(self.steps, self.batch_size, seed, self.peak_lr, self.final_lr, self.warmup_steps,
                          self.clip_norm)
        mix = MixupConfig(self.alpha, self.strategy, self.random_state, self.rms_match)
        res = adapt(enc, head, mix, source, target, run, FeatureConfig(n_mels=enc.n_mels), progress=self.progress)
        self.encoder_ = res.encoder
        self.spin_head_ = res.head
        self.loss_trace_ = res.trace
        self.optim_ = res.optim
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = check_utterances(X)
        fc = FeatureConfig(n_mels=self.encoder_.n_mels)
        return [encode(self.encoder_, logmel(u.samples, fc)) for u in X]


class CTCRecognizer(BaseEstimator):
    """CTC speech recogniser on top of a (possibly adapted) encoder.

    ``mode="head_ft"`` trains the BLSTM head only; ``"full_ft"`` also trains
    the encoder blocks marked trainable (the ones adapted in stage 1, or the
    last ``last_n`` blocks of a fresh encoder).
    """

    def __init__(self, mode="full_ft", encoder=None, last_n=2, n_layers=4, d_model=128, n_heads=4, n_mels=40,
                 steps=5000, batch_size=8, peak_lr=3e-4, final_lr=3e-5, warmup_steps=250, clip_norm=5.0,
                 head_hidden=64, min_duration_s=2.5, vocabulary=None, lm=None, beam=16, lm_weight=1.0, word_bonus=0.0,
                 random_state=0, train_seed=None, progress=None):
        self.mode = mode
        self.encoder = encoder
        self.last_n = last_n
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_mels = n_mels
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.final_lr = final_lr
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.head_hidden = head_hidden
        self.min_duration_s = min_duration_s
        self.vocabulary = vocabulary
        self.lm = lm
        self.beam = beam
        self.lm_weight = lm_weight
        self.word_bonus = word_bonus
        self.random_state = random_state
        self.train_seed = train_seed
        self.progress = progress

    def fit(self, X, y=None):
        X = check_utterances(X)
        if y is not None:
            y = list(y)
            if len(y) != len(X):
                raise DataError(f"got {len(X)} utterances but {len(y)} transcripts")
            X = [Utterance(u.id, u.samples, tuple(t), u.domain, u.duration_s, u.raw_text, u.speaker)
                 for u, t in zip(X, y)]
        X = admit_supervised(X, self.min_duration_s)
        if not X:
            raise DataError(f"no utterance of at least {self.min_duration_s} s with a transcript")
        if self.encoder is not None:
            enc = copy.deepcopy(self.encoder)
        else:
            enc = set_trainable(Encoder(self.n_mels, self.d_model, self.n_layers, self.n_heads,
                                        seed=self.random_state), self.last_n)
        vocab = self.vocabulary if self.vocabulary is not None else sorted({t for u in X for t in u.transcript})
        self.alphabet_ = LabelAlphabet(list(vocab))
        seed = self.random_state if self.train_seed is None else self.train_seed
        run = TrainConfig(self.steps, self.batch_size, seed, self.peak_lr, self.final_lr, self.warmup_steps,
                          self.clip_norm)
        res = finetune(enc, self.mode, X, self.alphabet_, run, FeatureConfig(n_mels=enc.n_mels), self.head_hidden,
                       progress=self.progress)
        self.encoder_ = res.encoder
        self.head_ = res.head
        self.loss_trace_ = res.trace
        self.optim_ = res.optim
        self.n_train_ = len(X)
        return self

    def predict_log_proba(self, X) -> list[np.ndarray]:
        """Per-frame log posteriors ``[T' x (vocab + 1)]``, blank first."""
        check_is_fitted(self, "head_")
        X = check_utterances(X)
        return log_posteriors(self.encoder_, self.head_, X, FeatureConfig(n_mels=self.encoder_.n_mels))

    def decode(self, X, lm: ArpaLm | None = None) -> list[tuple[list[str], float]]:
        return decode_all(self.predict_log_proba(X), self.alphabet_, lm, self.beam, self.lm_weight, self.word_bonus)

    def predict(self, X) -> list[list[str]]:
        return [words for words, _ in self.decode(X, self.lm)]

    def score(self, X, y=None) -> float:
        """``1 - WER`` so that larger is better, as sklearn expects."""
        X = check_utterances(X)
        refs = {u.id: (list(t) if y is not None else list(u.transcript))
                for u, t in zip(X, y if y is not None else [None] * len(X))}
        hyps = {u.id: h for u, h in zip(X, self.predict(X))}
        return 1.0 - wer(refs, hyps).wer
