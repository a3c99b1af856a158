"""CTC loss (log-domain forward-backward), greedy and prefix-beam decoding."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
import torch

from .arpa import ArpaLm, lm_logprob
from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

NEG_INF = -math.inf
LN10 = math.log(10.0)


@dataclass
class LabelAlphabet:
    """Output symbols; index 0 is always the CTC blank.

    When ``space`` names one of the tokens it acts as the word boundary and
    the other tokens are sub-word units. Without it every token is a word.
    """

    tokens: list[str]
    space: str | None = None
    blank: str = "<blank>"
    blank_index: int = field(default=0, init=False)

    def __post_init__(self):
        self.tokens = list(self.tokens)
        if self.blank in self.tokens:
            raise ConfigError("the blank symbol may not be an output token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate tokens in alphabet")
        if self.space is not None and self.space not in self.tokens:
            raise ConfigError(f"word boundary {self.space!r} not among tokens")
        self._index = {t: i + 1 for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens) + 1

    def encode(self, tokens: Sequence[str], utt_id: str = "") -> list[int]:
        try:
            return [self._index[t] for t in tokens]
        except KeyError as exc:
            raise DataError(f"utterance {utt_id or '?'}: token {exc.args[0]!r} not in alphabet") from None

    def decode(self, indices: Sequence[int]) -> list[str]:
        return [self.tokens[i - 1] for i in indices]

    def to_words(self, tokens: Sequence[str]) -> list[str]:
        if self.space is None:
            return list(tokens)
        return "".join(" " if t == self.space else t for t in tokens).split()


# --------------------------------------------------------------------------
# loss


@numba.njit(cache=True)
def _lse(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@numba.njit(cache=True)
def _forward_backward(lp, ext, blank):
    T = lp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lse(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                a = _lse(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + lp[t, ext[s]]
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _lse(b, beta[t + 1, s + 1])
            if s + 2 < S and ext[s] != blank and ext[s] != ext[s + 2]:
                b = _lse(b, beta[t + 1, s + 2])
            beta[t, s] = b + lp[t, ext[s]]
    return alpha, beta


def _extended(labels: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels``: one frame each plus a blank between repeats."""
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def ctc_occupancy(log_probs, labels: Sequence[int], blank: int = 0) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and expected per-frame symbol occupancy ``[T x C]``."""
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    labels = [int(x) for x in labels]
    if any(not 0 <= x < C or x == blank for x in labels):
        raise DataError(f"labels must be non-blank indices below {C}")
    if T < min_frames(labels):
        return math.inf, np.zeros_like(lp)
    ext = _extended(labels, blank)
    alpha, beta = _forward_backward(lp, ext, blank)
    S = len(ext)
    log_p = _lse(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    if log_p == NEG_INF:
        return math.inf, np.zeros_like(lp)
    post = np.exp(alpha + beta - lp[:, ext] - log_p)
    occ = np.zeros_like(lp)
    for s, k in enumerate(ext):
        occ[:, k] += post[:, s]
    return -float(log_p), occ


def ctc_loss(log_probs, labels: Sequence[int], blank: int = 0) -> tuple[float, np.ndarray]:
    """CTC negative log-likelihood and its gradient w.r.t. the pre-softmax logits.

    ``log_probs`` rows must be log-softmax outputs; the gradient is
    ``softmax - occupancy``. Label sequences too long for the input give an
    infinite loss with a zero gradient (and a logged warning).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise DataError("log_probs must be [T x C]")
    if np.abs(np.exp(lp).sum(axis=1) - 1.0).max() > 1e-6:
        raise DataError("log_probs rows are not normalised")
    loss, occ = ctc_occupancy(lp, labels, blank)
    if math.isinf(loss):
        logger.warning("CTC: %d labels cannot be aligned to %d frames", len(labels), lp.shape[0])
        return loss, occ
    return loss, np.exp(lp) - occ


class CTCLoss(torch.autograd.Function):
    """Batch CTC on logits ``[B x T x C]``; mean over utterances with finite loss."""

    @staticmethod
    def forward(ctx, logits, lengths, targets):
        lp = torch.log_softmax(logits.detach().double(), dim=-1).numpy()
        grad = np.zeros(lp.shape)
        total, n_ok = 0.0, 0
        for b, (t_len, labels) in enumerate(zip(lengths.tolist(), targets)):
            loss, occ = ctc_occupancy(lp[b, :t_len], labels)
            if math.isinf(loss):
                continue
            total += loss
            n_ok += 1
            grad[b, :t_len] = np.exp(lp[b, :t_len]) - occ
        if n_ok < len(targets):
            logger.warning("CTC: %d of %d utterances cannot be aligned and are skipped", len(targets) - n_ok,
                           len(targets))
        n_ok = max(n_ok, 1)
        ctx.save_for_backward(torch.as_tensor(grad / n_ok, dtype=logits.dtype))
        return logits.new_tensor(total / n_ok)

    @staticmethod
    def backward(ctx, grad_out):
        (g,) = ctx.saved_tensors
        return grad_out * g, None, None


# --------------------------------------------------------------------------
# decoding


def greedy_decode(log_probs, blank: int = 0) -> list[int]:
    best = np.asarray(log_probs).argmax(axis=1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


@dataclass
class BeamHyp:
    prefix: tuple[int, ...]
    log_pb: float
    log_pnb: float
    lm_score: float = 0.0
    n_words: int = 0
    lm_context: tuple[str, ...] = ("<s>",)
    partial: str = ""
    score: float = NEG_INF

    @property
    def acoustic(self) -> float:
        return float(np.logaddexp(self.log_pb, self.log_pnb))


def _lse_py(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


class _LmTracker:
    """Caches per-prefix language-model state during beam search."""

    def __init__(self, alphabet: LabelAlphabet, lm: ArpaLm | None, lm_weight: float):
        self.alphabet, self.lm, self.lm_weight = alphabet, lm, lm_weight
        self.order = lm.order if lm is not None else 1
        self.cache: dict[tuple, tuple[float, int, tuple, str]] = {(): (0.0, 0, ("<s>",), "")}

    def _word(self, lm_score, n_words, ctx, word):
        if self.lm is not None and self.lm_weight != 0.0:
            lm_score += LN10 * lm_logprob(self.lm, ctx, word)
        ctx = (ctx + (word,))[-(self.order - 1):] if self.order > 1 else ()
        return lm_score, n_words + 1, ctx

    def state(self, prefix: tuple[int, ...]):
        hit = self.cache.get(prefix)
        if hit is not None:
            return hit
        lm_score, n_words, ctx, partial = self.state(prefix[:-1])
        tok = self.alphabet.tokens[prefix[-1] - 1]
        if self.alphabet.space is None:
            lm_score, n_words, ctx = self._word(lm_score, n_words, ctx, tok)
        elif tok == self.alphabet.space:
            if partial:
                lm_score, n_words, ctx = self._word(lm_score, n_words, ctx, partial)
            partial = ""
        else:
            partial += tok
        out = (lm_score, n_words, ctx, partial)
        self.cache[prefix] = out
        return out

    def final(self, prefix):
        lm_score, n_words, ctx, partial = self.state(prefix)
        if partial:
            lm_score, n_words, ctx = self._word(lm_score, n_words, ctx, partial)
        if self.lm is not None and self.lm_weight != 0.0:
            lm_score += LN10 * lm_logprob(self.lm, ctx, "</s>")
        return lm_score, n_words, ctx


def beam_search(
    log_probs,
    alphabet: LabelAlphabet,
    lm: ArpaLm | None = None,
    beam: int = 16,
    lm_weight: float = 1.0,
    word_bonus: float = 0.0,
    token_prune: float = math.log(1e-4),
) -> list[BeamHyp]:
    """CTC prefix beam search with word-level n-gram shallow fusion.

    Scores are ``ln P_ctc(prefix) + lm_weight * ln P_lm(words) + word_bonus * n_words``
    where the LM term is accumulated as each word completes (and ``</s>`` is
    added at the end). Returns the surviving hypotheses, best first.
    """
    if beam < 1:
        raise ConfigError(f"beam must be >= 1, got {beam}")
    lp = np.asarray(log_probs, dtype=np.float64)
    blank = alphabet.blank_index
    lmt = _LmTracker(alphabet, lm, lm_weight)

    def score(prefix, pb, pnb):
        lm_score, n_words, _, _ = lmt.state(prefix)
        return _lse_py(pb, pnb) + lm_weight * lm_score + word_bonus * n_words

    beams: dict[tuple, list[float]] = {(): [0.0, NEG_INF]}
    for t in range(lp.shape[0]):
        row = lp[t]
        cand = [c for c in range(len(row)) if c != blank and row[c] >= token_prune]
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = _lse_py(pb, pnb)
            cur = nxt[prefix]
            cur[0] = _lse_py(cur[0], total + row[blank])
            last = prefix[-1] if prefix else None
            for c in cand:
                p = row[c]
                ext = prefix + (c,)
                e = nxt[ext]
                if c == last:
                    cur[1] = _lse_py(cur[1], pnb + p)
                    e[1] = _lse_py(e[1], pb + p)
                else:
                    e[1] = _lse_py(e[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-score(kv[0], *kv[1]), kv[0]))
        beams = dict(ranked[:beam])

    hyps = []
    for prefix, (pb, pnb) in beams.items():
        lm_score, n_words, ctx = lmt.final(prefix)
        h = BeamHyp(prefix, pb, pnb, lm_score, n_words, ctx)
        h.score = h.acoustic + lm_weight * lm_score + word_bonus * n_words
        hyps.append(h)
    hyps.sort(key=lambda h: (-h.score, h.prefix))
    return hyps


def beam_decode(log_probs, alphabet: LabelAlphabet, lm: ArpaLm | None = None, beam: int = 16,
                lm_weight: float = 1.0, word_bonus: float = 0.0, **kw) -> list[int]:
    return list(beam_search(log_probs, alphabet, lm, beam, lm_weight, word_bonus, **kw)[0].prefix)
