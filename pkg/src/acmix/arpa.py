r"""ARPA back-off n-gram models: reading, writing, querying and estimation.

Only the text format is supported::

    \data\
    ngram 1=3
    \1-grams:
    -0.5    a   -0.3
    ...
    \end\
"""

from __future__ import annotations

import io
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .exceptions import DataError, FormatError

OOV_LOGPROB = -99.0
BOS, EOS, UNK = "<s>", "</s>", "<unk>"


@dataclass
class ArpaLm:
    order: int
    probs: dict[tuple[str, ...], float] = field(default_factory=dict)
    backoffs: dict[tuple[str, ...], float] = field(default_factory=dict)

    @property
    def vocab(self) -> set[str]:
        return {k[0] for k in self.probs if len(k) == 1}

    def counts(self) -> dict[int, int]:
        c = Counter(len(k) for k in self.probs)
        return {n: c.get(n, 0) for n in range(1, self.order + 1)}


def lm_logprob(lm: ArpaLm, context: Sequence[str], token: str) -> float:
    """log10 P(token | context) by the standard back-off recursion."""
    vocab_has_unk = (UNK,) in lm.probs
    if (token,) not in lm.probs:
        if not vocab_has_unk:
            return OOV_LOGPROB
        token = UNK
    ctx = tuple(UNK if (w,) not in lm.probs and vocab_has_unk else w for w in context)
    ctx = ctx[len(ctx) - (lm.order - 1):] if lm.order > 1 else ()
    return _backoff_prob(lm, ctx, token)


def _backoff_prob(lm: ArpaLm, ctx: tuple[str, ...], token: str) -> float:
    hit = lm.probs.get(ctx + (token,))
    if hit is not None:
        return hit
    if not ctx:
        return OOV_LOGPROB
    return lm.backoffs.get(ctx, 0.0) + _backoff_prob(lm, ctx[1:], token)


def sentence_logprob(lm: ArpaLm, words: Sequence[str]) -> float:
    ctx: list[str] = [BOS]
    total = 0.0
    for w in list(words) + [EOS]:
        total += lm_logprob(lm, ctx, w)
        ctx.append(w)
    return total


_SECTION = re.compile(r"^\\(\d+)-grams:$")


def read_arpa(source) -> ArpaLm:
    """Parse an ARPA file (path or text stream)."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise DataError(f"ARPA file not found: {path}")
        with open(path, encoding="utf-8") as f:
            return read_arpa(f)
    declared: dict[int, int] = {}
    probs: dict[tuple, float] = {}
    backoffs: dict[tuple, float] = {}
    state, n = "start", 0
    for lineno, raw in enumerate(source, 1):
        line = raw.strip()
        if not line:
            continue
        if line == "\\data\\":
            state = "data"
            continue
        if line == "\\end\\":
            state = "end"
            break
        m = _SECTION.match(line)
        if m:
            n = int(m.group(1))
            state = "ngrams"
            continue
        if state == "data":
            if not line.startswith("ngram "):
                raise FormatError(f"ARPA line {lineno}: expected 'ngram N=count'")
            order, count = line[6:].split("=")
            declared[int(order)] = int(count)
        elif state == "ngrams":
            parts = line.split()
            if len(parts) not in (n + 1, n + 2):
                raise FormatError(f"ARPA line {lineno}: expected {n}-gram entry, got {line!r}")
            key = tuple(parts[1 : n + 1])
            probs[key] = float(parts[0])
            if len(parts) == n + 2:
                backoffs[key] = float(parts[-1])
        elif state == "start":
            continue
    if state != "end":
        raise FormatError("ARPA file lacks \\end\\ marker")
    if not declared:
        raise FormatError("ARPA file lacks a \\data\\ section")
    lm = ArpaLm(max(declared), probs, backoffs)
    found = lm.counts()
    for k, v in declared.items():
        if found.get(k, 0) != v:
            raise FormatError(f"ARPA header declares {v} {k}-grams, found {found.get(k, 0)}")
    return lm


def write_arpa(lm: ArpaLm, target) -> None:
    if isinstance(target, (str, Path)):
        with open(target, "w", encoding="utf-8") as f:
            write_arpa(lm, f)
        return
    counts = lm.counts()
    target.write("\\data\\\n")
    for k in range(1, lm.order + 1):
        target.write(f"ngram {k}={counts[k]}\n")
    for k in range(1, lm.order + 1):
        target.write(f"\n\\{k}-grams:\n")
        for key in sorted(x for x in lm.probs if len(x) == k):
            line = f"{lm.probs[key]:.7f}\t{' '.join(key)}"
            if key in lm.backoffs:
                line += f"\t{lm.backoffs[key]:.7f}"
            target.write(line + "\n")
    target.write("\n\\end\\\n")


def arpa_text(lm: ArpaLm) -> str:
    buf = io.StringIO()
    write_arpa(lm, buf)
    return buf.getvalue()


def estimate_arpa(sentences: Iterable[Sequence[str]], order: int = 3, discount: float = 0.5) -> ArpaLm:
    """Back-off model with absolute discounting and add-one unigrams.

    Back-off weights are chosen so every conditional distribution sums to
    one over the vocabulary (all words, ``</s>`` and ``<unk>``).
    """
    counts: list[Counter] = [Counter() for _ in range(order + 1)]
    for sent in sentences:
        padded = [BOS] + list(sent) + [EOS]
        for k in range(1, order + 1):
            for i in range(len(padded) - k + 1):
                gram = tuple(padded[i : i + k])
                if gram == (BOS,):
                    continue
                counts[k][gram] += 1
    vocab = sorted({w for (w,) in counts[1]} | {EOS, UNK})
    total = sum(counts[1].values())
    lm = ArpaLm(order)
    for w in vocab:
        lm.probs[(w,)] = math.log10((counts[1][(w,)] + 1) / (total + len(vocab)))
    lm.probs[(BOS,)] = OOV_LOGPROB
    for k in range(2, order + 1):
        by_ctx: dict[tuple, dict[str, int]] = defaultdict(dict)
        for gram, c in counts[k].items():
            by_ctx[gram[:-1]][gram[-1]] = c
        lower = ArpaLm(k - 1, dict(lm.probs), dict(lm.backoffs))
        new_probs = {}
        for ctx, cont in by_ctx.items():
            c_ctx = sum(cont.values())
            lower_seen = sum(10 ** _backoff_prob(lower, ctx[1:], w) for w in cont)
            leftover = discount * len(cont) / c_ctx
            if 1.0 - lower_seen < 1e-9:
                for w, c in cont.items():
                    new_probs[ctx + (w,)] = math.log10(c / c_ctx)
                lm.backoffs[ctx] = 0.0
                continue
            for w, c in cont.items():
                new_probs[ctx + (w,)] = math.log10((c - discount) / c_ctx)
            lm.backoffs[ctx] = math.log10(leftover / (1.0 - lower_seen))
        lm.probs.update(new_probs)
    return lm
