"""Waveform mixup between source- and target-domain utterances.

Each base utterance ``x`` yields two views ``v_n = lam * x + (1 - lam) * x_n``
where the partners ``x_n`` and the batch composition depend on the strategy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Utterance
from .exceptions import ConfigError, DataError

STRATEGIES = ("Mixup1", "Mixup2", "Mixup3", "Mixup4")
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(10))


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 0.9 + 1e-12:
        raise ConfigError(f"alpha must lie in [0, 0.9], got {alpha}")


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.3
    strategy: str = "Mixup3"
    seed: int = 0
    rms_match: bool = False

    def __post_init__(self):
        _check_alpha(self.alpha)
        if abs(self.alpha * 10 - round(self.alpha * 10)) > 1e-9:
            raise ConfigError(f"alpha must be on the 0.1 grid, got {self.alpha}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown mixup strategy {self.strategy!r}; expected one of {STRATEGIES}")


@dataclass
class MixupViewPair:
    v1: np.ndarray
    v2: np.ndarray
    lambda1: float
    lambda2: float
    mixer1_id: str
    mixer2_id: str
    base_id: str


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Draw the interpolation weight from U[alpha, 1)."""
    _check_alpha(alpha)
    return float(rng.uniform(alpha, 1.0))


def fit_length(x_tilde: np.ndarray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop (random offset) or cyclically tile ``x_tilde`` to length ``n``."""
    m = len(x_tilde)
    if m == n:
        return x_tilde
    if m > n:
        off = int(rng.integers(0, m - n + 1)) if rng is not None else 0
        return x_tilde[off : off + n]
    if m == 0:
        raise DataError("cannot tile an empty mixer signal")
    return np.resize(x_tilde, n)


def mix(x, x_tilde, lam: float, rng: np.random.Generator | None = None, rms_match: bool = False) -> np.ndarray:
    x = np.asarray(x)
    if x.size == 0:
        raise DataError("mix: base signal is empty")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mix: lambda must lie in [0, 1], got {lam}")
    xt = fit_length(np.asarray(x_tilde), len(x), rng)
    x64 = x.astype(np.float64)
    xt64 = xt.astype(np.float64)
    if rms_match:
        r = np.sqrt(np.mean(xt64**2))
        if r > 0:
            xt64 = xt64 * (np.sqrt(np.mean(x64**2)) / r)
    return (lam * x64 + (1.0 - lam) * xt64).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def _pick(pool: Sequence[Utterance], rng: np.random.Generator, exclude: str | None = None) -> Utterance:
    if exclude is None:
        return pool[int(rng.integers(len(pool)))]
    candidates = [u for u in pool if u.id != exclude]
    if not candidates:
        raise ConfigError("Mixup1 batch has no partner other than the base utterance")
    return candidates[int(rng.integers(len(candidates)))]


def make_view_pair(
    base: Utterance,
    source_pool: Sequence[Utterance],
    target_pool: Sequence[Utterance],
    cfg: MixupConfig,
    rng: np.random.Generator,
    batch: Sequence[Utterance] | None = None,
) -> MixupViewPair:
    """Build the two mixed views of ``base`` according to ``cfg.strategy``.

    Mixup1 draws partners from ``batch`` (never the base itself). Mixup2 mixes
    target bases with source partners, Mixup3 source bases with target
    partners, and Mixup4 is Mixup3 with one partner shared by both views.
    """
    s = cfg.strategy
    if s == "Mixup1":
        if not batch:
            raise ConfigError("Mixup1 needs the batch the base utterance was drawn from")
        m1 = _pick(batch, rng, exclude=base.id)
        m2 = _pick(batch, rng, exclude=base.id)
    elif s == "Mixup2":
        if base.domain != "target":
            raise ConfigError(f"Mixup2 base must be a target utterance, got {base.domain}")
        if not source_pool:
            raise ConfigError("Mixup2 needs a non-empty source_pool")
        m1 = _pick(source_pool, rng)
        m2 = _pick(source_pool, rng)
    else:
        if base.domain != "source":
            raise ConfigError(f"{s} base must be a source utterance, got {base.domain}")
        if not target_pool:
            raise ConfigError(f"{s} needs a non-empty target_pool")
        m1 = _pick(target_pool, rng)
        m2 = m1 if s == "Mixup4" else _pick(target_pool, rng)
    lam1 = sample_lambda(cfg.alpha, rng)
    lam2 = sample_lambda(cfg.alpha, rng)
    v1 = mix(base.samples, m1.samples, lam1, rng, cfg.rms_match)
    v2 = mix(base.samples, m2.samples, lam2, rng, cfg.rms_match)
    return MixupViewPair(v1, v2, lam1, lam2, m1.id, m2.id, base.id)


def _sample(pool, k, rng):
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[int(i)] for i in idx]


def compose_batch(
    strategy: str,
    source_pool: Sequence[Utterance],
    target_pool: Sequence[Utterance],
    batch_size: int,
    rng: np.random.Generator,
) -> list[Utterance]:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown mixup strategy {strategy!r}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if strategy == "Mixup1":
        for name, pool in (("source_pool", source_pool), ("target_pool", target_pool)):
            if not pool:
                raise ConfigError(f"Mixup1 needs a non-empty {name}")
        if batch_size > len(source_pool) + len(target_pool):
            raise ConfigError("batch_size exceeds the combined pool size")
        if batch_size == 1:
            return _sample(list(source_pool) + list(target_pool), 1, rng)
        first = [_sample(source_pool, 1, rng)[0], _sample(target_pool, 1, rng)[0]]
        taken = {u.id for u in first}
        rest = [u for u in list(source_pool) + list(target_pool) if u.id not in taken]
        batch = first + _sample(rest, batch_size - 2, rng)
        order = rng.permutation(batch_size)
        return [batch[int(i)] for i in order]
    name, pool = ("target_pool", target_pool) if strategy == "Mixup2" else ("source_pool", source_pool)
    if not pool:
        raise ConfigError(f"{strategy} needs a non-empty {name}")
    if batch_size > len(pool):
        raise ConfigError(f"batch_size {batch_size} exceeds {name} size {len(pool)}")
    return _sample(pool, batch_size, rng)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """RNG stream for one training step; batches are a pure function of (seed, step)."""
    return np.random.default_rng([seed, 11, step])
