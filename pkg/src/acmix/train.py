"""Optimiser, learning-rate schedule and the two training stages.

Stage 1 (:func:`adapt`) trains the unfrozen encoder blocks and the spin head
on unlabelled mixup views. Stage 2 (:func:`finetune`) trains a bidirectional
LSTM prediction head with CTC on labelled target data, optionally together
with the encoder blocks adapted in stage 1. Both stages keep the model from
their final step.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Utterance
from .ctc import CTCLoss, LabelAlphabet, beam_search, greedy_decode
from .encoder import Encoder, FeatureConfig, length_mask, logmel, pad_features, save_encoder
from .exceptions import ConfigError, DataError, NumericalError
from .mixup import MixupConfig, compose_batch, make_view_pair, step_rng
from .spin import SpinHead, spin_loss

logger = logging.getLogger(__name__)

# full-scale fine-tuning budgets by amount of supervised data
FULL_SCALE_FT_STEPS = {"full": 150_000, "5h": 75_000, "1h": 15_000, "10min": 2_500}


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    peak_lr: float
    final_lr: float
    total_steps: int

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if self.final_lr > self.peak_lr:
            raise ConfigError("final_lr must not exceed peak_lr")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warm-up from 0 to the peak, then linear decay to the final rate."""
    s = schedule
    if not 0 <= step <= s.total_steps:
        logger.warning("lr_at: step %d outside [0, %d], clamping", step, s.total_steps)
        step = min(max(step, 0), s.total_steps)
    if step <= s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    frac = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.peak_lr * (1.0 - frac) + s.final_lr * frac


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def arrays(self, prefix: str = "optim") -> dict[str, np.ndarray]:
        out = {f"{prefix}/m/{k}": t.numpy().copy() for k, t in self.m.items()}
        out.update({f"{prefix}/v/{k}": t.numpy().copy() for k, t in self.v.items()})
        return out


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], state: AdamState,
              lr: float) -> bool:
    """Bias-corrected Adam update, in place, of every parameter that has a gradient.

    A non-finite gradient aborts the whole step: nothing (parameters or
    moments) changes and ``False`` is returned.
    """
    live = {k: g for k, g in grads.items() if g is not None and params[k].requires_grad}
    if not live:
        return True
    keys = list(live)
    gs = [live[k] for k in keys]
    # a sum is non-finite whenever any element is
    sums = torch.stack([g.sum().double() for g in gs])
    if not torch.isfinite(sums).all():
        bad = next(k for k in keys if not torch.isfinite(live[k]).all())
        logger.error("non-finite gradient for %s; skipping optimiser step %d", bad, state.step + 1)
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        ps = [params[k] for k in keys]
        ms = [state.m.setdefault(k, torch.zeros_like(p)) for k, p in zip(keys, ps)]
        vs = [state.v.setdefault(k, torch.zeros_like(p)) for k, p in zip(keys, ps)]
        torch._foreach_mul_(ms, b1)
        torch._foreach_add_(ms, gs, alpha=1.0 - b1)
        torch._foreach_mul_(vs, b2)
        torch._foreach_addcmul_(vs, gs, gs, value=1.0 - b2)
        denom = torch._foreach_div(vs, c2)
        torch._foreach_sqrt_(denom)
        torch._foreach_add_(denom, state.eps)
        step = torch._foreach_div(ms, c1)
        torch._foreach_div_(step, denom)
        torch._foreach_mul_(step, lr)
        torch._foreach_sub_(ps, step)
    return True


def clip_grad_norm(grads: dict[str, torch.Tensor | None], max_norm: float) -> float:
    live = [g for g in grads.values() if g is not None]
    if not live:
        return 0.0
    total = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g, dtype=torch.float64) for g in live])))
    if max_norm and total > max_norm:
        torch._foreach_mul_(live, max_norm / (total + 1e-12))
    return total


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    peak_lr: float = 1e-4
    final_lr: float = 1e-6
    warmup_steps: int = 200
    clip_norm: float = 5.0
    log_every: int = 100

    def schedule(self) -> Schedule:
        return Schedule(self.warmup_steps, self.peak_lr, self.final_lr, self.steps)


@dataclass
class LossTrace:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def add(self, step, loss, lr):
        self.steps.append(step)
        self.losses.append(float(loss))
        self.lrs.append(float(lr))

    def __len__(self):
        return len(self.steps)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "loss", "lr"])
            for row in zip(self.steps, self.losses, self.lrs):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def _trainable(named: Sequence[tuple[str, nn.Module]]) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{n}": p for prefix, mod in named for n, p in mod.named_parameters() if p.requires_grad}


def _encoder_named(encoder: Encoder) -> list[tuple[str, nn.Module]]:
    return [("frontend", encoder.frontend)] + [(f"layer{i}", b) for i, b in enumerate(encoder.blocks)]


def _features(samples_list, feature_cfg: FeatureConfig) -> list[np.ndarray]:
    return [logmel(x, feature_cfg) for x in samples_list]


# --------------------------------------------------------------------------
# stage 1: adaptation


@dataclass
class AdaptResult:
    encoder: Encoder
    head: SpinHead
    trace: LossTrace
    optim: AdamState
    checkpoint: Path | None = None


def adapt(encoder: Encoder, head: SpinHead, mixup_cfg: MixupConfig, source_pool: Sequence[Utterance],
          target_pool: Sequence[Utterance], run_cfg: TrainConfig, feature_cfg: FeatureConfig = FeatureConfig(),
          checkpoint: str | Path | None = None, progress: Callable | None = None) -> AdaptResult:
    """Self-supervised adaptation on mixup views. Transcripts are never read.

    The encoder's ``trainable_mask`` (see ``set_trainable``) decides which
    blocks move; the spin head always trains.
    """
    sched = run_cfg.schedule()
    # fail early on an unusable strategy/pool combination
    compose_batch(mixup_cfg.strategy, source_pool, target_pool, run_cfg.batch_size, step_rng(run_cfg.seed, 0))
    named = _encoder_named(encoder) + [("spin", head)]
    params = _trainable(named)
    state = AdamState()
    trace = LossTrace()
    dtype = next(encoder.parameters()).dtype
    for step in range(1, run_cfg.steps + 1):
        rng = step_rng(run_cfg.seed, step)
        batch = compose_batch(mixup_cfg.strategy, source_pool, target_pool, run_cfg.batch_size, rng)
        pairs = [make_view_pair(u, source_pool, target_pool, mixup_cfg, rng, batch) for u in batch]
        feats = _features([p.v1 for p in pairs] + [p.v2 for p in pairs], feature_cfg)
        x, lengths = pad_features(feats, dtype)
        h, out_len = encoder(x, lengths)
        b = len(pairs)
        mask = length_mask(out_len[:b], h.shape[1])
        loss, _, _ = spin_loss(head, h[:b][mask], h[b:][mask])
        for p in params.values():
            p.grad = None
        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        clip_grad_norm(grads, run_cfg.clip_norm)
        lr = lr_at(sched, step)
        if not adam_step(params, grads, state, lr):
            raise NumericalError(f"adaptation step {step}: non-finite gradient")
        head.renormalize()
        trace.add(step, loss.item(), lr)
        encoder.step += 1
        if progress and (step % run_cfg.log_every == 0 or step == run_cfg.steps):
            progress("adapt", step, float(np.mean(trace.losses[-run_cfg.log_every:])))
    for p in params.values():
        p.grad = None
    path = None
    if checkpoint is not None:
        extra = head.state_arrays()
        extra.update(state.arrays())
        path = save_encoder(checkpoint, encoder, extra,
                            {"stage": "adapt", "spin": asdict(head.cfg), "mixup": asdict(mixup_cfg),
                             "train": asdict(run_cfg), "optim_step": state.step})
    return AdaptResult(encoder, head, trace, state, path)


# --------------------------------------------------------------------------
# stage 2: supervised fine-tuning


def reverse_padded(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each sequence within its own length; padding stays at the end."""
    t = torch.arange(x.shape[1])[None, :]
    idx = torch.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    return x.gather(1, idx[..., None].expand_as(x))


class PredictionHead(nn.Module):
    """Two-layer BLSTM over encoder frames and a linear layer to CTC logits.

    Each bidirectional layer is a pair of unidirectional LSTMs; the backward
    one reads every sequence reversed within its length, so padding never
    leaks into valid frames.
    """

    def __init__(self, d_in: int, n_out: int, hidden: int = 64, layers: int = 2, seed: int = 0):
        super().__init__()
        self.d_in, self.n_out, self.hidden, self.layers, self.seed = d_in, n_out, hidden, layers, seed
        gen = torch.Generator().manual_seed(seed + 104729)
        self.fwd = nn.ModuleList()
        self.bwd = nn.ModuleList()
        for i in range(layers):
            d = d_in if i == 0 else 2 * hidden
            self.fwd.append(nn.LSTM(d, hidden, batch_first=True))
            self.bwd.append(nn.LSTM(d, hidden, batch_first=True))
        self.out = nn.Linear(2 * hidden, n_out)
        bound = 1.0 / math.sqrt(hidden)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)

    def forward(self, h: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        for f, b in zip(self.fwd, self.bwd):
            yf, _ = f(h)
            yb, _ = b(reverse_padded(h, lengths))
            h = torch.cat([yf, reverse_padded(yb, lengths)], dim=-1)
        return self.out(h)

    def metadata(self) -> dict:
        return {"d_in": self.d_in, "n_out": self.n_out, "hidden": self.hidden, "layers": self.layers, "seed": self.seed}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"head/{k}": v.detach().cpu().numpy().copy() for k, v in self.named_parameters()}

    def load_arrays(self, arrays) -> None:
        with torch.no_grad():
            for k, v in self.named_parameters():
                v.copy_(torch.as_tensor(arrays[f"head/{k}"], dtype=v.dtype))


@dataclass
class FinetuneResult:
    encoder: Encoder
    head: PredictionHead
    trace: LossTrace
    optim: AdamState
    checkpoint: Path | None = None


class _PrefixCache:
    """Outputs of the frozen part of the encoder, computed once per utterance."""

    def __init__(self, encoder: Encoder, feats: list[np.ndarray], frozen_blocks: int, cache_embed: bool):
        self.encoder, self.frozen_blocks, self.cache_embed = encoder, frozen_blocks, cache_embed
        dtype = next(encoder.parameters()).dtype
        self.items: list[torch.Tensor | np.ndarray] = []
        with torch.no_grad():
            for f in feats:
                if not cache_embed:
                    self.items.append(f)
                    continue
                x = torch.as_tensor(f, dtype=dtype)[None]
                h, out_len = encoder.embed(x, torch.tensor([len(f)]))
                self.items.append(encoder.run_blocks(h, out_len, 0, frozen_blocks)[0])

    def batch(self, idx: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        enc = self.encoder
        dtype = next(enc.parameters()).dtype
        if not self.cache_embed:
            x, lengths = pad_features([self.items[i] for i in idx], dtype)
            h, out_len = enc(x, lengths)
            return h, out_len
        seqs = [self.items[i] for i in idx]
        out_len = torch.tensor([len(s) for s in seqs])
        h = torch.zeros(len(seqs), int(out_len.max()), enc.d_model, dtype=dtype)
        for i, s in enumerate(seqs):
            h[i, : len(s)] = s
        return enc.run_blocks(h, out_len, self.frozen_blocks), out_len


def finetune(encoder: Encoder, mode: str, train_utts: Sequence[Utterance], alphabet: LabelAlphabet,
             run_cfg: TrainConfig, feature_cfg: FeatureConfig = FeatureConfig(), head_hidden: int = 64,
             checkpoint: str | Path | None = None, progress: Callable | None = None) -> FinetuneResult:
    """CTC fine-tuning on labelled target data.

    ``head_ft`` trains only the prediction head. ``full_ft`` also trains the
    encoder blocks flagged in ``encoder.trainable_mask``.
    """
    if mode not in ("head_ft", "full_ft"):
        raise ConfigError(f"unknown fine-tuning mode {mode!r}")
    if not train_utts:
        raise DataError("no labelled utterances to fine-tune on")
    targets = [alphabet.encode(u.transcript, u.id) for u in train_utts]
    for u, t in zip(train_utts, targets):
        if not t:
            raise DataError(f"utterance {u.id}: empty transcript")
    mask = list(encoder.trainable_mask)
    if mode == "head_ft":
        mask = [False] * encoder.n_layers
    for flag, block in zip(mask, encoder.blocks):
        for p in block.parameters():
            p.requires_grad_(flag)
    frontend_trains = mode == "full_ft" and all(mask)
    for p in encoder.frontend.parameters():
        p.requires_grad_(frontend_trains)
    frozen_blocks = next((i for i, f in enumerate(mask) if f), encoder.n_layers)

    head = PredictionHead(encoder.d_model, len(alphabet), head_hidden, seed=run_cfg.seed)
    dtype = next(encoder.parameters()).dtype
    head.to(dtype)
    feats = _features([u.samples for u in train_utts], feature_cfg)
    cache = _PrefixCache(encoder, feats, frozen_blocks, cache_embed=not frontend_trains)

    named = _encoder_named(encoder) + [("head", head)]
    params = _trainable(named)
    state = AdamState()
    trace = LossTrace()
    sched = run_cfg.schedule()
    n = len(train_utts)
    bs = min(run_cfg.batch_size, n)
    for step in range(1, run_cfg.steps + 1):
        rng = np.random.default_rng([run_cfg.seed, 13, step])
        idx = sorted(rng.choice(n, size=bs, replace=False).tolist())
        h, out_len = cache.batch(idx)
        logits = head(h, out_len)
        loss = CTCLoss.apply(logits, out_len, [targets[i] for i in idx])
        for p in params.values():
            p.grad = None
        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        clip_grad_norm(grads, run_cfg.clip_norm)
        lr = lr_at(sched, step)
        if not adam_step(params, grads, state, lr):
            raise NumericalError(f"fine-tuning step {step}: non-finite gradient")
        trace.add(step, loss.item(), lr)
        if progress and (step % run_cfg.log_every == 0 or step == run_cfg.steps):
            progress(mode, step, float(np.mean(trace.losses[-run_cfg.log_every:])))
    for p in params.values():
        p.grad = None
    path = None
    if checkpoint is not None:
        path = save_asr(checkpoint, encoder, head, alphabet, {"stage": mode, "train": asdict(run_cfg)}, state)
    return FinetuneResult(encoder, head, trace, state, path)


def save_asr(path, encoder: Encoder, head: PredictionHead, alphabet: LabelAlphabet, meta: dict,
             optim: AdamState | None = None) -> Path:
    extra = head.state_arrays()
    if optim is not None:
        extra.update(optim.arrays())
    m = {"head": head.metadata(), "alphabet": {"tokens": alphabet.tokens, "space": alphabet.space}}
    m.update(meta)
    return save_encoder(path, encoder, extra, m)


def load_asr(path) -> tuple[Encoder, PredictionHead, LabelAlphabet, dict]:
    from .encoder import load_encoder

    enc, arrays, meta = load_encoder(path)
    hm = meta["head"]
    head = PredictionHead(hm["d_in"], hm["n_out"], hm["hidden"], hm["layers"], hm["seed"])
    head.load_arrays(arrays)
    alphabet = LabelAlphabet(meta["alphabet"]["tokens"], meta["alphabet"]["space"])
    return enc, head, alphabet, meta


# --------------------------------------------------------------------------
# inference


def log_posteriors(encoder: Encoder, head: PredictionHead, utts: Sequence[Utterance],
                   feature_cfg: FeatureConfig = FeatureConfig(), batch_size: int = 16) -> list[np.ndarray]:
    dtype = next(encoder.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(utts), batch_size):
            chunk = utts[i : i + batch_size]
            x, lengths = pad_features(_features([u.samples for u in chunk], feature_cfg), dtype)
            h, out_len = encoder(x, lengths)
            lp = torch.log_softmax(head(h, out_len).double(), dim=-1)
            out.extend(lp[j, : int(out_len[j])].numpy() for j in range(len(chunk)))
    return out


def decode_all(log_probs: Sequence[np.ndarray], alphabet: LabelAlphabet, lm=None, beam: int = 16,
               lm_weight: float = 1.0, word_bonus: float = 0.0) -> list[tuple[list[str], float]]:
    """Greedy decoding when ``lm`` is None, LM-fused beam search otherwise."""
    out = []
    for lp in log_probs:
        if lm is None:
            idx = greedy_decode(lp)
            out.append((alphabet.to_words(alphabet.decode(idx)), float(lp.max(axis=1).sum())))
        else:
            hyp = beam_search(lp, alphabet, lm, beam, lm_weight, word_bonus)[0]
            out.append((alphabet.to_words(alphabet.decode(hyp.prefix)), hyp.score))
    return out
