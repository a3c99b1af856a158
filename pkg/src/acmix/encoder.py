"""Log-mel frontend and the small stand-in speech encoder.

The encoder is a stride-2 convolution followed by ``n_layers`` pre-norm
self-attention blocks. Only the last ``last_n`` blocks are trainable during
adaptation; see :func:`set_trainable`.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import SAMPLE_RATE
from .exceptions import ConfigError, CorruptStateError, DataError, FeatureError

LOG_EPS = 1e-10


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.hop_ms > self.win_ms:
            raise ConfigError("hop_ms must not exceed win_ms")
        if self.n_mels < 8:
            raise ConfigError("n_mels must be >= 8")

    @property
    def win(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000))

    @property
    def hop(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win - 1).bit_length()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: FeatureConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    return pts[1:-1]


_FB_CACHE: dict = {}


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters [n_mels x (n_fft//2 + 1)] on an HTK mel scale."""
    if cfg in _FB_CACHE:
        return _FB_CACHE[cfg]
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    _FB_CACHE[cfg] = fb
    return fb


@functools.lru_cache(maxsize=8)
def _window(n: int) -> np.ndarray:
    return np.hanning(n)


def n_frames(n_samples: int, cfg: FeatureConfig = FeatureConfig()) -> int:
    return 1 + (n_samples - cfg.win) // cfg.hop


def logmel(samples, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log mel-filterbank energies, one row per 25 ms frame at a 10 ms hop."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or len(x) < cfg.win:
        raise FeatureError(f"need at least {cfg.win} samples for one frame, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win)[:: cfg.hop]
    spec = np.fft.rfft(frames * _window(cfg.win), n=cfg.n_fft)
    power = spec.real**2 + spec.imag**2
    return np.log(power @ mel_filterbank(cfg).T + LOG_EPS)


def pad_features(feats: list[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(f) for f in feats], dtype=torch.long)
    out = torch.zeros(len(feats), int(lengths.max()), feats[0].shape[1], dtype=dtype)
    for i, f in enumerate(feats):
        out[i, : len(f)] = torch.as_tensor(f, dtype=dtype)
    return out, lengths


def length_mask(lengths: torch.Tensor, t: int) -> torch.Tensor:
    return torch.arange(t)[None, :] < lengths[:, None]


def sinusoids(t: int, d: int, dtype) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(t, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)
    return pe.to(dtype)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.wq = nn.Linear(d_model, d_model)
        # a key bias only shifts each query's logits uniformly, so it is omitted
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)

        def heads(y):
            return y.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)

        # additive key mask: cheaper than a boolean one in the CPU kernels
        bias = torch.zeros(mask.shape, dtype=x.dtype).masked_fill_(~mask, -math.inf)
        att = F.scaled_dot_product_attention(
            heads(self.wq(h)), heads(self.wk(h)), heads(self.wv(h)), attn_mask=bias[:, None, None, :]
        )
        x = x + self.wo(att.transpose(1, 2).reshape(b, t, d))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class Encoder(nn.Module):
    """Stand-in for a pre-trained speech SSL encoder.

    ``forward`` applies per-utterance mean/variance normalisation of the input
    features, a stride-2 convolution (``T -> ceil(T/2)`` frames), sinusoidal
    positions and the residual blocks.
    """

    def __init__(self, n_mels: int = 40, d_model: int = 128, n_layers: int = 4, n_heads: int = 4,
                 ffn_mult: int = 2, seed: int = 0):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        self.n_mels, self.d_model, self.n_layers = n_mels, d_model, n_layers
        self.n_heads, self.ffn_mult, self.seed = n_heads, ffn_mult, seed
        self.frontend = nn.Conv1d(n_mels, d_model, kernel_size=3, stride=2, padding=1)
        self.blocks = nn.ModuleList(Block(d_model, n_heads, ffn_mult * d_model) for _ in range(n_layers))
        self.trainable_mask = [True] * n_layers
        self.step = 0
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Linear, nn.Conv1d)):
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    if m.bias is not None:
                        m.bias.zero_()
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    @staticmethod
    def out_lengths(lengths: torch.Tensor) -> torch.Tensor:
        return (lengths + 1) // 2

    def embed(self, feats: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalise, downsample and add positions: the input to block 0."""
        mask = length_mask(lengths, feats.shape[1]).unsqueeze(-1).to(feats.dtype)
        n = lengths.to(feats.dtype)[:, None, None]
        mean = (feats * mask).sum(1, keepdim=True) / n
        var = (((feats - mean) * mask) ** 2).sum(1, keepdim=True) / n
        x = (feats - mean) / torch.sqrt(var + 1e-5) * mask
        h = F.gelu(self.frontend(x.transpose(1, 2))).transpose(1, 2)
        out_len = self.out_lengths(lengths)
        h = h + sinusoids(h.shape[1], self.d_model, h.dtype)
        return h * length_mask(out_len, h.shape[1]).unsqueeze(-1).to(h.dtype), out_len

    def run_blocks(self, h: torch.Tensor, out_len: torch.Tensor, start: int = 0, stop: int | None = None):
        mask = length_mask(out_len, h.shape[1])
        for block in self.blocks[start:stop]:
            h = block(h, mask)
        return h * mask.unsqueeze(-1).to(h.dtype)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, out_len = self.embed(feats, lengths)
        return self.run_blocks(h, out_len), out_len

    @property
    def n_frozen(self) -> int:
        return self.n_layers - sum(self.trainable_mask)

    def layer_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        groups = {"frontend": dict(self.frontend.named_parameters())}
        for i, b in enumerate(self.blocks):
            groups[f"layer{i}"] = dict(b.named_parameters())
        return groups

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            f"{g}/{name}": p.detach().cpu().numpy().copy()
            for g, params in self.layer_groups().items()
            for name, p in params.items()
        }

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for g, params in self.layer_groups().items():
                for name, p in params.items():
                    key = f"{g}/{name}"
                    if key not in arrays:
                        raise DataError(f"checkpoint lacks {key}")
                    p.copy_(torch.as_tensor(arrays[key], dtype=p.dtype))

    def metadata(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_mels": self.n_mels,
            "n_heads": self.n_heads,
            "ffn_mult": self.ffn_mult,
            "trainable_mask": list(self.trainable_mask),
            "seed": self.seed,
            "step": self.step,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "Encoder":
        enc = cls(meta["n_mels"], meta["d_model"], meta["n_layers"], meta["n_heads"], meta["ffn_mult"], meta["seed"])
        enc.step = meta.get("step", 0)
        set_trainable(enc, sum(meta["trainable_mask"]))
        return enc


def set_trainable(encoder: Encoder, last_n: int) -> Encoder:
    """Unfreeze exactly the final ``last_n`` blocks.

    The convolutional frontend is trainable only when every block is.
    """
    n = encoder.n_layers
    if not 0 <= last_n <= n:
        raise ConfigError(f"last_n must lie in [0, {n}], got {last_n}")
    encoder.trainable_mask = [i >= n - last_n for i in range(n)]
    for p in encoder.frontend.parameters():
        p.requires_grad_(last_n == n)
    for flag, block in zip(encoder.trainable_mask, encoder.blocks):
        for p in block.parameters():
            p.requires_grad_(flag)
    return encoder


def check_finite(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise CorruptStateError(f"non-finite values in parameter {name}")


def encode(encoder: Encoder, features) -> np.ndarray:
    """Frame embeddings ``[ceil(T/2) x d_model]`` for one feature matrix."""
    check_finite(encoder)
    dtype = next(encoder.parameters()).dtype
    x = torch.as_tensor(np.asarray(features), dtype=dtype)[None]
    with torch.no_grad():
        h, _ = encoder(x, torch.tensor([x.shape[1]]))
    return h[0].numpy()


# --------------------------------------------------------------------------
# checkpoints: named arrays in an .npz plus a JSON sidecar


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_suffix(".npz"), "wb") as f:
        np.savez(f, **arrays)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".npz")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    npz, side = path.with_suffix(".npz"), path.with_suffix(".json")
    for p in (npz, side):
        if not p.exists():
            raise DataError(f"checkpoint file missing: {p}")
    with np.load(npz) as z:
        arrays = {k: z[k] for k in z.files}
    return arrays, json.loads(side.read_text())


def save_encoder(path, encoder: Encoder, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> Path:
    arrays = encoder.state_arrays()
    arrays.update(extra or {})
    m = {"encoder": encoder.metadata()}
    m.update(meta or {})
    return save_checkpoint(path, arrays, m)


def load_encoder(path) -> tuple[Encoder, dict[str, np.ndarray], dict]:
    arrays, meta = load_checkpoint(path)
    enc = Encoder.from_metadata(meta["encoder"])
    enc.load_arrays(arrays)
    return enc, arrays, meta
