import math

import numpy as np
import pytest
import torch

from acmix.config import finetune_steps
from acmix.ctc import LabelAlphabet
from acmix.encoder import Encoder, FeatureConfig, set_trainable
from acmix.exceptions import ConfigError, DataError
from acmix.mixup import MixupConfig
from acmix.spin import SpinConfig, SpinHead
from acmix.train import (AdamState, LossTrace, PredictionHead, Schedule, TrainConfig, adam_step, adapt,
                         clip_grad_norm, finetune, load_asr, log_posteriors, lr_at, reverse_padded, save_asr)

FC = FeatureConfig(n_mels=8)


# -- schedule

def test_lr_anchors_large():
    s = Schedule(2500, 1e-5, 1e-7, 10_000)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 2500) == 1e-5
    assert lr_at(s, 10_000) == 1e-7


def test_lr_anchors_base():
    s = Schedule(200, 1e-4, 1e-6, 2000)
    assert lr_at(s, 0) == 0.0 and lr_at(s, 200) == 1e-4 and lr_at(s, 2000) == 1e-6


def test_lr_piecewise_linear_and_continuous():
    s = Schedule(50, 1e-3, 1e-5, 400)
    lrs = np.array([lr_at(s, i) for i in range(401)])
    jumps = np.abs(np.diff(lrs))
    assert jumps.max() == pytest.approx(1e-3 / 50)
    assert np.allclose(np.diff(lrs[:51], 2), 0, atol=1e-18)
    assert np.allclose(np.diff(lrs[50:], 2), 0, atol=1e-18)


def test_lr_clamps_with_warning(caplog):
    s = Schedule(10, 1e-3, 1e-4, 100)
    assert lr_at(s, -5) == 0.0
    assert lr_at(s, 500) == lr_at(s, 100)
    assert "clamping" in caplog.text


@pytest.mark.parametrize("args", [(0, 1e-3, 0, 10), (10, 1e-3, 0, 10), (2, 1e-4, 1e-3, 10)])
def test_schedule_invariants(args):
    with pytest.raises(ConfigError):
        Schedule(*args)


# -- Adam

def _param(v):
    return torch.tensor(v, dtype=torch.float64, requires_grad=True)


def test_adam_first_step_closed_form():
    p = _param([2.0])
    assert adam_step({"p": p}, {"p": torch.tensor([1.0], dtype=torch.float64)}, AdamState(), 0.1)
    assert p.item() == 2.0 - 0.1 / (1 + 1e-8)


def test_adam_zero_gradient_no_change():
    p = _param([1.5, -2.0])
    before = p.detach().clone()
    state = AdamState()
    for _ in range(3):
        adam_step({"p": p}, {"p": torch.zeros(2, dtype=torch.float64)}, state, 0.1)
    assert torch.equal(p.detach(), before)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    p = _param(rng.normal(size=4))
    x, m, v = p.detach().numpy().copy(), np.zeros(4), np.zeros(4)
    state = AdamState()
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step({"p": p}, {"p": torch.from_numpy(g)}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.detach().numpy(), x, rtol=1e-12, atol=1e-15)


def test_adam_frozen_parameter_untouched():
    p, q = _param([1.0]), torch.tensor([3.0], dtype=torch.float64)
    adam_step({"p": p, "q": q}, {"p": torch.ones(1, dtype=torch.float64), "q": torch.ones(1, dtype=torch.float64)},
              AdamState(), 0.1)
    assert q.item() == 3.0 and p.item() != 1.0


def test_adam_nan_aborts(caplog):
    p, r = _param([1.0, 2.0]), _param([5.0])
    state = AdamState()
    adam_step({"p": p, "r": r}, {"p": torch.ones(2, dtype=torch.float64), "r": torch.ones(1, dtype=torch.float64)},
              state, 0.1)
    snap = (p.detach().clone(), r.detach().clone(), state.m["p"].clone(), state.step)
    ok = adam_step({"p": p, "r": r}, {"p": torch.ones(2, dtype=torch.float64),
                                      "r": torch.tensor([math.nan], dtype=torch.float64)}, state, 0.1)
    assert not ok
    assert torch.equal(p.detach(), snap[0]) and torch.equal(r.detach(), snap[1])
    assert torch.equal(state.m["p"], snap[2]) and state.step == snap[3]
    assert "r" in caplog.text


def test_clip_grad_norm():
    g = {"a": torch.tensor([3.0, 0.0]), "b": torch.tensor([4.0]), "c": None}
    assert clip_grad_norm(g, 10.0) == pytest.approx(5.0)
    assert torch.equal(g["a"], torch.tensor([3.0, 0.0]))
    clip_grad_norm(g, 1.0)
    assert math.hypot(*g["a"].tolist(), *g["b"].tolist()) == pytest.approx(1.0, rel=1e-6)


# -- budgets

def test_finetune_step_budgets_keep_ratios():
    assert [finetune_steps(150_000, s) for s in ("full", "5h", "1h", "10min")] == [150_000, 75_000, 15_000, 2_500]
    assert [finetune_steps(5000, s) for s in ("full", "5h", "1h", "10min")] == [5000, 2500, 500, 83]
    assert finetune_steps(30, "10min") == 2


# -- adaptation and fine-tuning loops

def _encoder(last_n=2, layers=3):
    return set_trainable(Encoder(n_mels=8, d_model=16, n_layers=layers, n_heads=2, seed=0), last_n)


def _adapt(pools, enc, steps=6, seed=0, strategy="Mixup3"):
    head = SpinHead(16, SpinConfig(K=8, proj_dim=8))
    run = TrainConfig(steps, 4, seed, 1e-3, 1e-4, 2)
    return adapt(enc, head, MixupConfig(0.3, strategy), *pools, run, FC)


def _diff_groups(before, after):
    return sorted({k.split("/")[0] for k in before if not np.array_equal(before[k], after[k])})


def test_adapt_deterministic(tiny_pools):
    a = _adapt(tiny_pools, _encoder())
    b = _adapt(tiny_pools, _encoder())
    assert a.trace.losses == b.trace.losses and len(a.trace) == 6
    c = _adapt(tiny_pools, _encoder(), seed=1)
    assert c.trace.losses != a.trace.losses


def test_adapt_moves_only_last_layers(tiny_pools):
    enc = _encoder(last_n=2, layers=3)
    before = enc.state_arrays()
    res = _adapt(tiny_pools, enc)
    assert _diff_groups(before, res.encoder.state_arrays()) == ["layer1", "layer2"]
    assert res.encoder.step == 6


def test_adapt_last_n_zero_keeps_encoder(tiny_pools):
    enc = _encoder(last_n=0)
    before = enc.state_arrays()
    head = SpinHead(16, SpinConfig(K=8, proj_dim=8))
    proto = head.prototypes.detach().clone()
    res = adapt(enc, head, MixupConfig(0.3, "Mixup3"), *tiny_pools, TrainConfig(4, 4, 0, 1e-3, 1e-4, 2), FC)
    assert _diff_groups(before, res.encoder.state_arrays()) == []
    assert not torch.equal(res.head.prototypes.detach(), proto)
    assert torch.allclose(res.head.prototypes.norm(dim=1), torch.ones(8))


def test_adapt_never_reads_transcripts(tiny_pools):
    from dataclasses import replace

    src, tgt = tiny_pools
    blind = ([replace(u, transcript=()) for u in src], [replace(u, transcript=()) for u in tgt])
    assert _adapt(blind, _encoder()).trace.losses == _adapt(tiny_pools, _encoder()).trace.losses


def test_adapt_empty_pool_is_config_error(tiny_pools):
    with pytest.raises(ConfigError, match="target_pool"):
        _adapt((tiny_pools[0], []), _encoder())


def test_adapt_checkpoint(tiny_pools, tmp_path):
    head = SpinHead(16, SpinConfig(K=8, proj_dim=8))
    res = adapt(_encoder(), head, MixupConfig(0.3, "Mixup3"), *tiny_pools, TrainConfig(3, 4, 0, 1e-3, 1e-4, 1), FC,
                checkpoint=tmp_path / "ad")
    from acmix.encoder import load_encoder

    enc, arrays, meta = load_encoder(res.checkpoint)
    assert any(k.startswith("spin/") for k in arrays) and any(k.startswith("optim/") for k in arrays)
    assert meta["optim_step"] == 3


def _labelled(pools):
    utts = pools[1]
    vocab = sorted({w for u in utts for w in u.transcript})
    return utts, LabelAlphabet(vocab)


def _finetune(pools, enc, mode, steps=5):
    utts, alphabet = _labelled(pools)
    return finetune(enc, mode, utts, alphabet, TrainConfig(steps, 4, 0, 1e-3, 1e-4, 1), FC, head_hidden=8)


def test_head_ft_keeps_encoder(tiny_pools):
    enc = _encoder(last_n=2)
    before = enc.state_arrays()
    res = _finetune(tiny_pools, enc, "head_ft")
    assert _diff_groups(before, res.encoder.state_arrays()) == []


def test_full_ft_moves_adapted_layers_only(tiny_pools):
    enc = _encoder(last_n=2, layers=3)
    before = enc.state_arrays()
    res = _finetune(tiny_pools, enc, "full_ft")
    assert _diff_groups(before, res.encoder.state_arrays()) == ["layer1", "layer2"]
    fresh = PredictionHead(16, res.head.n_out, 8, seed=0)
    assert all(not torch.equal(a, b) for a, b in zip(fresh.parameters(), res.head.parameters()))


def test_full_ft_all_layers_moves_frontend(tiny_pools):
    enc = _encoder(last_n=3, layers=3)
    before = enc.state_arrays()
    res = _finetune(tiny_pools, enc, "full_ft")
    assert _diff_groups(before, res.encoder.state_arrays()) == ["frontend", "layer0", "layer1", "layer2"]


def test_finetune_deterministic(tiny_pools):
    a = _finetune(tiny_pools, _encoder(), "full_ft")
    b = _finetune(tiny_pools, _encoder(), "full_ft")
    assert a.trace.losses == b.trace.losses


def test_finetune_out_of_alphabet_names_utterance(tiny_pools):
    utts = tiny_pools[1]
    alphabet = LabelAlphabet(["nothing"])
    with pytest.raises(DataError, match=utts[0].id):
        finetune(_encoder(), "full_ft", utts, alphabet, TrainConfig(2, 2, 0, 1e-3, 1e-4, 1), FC)


def test_finetune_bad_mode(tiny_pools):
    utts, alphabet = _labelled(tiny_pools)
    with pytest.raises(ConfigError):
        finetune(_encoder(), "adapt", utts, alphabet, TrainConfig(2, 2, 0, 1e-3, 1e-4, 1), FC)


def test_asr_checkpoint_round_trip(tiny_pools, tmp_path):
    res = _finetune(tiny_pools, _encoder(), "full_ft", steps=2)
    utts, alphabet = _labelled(tiny_pools)
    save_asr(tmp_path / "asr", res.encoder, res.head, alphabet, {"stage": "full_ft"}, res.optim)
    enc, head, alph, meta = load_asr(tmp_path / "asr")
    assert alph.tokens == alphabet.tokens and meta["stage"] == "full_ft"
    a = log_posteriors(res.encoder, res.head, utts[:3], FC)
    b = log_posteriors(enc, head, utts[:3], FC)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_reverse_padded():
    x = torch.arange(10.0).reshape(2, 5, 1)
    out = reverse_padded(x, torch.tensor([3, 5]))
    assert out[0, :, 0].tolist() == [2, 1, 0, 3, 4]
    assert out[1, :, 0].tolist() == [9, 8, 7, 6, 5]
    assert torch.equal(reverse_padded(out, torch.tensor([3, 5])), x)


def test_prediction_head_ignores_padding():
    head = PredictionHead(4, 3, hidden=5).double()
    rng = np.random.default_rng(0)
    a = torch.from_numpy(rng.normal(size=(1, 6, 4)))
    padded = torch.cat([a, torch.from_numpy(rng.normal(size=(1, 3, 4)))], dim=1)
    alone = head(a, torch.tensor([6]))
    batched = head(padded, torch.tensor([6]))
    assert torch.allclose(alone, batched[:, :6], atol=1e-12)


def test_loss_trace_csv(tmp_path):
    t = LossTrace()
    t.add(1, 2.5, 1e-4)
    t.add(2, 2.25, 2e-4)
    t.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "step,loss,lr\n1,2.5,0.0001\n2,2.25,0.0002\n"
