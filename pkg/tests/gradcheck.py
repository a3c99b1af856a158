"""Finite-difference check of the end-to-end spin loss through the encoder."""

import numpy as np
import torch

from acmix.encoder import Encoder, length_mask, pad_features, set_trainable
from acmix.spin import SpinConfig, SpinHead, SwappedLoss, spin_loss, view_scores
from oracles import central_diff, max_rel_error


def spin_gradient_check(d_model=8, n_layers=2, last_n=2, seed=0):
    """Worst relative error of encoder + head gradients of the spin loss on a 2-utterance batch.

    Codes are held at their value for the unperturbed parameters, matching
    the stop-gradient treatment in training.
    """
    rng = np.random.default_rng(seed)
    enc = set_trainable(Encoder(n_mels=6, d_model=d_model, n_layers=n_layers, n_heads=2, seed=seed).double(), last_n)
    head = SpinHead(d_model, SpinConfig(K=5, proj_dim=6, seed=seed)).double()
    f1 = [rng.normal(size=(9, 6)), rng.normal(size=(6, 6))]
    f2 = [a + 0.3 * rng.normal(size=a.shape) for a in f1]
    x, lengths = pad_features(f1 + f2, torch.float64)

    def embeddings():
        h, out_len = enc(x, lengths)
        m = length_mask(out_len[:2], h.shape[1])
        return h[:2][m], h[2:][m]

    loss, q1, q2 = spin_loss(head, *embeddings())

    def loss_fixed_codes():
        e1, e2 = embeddings()
        return SwappedLoss.apply(*view_scores(head, e1, e2), q1, q2)

    loss.backward()
    worst, checked = 0.0, []
    for name, p in list(enc.named_parameters()) + list(head.named_parameters()):
        if not p.requires_grad:
            continue

        def f(v, p=p):
            with torch.no_grad():
                old = p.detach().clone()
                p.copy_(torch.from_numpy(v))
                out = loss_fixed_codes().item()
                p.copy_(old)
            return out

        # centring cancels the last block's output bias, so its gradient is exactly zero;
        # at h=1e-6 rounding in the O(1) loss (~1e-10) would swamp that entry
        err = max_rel_error(p.grad.numpy(), central_diff(f, p.detach().numpy().copy(), h=1e-5))
        worst = max(worst, err)
        checked.append(name)
    return worst, checked
