"""Training losses and the glue from a :class:`~igd.forward.TrainingBatch` to the network."""

from __future__ import annotations

import numpy as np
import torch
from torch.nn import functional as F

from .model import cond_flags


def loss_bce(logits, query_token, fresh, reduction="mean"):
    """Binary cross-entropy on the logit of the token currently at the query slot.

    ``logits`` is ``(N, V)``, ``query_token`` the token of ``s^(t+1)`` at the
    query position and ``fresh`` the label "the forward step drew a token"
    (as opposed to the no-flip symbol).  Only the selected logit receives a
    gradient.
    """
    z = logits.gather(1, torch.as_tensor(query_token, dtype=torch.long)[:, None])[:, 0]
    y = torch.as_tensor(fresh, dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(z, y, reduction=reduction)


def loss_xary_ce(logits, target, reduction="mean"):
    """Cross-entropy of the clean token under the full-vocabulary logits."""
    return F.cross_entropy(logits, torch.as_tensor(target, dtype=torch.long), reduction=reduction)


def loss_mse_eps(eps_hat, eps, reduction="mean"):
    """Squared error ``||eps - eps_hat||^2`` per row."""
    per_row = ((eps_hat - torch.as_tensor(eps, dtype=eps_hat.dtype)) ** 2).sum(dim=1)
    return per_row.mean() if reduction == "mean" else per_row.sum() if reduction == "sum" else per_row


def network_inputs(tb, discrete_loss: str):
    """Token array fed to the network: the query token is masked for the binary loss."""
    tokens = tb.inputs.tokens.copy()
    if discrete_loss == "bce":
        rows = np.nonzero(tb.is_discrete)[0]
        tokens[rows, tb.positions[rows]] = tb.inputs.layout.mask_token_id
    return tokens


def batch_loss(model, tb, discrete_loss: str = "bce"):
    """Mean loss over the active rows of a training batch, plus per-kind parts for logging."""
    lay = tb.inputs.layout
    tokens = network_inputs(tb, discrete_loss)
    logits, eps_hat = model(tokens, tb.inputs.vectors, cond_flags(tb.inputs), tb.positions, tb.t, tb.k)
    active = tb.active
    total = logits.new_zeros(())
    parts = {}
    drows = np.nonzero(tb.is_discrete & active)[0]
    if drows.size:
        lg = logits[torch.as_tensor(drows), torch.as_tensor(tb.positions[drows])]
        if discrete_loss == "bce":
            query_tok = tb.inputs.tokens[drows, tb.positions[drows]]
            d = loss_bce(lg, query_tok, ~tb.z_was_phi[drows], reduction="sum")
        else:
            d = loss_xary_ce(lg, tb.target_token[drows], reduction="sum")
        total = total + d
        parts["discrete"] = float(d.detach()) / drows.size
    csum, ccount = 0.0, 0
    for j in range(lay.n_continuous):
        rows = np.nonzero(~tb.is_discrete & active & (tb.positions == lay.n_discrete + j))[0]
        if rows.size:
            c = loss_mse_eps(eps_hat[j][torch.as_tensor(rows)], tb.eps[j][rows], reduction="sum")
            total = total + c
            csum += float(c.detach())
            ccount += rows.size
    if ccount:
        parts["continuous"] = csum / ccount
    n = max(int(active.sum()), 1)
    return total / n, parts
