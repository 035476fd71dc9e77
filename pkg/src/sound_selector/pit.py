"""Permutation invariant training loss and oracle output selection."""

from __future__ import annotations

from itertools import permutations

import numpy as np
import torch

from .errors import InvalidArgumentError
from .signal import log_mse_loss, log_mse_torch, si_sdr

MAX_PIT_OUTPUTS = 6


def _check_k(k):
    if k > MAX_PIT_OUTPUTS:
        raise InvalidArgumentError(
            f"PIT with {k} outputs needs {k}! permutations; at most {MAX_PIT_OUTPUTS} are supported")


def pit_loss(references, estimates):
    """Minimum over output permutations of the mean log-MSE.

    Zero-signal references are allowed (log-MSE stays finite), so a network
    with more outputs than sources is pushed to emit silence on the spare ones.
    """
    if len(references) != len(estimates):
        raise InvalidArgumentError(f"{len(references)} references vs {len(estimates)} estimates")
    k = len(references)
    _check_k(k)
    pair = np.array([[log_mse_loss(r, e) for e in estimates] for r in references])
    return min(float(np.mean(pair[np.arange(k), list(p)])) for p in permutations(range(k)))


def pit_loss_torch(references, estimates):
    """Batched PIT log-MSE: ``(batch, K, T)`` inputs -> per-example losses and best permutations."""
    k = references.shape[1]
    _check_k(k)
    pair = log_mse_torch(references.unsqueeze(2), estimates.unsqueeze(1))  # (batch, ref k, est j)
    perms = torch.tensor(list(permutations(range(k))), device=references.device)
    rows = torch.arange(k, device=references.device)
    per_perm = pair[:, rows, perms].mean(-1)  # (batch, K!)
    loss, best = per_perm.min(dim=1)
    return loss, perms[best]


def oracle_select_index(outputs, reference):
    """Index of the output with the highest SI-SDR against ``reference`` (lowest index on ties)."""
    scores = [si_sdr(reference, out) for out in outputs]
    return int(np.argmax(scores))


def oracle_select(outputs, reference):
    return outputs[oracle_select_index(outputs, reference)]
