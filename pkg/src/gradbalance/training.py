"""Plain gradient descent on tabular logits for any loss in :mod:`gradbalance.losses`."""

from __future__ import annotations

import numpy as np

from .losses import LossSpec, evaluate
from .policy import NumericError, log_softmax
from .task import PairDataset, PreferenceTask


def winners_losers(data: PairDataset):
    win = np.where(data.tau > 0, data.y1, data.y2)
    lose = np.where(data.tau > 0, data.y2, data.y1)
    return win, lose


def logit_gradient(spec: LossSpec, logits: np.ndarray, ref_logp: np.ndarray, data: PairDataset,
                   per_prompt_mean: bool = True):
    """Gradient of the weighted dataset loss with respect to the logit matrix.

    Returns ``(grad, loss, g_w, g_l)`` where ``g_w``/``g_l`` are the weighted
    means of ``dL/dpi_w`` and ``dL/dpi_l``. With ``per_prompt_mean`` the loss
    is the weighted sum divided by ``total_weight / n_prompts``; otherwise it
    is the raw weighted sum.
    """
    n_x, n_y = logits.shape
    logp = log_softmax(logits)
    win, lose = winners_losers(data)
    a_w, a_l = logp[data.x, win], logp[data.x, lose]
    ev = evaluate(spec, a_w, a_l, ref_logp[data.x, win], ref_logp[data.x, lose])
    if not np.all(np.isfinite(ev.value)):
        raise NumericError(f"non-finite {spec.name} loss")
    wt = data.weight
    scale = wt.sum() / n_x if per_prompt_mean else 1.0
    flat_w = data.x * n_y + win
    flat_l = data.x * n_y + lose
    size = n_x * n_y
    G = (np.bincount(flat_w, wt * ev.grad_logpi_w, size) + np.bincount(flat_l, wt * ev.grad_logpi_l, size))
    G = G.reshape(n_x, n_y) / scale
    p = np.exp(logp)
    # chain rule through d log p_i / d s_k = delta_ik - p_k
    grad = G - p * G.sum(axis=1, keepdims=True)
    gw_pi, gl_pi = ev.prob_grads(np.exp(a_w), np.exp(a_l))
    tw = wt.sum()
    return grad, float((wt * ev.value).sum() / scale), float((wt * gw_pi).sum() / tw), float((wt * gl_pi).sum() / tw)


def full_sweep(task: PreferenceTask) -> np.ndarray:
    """All unmasked unordered pairs as rows ``(x, y1, y2)``."""
    rows = [np.column_stack([np.full(len(pr), x), pr]) for x in range(task.n_prompts)
            for pr in [task.unmasked_pairs(x)]]
    return np.concatenate(rows, axis=0)


def label_sweep(task: PreferenceTask, pairs: np.ndarray, rng: np.random.Generator) -> PairDataset:
    """One pass over ``pairs`` with fresh Bradley-Terry labels."""
    x, a, b = pairs.T
    ua, ub = task.utility[x, a], task.utility[x, b]
    tau = np.where(rng.random(len(x)) < ua / (ua + ub), 1, -1)
    return PairDataset(x, a, b, tau, np.ones(len(x)))
