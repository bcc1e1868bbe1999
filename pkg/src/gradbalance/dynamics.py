"""Closed-form one-epoch update theory for the tabular softmax model.

Notation follows the per-response aggregates used throughout the package:

* ``w_i``   sum of ``tau * (1 - kappa)`` over the pairs containing response i
* ``alpha_i = sum_{j != i} p_i / (p_i + p_j)``  (win mass under the model)
* ``beta_i  = sum_{j != i} u_i / (u_i + u_j)``  (win mass under the utility)

On the exact expected dataset with a uniform reference, ``w = beta - alpha``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .losses import LossSpec, evaluate
from .policy import PolicyTable, ReferencePolicy, softmax_jacobian
from .task import PairDataset, PairSample, PreferenceTask, expected_pair_dataset


@dataclass(frozen=True)
class DynamicsParams:
    eta: float = 1.0
    g: float = 1.0
    lambda_corr: float = 0.0

    def __post_init__(self):
        if not self.eta > 0 or not self.g > 0:
            raise ValueError("eta and g must be positive")
        if not 0.0 <= self.lambda_corr < 1.0:
            raise ValueError("lambda_corr must lie in [0, 1)")

    @property
    def gamma(self) -> float:
        return self.eta * self.g**2


def _as_probs(policy) -> np.ndarray:
    if isinstance(policy, (PolicyTable, ReferencePolicy)):
        return policy.probs()
    return np.atleast_2d(np.asarray(policy, dtype=float))


def delta_logit(sample: PairSample, kappa: float, params: DynamicsParams, balanced: bool = False,
                p1: float | None = None, p2: float | None = None) -> tuple[float, float]:
    """Logit changes ``(ds_y1, ds_y2)`` caused by one gradient step on one pair.

    DPO moves the two logits by ``+-gamma * tau * (1 - kappa)``, shrunk by
    ``1 - lambda_corr`` under negatively correlated parameter gradients. A
    balanced loss moves logit i by
    ``gamma * tau_i * (1 - kappa) * p_i * (1 - p_i + p_j + lambda_corr * c_i)``
    with ``c_i = p_i - p_i**2 + p_i*p_j - 2*p_j``; ``p1``/``p2`` are required.
    """
    base = params.gamma * sample.tau * (1.0 - kappa)
    if not balanced:
        d = base * (1.0 - params.lambda_corr)
        return d, -d
    if p1 is None or p2 is None:
        raise ValueError("balanced updates need both response probabilities")
    lam = params.lambda_corr

    def side(pi, pj):
        return pi * (1.0 - pi + pj + lam * (pi - pi * pi + pi * pj - 2.0 * pj))

    return base * side(p1, p2), -base * side(p2, p1)


def pair_kappa(p: np.ndarray, data: PairDataset, ref_logp: np.ndarray | None = None,
               beta: float = 1.0) -> np.ndarray:
    """DPO kappa for every row of ``data`` (probability that the labelled order is kept)."""
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    if ref_logp is None:
        ref_logp = np.zeros_like(logp)
    lr = logp - ref_logp
    m = data.tau * (lr[data.x, data.y1] - lr[data.x, data.y2])
    # both probabilities zero: no preference signal in either direction
    m = np.where(np.isnan(m), 0.0, m)
    return expit(beta * m)


def epoch_weights(policy, task: PreferenceTask, dataset: PairDataset | None = None,
                  reference=None) -> np.ndarray:
    """Per-response weight matrix ``w[x, y]`` for one pass over ``dataset``.

    ``dataset`` defaults to the exact expected dataset under uniform sampling;
    ``reference`` defaults to the uniform policy.
    """
    p = _as_probs(policy)
    data = expected_pair_dataset(task) if dataset is None else dataset
    ref_logp = None if reference is None else reference.log_probs()
    contrib = data.weight * data.tau * (1.0 - pair_kappa(p, data, ref_logp))
    n_x, n_y = task.utility.shape
    flat1 = data.x * n_y + data.y1
    flat2 = data.x * n_y + data.y2
    w = np.bincount(flat1, contrib, n_x * n_y) - np.bincount(flat2, contrib, n_x * n_y)
    return w.reshape(n_x, n_y)


def _pairwise_share(v: np.ndarray) -> np.ndarray:
    tot = v[..., :, None] + v[..., None, :]
    with np.errstate(invalid="ignore"):
        share = v[..., :, None] / tot
    return np.where(tot > 0, share, 0.5)


def alpha_beta(policy, task: PreferenceTask) -> tuple[np.ndarray, np.ndarray]:
    """Model and utility win masses over each prompt's unmasked responses.

    Masked cells take no part in any pair and get ``alpha = beta = 0``.
    """
    p = _as_probs(policy)
    live = ~task.mask
    pair_ok = live[:, :, None] & live[:, None, :]
    pair_ok &= ~np.eye(task.n_responses, dtype=bool)[None]
    alpha = np.where(pair_ok, _pairwise_share(p), 0.0).sum(axis=-1)
    beta = np.where(pair_ok, _pairwise_share(task.utility), 0.0).sum(axis=-1)
    return alpha, beta


def prob_update_dpo(policy, w, params: DynamicsParams) -> np.ndarray:
    """``dp_i = gamma * p_i * (w_i - sum_j w_j p_j)`` per prompt."""
    p = _as_probs(policy)
    w = np.atleast_2d(w)
    return params.gamma * p * (w - (w * p).sum(axis=-1, keepdims=True))


def prob_update_balanced(policy, w, params: DynamicsParams) -> np.ndarray:
    """``dp_i = gamma * p_i * (w_i p_i - sum_j w_j p_j**2)``; valid while every p_i is small."""
    p = _as_probs(policy)
    w = np.atleast_2d(w)
    return params.gamma * p * (w * p - (w * p * p).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class EpochDynamics:
    p: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    beta_vec: np.ndarray
    dp_dpo: np.ndarray
    dp_balanced: np.ndarray

    @property
    def max_prob(self) -> float:
        return float(self.p.max())

    def write_csv(self, path, task: PreferenceTask, x: int = 0) -> None:
        u = task.utility[x] / task.utility[x].sum()
        cols = (self.p[x], u, self.alpha[x], self.beta_vec[x], self.w[x], self.dp_dpo[x], self.dp_balanced[x])
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["y", "p", "u", "alpha", "beta", "w", "dp_dpo", "dp_balanced"])
            for y in range(task.n_responses):
                out.writerow([y] + [repr(float(c[y])) for c in cols])


def epoch_dynamics(policy, task: PreferenceTask, params: DynamicsParams | None = None,
                   dataset: PairDataset | None = None, reference=None) -> EpochDynamics:
    params = params or DynamicsParams()
    p = _as_probs(policy)
    w = epoch_weights(p, task, dataset, reference)
    a, b = alpha_beta(p, task)
    return EpochDynamics(p, w, a, b, prob_update_dpo(p, w, params), prob_update_balanced(p, w, params))


def one_step_gradient_oracle(policy, task: PreferenceTask, loss_spec: LossSpec, eta: float,
                             reference=None) -> np.ndarray:
    """Realized probability change after one literal gradient-descent step.

    The loss is the weighted sum over the exact expected dataset. Loss
    gradients with respect to the log-probabilities are converted to
    probability gradients and pulled back to the logits through the explicit
    softmax Jacobian of every prompt.
    """
    if isinstance(policy, PolicyTable):
        logits = policy.logits.copy()
    else:
        logits = np.log(_as_probs(policy))
    pol = PolicyTable(logits)
    p = pol.probs()
    logp = pol.log_probs()
    ref = np.full_like(logp, -np.log(logp.shape[-1])) if reference is None else reference.log_probs()
    data = expected_pair_dataset(task)
    win, lose = data.y1, data.y2
    ev = evaluate(loss_spec, logp[data.x, win], logp[data.x, lose], ref[data.x, win], ref[data.x, lose])
    gw_pi, gl_pi = ev.prob_grads(p[data.x, win], p[data.x, lose])
    dL_dp = np.zeros_like(p)
    np.add.at(dL_dp, (data.x, win), data.weight * gw_pi)
    np.add.at(dL_dp, (data.x, lose), data.weight * gl_pi)
    grad_s = np.stack([softmax_jacobian(p[x]).T @ dL_dp[x] for x in range(task.n_prompts)])
    new = PolicyTable(logits - eta * grad_s)
    return new.probs() - p
