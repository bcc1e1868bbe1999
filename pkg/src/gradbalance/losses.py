"""Pairwise preference losses with analytic gradients.

Every loss has the form ``-log sigmoid(z)`` and is returned as a
:class:`LossEval` carrying the value, ``kappa = sigmoid(z) = exp(-value)`` and
the gradients with respect to the winner and loser log-probabilities. All
functions broadcast over numpy arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .task import sample_pair_arrays


class LossDomainError(ValueError):
    """Probabilities outside the open interval a loss needs."""


class LossKind(enum.Enum):
    DPO = "dpo"
    REWARD_BT = "reward-bt"
    NBDPO = "nbdpo"
    NBDPO_V2 = "nbdpov2"
    BDPO = "bdpo"
    BALANCED_REFERENCE = "balanced-ref"


class Symmetry(enum.Enum):
    ASYMMETRIC = "asym"
    SYMMETRIC = "sym"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.DPO
    beta: float = 1.0
    clip_max: float = 0.5
    symmetry: Symmetry = Symmetry.ASYMMETRIC

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.clip_max >= 0:
            raise ValueError(f"clip_max must be >= 0, got {self.clip_max}")

    @property
    def clip_min(self) -> float:
        if self.symmetry is Symmetry.ASYMMETRIC:
            return 0.0
        return 1.0 / (1.0 + self.clip_max) - 1.0

    @property
    def name(self) -> str:
        if self.kind in (LossKind.NBDPO, LossKind.NBDPO_V2):
            return f"{self.kind.value}-{self.symmetry.value}"
        return self.kind.value


LOSS_NAMES = ("dpo", "nbdpo-asym", "nbdpo-sym", "nbdpov2-asym", "nbdpov2-sym", "bdpo", "balanced-ref")
SWEEP_LOSSES = ("dpo", "nbdpo-asym", "nbdpo-sym", "nbdpov2-asym", "nbdpov2-sym", "bdpo")


def parse_loss_spec(name: str, beta: float = 1.0, clip: float = 0.5) -> LossSpec:
    """Build a spec from a CLI name such as ``nbdpo-sym`` or ``bdpo``."""
    key = name.strip().lower()
    if key in ("dpo", "baseline"):
        return LossSpec(LossKind.DPO, beta, clip)
    if key in ("reward-bt", "bt"):
        return LossSpec(LossKind.REWARD_BT, beta, clip)
    if key == "bdpo":
        return LossSpec(LossKind.BDPO, beta, clip)
    if key == "balanced-ref":
        return LossSpec(LossKind.BALANCED_REFERENCE, beta, clip)
    base, _, sym = key.rpartition("-")
    kinds = {"nbdpo": LossKind.NBDPO, "nbdpov2": LossKind.NBDPO_V2}
    syms = {"asym": Symmetry.ASYMMETRIC, "sym": Symmetry.SYMMETRIC}
    if base in kinds and sym in syms:
        return LossSpec(kinds[base], beta, clip, syms[sym])
    raise ValueError(f"unknown loss {name!r}; valid names: {', '.join(LOSS_NAMES)}")


@dataclass(frozen=True)
class LossEval:
    value: np.ndarray
    kappa: np.ndarray
    grad_logpi_w: np.ndarray
    grad_logpi_l: np.ndarray

    def prob_grads(self, pi_w, pi_l):
        """Gradients with respect to the probabilities themselves."""
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return self.grad_logpi_w / pi_w, self.grad_logpi_l / pi_l


def _sigmoid_loss(z, dz_dw, dz_dl) -> LossEval:
    # d/dz [-log sigmoid(z)] = -(1 - kappa) = -sigmoid(-z)
    one_minus_kappa = expit(-z)
    return LossEval(-log_expit(z), expit(z), -one_minus_kappa * dz_dw, -one_minus_kappa * dz_dl)


def _logs(pi_w, pi_l, strict_below_one=False):
    pw, pl = np.asarray(pi_w, dtype=float), np.asarray(pi_l, dtype=float)
    if np.any(pw <= 0) or np.any(pl <= 0):
        raise LossDomainError("probabilities must be positive")
    if np.any(pw > 1) or np.any(pl > 1) or (strict_below_one and (np.any(pw >= 1) or np.any(pl >= 1))):
        raise LossDomainError("probabilities must lie below one")
    return np.log(pw), np.log(pl)


def dpo_loss(lr_w, lr_l, beta: float = 1.0) -> LossEval:
    """``-log sigmoid(beta * (lr_w - lr_l))`` on policy/reference log-ratios."""
    lr_w, lr_l = np.asarray(lr_w, dtype=float), np.asarray(lr_l, dtype=float)
    z = beta * (lr_w - lr_l)
    return _sigmoid_loss(z, np.full_like(z, beta), np.full_like(z, -beta))


def reward_bt_loss(r_w, r_l) -> LossEval:
    """Bradley-Terry reward-model loss. Gradient fields hold ``dL/dr_w`` and ``dL/dr_l``."""
    r_w, r_l = np.asarray(r_w, dtype=float), np.asarray(r_l, dtype=float)
    z = r_w - r_l
    return _sigmoid_loss(z, np.ones_like(z), -np.ones_like(z))


def _nb_lambda_from_logs(a_w, a_l, spec: LossSpec):
    gap = a_w - a_l
    lam = 1.0 + np.clip(gap, spec.clip_min, spec.clip_max)
    inside = (gap > spec.clip_min) & (gap < spec.clip_max)
    return lam, inside.astype(float)


def nbdpo_lambda(pi_w, pi_l, spec: LossSpec):
    """``1 + clip(log(pi_w / pi_l), clip_min, clip_max)``."""
    a_w, a_l = _logs(pi_w, pi_l)
    return _nb_lambda_from_logs(a_w, a_l, spec)[0]


def _nbdpo_from_logs(lr_w, lr_l, detached_lr_w, a_w, a_l, spec: LossSpec) -> LossEval:
    lam, _ = _nb_lambda_from_logs(a_w, a_l, spec)
    b = spec.beta
    # the correction term is exactly zero when detached_lr_w == lr_w, so the value matches DPO bit for bit
    z = b * (lr_w - lr_l) + b * (lam - 1.0) * (lr_w - detached_lr_w)
    # lr_w == detached_lr_w, so any derivative of lambda multiplies zero
    return _sigmoid_loss(z, b * lam, np.full_like(z, -b))


def nbdpo_loss(lr_w, lr_l, detached_lr_w, pi_w, pi_l, spec: LossSpec) -> LossEval:
    """Value-preserving reweighting: same value as DPO, winner gradient scaled by lambda.

    ``detached_lr_w`` is the winner log-ratio treated as a constant.
    """
    a_w, a_l = _logs(pi_w, pi_l)
    lr_w, lr_l = np.asarray(lr_w, dtype=float), np.asarray(lr_l, dtype=float)
    return _nbdpo_from_logs(lr_w, lr_l, np.asarray(detached_lr_w, dtype=float), a_w, a_l, spec)


def _nbdpov2_from_logs(lr_w, lr_l, a_w, a_l, spec: LossSpec) -> LossEval:
    lam, dlam = _nb_lambda_from_logs(a_w, a_l, spec)
    b = spec.beta
    z = b * lam * lr_w - b * lr_l
    # lambda depends on log pi_w - log pi_l; differentiated inside the clip window
    return _sigmoid_loss(z, b * (lam + lr_w * dlam), b * (-1.0 - lr_w * dlam))


def nbdpov2_loss(lr_w, lr_l, pi_w, pi_l, spec: LossSpec) -> LossEval:
    """``-log sigmoid(beta * lambda * lr_w - beta * lr_l)`` with no detached term."""
    a_w, a_l = _logs(pi_w, pi_l)
    return _nbdpov2_from_logs(np.asarray(lr_w, dtype=float), np.asarray(lr_l, dtype=float), a_w, a_l, spec)


def bdpo_lambda(pi_w, pi_l):
    """Winner weight ``log pi_l / (log pi_w + log pi_l)``; above 1/2 iff ``pi_w > pi_l``."""
    a_w, a_l = _logs(pi_w, pi_l, strict_below_one=True)
    return a_l / (a_w + a_l)


def _bdpo_from_logs(lr_w, lr_l, a_w, a_l, beta: float) -> LossEval:
    tot = a_w + a_l
    lam = a_l / tot
    z = beta * (lam * (lr_w + lr_l) - lr_l)
    # total derivatives: lambda is a function of both log-probabilities
    dlam_w = -a_l / tot**2
    dlam_l = a_w / tot**2
    s = lr_w + lr_l
    return _sigmoid_loss(z, beta * (lam + s * dlam_w), beta * (lam - 1.0 + s * dlam_l))


def bdpo_loss(lr_w, lr_l, pi_w, pi_l, beta: float = 1.0) -> LossEval:
    """``-log sigmoid(beta*lam*lr_w - beta*(1-lam)*lr_l)`` with ``lam = bdpo_lambda(pi_w, pi_l)``.

    Gradients differentiate through ``lam``.
    """
    a_w, a_l = _logs(pi_w, pi_l, strict_below_one=True)
    return _bdpo_from_logs(np.asarray(lr_w, dtype=float), np.asarray(lr_l, dtype=float), a_w, a_l, beta)


def balanced_reference_loss(lr_w, lr_l, pi_w, pi_l, beta: float = 1.0) -> LossEval:
    """Gradient rule of an exactly balanced loss with DPO's kappa.

    ``dL/dpi_w = -beta (1 - kappa)`` and ``dL/dpi_l = +beta (1 - kappa)``, so the
    probability gradients cancel per sample. Through the softmax this moves the
    logits by ``eta * tau * (1 - kappa) * p_i * (1 - p_i + p_j)``.
    """
    pw, pl = np.asarray(pi_w, dtype=float), np.asarray(pi_l, dtype=float)
    _logs(pw, pl)
    ev = dpo_loss(lr_w, lr_l, beta)
    return LossEval(ev.value, ev.kappa, ev.grad_logpi_w * pw, ev.grad_logpi_l * pl)


def evaluate(spec: LossSpec, logp_w, logp_l, ref_w, ref_l) -> LossEval:
    """Evaluate ``spec`` from policy and reference log-probabilities.

    Gradients are total derivatives with respect to ``logp_w`` and ``logp_l``.
    For the reward loss the implicit rewards ``logp - ref`` play the scores.
    """
    a_w, a_l = np.asarray(logp_w, dtype=float), np.asarray(logp_l, dtype=float)
    lr_w, lr_l = a_w - ref_w, a_l - ref_l
    k = spec.kind
    if k is LossKind.DPO:
        return dpo_loss(lr_w, lr_l, spec.beta)
    if k is LossKind.REWARD_BT:
        return reward_bt_loss(lr_w, lr_l)
    if k is LossKind.NBDPO:
        return _nbdpo_from_logs(lr_w, lr_l, lr_w.copy(), a_w, a_l, spec)
    if k is LossKind.NBDPO_V2:
        return _nbdpov2_from_logs(lr_w, lr_l, a_w, a_l, spec)
    if k is LossKind.BDPO:
        # a saturated winner (log p == 0) still gives lambda = 1; only both at one is undefined
        if np.any(a_w > 0) or np.any(a_l > 0) or np.any(a_w + a_l >= 0):
            raise LossDomainError("bDPO needs probabilities strictly below one")
        return _bdpo_from_logs(lr_w, lr_l, a_w, a_l, spec.beta)
    if k is LossKind.BALANCED_REFERENCE:
        return balanced_reference_loss(lr_w, lr_l, np.exp(a_w), np.exp(a_l), spec.beta)
    raise ValueError(f"unsupported loss kind {k}")


class Balance(enum.Enum):
    BALANCED = "balanced"
    POSITIVELY_IMBALANCED = "positively-imbalanced"
    NEGATIVELY_IMBALANCED = "negatively-imbalanced"


@dataclass(frozen=True)
class BalanceEstimate:
    label: Balance
    mean: float
    stderr: float
    n: int


def classify_balance(spec: LossSpec, policy, task, n_samples: int, rng, reference=None,
                     z: float = 3.0) -> BalanceEstimate:
    """Monte-Carlo sign test of ``E[dL/dpi_w + dL/dpi_l]``.

    A positive mean means the loser gradient dominates (negatively imbalanced).
    Means within ``z`` standard errors of zero are reported as balanced. For
    the reward loss the sum is taken over reward gradients.
    """
    rng = np.random.default_rng(rng)
    data = sample_pair_arrays(task, None, n_samples, rng)
    win = np.where(data.tau > 0, data.y1, data.y2)
    lose = np.where(data.tau > 0, data.y2, data.y1)
    logp = policy.log_probs()
    if reference is None:
        ref = np.full_like(logp, -np.log(logp.shape[-1]))
    else:
        ref = reference.log_probs()
    a_w, a_l = logp[data.x, win], logp[data.x, lose]
    ev = evaluate(spec, a_w, a_l, ref[data.x, win], ref[data.x, lose])
    if spec.kind is LossKind.REWARD_BT:
        total = ev.grad_logpi_w + ev.grad_logpi_l
    else:
        gw, gl = ev.prob_grads(np.exp(a_w), np.exp(a_l))
        total = gw + gl
    mean = float(total.mean())
    se = float(total.std(ddof=1) / np.sqrt(len(total))) if len(total) > 1 else 0.0
    if abs(mean) <= z * se:
        label = Balance.BALANCED
    elif mean > 0:
        label = Balance.NEGATIVELY_IMBALANCED
    else:
        label = Balance.POSITIVELY_IMBALANCED
    return BalanceEstimate(label, mean, se, len(total))
