"""Tabular softmax policy: one free logit per (prompt, response) cell.

Because every logit is its own parameter, the per-logit parameter gradient has
unit norm and distinct logits have orthogonal parameter gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .task import PreferenceTask


class NumericError(FloatingPointError):
    """Non-finite logits or probabilities."""


def softmax(logits: np.ndarray) -> np.ndarray:
    s = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite logits")
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    s = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite logits")
    z = s - s.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    """``J[..., i, j] = dp_i/ds_j = p_i (delta_ij - p_j)`` for a probability vector (or batch)."""
    p = np.asarray(p, dtype=float)
    return p[..., :, None] * (np.eye(p.shape[-1]) - p[..., None, :])


@dataclass(eq=False)
class PolicyTable:
    """Logit matrix ``s[x, y]``. Mutated in place only by the trainer."""

    logits: np.ndarray

    def __post_init__(self):
        s = np.array(self.logits, dtype=float)
        if s.ndim == 1:
            s = s[None, :]
        if not np.all(np.isfinite(s)):
            raise NumericError("non-finite logits")
        self.logits = s

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def probs(self, x: int | None = None) -> np.ndarray:
        """Probability vector for prompt ``x``; the full matrix when ``x`` is None."""
        return softmax(self.logits if x is None else self.logits[x])

    def log_probs(self, x: int | None = None) -> np.ndarray:
        return log_softmax(self.logits if x is None else self.logits[x])

    def prob_jacobian(self, x: int) -> np.ndarray:
        return softmax_jacobian(self.probs(x))

    def log_prob(self, x: int, y: int) -> float:
        return float(self.log_probs(x)[y])

    def copy(self) -> "PolicyTable":
        return PolicyTable(self.logits.copy())

    def freeze(self) -> "ReferencePolicy":
        return ReferencePolicy(self.logits)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in self.logits])

    @classmethod
    def load_csv(cls, path) -> "PolicyTable":
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls(np.array(rows))


class ReferencePolicy:
    """Frozen copy of a policy's logits, used as the DPO reference."""

    __slots__ = ("_logits", "_logp")

    def __init__(self, logits):
        s = np.array(logits, dtype=float)
        if s.ndim == 1:
            s = s[None, :]
        s.setflags(write=False)
        self._logits = s
        self._logp = log_softmax(s)
        self._logp.setflags(write=False)

    @property
    def logits(self) -> np.ndarray:
        return self._logits

    @property
    def shape(self) -> tuple[int, int]:
        return self._logits.shape

    def probs(self, x: int | None = None) -> np.ndarray:
        return softmax(self._logits if x is None else self._logits[x])

    def log_probs(self, x: int | None = None) -> np.ndarray:
        return self._logp if x is None else self._logp[x]

    def log_prob(self, x: int, y: int) -> float:
        return float(self._logp[x, y])

    def thaw(self) -> PolicyTable:
        return PolicyTable(self._logits.copy())

    @classmethod
    def uniform(cls, shape) -> "ReferencePolicy":
        return cls(np.zeros(shape))


def probs(policy, x: int) -> np.ndarray:
    return policy.probs(x)


def prob_jacobian(policy, x: int) -> np.ndarray:
    return softmax_jacobian(policy.probs(x))


def log_prob(policy, x: int, y: int) -> float:
    return policy.log_prob(x, y)


def log_ratio(policy, reference, x: int, y: int) -> float:
    """``log pi(y|x) - log pi_ref(y|x)``."""
    return policy.log_prob(x, y) - reference.log_prob(x, y)


def masked_uniform_init(task: PreferenceTask) -> PolicyTable:
    """All-zero logits.

    Masked cells keep the same logit as the rest: a softmax cannot emit exact
    zeros, so zero-probability OOD responses live only in the closed-form
    dynamics.
    """
    return PolicyTable(np.zeros((task.n_prompts, task.n_responses)))


def load_policy(path) -> PolicyTable:
    return PolicyTable.load_csv(Path(path))
