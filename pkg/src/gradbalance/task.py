"""Discrete preference tasks: Gaussian utilities, Bradley-Terry labels, pair sampling."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TaskError(ValueError):
    """Raised for malformed tasks, pairs or sampling requests."""


def gaussian_utility(x, y, alpha: float):
    """Unnormalized utility ``exp(-alpha * (y - x)**2)``; vectorizes over x and y."""
    if not alpha > 0:
        raise TaskError(f"alpha must be positive, got {alpha}")
    d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    out = np.exp(-alpha * d * d)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class PreferenceTask:
    """Prompts x responses grid with positive utilities and an OOD mask.

    ``utility[x, y]`` is unnormalized; only ratios are ever used.
    ``mask[x, y]`` is True for cells that never appear in training pairs.
    ``alpha`` is recorded when the utilities come from :func:`gaussian_utility`.
    """

    utility: np.ndarray
    mask: np.ndarray = None
    alpha: float | None = None

    def __post_init__(self):
        u = np.array(self.utility, dtype=float)
        if u.ndim == 1:
            u = u[None, :]
        if u.ndim != 2 or u.shape[0] < 1 or u.shape[1] < 2:
            raise TaskError(f"utility must be (prompts, responses>=2), got shape {u.shape}")
        if not np.all(np.isfinite(u)) or np.any(u <= 0):
            raise TaskError("utilities must be strictly positive and finite")
        m = np.zeros(u.shape, dtype=bool) if self.mask is None else np.array(self.mask, dtype=bool)
        if m.shape != u.shape:
            raise TaskError(f"mask shape {m.shape} does not match utility shape {u.shape}")
        if np.any((~m).sum(axis=1) < 2):
            raise TaskError("every prompt needs at least two unmasked responses")
        u.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "utility", u)
        object.__setattr__(self, "mask", m)

    @property
    def n_prompts(self) -> int:
        return self.utility.shape[0]

    @property
    def n_responses(self) -> int:
        return self.utility.shape[1]

    @property
    def log_utility(self) -> np.ndarray:
        return np.log(self.utility)

    @classmethod
    def gaussian_grid(cls, n_prompts: int = 20, n_responses: int = 20, alpha: float = 0.6,
                      mask=None) -> "PreferenceTask":
        """Toy grid with prompts and responses labelled 1..n and optimum y = x."""
        xs = np.arange(1, n_prompts + 1)[:, None]
        ys = np.arange(1, n_responses + 1)[None, :]
        # keep utilities strictly positive for distances where exp() underflows
        logu = -alpha * (ys - xs) ** 2.0
        u = np.exp(np.maximum(logu, -700.0))
        return cls(u, mask, alpha)

    def with_mask(self, mask) -> "PreferenceTask":
        return PreferenceTask(self.utility, mask, self.alpha)

    def unmasked_pairs(self, x: int) -> np.ndarray:
        """Unordered unmasked pairs (y1 < y2) for prompt ``x`` as an (n, 2) array."""
        keep = np.flatnonzero(~self.mask[x])
        i, j = np.triu_indices(len(keep), k=1)
        return np.stack([keep[i], keep[j]], axis=1)

    def n_pairs(self) -> int:
        k = (~self.mask).sum(axis=1)
        return int((k * (k - 1) // 2).sum())

    def to_json(self) -> dict:
        if self.alpha is None:
            raise TaskError("only Gaussian-grid tasks are serializable (utilities are regenerated from alpha)")
        return {
            "prompts": self.n_prompts,
            "responses": self.n_responses,
            "alpha": self.alpha,
            "mask": self.mask.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "PreferenceTask":
        return cls.gaussian_grid(data["prompts"], data["responses"], data["alpha"], data.get("mask"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PreferenceTask":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class GaussianScenario:
    """Single-prompt scenario with Gaussian model and utility curves on ``{0..n-1}``."""

    mu_p: float
    mu_q: float
    sigma2: float = 100.0
    n_responses: int = 100

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise TaskError("sigma2 must be positive")
        if self.n_responses < 2:
            raise TaskError("need at least two responses")

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n_responses, dtype=float)

    def log_model(self) -> np.ndarray:
        """Unnormalized Gaussian log-density of the model distribution on the grid."""
        return -((self.grid - self.mu_p) ** 2) / (2 * self.sigma2)

    def log_utility(self) -> np.ndarray:
        return -((self.grid - self.mu_q) ** 2) / (2 * self.sigma2)

    def to_task(self) -> PreferenceTask:
        return PreferenceTask(np.exp(self.log_utility())[None, :])


@dataclass(frozen=True)
class PairSample:
    """One labelled comparison; ``tau = +1`` means ``y1`` is preferred."""

    x: int
    y1: int
    y2: int
    tau: int

    def __post_init__(self):
        if self.y1 == self.y2:
            raise TaskError("degenerate pair: y1 == y2")
        if self.tau not in (1, -1):
            raise TaskError(f"tau must be +1 or -1, got {self.tau}")


class SamplingKind(enum.Enum):
    UNIFORM = "uniform"
    SHIFTLESS = "shiftless"


@dataclass(frozen=True)
class SamplingScheme:
    """Pair proposal distribution.

    Uniform weights every unmasked unordered pair equally. Shiftless weights a
    pair by ``pi(y1|x) * pi(y2|x)`` under ``probs``, the live policy's
    probability matrix, which callers refresh every epoch.
    """

    kind: SamplingKind = SamplingKind.UNIFORM
    probs: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind is SamplingKind.SHIFTLESS and self.probs is None:
            raise TaskError("shiftless sampling needs the current policy probabilities")

    @classmethod
    def uniform(cls) -> "SamplingScheme":
        return cls(SamplingKind.UNIFORM)

    @classmethod
    def shiftless(cls, probs) -> "SamplingScheme":
        return cls(SamplingKind.SHIFTLESS, np.atleast_2d(np.asarray(probs, dtype=float)))


def _check_pair(task: PreferenceTask, x: int, y1: int, y2: int) -> None:
    if y1 == y2:
        raise TaskError("degenerate pair: y1 == y2")
    if task.mask[x, y1] or task.mask[x, y2]:
        raise TaskError(f"pair ({x}, {y1}, {y2}) touches a masked cell")


def preference_probability(task: PreferenceTask, x: int, y1: int, y2: int) -> float:
    """Bradley-Terry probability that ``y1`` beats ``y2`` under the task utility."""
    _check_pair(task, x, y1, y2)
    u1, u2 = task.utility[x, y1], task.utility[x, y2]
    return float(u1 / (u1 + u2))


@dataclass(frozen=True)
class PairDataset:
    """Columnar pair set consumed by the dynamics and the trainer.

    ``weight`` scales each row. For the exact expected dataset it carries the
    Bradley-Terry probability (times the proposal weight); for stochastic
    samples it is the constant that makes weighted sums unbiased for the
    expected-dataset sums.
    """

    x: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    tau: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_samples(cls, samples, weight: float = 1.0) -> "PairDataset":
        arr = np.array([(s.x, s.y1, s.y2, s.tau) for s in samples], dtype=np.int64).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], np.full(len(arr), float(weight)))

    def samples(self) -> list[PairSample]:
        return [PairSample(int(a), int(b), int(c), int(t))
                for a, b, c, t in zip(self.x, self.y1, self.y2, self.tau)]


def _all_pairs(task: PreferenceTask) -> np.ndarray:
    rows = []
    for x in range(task.n_prompts):
        pr = task.unmasked_pairs(x)
        rows.append(np.column_stack([np.full(len(pr), x), pr]))
    return np.concatenate(rows, axis=0)


def _proposal_weights(task: PreferenceTask, pairs: np.ndarray, scheme: SamplingScheme) -> np.ndarray:
    if scheme.kind is SamplingKind.UNIFORM:
        return np.ones(len(pairs))
    p = scheme.probs
    if p.shape != task.utility.shape:
        raise TaskError(f"policy probabilities shape {p.shape} does not match task {task.utility.shape}")
    return p[pairs[:, 0], pairs[:, 1]] * p[pairs[:, 0], pairs[:, 2]]


def expected_pair_dataset(task: PreferenceTask, scheme: SamplingScheme | None = None) -> PairDataset:
    """Every unmasked ordered pair ``(winner, loser)`` weighted by its label probability.

    Proposal weights are normalized to average 1 per unordered pair, so under
    uniform sampling the weights are the plain Bradley-Terry probabilities.
    """
    scheme = scheme or SamplingScheme.uniform()
    pairs = _all_pairs(task)
    prop = _proposal_weights(task, pairs, scheme)
    prop = prop * (len(prop) / prop.sum())
    x, a, b = pairs.T
    ua, ub = task.utility[x, a], task.utility[x, b]
    pab = ua / (ua + ub)
    return PairDataset(
        x=np.concatenate([x, x]),
        y1=np.concatenate([a, b]),
        y2=np.concatenate([b, a]),
        tau=np.ones(2 * len(x), dtype=np.int64),
        weight=np.concatenate([prop * pab, prop * (1.0 - pab)]),
    )


def sample_pair_arrays(task: PreferenceTask, scheme: SamplingScheme | None, n: int,
                       rng: np.random.Generator) -> PairDataset:
    """Vectorized sampler behind :func:`sample_pairs`.

    Draws ``n`` unordered unmasked pairs from the proposal and labels each with
    a Bernoulli draw of the Bradley-Terry probability. Row weights are set to
    ``n_pairs / n`` so weighted sums estimate the expected-dataset sums.
    """
    if n < 1:
        raise TaskError("n must be at least 1")
    scheme = scheme or SamplingScheme.uniform()
    pairs = _all_pairs(task)
    if len(pairs) == 0:
        raise TaskError("task has no valid pairs")
    prop = _proposal_weights(task, pairs, scheme)
    if scheme.kind is SamplingKind.UNIFORM:
        idx = rng.integers(0, len(pairs), size=n)
    else:
        idx = rng.choice(len(pairs), size=n, p=prop / prop.sum())
    x, a, b = pairs[idx].T
    ua, ub = task.utility[x, a], task.utility[x, b]
    tau = np.where(rng.random(n) < ua / (ua + ub), 1, -1)
    return PairDataset(x, a, b, tau, np.full(n, len(pairs) / n))


def sample_pairs(task: PreferenceTask, scheme: SamplingScheme | None, n: int,
                 rng_seed: int | np.random.Generator) -> list[PairSample]:
    """``n`` labelled pairs; identical seeds give identical sequences."""
    rng = np.random.default_rng(rng_seed)
    return sample_pair_arrays(task, scheme, n, rng).samples()


def apply_mask(task: PreferenceTask, rate: float, rng_seed) -> PreferenceTask:
    """Mask ``round(rate * cells)`` random cells, keeping two unmasked responses per prompt.

    Cells are drawn one at a time in a random order; a cell whose row would
    drop below two unmasked responses is rejected and the next candidate is
    tried. Existing masked cells are kept.
    """
    if not 0.0 <= rate < 1.0:
        raise TaskError(f"mask rate must be in [0, 1), got {rate}")
    rng = np.random.default_rng(rng_seed)
    mask = task.mask.copy()
    target = int(round(rate * mask.size))
    free = (~mask).sum(axis=1)
    masked = 0
    for cell in rng.permutation(mask.size):
        if masked >= target:
            break
        x, y = divmod(int(cell), task.n_responses)
        if mask[x, y] or free[x] <= 2:
            continue
        mask[x, y] = True
        free[x] -= 1
        masked += 1
    return task.with_mask(mask)
