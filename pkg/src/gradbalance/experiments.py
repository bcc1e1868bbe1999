"""Gaussian w-curves and the 20x20 toy preference benchmark."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .dynamics import epoch_weights
from .losses import SWEEP_LOSSES, LossKind, LossSpec, parse_loss_spec
from .policy import NumericError, PolicyTable, ReferencePolicy, log_softmax, softmax
from .task import (GaussianScenario, PreferenceTask, SamplingKind, SamplingScheme, apply_mask,
                   expected_pair_dataset, sample_pair_arrays)
from .training import full_sweep, label_sweep, logit_gradient

log = logging.getLogger(__name__)

MASK_RATES = (0.0, 0.2, 0.4)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or logits."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    eta: float = 0.5
    epochs: int = 2000
    pairs_per_epoch: int | None = None
    mask_rate: float = 0.0
    alpha_utility: float = 0.6
    clip_max: float = 0.5
    reference_bootstrap_steps: int = 300
    seed: int = 0
    sampling: SamplingKind = SamplingKind.UNIFORM
    full_batch: bool = False
    eval_every: int = 10
    n_prompts: int = 20
    n_responses: int = 20

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if self.epochs < 0 or self.reference_bootstrap_steps < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ValueError("pairs_per_epoch must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        if self.loss.clip_max != self.clip_max:
            object.__setattr__(self, "loss", replace(self.loss, clip_max=self.clip_max))

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = {"name": self.loss.name, "beta": self.loss.beta, "clip_max": self.loss.clip_max,
                     "clip_min": self.loss.clip_min}
        d["sampling"] = self.sampling.value
        return d


@dataclass
class ExperimentReport:
    config: TrainConfig
    reward_trajectory: list = field(default_factory=list)
    gradient_balance: list = field(default_factory=list)
    validation_loss: list = field(default_factory=list)
    final_policy: PolicyTable | None = None

    @property
    def final_reward(self) -> tuple[float, float]:
        _, negsq, util = self.reward_trajectory[-1]
        return negsq, util

    def loss_spikes(self, rel: float = 0.1) -> int:
        v = np.array([r[1] for r in self.validation_loss])
        if len(v) < 2:
            return 0
        return int(np.sum(v[1:] > v[:-1] * (1.0 + rel)))

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "reward_trajectory": [[int(s), float(a), float(b)] for s, a, b in self.reward_trajectory],
            "gradient_balance": [[int(e), float(a), float(b)] for e, a, b in self.gradient_balance],
            "validation_loss": [[int(e), float(v)] for e, v in self.validation_loss],
            "loss_spikes": self.loss_spikes(),
        }


def eval_reward(policy, task: PreferenceTask) -> tuple[float, float]:
    """Mean over prompts of expected ``-(y - x)**2`` and of expected utility.

    Prompt and response indices are compared directly, which matches the toy
    grid where the best response for prompt x is y = x.
    """
    p = policy.probs() if hasattr(policy, "probs") else np.asarray(policy)
    xs = np.arange(task.n_prompts)[:, None]
    ys = np.arange(task.n_responses)[None, :]
    negsq = -((ys - xs) ** 2.0)
    return float((p * negsq).sum(axis=1).mean()), float((p * task.utility).sum(axis=1).mean())


def _streams(seed: int, mask_rate: float):
    """Independent seed sequences for (mask, bootstrap, training) of one sweep cell."""
    key = int(round(mask_rate * 1000))
    return (np.random.SeedSequence([seed, key, 0]),
            np.random.SeedSequence([seed, key, 1]),
            np.random.SeedSequence([seed, key, 2]))


def build_task(config: TrainConfig) -> PreferenceTask:
    base = PreferenceTask.gaussian_grid(config.n_prompts, config.n_responses, config.alpha_utility)
    if config.mask_rate == 0:
        return base
    return apply_mask(base, config.mask_rate, _streams(config.seed, config.mask_rate)[0])


def _batches(task: PreferenceTask, config: TrainConfig, rng: np.random.Generator):
    pairs = full_sweep(task)
    expected = expected_pair_dataset(task) if config.full_batch else None

    def next_batch(logits):
        if expected is not None:
            return expected
        if config.sampling is SamplingKind.SHIFTLESS:
            scheme = SamplingScheme.shiftless(softmax(logits))
            return sample_pair_arrays(task, scheme, config.pairs_per_epoch or len(pairs), rng)
        if config.pairs_per_epoch is None:
            return label_sweep(task, pairs, rng)
        return sample_pair_arrays(task, None, config.pairs_per_epoch, rng)

    return next_batch


def _descend(task, spec, logits, ref_logp, config, rng, epochs, report: ExperimentReport | None = None):
    next_batch = _batches(task, config, rng)
    val = expected_pair_dataset(task) if report is not None else None
    for epoch in range(epochs):
        data = next_batch(logits)
        try:
            grad, _, g_w, g_l = logit_gradient(spec, logits, ref_logp, data)
        except (NumericError, FloatingPointError) as exc:
            raise TrainingError(f"{spec.name} diverged at epoch {epoch}: {exc}") from exc
        logits = logits - config.eta * grad
        if not np.all(np.isfinite(logits)):
            raise TrainingError(f"{spec.name} produced non-finite logits at epoch {epoch}")
        if report is not None:
            report.gradient_balance.append((epoch, g_w, g_l))
            step = epoch + 1
            if step % config.eval_every == 0 or step == epochs:
                report.reward_trajectory.append((step, *eval_reward(PolicyTable(logits), task)))
                _, vloss, _, _ = logit_gradient(spec, logits, ref_logp, val)
                report.validation_loss.append((step, vloss))
    return logits


def bootstrap_reference(task: PreferenceTask, steps: int = 300, seed=0, eta: float = 0.5,
                        config: TrainConfig | None = None) -> ReferencePolicy:
    """Train baseline DPO from the uniform policy (uniform reference) and freeze the result."""
    cfg = config or TrainConfig(eta=eta)
    zeros = np.zeros((task.n_prompts, task.n_responses))
    rng = np.random.default_rng(seed)
    logits = _descend(task, LossSpec(LossKind.DPO), zeros, log_softmax(zeros), cfg, rng, steps)
    return ReferencePolicy(logits)


def train(task: PreferenceTask, reference: ReferencePolicy, config: TrainConfig,
          init: PolicyTable | None = None, rng=None) -> ExperimentReport:
    """Gradient descent on the logits starting from ``init`` (default: the reference)."""
    rng = np.random.default_rng(_streams(config.seed, config.mask_rate)[2] if rng is None else rng)
    logits = (reference.logits if init is None else init.logits).copy()
    report = ExperimentReport(config)
    report.reward_trajectory.append((0, *eval_reward(PolicyTable(logits), task)))
    logits = _descend(task, config.loss, logits, reference.log_probs(), config, rng, config.epochs, report)
    report.final_policy = PolicyTable(logits)
    spikes = report.loss_spikes()
    if spikes:
        log.info("%s: %d validation-loss spikes", config.loss.name, spikes)
    return report


def run_experiment(config: TrainConfig) -> tuple[ExperimentReport, PreferenceTask, ReferencePolicy]:
    """One benchmark cell: grid task, mask, bootstrapped reference, then training."""
    task = build_task(config)
    _, boot_seq, _ = _streams(config.seed, config.mask_rate)
    reference = bootstrap_reference(task, config.reference_bootstrap_steps, boot_seq, config=config)
    return train(task, reference, config), task, reference


def _sweep_cell(args):
    losses, mask, seed, base = args
    cfg0 = replace(base, mask_rate=mask, seed=seed)
    task = build_task(cfg0)
    _, boot_seq, _ = _streams(seed, mask)
    reference = bootstrap_reference(task, cfg0.reference_bootstrap_steps, boot_seq, config=cfg0)
    rows = []
    for name in losses:
        spec = parse_loss_spec(name, cfg0.loss.beta, cfg0.clip_max)
        rep = train(task, reference, replace(cfg0, loss=spec))
        negsq, util = rep.final_reward
        rows.append({"loss": name, "mask": mask, "seed": seed, "reward_negsq": negsq, "reward_util": util})
    return rows


@dataclass
class SweepResult:
    rows: list

    def summary(self, metric: str = "reward_negsq") -> dict:
        """``{(loss, mask): (mean, std, n)}`` over seeds."""
        out = {}
        for loss in dict.fromkeys(r["loss"] for r in self.rows):
            for mask in dict.fromkeys(r["mask"] for r in self.rows):
                v = np.array([r[metric] for r in self.rows if r["loss"] == loss and r["mask"] == mask])
                if v.size:
                    out[(loss, mask)] = (float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, int(v.size))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["loss", "mask", "seed", "reward_negsq", "reward_util"])
            for r in self.rows:
                out.writerow([r["loss"], repr(r["mask"]), r["seed"], repr(r["reward_negsq"]), repr(r["reward_util"])])

    def write_table(self, path) -> None:
        """Loss-by-mask grid of seed means and standard deviations for both metrics."""
        masks = list(dict.fromkeys(r["mask"] for r in self.rows))
        neg, util = self.summary("reward_negsq"), self.summary("reward_util")
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            head = ["loss"]
            for m in masks:
                head += [f"negsq_mean@{m}", f"negsq_std@{m}", f"util_mean@{m}", f"util_std@{m}"]
            out.writerow(head)
            for loss in dict.fromkeys(r["loss"] for r in self.rows):
                row = [loss]
                for m in masks:
                    row += [repr(neg[(loss, m)][0]), repr(neg[(loss, m)][1]),
                            repr(util[(loss, m)][0]), repr(util[(loss, m)][1])]
                out.writerow(row)


def table1_sweep(losses=SWEEP_LOSSES, mask_rates=MASK_RATES, seeds=range(5),
                 base: TrainConfig | None = None, jobs: int = 1) -> SweepResult:
    """Every loss from one shared bootstrapped reference per (mask, seed) cell."""
    base = base or TrainConfig()
    cells = [(tuple(losses), float(m), int(s), base) for m in mask_rates for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_sweep_cell, cells))
    else:
        parts = [_sweep_cell(c) for c in cells]
    return SweepResult([row for part in parts for row in part])


def gradient_balance_trajectory(report: ExperimentReport) -> dict:
    """Spearman correlation of the mean winner/loser probability gradients with the epoch index."""
    gb = np.array(report.gradient_balance, dtype=float).reshape(-1, 3)
    if len(gb) < 3:
        raise InsufficientDataError("need at least three epochs")
    epochs, g_w, g_l = gb.T
    degenerate = bool(np.ptp(g_w) == 0 or np.ptp(g_l) == 0)
    if degenerate:
        rho_w = rho_l = float("nan")
    else:
        rho_w = float(spearmanr(epochs, g_w).statistic)
        rho_l = float(spearmanr(epochs, g_l).statistic)
    return {"spearman_gw": rho_w, "spearman_gl": rho_l, "degenerate": degenerate,
            "g_w": g_w.tolist(), "g_l": g_l.tolist()}


def run_gaussian_scenario(scenario: GaussianScenario, sampling: str | SamplingKind = "uniform",
                          out_path=None) -> dict:
    """``w`` (DPO) and ``w * p`` (balanced) over the response grid of a Gaussian scenario.

    Pairs are weighted by the chosen sampling scheme on the exact expected
    dataset; the model distribution is the discretized Gaussian at ``mu_p``.
    """
    kind = SamplingKind(sampling)
    logp = scenario.log_model()
    p = np.exp(logp - logp.max())
    p /= p.sum()
    task = scenario.to_task()
    scheme = SamplingScheme.uniform() if kind is SamplingKind.UNIFORM else SamplingScheme.shiftless(p)
    w = epoch_weights(p[None, :], task, expected_pair_dataset(task, scheme))[0]
    u = task.utility[0] / task.utility[0].sum()
    table = {"y": scenario.grid, "p": p, "u": u, "w_dpo": w, "w_balanced": w * p}
    if out_path is not None:
        write_columns(out_path, table)
    return table


def write_columns(path, table: dict) -> None:
    cols = list(table)
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(cols)
        for row in zip(*(table[c] for c in cols)):
            out.writerow([repr(float(v)) for v in row])
