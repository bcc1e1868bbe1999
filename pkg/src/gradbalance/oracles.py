"""Brute-force and Monte-Carlo checks of the update-theory inequalities.

Each check returns an :class:`OracleReport`. Trials draw from per-trial
generators spawned from one root seed, so a report is reproducible from
``(trials, seed)`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (DynamicsParams, alpha_beta, epoch_weights, one_step_gradient_oracle,
                       prob_update_balanced, prob_update_dpo)
from .losses import LossSpec
from .policy import PolicyTable
from .task import GaussianScenario, PreferenceTask

TOL_INEQUALITY = 1e-12
TOL_VARIANCE = 1e-10
TOL_STRICT = 1e-12


@dataclass
class OracleReport:
    name: str
    trials: int
    violations: int
    worst_margin: float
    passed: bool
    skipped: int = 0
    inconclusive: bool = False
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "trials": self.trials,
            "violations": self.violations,
            "worst_margin": self.worst_margin,
            "passed": self.passed,
            "skipped": self.skipped,
            "inconclusive": self.inconclusive,
            "details": self.details,
        }


def _report(name, margins, tol, skipped=0, details=None, strict=False) -> OracleReport:
    margins = np.asarray(margins, dtype=float)
    bad = margins <= tol if strict else margins < -tol
    worst = float(margins.min()) if margins.size else float("nan")
    n_bad = int(bad.sum())
    return OracleReport(name, int(margins.size), n_bad, worst, n_bad == 0, skipped, False, details or {})


def _trial_rngs(trials: int, rng) -> list[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        seq = rng.bit_generator.seed_seq.spawn(1)[0]
    else:
        seq = np.random.SeedSequence(rng)
    return [np.random.default_rng(s) for s in seq.spawn(trials)]


def _var(v, wt):
    m = (wt * v).sum()
    return (wt * (v - m) ** 2).sum()


def _cov(a, b, wt):
    return (wt * (a - (wt * a).sum()) * (b - (wt * b).sum())).sum()


# --- random distributions and monotone functions ---------------------------

def random_distribution(rng: np.random.Generator, max_support: int = 20):
    """Sorted support points and Dirichlet weights of a finite random variable."""
    k = int(rng.integers(2, max_support + 1))
    xs = np.sort(rng.normal(size=k))
    return xs, rng.dirichlet(np.ones(k))


def random_increasing(rng: np.random.Generator, k: int) -> np.ndarray:
    """Values of a positive nondecreasing step function on ``k`` sorted points.

    A positive offset plus cumulative nonnegative increments; some increments
    are zeroed so plateaus occur.
    """
    inc = rng.random(k) * (rng.random(k) < 0.7)
    inc[0] = 0.0
    return rng.uniform(0.05, 1.0) + np.cumsum(inc)


def fym_margin(f, g, wt) -> float:
    """``Var[fg] - Var[f] E[g^2]``."""
    return _var(f * g, wt) - _var(f, wt) * (wt * g * g).sum()


def fym2_margin(f, g, wt) -> float:
    """``Cov[fg, g] - E[f] Var[g]``."""
    return _cov(f * g, g, wt) - (wt * f).sum() * _var(g, wt)


def _mc_monotone(name, margin_fn, trials, rng) -> OracleReport:
    margins = []
    for r in _trial_rngs(trials, rng):
        xs, wt = random_distribution(r)
        f, g = random_increasing(r, len(xs)), random_increasing(r, len(xs))
        margins.append(margin_fn(f, g, wt))
    return _report(name, margins, TOL_INEQUALITY)


def mc_check_fym(trials: int, rng=0) -> OracleReport:
    """Monte-Carlo check of ``Var[fg] >= Var[f] E[g^2]`` for positive increasing f, g."""
    return _mc_monotone("fym", fym_margin, trials, rng)


def mc_check_fym2(trials: int, rng=0) -> OracleReport:
    """Monte-Carlo check of ``Cov[fg, g] >= E[f] Var[g]`` for positive increasing f, g."""
    return _mc_monotone("fym2", fym2_margin, trials, rng)


# --- task generators ---------------------------------------------------------

def aligned_task(rng: np.random.Generator, m: int | None = None):
    """Model probabilities and utilities sharing one rank order (no distribution shift)."""
    m = m or int(rng.integers(3, 30))
    p = rng.dirichlet(np.full(m, rng.uniform(0.3, 3.0)))
    u = np.empty(m)
    u[np.argsort(p)] = np.sort(rng.lognormal(0.0, rng.uniform(0.2, 2.0), m))
    return p, u


def anti_aligned_task(rng: np.random.Generator, m: int | None = None):
    p, u = aligned_task(rng, m)
    u_rev = np.empty_like(u)
    u_rev[np.argsort(p)] = np.sort(u)[::-1]
    return p, u_rev


def independent_task(rng: np.random.Generator):
    """Responses on a ``k1 x k2`` grid: probability varies with the row, utility with the column.

    Under the uniform distribution over responses the row and column are
    independent, so the model win mass and the utility win mass are exactly
    independent random variables.
    """
    k1, k2 = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    row_p = rng.lognormal(0.0, rng.uniform(0.2, 1.5), k1)
    col_u = rng.lognormal(0.0, rng.uniform(0.2, 1.5), k2)
    p = np.repeat(row_p, k2)
    p = p / p.sum()
    u = np.tile(col_u, k1)
    return p, u


def permuted_task(rng: np.random.Generator, m: int | None = None):
    """Utility ranks from a random permutation of probability ranks (independent only in law)."""
    m = m or int(rng.integers(3, 30))
    p = rng.dirichlet(np.ones(m))
    u = rng.lognormal(0.0, 1.0, m)
    return p, u


def _w_alpha_beta(p, u):
    task = PreferenceTask(u[None, :])
    a, b = alpha_beta(p[None, :], task)
    return b[0] - a[0], a[0], b[0]


def _is_rank_aligned(p, v) -> bool:
    order = np.argsort(p, kind="stable")
    return bool(np.all(np.diff(v[order]) >= -1e-12))


def variance_margin(p, u) -> float:
    """Slack of ``Var[wp] - Var[w]E[p^2] >= 2(Cov[a,b]E[p^2] - Cov[ap, bp])`` over responses."""
    w, a, b = _w_alpha_beta(p, u)
    wt = np.full(len(p), 1.0 / len(p))
    ep2 = (wt * p * p).sum()
    lhs = _var(w * p, wt) - _var(w, wt) * ep2
    rhs = 2.0 * (_cov(a, b, wt) * ep2 - _cov(a * p, b * p, wt))
    return lhs - rhs


def check_variance_bound(task_generator=aligned_task, trials: int = 1000, rng=0) -> OracleReport:
    """Variance inequality on generated tasks whose utility win mass rises with probability.

    Tasks failing that precondition are skipped and counted.
    """
    margins, skipped = [], 0
    for r in _trial_rngs(trials, rng):
        p, u = task_generator(r)
        _, _, b = _w_alpha_beta(p, u)
        if not _is_rank_aligned(p, b):
            skipped += 1
            continue
        margins.append(variance_margin(p, u))
    return _report("variance", margins, TOL_VARIANCE, skipped)


def variance_negative_control(trials: int = 1000, rng=0) -> OracleReport:
    """Variance inequality on anti-aligned tasks, bypassing the precondition filter."""
    margins = [variance_margin(*anti_aligned_task(r)) for r in _trial_rngs(trials, rng)]
    return _report("variance-negative-control", margins, TOL_VARIANCE)


def ood_update_margin(p, u) -> float:
    """``sum_j w_j p_j E[p] - sum_j w_j p_j^2``; positive when the inequality holds."""
    w, _, _ = _w_alpha_beta(p, u)
    return float((w * p).sum() * p.mean() - (w * p * p).sum())


def check_ood_update(task_generator=independent_task, trials: int = 1000, rng=0) -> OracleReport:
    """Strict inequality ``sum w p^2 < sum w p * E[p]`` for independent model/utility win masses."""
    margins, skipped = [], 0
    for r in _trial_rngs(trials, rng):
        p, u = task_generator(r)
        w, _, _ = _w_alpha_beta(p, u)
        if np.max(np.abs(w)) < 1e-12:
            skipped += 1
            continue
        margins.append(ood_update_margin(p, u))
    return _report("oodupdate", margins, TOL_STRICT, skipped, strict=True)


# --- perturbed labels --------------------------------------------------------

def dataquality_margin(p, w_clean, eps, subset) -> float:
    """``Var[wp] - Var[w*p] - (Var[w] - Var[w*]) E_A[p^2]`` with variances over ``subset``."""
    w = w_clean + eps
    ps, ws, cs = p[subset], w[subset], w_clean[subset]
    wt = np.full(len(ps), 1.0 / len(ps))
    ep2_all = float(np.mean(p * p))
    lhs = (_var(ws, wt) - _var(cs, wt)) * ep2_all
    rhs = _var(ws * ps, wt) - _var(cs * ps, wt)
    return rhs - lhs


def check_dataquality(task: PreferenceTask | None = None, epsilon_scale: float = 0.01, trials: int = 1000,
                      rng=0, probs=None, subset=None) -> OracleReport:
    """Label-noise sensitivity of ``w`` versus ``w * p``, asserted in expectation.

    Each trial perturbs every response's utility win mass by an independent
    ``eps_i ~ U(-scale, scale)`` (so ``w = w* + eps``) and evaluates the
    inequality slack for ``+eps`` and ``-eps`` (antithetic pair). The check
    passes when the mean slack is at least ``-1e-3 * scale**2``. ``subset``
    must satisfy ``E_subset[p^2] >= E_all[p^2]``; by default each trial takes
    a random number of the most probable responses.
    """
    root = np.random.default_rng(rng)
    if task is None:
        m = 12
        task = PreferenceTask(root.lognormal(0.0, 1.0, (1, m)))
    m = task.n_responses
    p = root.dirichlet(np.ones(m)) if probs is None else np.asarray(probs, dtype=float).ravel()
    a, b = alpha_beta(p[None, :], task)
    w_clean = (b - a)[0]
    if subset is not None:
        subset = np.asarray(subset)
        if np.mean(p[subset] ** 2) < np.mean(p * p) - 1e-15:
            raise ValueError("subset must have E[p^2] at least the full-set value")
    by_prob = np.argsort(p)[::-1]
    margins = []
    for r in _trial_rngs(trials, root):
        sub = subset if subset is not None else by_prob[: int(r.integers(2, m + 1))]
        eps = r.uniform(-epsilon_scale, epsilon_scale, m)
        margins.append(0.5 * (dataquality_margin(p, w_clean, eps, sub) + dataquality_margin(p, w_clean, -eps, sub)))
    margins = np.asarray(margins)
    mean = float(margins.mean()) if margins.size else 0.0
    tol = 1e-3 * epsilon_scale**2
    ok = mean >= -tol
    return OracleReport("dataquality", len(margins), 0 if ok else 1, mean, ok,
                        details={"mean_slack": mean, "min_trial_slack": float(margins.min()), "tolerance": tol})


# --- zero-probability responses ---------------------------------------------

def check_ood_zero(probs_with_zero, task: PreferenceTask, params: DynamicsParams | None = None,
                   epochs: int = 100, ood=None) -> OracleReport:
    """Run closed-form epochs on exact probabilities and confirm zero entries stay exactly zero.

    Both the DPO and the balanced update are iterated. ``ood`` lists the
    zero-probability, masked responses (default: every zero entry).
    """
    params = params or DynamicsParams(eta=0.1)
    p0 = np.atleast_2d(np.asarray(probs_with_zero, dtype=float))
    zeros = (p0 == 0) if ood is None else np.isin(np.arange(p0.shape[1]), ood)[None, :]
    records = {}
    violations = 0
    worst = 0.0
    for branch, update in (("dpo", prob_update_dpo), ("balanced", prob_update_balanced)):
        p = p0.copy()
        for _ in range(epochs):
            a, b = alpha_beta(p, task)
            p = p + update(p, b - a, params)
        leaked = float(np.abs(p[zeros]).max()) if zeros.any() else 0.0
        violations += int(leaked != 0.0)
        worst = min(worst, -leaked)
        records[branch] = {"max_ood_probability": leaked, "final": p.tolist()}
    return OracleReport("oodnoprob", 2, violations, worst, violations == 0, details=records)


# --- closed-form probability update vs. a literal gradient step --------------

def prob_update_discrepancy(logits, u, eta: float) -> float:
    """Relative max-abs gap between the closed-form DPO update and one real gradient step."""
    task = PreferenceTask(np.atleast_2d(u))
    pol = PolicyTable(np.atleast_2d(logits))
    w = epoch_weights(pol, task)
    closed = prob_update_dpo(pol, w, DynamicsParams(eta=eta))
    real = one_step_gradient_oracle(pol, task, LossSpec(), eta)
    return float(np.abs(closed - real).max() / np.abs(real).max())


def check_prob_update(trials: int = 50, rng=0, eta: float = 1e-4, n_responses: int = 10,
                      rel_tol: float = 0.01, shrink: float = 0.6) -> OracleReport:
    """Closed-form epoch update against a literal full-batch step on random tasks.

    Each trial must agree within ``rel_tol`` at ``eta``, and halving ``eta``
    must cut the gap to at most ``shrink`` times its value (first-order
    agreement rather than a coincidence at one step size).
    """
    margins, gaps, ratios = [], [], []
    for r in _trial_rngs(trials, rng):
        logits = r.normal(0.0, 1.0, n_responses)
        u = r.lognormal(0.0, 1.0, n_responses)
        g1 = prob_update_discrepancy(logits, u, eta)
        g2 = prob_update_discrepancy(logits, u, eta / 2)
        ratio = g2 / g1 if g1 > 0 else 0.0
        gaps.append(g1)
        ratios.append(ratio)
        margins.append(min(rel_tol - g1, shrink - ratio))
    rep = _report("probupdate", margins, 0.0, strict=True)
    rep.details = {"eta": eta, "max_relative_gap": float(max(gaps)), "max_halving_ratio": float(max(ratios))}
    return rep


# --- Gaussian distribution shift --------------------------------------------

def local_extrema(v: np.ndarray) -> list[tuple[float, str]]:
    """Interior local extrema of a sequence by 3-point comparison.

    A plateau bounded by strictly lower (higher) neighbours counts as one
    maximum (minimum) at its midpoint.
    """
    out = []
    n = len(v)
    i = 1
    while i < n - 1:
        j = i
        while j + 1 < n - 1 and v[j + 1] == v[i]:
            j += 1
        left, right = v[i - 1], v[j + 1] if j + 1 < n else v[j]
        if v[i] > left and v[i] > right:
            out.append(((i + j) / 2.0, "max"))
        elif v[i] < left and v[i] < right:
            out.append(((i + j) / 2.0, "min"))
        i = j + 1
    return out


def gaussian_w_curves(scenario: GaussianScenario):
    """Model probabilities, ``w`` and ``w * p`` on the scenario grid under uniform pair sampling."""
    logp = scenario.log_model()
    p = np.exp(logp - logp.max())
    p /= p.sum()
    task = scenario.to_task()
    a, b = alpha_beta(p[None, :], task)
    w = (b - a)[0]
    return p, w, w * p


def check_distshift_extrema(scenario: GaussianScenario) -> OracleReport:
    """Location of the extrema of ``w`` and ``w * p`` relative to the two centres.

    Claims checked (with ``mu_p <= mu_q`` after swapping):
    every extremum of w lies outside ``[mu_p, mu_q]``; for the w extremum
    nearest above ``mu_q`` some extremum of ``w * p`` lies strictly inside
    ``(mu_p, y*)``; for the w extremum nearest below ``mu_p`` some extremum of
    ``w * p`` lies inside ``(y*, mu_p)``. The literal text of the last claim
    (``y* > mu_q`` with ``y* < y_hat < mu_p``) is reported, never asserted.
    """
    mu_p, mu_q = scenario.mu_p, scenario.mu_q
    mirrored = mu_p > mu_q
    p, w, wp = gaussian_w_curves(scenario)
    grid = scenario.grid
    if mirrored:
        # reflect the axis so the model centre sits left of the utility centre
        grid = (scenario.n_responses - 1) - grid[::-1]
        p, w, wp = p[::-1], w[::-1], wp[::-1]
        mu_p, mu_q = (scenario.n_responses - 1) - mu_p, (scenario.n_responses - 1) - mu_q
    ext_w = local_extrema(w)
    ext_wp = local_extrema(wp)
    pos_w = [grid[0] + y for y, _ in ext_w]
    pos_wp = [grid[0] + y for y, _ in ext_wp]
    details = {"mu_p": scenario.mu_p, "mu_q": scenario.mu_q, "sigma2": scenario.sigma2,
               "w_extrema": [[y, k] for (y, k) in zip(pos_w, [k for _, k in ext_w])],
               "wp_extrema": [[y, k] for (y, k) in zip(pos_wp, [k for _, k in ext_wp])],
               "mirrored": mirrored}
    if mu_p == mu_q or not pos_w:
        rep = OracleReport("distshift", 0, 0, float("nan"), True, inconclusive=True, details=details)
        rep.details["reason"] = "no distribution shift" if mu_p == mu_q else "no interior extrema of w"
        return rep
    margins = []
    # claim 1: distance outside [mu_p, mu_q] (positive means outside)
    outside = [max(y - mu_q, mu_p - y) for y in pos_w]
    margins.extend(outside)
    right = [y for y in pos_w if y > mu_q]
    left = [y for y in pos_w if y < mu_p]
    claims = {"outside_interval": bool(all(m > 0 for m in outside))}
    if right:
        y_star = min(right)
        inside = [min(y - mu_p, y_star - y) for y in pos_wp]
        best = max(inside) if inside else -np.inf
        margins.append(best)
        claims["right_wp_between_mu_p_and_y*"] = bool(best > 0)
        claims["right_y*"] = y_star
        claims["literal_third_claim"] = bool(any(y_star < y < mu_p for y in pos_wp))
    if left:
        y_star = max(left)
        inside = [min(y - y_star, mu_p - y) for y in pos_wp]
        best = max(inside) if inside else -np.inf
        margins.append(best)
        claims["left_wp_between_y*_and_mu_p"] = bool(best > 0)
        claims["left_wp_between_y*_and_mu_q"] = bool(any(y_star < y < mu_q for y in pos_wp))
        claims["left_y*"] = y_star
    details["claims"] = claims
    margins = np.asarray(margins, dtype=float)
    n_bad = int((margins <= 0).sum())
    return OracleReport("distshift", len(margins), n_bad, float(margins.min()), n_bad == 0, details=details)


SHIFT_SCENARIOS = (
    GaussianScenario(45.0, 55.0, 100.0, 100),
    GaussianScenario(30.0, 70.0, 100.0, 100),
    GaussianScenario(48.0, 52.0, 100.0, 100),
)
