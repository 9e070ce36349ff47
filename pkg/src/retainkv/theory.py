"""Numerical verification of the dilution and geometric-persistence results.

Three independent pillars:

* near-tie distractors force a computable lower bound on attention dilution,
  and preferential retention transforms dilution by an exact formula;
* under stable VAR(1) query dynamics with a uniform block-exit probability
  from a token's relaxed top-K survival region, survival decays geometrically,
  with an explicit amplitude and rate recoverable from the exit probability;
* selection traces of a running model yield survival curves whose qualitative
  shape (sharp drop under fixed top-K, slower under mass criteria) the
  harness checks directly.

Everything here is randomized-but-seeded; Monte Carlo trial streams derive
from one master seed so results do not depend on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import UsefulSet, dilution
from .numerics import Array, as_matrix, as_vector, softmax, softmax_log_space


class StabilityError(ValueError):
    """The query-dynamics matrix has spectral radius >= 1."""


# -- dilution bounds ----------------------------------------------------------


@dataclass(frozen=True)
class DilutionInstance:
    """Logits with a useful set and a certified near-tie distractor subset."""

    logits: Array
    useful: UsefulSet
    near_tie_margin: float      # Delta >= 0
    near_tie_set: frozenset     # distractor indices within Delta of the best useful logit

    def validate(self) -> None:
        z = as_vector(self.logits, "logits")
        if not self.useful.indices:
            raise ValueError("useful set must be nonempty")
        if self.near_tie_margin < 0:
            raise ValueError("near-tie margin must be >= 0")
        if self.near_tie_set & self.useful.indices:
            raise ValueError("near-tie set must be disjoint from the useful set")
        m = max(z[i] for i in self.useful.indices)
        for d in self.near_tie_set:
            if z[d] < m - self.near_tie_margin - 1e-12:
                raise ValueError(f"index {d} is not within the near-tie margin")


def dilution_lower_bound(margin: float, n_distractors: int, n_useful: int) -> float:
    """Guaranteed dilution from n near-tie distractors within `margin` nats.

    a / (1 + a) with a = exp(-margin) * n_distractors / n_useful.
    """
    if n_useful < 1:
        raise ValueError("need at least one useful token")
    if margin < 0 or n_distractors < 0:
        raise ValueError("margin and distractor count must be >= 0")
    a = math.exp(-margin) * n_distractors / n_useful
    return a / (1.0 + a)


@dataclass(frozen=True)
class DilutionBoundCheck:
    delta: float
    bound: float
    holds: bool


def check_dilution_bound(instance: DilutionInstance) -> DilutionBoundCheck:
    """Measured dilution vs the near-tie lower bound; `holds` must always be True."""
    instance.validate()
    weights = softmax(instance.logits)
    delta = dilution(weights, instance.useful)
    bound = dilution_lower_bound(instance.near_tie_margin,
                                 len(instance.near_tie_set),
                                 len(instance.useful.indices))
    return DilutionBoundCheck(delta, bound, delta >= bound - 1e-12)


def random_near_tie_instance(rng: np.random.Generator, max_tokens: int = 64) -> DilutionInstance:
    n_useful = int(rng.integers(1, 5))
    margin = float(abs(rng.normal(0.0, 1.0)))
    n_tie = int(rng.integers(1, max_tokens - n_useful + 1))
    n_low = int(rng.integers(0, max(1, max_tokens - n_useful - n_tie + 1)))
    useful = rng.normal(0.0, 1.0, size=n_useful)
    m = useful.max()
    tie = m - margin + margin * rng.random(n_tie) + rng.random(n_tie)
    low = m - margin - 0.01 - np.abs(rng.normal(0.0, 2.0, size=n_low))
    logits = np.concatenate([useful, tie, low])
    return DilutionInstance(
        logits=logits,
        useful=UsefulSet.of(range(n_useful)),
        near_tie_margin=margin,
        near_tie_set=frozenset(range(n_useful, n_useful + n_tie)),
    )


def retention_dilution(delta: float, rho_useful: float, rho_distractor: float) -> float:
    """Dilution after reweighting, from the retention rates of each side.

    (r * delta) / ((1 - delta) + r * delta) with r = rho_distractor / rho_useful.
    Equals delta when the rates match and tends to 0 as the ratio does.
    """
    if rho_useful <= 0.0:
        raise ValueError("useful retention rate must be positive")
    if not (0.0 <= delta < 1.0):
        raise ValueError("delta must lie in [0, 1)")
    if rho_distractor < 0.0:
        raise ValueError("distractor retention rate must be >= 0")
    a = (rho_distractor / rho_useful) * delta
    return a / ((1.0 - delta) + a)


@dataclass(frozen=True)
class ReweightingCheck:
    direct: float
    formula: float
    delta: float
    rho_useful: float
    rho_distractor: float


def check_reweighting_identity(logits: Array, useful: UsefulSet, retention: Array) -> ReweightingCheck:
    """Reweighted dilution measured directly vs the exact transformation formula.

    Both sides are assembled from positive stable-softmax sums, so they agree
    to float64 roundoff; the identity itself is exact.
    """
    z = as_vector(logits, "logits")
    r = as_vector(retention, "retention")
    if r.shape != z.shape:
        raise ValueError("retention weights must match logits")
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise ValueError("retention weights must lie in [0, 1]")
    u_idx = sorted(useful.indices)
    d_idx = sorted(set(range(z.shape[0])) - useful.indices)
    if not u_idx:
        raise ValueError("useful set must be nonempty")

    alpha = softmax(z)
    useful_mass = float(alpha[u_idx].sum())
    delta = float(alpha[d_idx].sum()) if d_idx else 0.0

    rho_u = float(softmax(z[u_idx]) @ r[u_idx])
    rho_d = float(softmax(z[d_idx]) @ r[d_idx]) if d_idx else 0.0
    if rho_u <= 0.0:
        raise ValueError("no useful token is retained")

    with np.errstate(divide="ignore"):
        log_r = np.where(r > 0.0, np.log(np.where(r > 0.0, r, 1.0)), -np.inf)
    weights_r = softmax_log_space(z, log_r)
    direct = float(weights_r[d_idx].sum()) if d_idx else 0.0

    a = (rho_d / rho_u) * delta
    formula = a / (useful_mass + a) if (useful_mass + a) > 0.0 else 0.0
    return ReweightingCheck(direct, formula, delta, rho_u, rho_d)


# -- geometric persistence under VAR(1) query dynamics ------------------------


@dataclass(frozen=True)
class PersistenceConfig:
    """A tracked token inside a cache of compatibility vectors, plus dynamics."""

    transition: Array            # A, [m, m]; spectral radius < 1 required
    offset: Array                # b, [m]
    noise_scale: float
    compat: Array                # cached compatibility vectors, [n_tokens, m]
    token: int                   # which row of compat is tracked
    top_k: int
    slack: float = 0.0           # region relaxation below the top-K threshold
    block: int = 1               # exit window b_i, in steps
    exit_prob: float | None = None  # assumed epsilon, when known by construction

    def validate(self) -> None:
        a = as_matrix(self.transition, "transition")
        if a.shape[0] != a.shape[1]:
            raise ValueError("transition matrix must be square")
        if spectral_radius(a) >= 1.0:
            raise StabilityError(
                f"spectral radius {spectral_radius(a):.3f} >= 1; dynamics unstable")
        if not (1 <= self.top_k <= self.compat.shape[0]):
            raise ValueError("top_k must lie in [1, n_tokens]")
        if not (0 <= self.token < self.compat.shape[0]):
            raise ValueError("token index out of range")
        if self.slack < 0 or self.block < 1 or self.noise_scale < 0:
            raise ValueError("slack, block and noise_scale must be nonnegative")


def spectral_radius(a: Array) -> float:
    return float(np.abs(np.linalg.eigvals(np.asarray(a, dtype=np.float64))).max())


def _in_region(cfg: PersistenceConfig, states: Array) -> np.ndarray:
    """Membership of each state row in the token's relaxed top-K region."""
    scores = states @ cfg.compat.T
    own = scores[:, cfg.token]
    kth = np.partition(scores, scores.shape[1] - cfg.top_k, axis=1)[:, scores.shape[1] - cfg.top_k]
    return own >= kth - cfg.slack


def _step(cfg: PersistenceConfig, states: Array, rng: np.random.Generator) -> Array:
    noise = rng.standard_normal(states.shape)
    return states @ cfg.transition.T + cfg.offset + cfg.noise_scale * noise


@dataclass
class PersistenceResult:
    survival: Array              # P(n) for n = 1..n_max
    stderr: Array
    bound: Array                 # amplitude * beta**n
    epsilon_hat: float
    beta: float
    amplitude: float
    vacuous: bool                # no block exit ever observed; bound is trivial
    region_unreachable: bool
    holds: bool

    def margin(self) -> float:
        return float((self.bound + 3 * self.stderr - self.survival).min())


def estimate_block_exit(cfg: PersistenceConfig, rng: np.random.Generator,
                        n_starts: int = 1000, n_rollouts: int = 1000,
                        burn_in: int = 200, search_steps: int = 20000) -> tuple[float, bool]:
    """Worst-case block-exit probability over sampled in-region states.

    The assumption bounds the stay probability uniformly over the region, so
    the relevant estimate is one minus the *largest* observed stay
    probability. Returns (epsilon_hat, region_unreachable).
    """
    m = cfg.transition.shape[0]
    state = np.zeros((64, m))
    for _ in range(burn_in):
        state = _step(cfg, state, rng)
    starts = []
    steps = 0
    while sum(s.shape[0] for s in starts) < n_starts and steps < search_steps:
        state = _step(cfg, state, rng)
        mask = _in_region(cfg, state)
        if mask.any():
            starts.append(state[mask])
        steps += 1
    if not starts:
        return 0.0, True
    pool = np.concatenate(starts)[:n_starts]
    expanded = np.repeat(pool, n_rollouts, axis=0)
    alive = np.ones(expanded.shape[0], dtype=bool)
    for _ in range(cfg.block):
        expanded = _step(cfg, expanded, rng)
        alive &= _in_region(cfg, expanded)
    stay = alive.reshape(pool.shape[0], n_rollouts).mean(axis=1)
    return float(1.0 - stay.max()), False


def simulate_persistence(cfg: PersistenceConfig, n_max: int = 200, trials: int = 2000,
                         seed: int = 0, n_starts: int = 1000,
                         n_rollouts: int = 1000) -> PersistenceResult:
    """Monte Carlo survival inside the relaxed region vs the geometric bound.

    Survival at n is the fraction of chains whose first n future states all
    stay in the region. The bound amplitude and rate come from the measured
    block-exit probability: beta = (1 - eps)**(1/block), amplitude =
    1 / (1 - eps). When no exit is ever observed the bound is vacuous and the
    comparison is skipped.
    """
    cfg.validate()
    if trials < 1000:
        raise ValueError("need at least 1e3 trials for a usable standard error")
    master = np.random.SeedSequence(seed)
    rng_exit, rng_run = [np.random.default_rng(s) for s in master.spawn(2)]

    eps_hat, unreachable = estimate_block_exit(cfg, rng_exit, n_starts, n_rollouts)
    m = cfg.transition.shape[0]
    states = np.zeros((trials, m))
    for _ in range(200):
        states = _step(cfg, states, rng_run)
    alive = np.ones(trials, dtype=bool)
    survival = np.empty(n_max)
    for n in range(n_max):
        states = _step(cfg, states, rng_run)
        alive &= _in_region(cfg, states)
        survival[n] = alive.mean()
    stderr = np.sqrt(survival * (1.0 - survival) / trials)

    vacuous = eps_hat <= 0.0
    if vacuous:
        beta, amplitude = 1.0, 1.0
        bound = np.ones(n_max)
        holds = True  # trivially: survival never exceeds 1
    else:
        beta = (1.0 - eps_hat) ** (1.0 / cfg.block)
        amplitude = 1.0 / (1.0 - eps_hat)
        bound = amplitude * beta ** np.arange(1, n_max + 1)
        holds = bool(np.all(survival <= bound + 3.0 * stderr))
    return PersistenceResult(survival, stderr, bound, eps_hat, beta, amplitude,
                             vacuous, unreachable, holds)


# -- VAR(1) diagnostics --------------------------------------------------------


STABILITY_MARGIN = 0.01


@dataclass(frozen=True)
class Var1Fit:
    transition: Array
    offset: Array
    residual_rms: float
    spectral_radius: float

    @property
    def stable(self) -> bool:
        # least squares biases unit roots downward by O(1/T), so a fitted
        # radius within the margin of 1 is not credible evidence of stability
        return self.spectral_radius < 1.0 - STABILITY_MARGIN


def fit_var1(trajectories: list) -> Var1Fit:
    """Least-squares one-lag fit r_{t+1} = A r_t + b over pooled trajectories."""
    xs, ys = [], []
    m = None
    for traj in trajectories:
        t = as_matrix(traj, "trajectory")
        if m is None:
            m = t.shape[1]
        if t.shape[1] != m:
            raise ValueError("trajectories must share a state dimension")
        if t.shape[0] < m + 1:
            raise ValueError(f"each trajectory needs at least {m + 1} steps")
        xs.append(t[:-1])
        ys.append(t[1:])
    if not xs:
        raise ValueError("no trajectories given")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    design = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    rank = np.linalg.matrix_rank(design)
    if rank < m + 1:
        raise ValueError(f"singular design matrix (rank {rank} < {m + 1})")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    a = coef[:m].T
    b = coef[m]
    resid = y - design @ coef
    return Var1Fit(a, b, float(np.sqrt(np.mean(resid ** 2))), spectral_radius(a))


def pca_project(states: Array, k: int) -> tuple[Array, Array, Array]:
    """Project pooled states onto their top-k covariance eigendirections.

    Returns (projected [n, k], components [k, m], eigenvalues [k]).
    """
    x = as_matrix(states, "states")
    if not (1 <= k <= x.shape[1]):
        raise ValueError("k must lie in [1, state dim]")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(1, x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T
    return centered @ comps.T, comps, vals[order]


# -- survival curves -----------------------------------------------------------


@dataclass(frozen=True)
class SurvivalRecord:
    """One token's selection history under a top-K or mass-threshold criterion."""

    birth: int
    selection_steps: tuple
    criterion: str
    layer: int = -1
    head: int = -1

    def max_distance(self) -> int:
        if not self.selection_steps:
            return -1
        return max(self.selection_steps) - self.birth


def survival_curve(records: list, horizons) -> Array:
    """Fraction of tokens still selected at or beyond each horizon."""
    horizons = np.asarray(list(horizons), dtype=np.int64)
    if np.any(horizons < 1):
        raise ValueError("horizons must be positive")
    if not records:
        raise ValueError("no survival records")
    dist = np.array([r.max_distance() for r in records])
    return np.array([(dist >= h).mean() for h in horizons])
