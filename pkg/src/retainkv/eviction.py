"""Global future-utility scoring and the single-budget top-M eviction policy.

Every cached token (layer, head, birth) is scored by the geometric sum of its
retention weight over a lookahead horizon; one global ranking then keeps the
best M entries across all layers and heads. Capacity allocation across heads
is whatever that ranking produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

INFINITE = "infinite"


@dataclass(frozen=True)
class EvictionScore:
    """One cached token's utility at a given step and horizon."""

    layer: int
    head: int
    token_birth: int
    beta: float
    score: float


@dataclass(frozen=True)
class EvictionConfig:
    m_global: int
    horizon: int | str = 2       # lookahead T - t; "infinite" for the limit form
    cadence: int = 1             # steps between compressions
    tie_break: str = "score_birth_layer_head"
    protected_recent: int = 0    # optional window never evicted; 0 = pure ranking

    def __post_init__(self):
        if self.m_global < 1:
            raise ValueError("m_global must be >= 1")
        if self.horizon != INFINITE and int(self.horizon) < 1:
            raise ValueError("horizon must be >= 1 or 'infinite'")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.tie_break != "score_birth_layer_head":
            raise ValueError(f"unknown tie_break rule {self.tie_break!r}")


def global_score(beta: float, birth: int, now: int, horizon: int) -> float:
    """Sum of beta**(s - birth) for s in (now, now + horizon].

    Closed form beta**(now+1-birth) * (1 - beta**horizon) / (1 - beta),
    evaluated through exp/log1p/expm1 so it matches direct summation to full
    precision; beta == 1 is the limit `horizon`, beta == 0 scores 0.
    """
    if not (0.0 <= beta <= 1.0):
        raise ValueError("beta must lie in [0, 1]")
    if now < birth:
        raise ValueError("now must be >= birth")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if beta == 1.0:
        return float(horizon)
    if beta == 0.0:
        return 0.0
    lead = now + 1 - birth
    log_beta = math.log(beta)
    head = math.exp(lead * log_beta)                 # beta ** (now+1-birth)
    geom = -math.expm1(horizon * log_beta)           # 1 - beta ** horizon
    return head * geom / (1.0 - beta)


def global_score_infinite(beta: float, birth: int, now: int) -> float:
    """Infinite-horizon limit beta**(now+1-birth) / (1 - beta); needs beta < 1."""
    if not (0.0 <= beta < 1.0):
        raise ValueError("infinite-horizon score diverges at beta == 1")
    if now < birth:
        raise ValueError("now must be >= birth")
    if beta == 0.0:
        return 0.0
    lead = now + 1 - birth
    return math.exp(lead * math.log(beta)) / (1.0 - beta)


def score_entries(births, betas, now: int, horizon) -> np.ndarray:
    """Vectorized scores for parallel arrays of cache entries.

    Under the infinite horizon, beta == 1 entries get +inf: they outrank every
    finite score and fall back to the standard tie rule among themselves.
    """
    births = np.asarray(births, dtype=np.int64)
    betas = np.asarray(betas, dtype=np.float64)
    lead = (now + 1 - births).astype(np.float64)
    if np.any(lead < 1):
        raise ValueError("now must be >= every birth")
    scores = np.empty_like(betas)
    one = betas == 1.0
    zero = betas == 0.0
    mid = ~(one | zero)
    with np.errstate(divide="ignore"):
        log_beta = np.where(mid, np.log(np.where(mid, betas, 0.5)), 0.0)
    head = np.exp(lead * log_beta)
    if horizon == INFINITE:
        scores[one] = np.inf
        scores[mid] = head[mid] / (1.0 - betas[mid])
    else:
        horizon = int(horizon)
        scores[one] = float(horizon)
        geom = -np.expm1(horizon * log_beta)
        scores[mid] = head[mid] * geom[mid] / (1.0 - betas[mid])
    scores[zero] = 0.0
    return scores


def evict_global(entries: Iterable[EvictionScore], cfg: EvictionConfig) -> list[EvictionScore]:
    """Retain the min(M, n) entries with the largest scores.

    Deterministic tie rule: score descending, then younger token (larger
    birth) first, then (layer, head) ascending.
    """
    entries = list(entries)
    seen = set()
    for e in entries:
        key = (e.layer, e.head, e.token_birth)
        if key in seen:
            raise ValueError(f"duplicate entry {key}")
        seen.add(key)
    if len(entries) <= cfg.m_global:
        return sorted(entries, key=_tie_key)
    scores = np.array([e.score for e in entries])
    births = np.array([e.token_birth for e in entries])
    layers = np.array([e.layer for e in entries])
    heads = np.array([e.head for e in entries])
    # last key is the primary sort key
    order = np.lexsort((heads, layers, -births, -scores))
    return [entries[i] for i in order[: cfg.m_global]]


def _tie_key(e: EvictionScore):
    return (-e.score, -e.token_birth, e.layer, e.head)


@dataclass
class TraceRow:
    step: int
    layer: int
    head: int
    token_birth: int
    score: float
    action: str  # "retain" | "evict"


@dataclass
class _Entry:
    layer: int
    head: int
    birth: int
    beta: float


class EvictionPolicy:
    """Stateful monotone eviction: once out, a token never re-enters.

    Tokens appended since the last compression stay resident until the next
    compression event; compressions fire every `cadence` steps.
    """

    def __init__(self, cfg: EvictionConfig, trace: list[TraceRow] | None = None):
        self.cfg = cfg
        self._alive: dict[tuple[int, int, int], _Entry] = {}
        self._evicted: set[tuple[int, int, int]] = set()
        self.trace = trace

    def admit(self, layer: int, head: int, birth: int, beta: float) -> None:
        key = (layer, head, birth)
        if key in self._evicted or key in self._alive:
            raise ValueError(f"token {key} was already admitted")
        self._alive[key] = _Entry(layer, head, birth, float(beta))

    def alive(self, layer: int, head: int) -> list[int]:
        return sorted(e.birth for (l, h, _), e in self._alive.items() if l == layer and h == head)

    def total_alive(self) -> int:
        return len(self._alive)

    def step(self, now: int) -> dict[tuple[int, int], list[int]]:
        """Run one policy step; returns births evicted per (layer, head).

        A no-op except at multiples of the configured cadence.
        """
        if (now + 1) % self.cfg.cadence != 0:
            return {}
        return self.compress(now)

    def compress(self, now: int) -> dict[tuple[int, int], list[int]]:
        entries = list(self._alive.values())
        if not entries:
            return {}
        protected = []
        rankable = []
        for e in entries:
            if self.cfg.protected_recent and now - e.birth < self.cfg.protected_recent:
                protected.append(e)
            else:
                rankable.append(e)
        budget = self.cfg.m_global - len(protected)
        scored = [
            EvictionScore(e.layer, e.head, e.birth, e.beta,
                          _scalar_score(e.beta, e.birth, now, self.cfg.horizon))
            for e in rankable
        ]
        if budget <= 0:
            retained = []
        else:
            retained = evict_global(scored, EvictionConfig(
                m_global=budget, horizon=self.cfg.horizon, cadence=self.cfg.cadence))
        keep = {(e.layer, e.head, e.token_birth) for e in retained}
        keep |= {(e.layer, e.head, e.birth) for e in protected}
        evicted: dict[tuple[int, int], list[int]] = {}
        for s in scored:
            key = (s.layer, s.head, s.token_birth)
            action = "retain" if key in keep else "evict"
            if self.trace is not None:
                self.trace.append(TraceRow(now, s.layer, s.head, s.token_birth, s.score, action))
            if action == "evict":
                evicted.setdefault((s.layer, s.head), []).append(s.token_birth)
                self._evicted.add(key)
                del self._alive[key]
        return evicted


def _scalar_score(beta: float, birth: int, now: int, horizon) -> float:
    if horizon == INFINITE:
        if beta == 1.0:
            return math.inf
        return global_score_infinite(beta, birth, now)
    return global_score(beta, birth, now, int(horizon))
