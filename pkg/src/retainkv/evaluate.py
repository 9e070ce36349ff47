"""Incremental decoding with live KV eviction, plus accuracy and trace capture.

Every policy runs the same token-by-token path over a paged store; they differ
only in which entries survive each compression. Attention at serving time is
hard: a standard softmax over the currently retained entries. Retention
scores influence serving only through the ranking.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, _gate_input
from .eviction import EvictionConfig, EvictionPolicy, TraceRow
from .gates import GateParams, gate_forward_batch
from .paged_cache import PagedKVStore
from .tasks import Sample

POLICIES = ("full", "global", "per_head", "recency")


class _FullPolicy:
    def admit(self, layer, head, birth, beta):
        pass

    def step(self, now):
        return {}


class _PerHeadPolicy:
    """Independent fixed budget per (layer, head), same scores and tie rule."""

    def __init__(self, m_head: int, layers: int, heads: int, horizon, cadence: int,
                 trace=None):
        cfg = EvictionConfig(m_global=m_head, horizon=horizon, cadence=cadence)
        self.subs = {(l, h): EvictionPolicy(cfg, trace)
                     for l in range(layers) for h in range(heads)}

    def admit(self, layer, head, birth, beta):
        self.subs[(layer, head)].admit(layer, head, birth, beta)

    def step(self, now):
        out = {}
        for sub in self.subs.values():
            out.update(sub.step(now))
        return out


class _RecencyPolicy:
    """Sliding window per head: keep the most recent `window` births."""

    def __init__(self, window: int, layers: int, heads: int):
        self.window = window
        self.alive = {(l, h): [] for l in range(layers) for h in range(heads)}

    def admit(self, layer, head, birth, beta):
        self.alive[(layer, head)].append(birth)

    def step(self, now):
        out = {}
        for key, births in self.alive.items():
            cut = [b for b in births if b <= now - self.window]
            if cut:
                out[key] = cut
                self.alive[key] = [b for b in births if b > now - self.window]
        return out


def make_policy(name: str, total_budget: int, layers: int, heads: int,
                horizon=2, cadence: int = 1, trace=None):
    if name == "full":
        return _FullPolicy()
    if name == "global":
        return EvictionPolicy(EvictionConfig(m_global=max(1, total_budget),
                                             horizon=horizon, cadence=cadence), trace)
    per_head = max(1, total_budget // (layers * heads))
    if name == "per_head":
        return _PerHeadPolicy(per_head, layers, heads, horizon, cadence, trace)
    if name == "recency":
        return _RecencyPolicy(per_head, layers, heads)
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICIES}")


class SelectionRecorder:
    """Per-head selection events under top-K and tau-mass criteria."""

    def __init__(self, top_k=(1, 2, 4), tau=(0.99,)):
        self.top_k = tuple(top_k)
        self.tau = tuple(tau)
        # (layer, head, criterion) -> {birth: [selection steps]}
        self.events: dict = {}
        self.mass_set_sizes: list[int] = []

    def criteria(self):
        return [f"top{k}" for k in self.top_k] + [f"mass{t}" for t in self.tau]

    def observe(self, layer: int, head: int, step: int, births: np.ndarray,
                weights: np.ndarray) -> None:
        order = np.argsort(-weights, kind="stable")
        csum = np.cumsum(weights[order])
        for k in self.top_k:
            chosen = births[order[: min(k, order.shape[0])]]
            self._record(layer, head, f"top{k}", step, chosen)
        for t in self.tau:
            size = int(np.searchsorted(csum, t - 1e-12) + 1)
            size = min(size, order.shape[0])
            self.mass_set_sizes.append(size)
            self._record(layer, head, f"mass{t}", step, births[order[:size]])

    def _record(self, layer, head, criterion, step, chosen):
        slot = self.events.setdefault((layer, head, criterion), {})
        for b in chosen:
            slot.setdefault(int(b), []).append(step)


@dataclass
class DecodeResult:
    predictions: np.ndarray
    correct: int
    total: int
    mean_retained: float
    peak_entries: int
    peak_pages: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")


def decode_sequence(bb: Backbone, gates: GateParams | None, sample: Sample,
                    policy_name: str = "full", budget_fraction: float = 1.0,
                    horizon=2, cadence: int = 1, page_size: int = 16,
                    recorder: SelectionRecorder | None = None,
                    trace: list[TraceRow] | None = None) -> DecodeResult:
    """Teacher-forced incremental pass with live eviction; scores answers.

    The budget fraction is relative to the full cache at the end of the
    sequence, `T * layers * heads` entries in total.
    """
    shape = bb.shape
    L, H, dh = shape.layers, shape.heads, shape.head_dim
    tokens = sample.tokens
    T = tokens.shape[0]
    total_budget = max(1, int(np.ceil(budget_fraction * T * L * H)))
    store = PagedKVStore(L, H, dh, page_size=page_size)
    policy = make_policy(policy_name, total_budget, L, H, horizon, cadence, trace)

    predictions = np.zeros(T, dtype=np.int64)
    retained_after = []
    peak_entries = 0
    peak_pages = 0

    for t in range(T):
        h = bb.embed[tokens[t]] + bb.pos[t]
        for l in range(L):
            x = h
            attn = np.zeros_like(h)
            for hd in range(H):
                q = x @ bb.wq[l, hd]
                k = x @ bb.wk[l, hd]
                v = x @ bb.wv[l, hd]
                if gates is not None:
                    gin = _gate_input(x[None, :], k[None, :], v[None, :], gates.gate_input)
                    beta = float(gate_forward_batch(gin, l, hd, gates)[0])
                else:
                    beta = 1.0
                store.append(l, hd, k, v, t, beta)
                policy.admit(l, hd, t, beta)
                snap = store.gather(l, hd)
                z = snap.keys @ q / np.sqrt(dh)
                z = z - z.max()
                e = np.exp(z)
                w = e / e.sum()
                attn += (w @ snap.values) @ bb.wo[l, hd]
                if recorder is not None:
                    recorder.observe(l, hd, t, snap.births, w)
            h = h + attn
            a = np.tanh(h @ bb.mlp_w1[l] + bb.mlp_b1[l])
            h = h + a @ bb.mlp_w2[l] + bb.mlp_b2[l]
        logits = h @ bb.unembed
        predictions[t] = int(np.argmax(logits))
        peak_entries = max(peak_entries, store.total_entries())
        peak_pages = max(peak_pages, store.pages_in_use())
        for (l, hd), births in policy.step(t).items():
            store.evict(l, hd, births)
        retained_after.append(store.total_entries())

    correct = int(np.sum(predictions[sample.query_positions] == sample.answers))
    return DecodeResult(predictions, correct, sample.answers.shape[0],
                        float(np.mean(retained_after)), peak_entries, peak_pages)


@dataclass
class EvalCell:
    policy: str
    budget: float
    accuracy: float
    mean_retained: float
    peak_entries: int
    seconds: float


def evaluate_policies(bb: Backbone, gates: GateParams | None, samples: list,
                      policies, budgets, horizon=2, cadence: int = 1,
                      trace: list[TraceRow] | None = None) -> list[EvalCell]:
    """Paired evaluation grid: every cell sees the identical sample list."""
    cells = []
    for budget in budgets:
        for policy in policies:
            t0 = time.perf_counter()
            correct = total = 0
            retained = []
            peak = 0
            for sample in samples:
                res = decode_sequence(bb, gates, sample, policy, budget,
                                      horizon=horizon, cadence=cadence, trace=trace)
                correct += res.correct
                total += res.total
                retained.append(res.mean_retained)
                peak = max(peak, res.peak_entries)
            cells.append(EvalCell(policy, float(budget), correct / total,
                                  float(np.mean(retained)), peak,
                                  time.perf_counter() - t0))
    return cells
