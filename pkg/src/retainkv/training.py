"""Gate training against a frozen full-cache teacher.

Seeded Adam with a fixed step size; batch gradients are averaged in a fixed
order so runs are bit-reproducible. Adam rather than plain SGD because the
readout bias starts at 18, where the sigmoid's slope is ~1.5e-8: unnormalized
gradient steps cannot move the betas off their saturated initialization. The
backbone never changes; the teacher is the same backbone running without
gating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, student_backward, student_forward, teacher_forward
from .gates import (
    GateParams,
    cap_loss_global_grad,
    quality_loss,
    total_loss,
)


class DivergenceError(RuntimeError):
    """Training loss exceeded the abort threshold."""


DIVERGENCE_LIMIT = 1e6


@dataclass
class LossBreakdown:
    total: float
    quality: float
    cap: float
    kl: float
    nll: float


@dataclass
class TrainResult:
    params: GateParams
    history: list       # LossBreakdown per step
    final: LossBreakdown

    def loss_rows(self) -> list[dict]:
        return [
            {"step": i, "quality": rec.quality, "cap": rec.cap, "total": rec.total}
            for i, rec in enumerate(self.history)
        ]


def _quality_with_grad(teacher_logits, student_logits, targets):
    """Mean per-position KL(p||q) + NLL and its gradient at the student logits."""
    def log_softmax(z):
        zz = z - z.max(axis=-1, keepdims=True)
        return zz - np.log(np.exp(zz).sum(axis=-1, keepdims=True))

    n = teacher_logits.shape[0]
    log_p = log_softmax(teacher_logits)
    log_q = log_softmax(student_logits)
    p = np.exp(log_p)
    q = np.exp(log_q)
    kl = float((p * (log_p - log_q)).sum(axis=-1).mean())
    rows = np.arange(n)
    nll = float(-log_q[rows, targets].mean())
    onehot = np.zeros_like(q)
    onehot[rows, targets] = 1.0
    dlogits = ((q - p) + (q - onehot)) / n
    return kl, nll, dlogits


def loss_and_grads(bb: Backbone, gates: GateParams, tokens, lam: float,
                   m_global: float) -> tuple[LossBreakdown, GateParams]:
    """Full objective on one sequence plus analytic gate gradients.

    Positions 0..T-2 predict the next token. The capacity hinge is evaluated
    on the betas the student actually produced for this sequence.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[0] < 2:
        raise ValueError("need at least two tokens to form a prediction")
    teacher_logits = teacher_forward(bb, tokens)
    student_logits, trace = student_forward(bb, gates, tokens)
    targets = tokens[1:]
    kl, nll, dlogits_used = _quality_with_grad(
        teacher_logits[:-1], student_logits[:-1], targets)
    quality = kl + nll
    G = trace.betas.reshape(bb.shape.head_count, -1)
    cap, dbeta_flat = cap_loss_global_grad(G, m_global)
    dlogits = np.zeros_like(student_logits)
    dlogits[:-1] = dlogits_used
    dbeta = lam * dbeta_flat.reshape(trace.betas.shape)
    grads = student_backward(bb, gates, trace, dlogits, dbeta)
    breakdown = LossBreakdown(total_loss(quality, cap, lam), quality, cap, kl, nll)
    return breakdown, grads


def accumulate(into: GateParams, grads: GateParams, weight: float = 1.0) -> None:
    for name, g in grads.tensors().items():
        into.tensors()[name] += weight * g


def train_gates(bb: Backbone, gates: GateParams, sequences, *, lam: float = 1.0,
                m_global: float, lr: float = 0.05, steps: int = 200,
                batch_size: int = 4, seed: int = 0,
                callback=None) -> TrainResult:
    """Adam over a pool of fixed sequences; aborts on divergence.

    `sequences` is a list of token arrays sampled up front so that (seed,
    config) fully determines the run. Gradients within a batch average in
    list order.
    """
    rng = np.random.default_rng(seed)
    params = gates.copy()
    history: list[LossBreakdown] = []
    n = len(sequences)
    if n == 0:
        raise ValueError("no training sequences")
    # low first-moment decay: the capacity hinge is a cliff in beta space, and
    # ordinary momentum carries the betas through the release point into
    # irrecoverable sigmoid saturation
    b1, b2, eps = 0.3, 0.99, 1e-8
    moment1 = params.zeros_like()
    moment2 = params.zeros_like()
    for step in range(steps):
        # cosine decay keeps the capacity hinge from overshooting: near the
        # budget boundary the normalized Adam step must shrink or the betas
        # blow through into dead saturation
        lr_t = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
        idx = rng.integers(0, n, size=batch_size)
        batch_grads = params.zeros_like()
        tot = qual = cap = kl = nll = 0.0
        for i in idx:
            breakdown, grads = loss_and_grads(bb, params, sequences[int(i)], lam, m_global)
            accumulate(batch_grads, grads, 1.0 / batch_size)
            tot += breakdown.total / batch_size
            qual += breakdown.quality / batch_size
            cap += breakdown.cap / batch_size
            kl += breakdown.kl / batch_size
            nll += breakdown.nll / batch_size
        if not np.isfinite(tot) or tot > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"loss {tot:.3e} at step {step} exceeded {DIVERGENCE_LIMIT:.0e} "
                f"(quality {qual:.3e}, cap {cap:.3e}); lower the learning rate")
        t = step + 1
        for name, g in batch_grads.tensors().items():
            m = moment1.tensors()[name]
            v = moment2.tensors()[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            params.tensors()[name] -= lr_t * m_hat / (np.sqrt(v_hat) + eps)
        rec = LossBreakdown(tot, qual, cap, kl, nll)
        history.append(rec)
        if callback is not None:
            callback(step, rec)
    return TrainResult(params, history, history[-1])
