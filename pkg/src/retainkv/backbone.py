"""Frozen toy transformer backbone with manual backpropagation for the gates.

The backbone (embeddings, attention projections, MLPs, unembedding) never
receives gradients. The student runs the same weights with geometric
retention weighting inside every head's softmax; gradients flow through the
student's activations into the gate parameters only, including the paths
through later layers (a gate's input is the hidden state, which depends on
earlier layers' gating).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gates import GateParams, ModelShape
from .numerics import Array, sigmoid


@dataclass
class Backbone:
    shape: ModelShape
    embed: Array    # [vocab, d_model]
    pos: Array      # [seq_len, d_model]
    wq: Array       # [L, H, d_model, d_head]
    wk: Array
    wv: Array
    wo: Array       # [L, H, d_head, d_model]
    mlp_w1: Array   # [L, d_model, d_ff]
    mlp_b1: Array   # [L, d_ff]
    mlp_w2: Array   # [L, d_ff, d_model]
    mlp_b2: Array   # [L, d_model]
    unembed: Array  # [d_model, vocab]


def random_backbone(shape: ModelShape, rng: np.random.Generator,
                    d_ff: int | None = None, scale: float = 0.5) -> Backbone:
    """Seeded random frozen backbone, used by gradient checks and smoke tests."""
    d = shape.d_model
    d_ff = d_ff or 2 * d
    L, H, dh = shape.layers, shape.heads, shape.head_dim

    def w(*s, fan):
        return rng.normal(0.0, scale / np.sqrt(fan), size=s)

    return Backbone(
        shape=shape,
        embed=w(shape.vocab, d, fan=1),
        pos=w(shape.seq_len, d, fan=1) * 0.1,
        wq=w(L, H, d, dh, fan=d),
        wk=w(L, H, d, dh, fan=d),
        wv=w(L, H, d, dh, fan=d),
        wo=w(L, H, dh, d, fan=dh),
        mlp_w1=w(L, d, d_ff, fan=d),
        mlp_b1=np.zeros((L, d_ff)),
        mlp_w2=w(L, d_ff, d, fan=d_ff),
        mlp_b2=np.zeros((L, d)),
        unembed=w(d, shape.vocab, fan=d),
    )


def _causal_softmax(scores: Array) -> Array:
    """Row-wise softmax over columns i <= t; rows are query positions."""
    T = scores.shape[0]
    masked = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    return e / e.sum(axis=1, keepdims=True)


def _gate_input(x: Array, k: Array, v: Array, mode: str) -> Array:
    if mode == "embedding":
        return x
    if mode == "kv":
        return np.concatenate([k, v], axis=-1)
    raise ValueError(f"unknown gate input mode {mode!r}")


@dataclass
class ForwardTrace:
    """Student activations cached for the manual backward pass."""

    tokens: np.ndarray
    logits: Array
    betas: Array                 # [L, H, T]
    x_in: list                   # per layer [T, d_model]
    per_head: list               # [L][H] dict of q, k, v, w, gate intermediates
    mlp: list                    # per layer dict of x, a
    h_final: Array


def teacher_forward(bb: Backbone, tokens) -> Array:
    """Full-cache forward: standard causal attention, no gating. Returns logits."""
    logits, _ = student_forward(bb, None, tokens)
    return logits


def student_forward(bb: Backbone, gates: GateParams | None, tokens) -> tuple[Array, ForwardTrace]:
    """Gated forward pass; `gates=None` runs the plain full-cache path.

    Retention enters each head as additive log weights (t - i) * log(beta_i)
    on the causal attention logits; betas come from the gate applied to that
    layer's input hidden state (or to [k || v] in the ablation variant).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    T = tokens.shape[0]
    shape = bb.shape
    if T > shape.seq_len:
        raise ValueError(f"sequence length {T} exceeds model limit {shape.seq_len}")
    L, H, dh = shape.layers, shape.heads, shape.head_dim
    ages = np.arange(T)[:, None] - np.arange(T)[None, :]

    h = bb.embed[tokens] + bb.pos[:T]
    betas = np.ones((L, H, T))
    x_in, per_head_all, mlp_caches = [], [], []

    for l in range(L):
        x = h
        x_in.append(x)
        attn = np.zeros_like(h)
        heads = []
        for hd in range(H):
            q = x @ bb.wq[l, hd]
            k = x @ bb.wk[l, hd]
            v = x @ bb.wv[l, hd]
            cache = {"q": q, "k": k, "v": v}
            z = (q @ k.T) / np.sqrt(dh)
            if gates is not None:
                gin = _gate_input(x, k, v, gates.gate_input)
                h1 = np.tanh(gin @ gates.w1[l, hd].T + gates.b1[l, hd])
                p = h1 @ gates.w2[l, hd].T + gates.b2[l, hd]
                wg, bg = gates.readout(l, hd)
                beta = sigmoid(p @ wg + bg)
                betas[l, hd] = beta
                z = z + np.where(ages > 0, ages * np.log(beta)[None, :], 0.0)
                cache.update({"gin": gin, "h1": h1, "p": p, "beta": beta})
            w = _causal_softmax(z)
            cache["w"] = w
            attn += (w @ v) @ bb.wo[l, hd]
            heads.append(cache)
        per_head_all.append(heads)
        h = h + attn
        a = np.tanh(h @ bb.mlp_w1[l] + bb.mlp_b1[l])
        mlp_caches.append({"x": h, "a": a})
        h = h + a @ bb.mlp_w2[l] + bb.mlp_b2[l]

    logits = h @ bb.unembed
    trace = ForwardTrace(tokens, logits, betas, x_in, per_head_all, mlp_caches, h)
    return logits, trace


def student_backward(bb: Backbone, gates: GateParams, trace: ForwardTrace,
                     dlogits: Array, dbeta_extra: Array | None = None) -> GateParams:
    """Gradients of a scalar loss with respect to the gate parameters only.

    `dlogits` is the loss gradient at the student logits; `dbeta_extra` adds a
    direct [L, H, T] gradient on the betas (the capacity loss path). Backbone
    tensors are read but never written; the shared readout accumulates
    contributions from every layer and head.
    """
    shape = bb.shape
    L, H, dh = shape.layers, shape.heads, shape.head_dim
    T = trace.tokens.shape[0]
    ages = np.arange(T)[:, None] - np.arange(T)[None, :]
    age_w = np.where(ages > 0, ages.astype(np.float64), 0.0)
    grads = gates.zeros_like()

    dh_grad = dlogits @ bb.unembed.T
    for l in reversed(range(L)):
        mc = trace.mlp[l]
        da = dh_grad @ bb.mlp_w2[l].T
        dpre = da * (1.0 - mc["a"] ** 2)
        dh_grad = dh_grad + dpre @ bb.mlp_w1[l].T

        dx = dh_grad.copy()  # residual into the layer input
        for hd in range(H):
            hc = trace.per_head[l][hd]
            q, k, v, w = hc["q"], hc["k"], hc["v"], hc["w"]
            do = dh_grad @ bb.wo[l, hd].T
            dw = do @ v.T
            dv = w.T @ do
            dg = w * (dw - (dw * w).sum(axis=1, keepdims=True))
            dq = (dg @ k) / np.sqrt(dh)
            dk = (dg.T @ q) / np.sqrt(dh)

            beta = hc["beta"]
            # d(logit)/d(pre-sigmoid) for the geometric term is age * (1 - beta):
            # the sigmoid slope beta * (1 - beta) cancels the 1/beta from
            # d(age * log beta)/d(beta), which also keeps beta == 0 finite
            du = (dg * age_w).sum(axis=0) * (1.0 - beta)
            if dbeta_extra is not None:
                du = du + dbeta_extra[l, hd] * beta * (1.0 - beta)
            wg, _ = gates.readout(l, hd)
            if gates.tied:
                grads.wg += hc["p"].T @ du
                grads.bg += du.sum()
            else:
                grads.wg[l, hd] += hc["p"].T @ du
                grads.bg[l, hd] += du.sum()
            dp = np.outer(du, wg)
            grads.w2[l, hd] += dp.T @ hc["h1"]
            grads.b2[l, hd] += dp.sum(axis=0)
            dh1 = dp @ gates.w2[l, hd]
            dpre1 = dh1 * (1.0 - hc["h1"] ** 2)
            grads.w1[l, hd] += dpre1.T @ hc["gin"]
            grads.b1[l, hd] += dpre1.sum(axis=0)
            dgin = dpre1 @ gates.w1[l, hd]
            if gates.gate_input == "embedding":
                dx += dgin
            else:
                dk += dgin[:, :dh]
                dv += dgin[:, dh:]

            dx += dq @ bb.wq[l, hd].T + dk @ bb.wk[l, hd].T + dv @ bb.wv[l, hd].T
        dh_grad = dx

    return grads
