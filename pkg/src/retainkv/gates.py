"""Retention gates with a weight-tied final scoring projection, plus losses.

Each (layer, head) owns a two-layer tanh projection; a single scoring vector
and bias shared by every gate turns the projected features into a retention
score in (0, 1). Sharing that readout puts scores from different heads on one
scale, which is what makes a single global ranking meaningful. An untied
variant (per-head readouts) exists for the ablation.

Checkpoint format (versioned, little-endian, documented for byte-exactness):

    bytes 0..7   magic  b"RKVGATE1"
    bytes 8..11  uint32 header length N
    bytes 12..   N bytes of UTF-8 JSON header:
                 {"version": 1, "layers", "heads", "d_in", "d_gate",
                  "activation": "tanh", "tied": bool, "gate_input", "seed"}
    then, for layer-major (layer, head) order, float64 C-order arrays:
                 w1 [d_gate, d_in], b1 [d_gate], w2 [d_gate, d_gate], b2 [d_gate]
    then the shared readout: wg [d_gate], bg [1]
    (untied: one wg [d_gate], bg [1] pair per (layer, head), same order)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Array, as_matrix, as_vector, sigmoid

MAGIC = b"RKVGATE1"
INIT_READOUT_BIAS = 18.0  # starts every gate at beta ~= 1 so gating is a no-op


@dataclass(frozen=True)
class ModelShape:
    """Dimensions shared by the backbone, gates, and budget accounting."""

    layers: int
    heads: int
    head_dim: int
    gate_hidden: int
    seq_len: int
    vocab: int

    def __post_init__(self):
        for name in ("layers", "heads", "head_dim", "gate_hidden", "seq_len", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim

    @property
    def head_count(self) -> int:
        return self.layers * self.heads


@dataclass
class GateParams:
    """Per-(layer, head) projections plus the shared scoring readout.

    proj_* arrays are indexed [layer, head, ...]. When `tied` is False the
    readout arrays grow leading (layer, head) axes; everything else is
    unchanged, which keeps the ablation a pure calibration comparison.
    """

    w1: Array  # [L, H, d_gate, d_in]
    b1: Array  # [L, H, d_gate]
    w2: Array  # [L, H, d_gate, d_gate]
    b2: Array  # [L, H, d_gate]
    wg: Array  # [d_gate] tied, [L, H, d_gate] untied
    bg: Array  # [] tied, [L, H] untied
    tied: bool = True
    gate_input: str = "embedding"  # "embedding" | "kv"
    activation: str = "tanh"
    seed: int | None = None

    @property
    def layers(self) -> int:
        return self.w1.shape[0]

    @property
    def heads(self) -> int:
        return self.w1.shape[1]

    @property
    def d_in(self) -> int:
        return self.w1.shape[3]

    @property
    def d_gate(self) -> int:
        return self.w1.shape[2]

    def readout(self, layer: int, head: int) -> tuple[Array, float]:
        if self.tied:
            return self.wg, float(self.bg)
        return self.wg[layer, head], float(self.bg[layer, head])

    def tensors(self) -> dict[str, Array]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "wg": self.wg, "bg": self.bg}

    def copy(self) -> "GateParams":
        return GateParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                          self.wg.copy(), self.bg.copy(), self.tied, self.gate_input,
                          self.activation, self.seed)

    def zeros_like(self) -> "GateParams":
        return GateParams(np.zeros_like(self.w1), np.zeros_like(self.b1),
                          np.zeros_like(self.w2), np.zeros_like(self.b2),
                          np.zeros_like(self.wg), np.zeros_like(self.bg),
                          self.tied, self.gate_input, self.activation, self.seed)


def init_gate_params(shape: ModelShape, d_in: int, rng: np.random.Generator,
                     tied: bool = True, gate_input: str = "embedding",
                     init_scale: float = 0.1, seed: int | None = None) -> GateParams:
    """Small random projections; readout bias starts at 18.0 so beta > 0.999."""
    L, H, dg = shape.layers, shape.heads, shape.gate_hidden
    w1 = rng.normal(0.0, init_scale / np.sqrt(d_in), size=(L, H, dg, d_in))
    b1 = np.zeros((L, H, dg))
    w2 = rng.normal(0.0, init_scale / np.sqrt(dg), size=(L, H, dg, dg))
    b2 = np.zeros((L, H, dg))
    if tied:
        wg = rng.normal(0.0, init_scale / np.sqrt(dg), size=dg)
        bg = np.float64(INIT_READOUT_BIAS)
    else:
        wg = rng.normal(0.0, init_scale / np.sqrt(dg), size=(L, H, dg))
        bg = np.full((L, H), INIT_READOUT_BIAS)
    return GateParams(w1, b1, w2, b2, wg, np.asarray(bg, dtype=np.float64),
                      tied, gate_input, "tanh", seed)


def gate_forward(x: Array, layer: int, head: int, params: GateParams) -> float:
    """Retention score sigmoid(wg . Proj_{layer,head}(x) + bg), in (0, 1)."""
    x = as_vector(x, "x")
    if x.shape[0] != params.d_in:
        raise ValueError(f"gate input dim {x.shape[0]} != {params.d_in}")
    h = np.tanh(params.w1[layer, head] @ x + params.b1[layer, head])
    p = params.w2[layer, head] @ h + params.b2[layer, head]
    wg, bg = params.readout(layer, head)
    return float(sigmoid(float(wg @ p) + bg))


def gate_forward_batch(x: Array, layer: int, head: int, params: GateParams) -> Array:
    """Vectorized `gate_forward` over rows of x [n, d_in]."""
    x = as_matrix(x, "x")
    h = np.tanh(x @ params.w1[layer, head].T + params.b1[layer, head])
    p = h @ params.w2[layer, head].T + params.b2[layer, head]
    wg, bg = params.readout(layer, head)
    return sigmoid(p @ wg + bg)


# -- losses -----------------------------------------------------------------


def _log_softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def quality_loss(teacher_logits: Array, student_logits: Array, targets) -> float:
    """Mean over positions of KL(teacher || student) plus student NLL."""
    p_logits = as_matrix(teacher_logits, "teacher_logits")
    q_logits = as_matrix(student_logits, "student_logits")
    if p_logits.shape != q_logits.shape:
        raise ValueError("teacher and student logits must share a shape")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (p_logits.shape[0],):
        raise ValueError("targets must give one vocab index per position")
    log_p = _log_softmax(p_logits)
    log_q = _log_softmax(q_logits)
    p = np.exp(log_p)
    kl = float((p * (log_p - log_q)).sum(axis=-1).mean())
    nll = float(-log_q[np.arange(targets.shape[0]), targets].mean())
    return kl + nll


def _retained_mass_per_step(betas: Array) -> Array:
    """Per-step sums over heads and tokens of beta**(t - i), with beta**0 == 1.

    betas is [(layers * heads), T]; entry (g, i) is token i's score in head
    group g. Returns the length-T vector of global retained mass.
    """
    b = as_matrix(betas, "betas")
    if np.any(b < 0.0) or np.any(b > 1.0):
        raise ValueError("betas must lie in [0, 1]")
    G, T = b.shape
    mass = np.zeros(T)
    # decay[t, i] = beta_i ** (t - i) for i <= t
    with np.errstate(divide="ignore"):
        log_b = np.where(b > 0.0, np.log(np.where(b > 0.0, b, 1.0)), -np.inf)
    ages = np.arange(T)[:, None] - np.arange(T)[None, :]  # [t, i]
    causal = ages >= 0
    for g in range(G):
        with np.errstate(invalid="ignore"):
            expo = ages * log_b[g][None, :]
        expo = np.where(ages == 0, 0.0, expo)  # 0**0 == 1, even at beta == 0
        decay = np.where(causal, np.exp(np.where(causal, expo, -np.inf)), 0.0)
        mass += decay.sum(axis=1)
    return mass


def cap_loss_global(betas: Array, m_global: float) -> float:
    """Hinge on the global retained mass: sum_t max(0, mass_t - m_global)."""
    mass = _retained_mass_per_step(betas)
    return float(np.maximum(0.0, mass - m_global).sum())


def cap_loss_per_head(betas: Array, m: float) -> float:
    """Per-head hinge with a fixed local budget, summed over heads."""
    b = as_matrix(betas, "betas")
    total = 0.0
    for g in range(b.shape[0]):
        total += cap_loss_global(b[g : g + 1], m)
    return float(total)


def total_loss(quality: float, cap: float, lam: float) -> float:
    """Combined objective quality + lam * cap."""
    if lam < 0.0:
        raise ValueError("lambda must be >= 0")
    return float(quality + lam * cap)


def cap_loss_global_grad(betas: Array, m_global: float) -> tuple[float, Array]:
    """Capacity loss and its subgradient with respect to each beta.

    d mass_t / d beta_{g,i} is (t - i) * beta**(t - i - 1) for t > i and zero
    at t == i (the age-0 term is constant 1); hinge subgradient 1[mass > m].
    """
    b = as_matrix(betas, "betas")
    G, T = b.shape
    mass = _retained_mass_per_step(b)
    active = (mass > m_global).astype(np.float64)
    loss = float(np.maximum(0.0, mass - m_global).sum())
    ages = np.arange(T)[:, None] - np.arange(T)[None, :]  # [t, i]
    dbeta = np.zeros_like(b)
    with np.errstate(divide="ignore"):
        log_b = np.where(b > 0.0, np.log(np.where(b > 0.0, b, 1.0)), -np.inf)
    for g in range(G):
        with np.errstate(invalid="ignore"):
            expo = (ages - 1) * log_b[g][None, :]
        expo = np.where(ages == 1, 0.0, expo)  # beta**0 == 1
        pw = np.where(ages >= 1, np.exp(np.where(ages >= 1, expo, -np.inf)), 0.0)
        dbeta[g] = (active[:, None] * ages * pw).sum(axis=0)
    return loss, dbeta


def flatten_params(params: GateParams) -> Array:
    """Concatenate all gate tensors into one vector (w1, b1, w2, b2, wg, bg)."""
    return np.concatenate([params.tensors()[n].ravel()
                           for n in ("w1", "b1", "w2", "b2", "wg", "bg")])


def unflatten_params(vec: Array, like: GateParams) -> GateParams:
    """Inverse of `flatten_params`, shaped after `like`."""
    out = like.zeros_like()
    offset = 0
    for name in ("w1", "b1", "w2", "b2", "wg", "bg"):
        t = out.tensors()[name]
        n = t.size
        t[...] = np.asarray(vec[offset:offset + n]).reshape(t.shape)
        offset += n
    if offset != vec.size:
        raise ValueError(f"vector length {vec.size} != parameter count {offset}")
    return out


# -- checkpoint io ----------------------------------------------------------


def save_gates(path, params: GateParams) -> None:
    header = {
        "version": 1,
        "layers": params.layers,
        "heads": params.heads,
        "d_in": params.d_in,
        "d_gate": params.d_gate,
        "activation": params.activation,
        "tied": params.tied,
        "gate_input": params.gate_input,
        "seed": params.seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for l in range(params.layers):
            for h in range(params.heads):
                for arr in (params.w1[l, h], params.b1[l, h], params.w2[l, h], params.b2[l, h]):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if params.tied:
            fh.write(np.ascontiguousarray(params.wg, dtype="<f8").tobytes())
            fh.write(np.float64(params.bg).astype("<f8").tobytes())
        else:
            for l in range(params.layers):
                for h in range(params.heads):
                    fh.write(np.ascontiguousarray(params.wg[l, h], dtype="<f8").tobytes())
                    fh.write(np.float64(params.bg[l, h]).astype("<f8").tobytes())


def load_gates(path) -> GateParams:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a gate checkpoint (magic {magic!r})")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        L, H = header["layers"], header["heads"]
        d_in, dg = header["d_in"], header["d_gate"]
        tied = header["tied"]

        def read(shape):
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError("truncated checkpoint")
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

        w1 = np.empty((L, H, dg, d_in))
        b1 = np.empty((L, H, dg))
        w2 = np.empty((L, H, dg, dg))
        b2 = np.empty((L, H, dg))
        for l in range(L):
            for h in range(H):
                w1[l, h] = read((dg, d_in))
                b1[l, h] = read((dg,))
                w2[l, h] = read((dg, dg))
                b2[l, h] = read((dg,))
        if tied:
            wg = read((dg,))
            bg = np.float64(read((1,))[0])
        else:
            wg = np.empty((L, H, dg))
            bg = np.empty((L, H))
            for l in range(L):
                for h in range(H):
                    wg[l, h] = read((dg,))
                    bg[l, h] = read((1,))[0]
        return GateParams(w1, b1, w2, b2, wg, np.asarray(bg, dtype=np.float64), tied,
                          header["gate_input"], header["activation"], header["seed"])
