"""Adam optimizer with decoupled-from-nothing classic L2, and training losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment estimates plus hyperparameters.

    ``weight_decay`` is a plain L2 coefficient: it is added to the raw
    gradient (decay * param) before the moment updates.
    """
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        for slot, p in zip(self.m, params):
            if slot.shape != p.data.shape:
                raise ValueError("optimizer state does not match parameter shapes")


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction; mutates params and state."""
    state.ensure(params)
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter required")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise T.NumericsError("non-finite gradient in adam_step")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Object wrapper holding parameters alongside their AdamState."""

    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                               weight_decay=weight_decay)

    def step(self, loss):
        grads = T.collect_gradients(loss, self.params)
        adam_step(self.params, grads, self.state)


def weighted_softmax_cross_entropy(logits: Tensor, label: int, weights):
    """-w[label] * log softmax(logits)[label] for a single example."""
    w = np.asarray(weights, dtype=np.float64)
    k = logits.data.shape[-1]
    if not (0 <= label < k):
        raise IndexError(f"label {label} out of range for {k} classes")
    if len(w) != k:
        raise ValueError("one weight per class required")
    if (w < 0).any():
        raise ValueError("class weights must be nonnegative")
    return weighted_batch_cross_entropy(logits, np.array([label]), w)


def weighted_batch_cross_entropy(logits: Tensor, labels, weights):
    """Mean over the batch of -w[y_i] * log softmax(logits_i)[y_i].

    ``logits``: (N, K) or (K,). Gradients flow through logits only.
    """
    squeeze = logits.data.ndim == 1
    ld = logits.data[None, :] if squeeze else logits.data
    labels = np.asarray(labels)
    w = np.asarray(weights, dtype=ld.dtype)
    n, k = ld.shape
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError("label out of range")
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), labels] - lse
    wl = w[labels]
    loss_val = float((-wl * logp).mean())
    out = Tensor(np.asarray(loss_val, dtype=ld.dtype), _parents=(logits,))

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        grad = (float(g) / n) * wl[:, None] * p
        logits._accumulate(grad[0] if squeeze else grad)

    out._backward = bwd
    return out


def binary_cross_entropy(probs: Tensor, targets, clip=1e-7):
    """Mean BCE against probabilities already in (0, 1).

    Targets are a plain array broadcastable to ``probs``. Probabilities are
    clipped away from {0, 1}; gradient is zero in the clipped region.
    """
    y = np.asarray(targets, dtype=probs.dtype)
    p = probs.data
    pc = np.clip(p, clip, 1.0 - clip)
    loss_val = float(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean())
    out = Tensor(np.asarray(loss_val, dtype=probs.dtype), _parents=(probs,))

    def bwd(g):
        inside = (p > clip) & (p < 1.0 - clip)
        grad = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0)
        probs._accumulate((float(g) / p.size) * grad.astype(p.dtype))

    out._backward = bwd
    return out


def nll_on_probs(probs: Tensor, labels, clip=1e-7):
    """Mean -log p[label] for probabilities (N, K); used by 3-way heads."""
    labels = np.asarray(labels)
    p = probs.data
    n = p.shape[0]
    pc = np.clip(p[np.arange(n), labels], clip, 1.0)
    out = Tensor(np.asarray(float(-np.log(pc).mean()), dtype=p.dtype),
                 _parents=(probs,))

    def bwd(g):
        grad = np.zeros_like(p)
        sel = p[np.arange(n), labels]
        grad[np.arange(n), labels] = np.where(sel > clip, -1.0 / pc, 0.0)
        probs._accumulate((float(g) / n) * grad)

    out._backward = bwd
    return out
