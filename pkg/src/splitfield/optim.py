"""Adam with bias correction, plus the learning-rate schedules used by training and attacks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GraphError, Tensor


@dataclass
class AdamState:
    shape: tuple
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)


def adam_update(value: np.ndarray, grad: np.ndarray, state: AdamState, lr_t: float | None = None) -> None:
    """In-place Adam update of a raw array."""
    lr = state.lr if lr_t is None else lr_t
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(param: Tensor, state: AdamState, lr_t: float | None = None) -> None:
    if param.grad is None:
        raise GraphError(f"adam_step: {param!r} has no gradient")
    if state.m.shape != param.shape:
        raise GraphError(f"adam_step: state shape {state.m.shape} != param shape {param.shape}")
    adam_update(param.value, param.grad, state, lr_t)


class Adam:
    """Adam over a fixed list of parameters sharing one schedule."""

    def __init__(self, params, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.states = [AdamState(p.shape, lr, betas[0], betas[1], eps) for p in self.params]

    def step(self, lr_t: float | None = None):
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                # untouched this iteration; Adam still needs a (zero) gradient to advance
                p.grad = np.zeros(p.shape)
            adam_step(p, s, lr_t)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class RowAdam:
    """Lazy Adam over rows of a growable table; only rows present in a step move."""

    def __init__(self, width: int, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.width = width
        self.lr, self.beta1, self.beta2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros((0, width))
        self.v = np.zeros((0, width))
        self.t = np.zeros(0, dtype=np.int64)

    def grow(self, rows: int):
        extra = rows - self.m.shape[0]
        if extra > 0:
            self.m = np.vstack([self.m, np.zeros((extra, self.width))])
            self.v = np.vstack([self.v, np.zeros((extra, self.width))])
            self.t = np.concatenate([self.t, np.zeros(extra, dtype=np.int64)])

    def step(self, table: np.ndarray, rows: np.ndarray, grads: np.ndarray, lr_t: float | None = None):
        lr = self.lr if lr_t is None else lr_t
        self.grow(table.shape[0])
        uniq, inv = np.unique(rows, return_inverse=True)
        g = np.zeros((uniq.size, self.width))
        np.add.at(g, inv, grads)
        self.t[uniq] += 1
        t = self.t[uniq][:, None].astype(float)
        m = self.m[uniq] = self.beta1 * self.m[uniq] + (1 - self.beta1) * g
        v = self.v[uniq] = self.beta2 * self.v[uniq] + (1 - self.beta2) * g * g
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        table[uniq] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def exp_decay_lr(base: float, t: int, total: int, final_ratio: float = 0.1) -> float:
    """``base * final_ratio ** (t / total)``; reaches ``base * final_ratio`` at ``t == total``."""
    return base * final_ratio ** (t / total)


ATTACK_SCHEMES = ("pow01", "pow0001", "inv10")


def attack_lr(scheme: str, base: float, t: int, total: int) -> float:
    """Surrogate learning rate at attack step ``t`` (1-based for ``inv10``)."""
    if scheme == "pow01":
        return base * 0.1 ** (t / total)
    if scheme == "pow0001":
        return base * 0.001 ** (t / total)
    if scheme == "inv10":
        return 10.0 / max(t, 1)
    raise ValueError(f"unknown attack lr scheme {scheme!r}; expected one of {ATTACK_SCHEMES}")
