import logging
from typing import Iterable, Sequence

import numpy as np

from dmosapo.core.autodiff import Value

logger = logging.getLogger(__name__)


def global_norm(params: Iterable[Value]) -> float:
    total = 0.0
    for p in params:
        if p.has_grad:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Value], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = list(params)
    norm = global_norm(params)
    if max_norm is not None and max_norm > 0 and np.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.has_grad:
                p.grad = p.grad * scale
    return norm


class Adam:
    """Bias-corrected Adam over a fixed list of parameters.

    A step whose gradients contain NaN/Inf is skipped entirely and counted in
    ``skipped_steps``; moment buffers and the step counter are left untouched.
    """

    def __init__(
        self,
        params: Sequence[Value],
        lr: float = 1e-3,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.skipped_steps = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self) -> bool:
        grads = [p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped_steps += 1
            logger.warning(f"Adam: non-finite gradient, step skipped ({self.skipped_steps} so far)")
            return False
        adam_update(self.params, grads, self._m, self._v, self.lr,
                    self.beta1, self.beta2, self.eps, self.step_count + 1)
        self.step_count += 1
        return True

    def state_dict(self) -> dict:
        state = {"step_count": np.array([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self._m, self._v)):
            state[f"m.{i}"] = m.copy()
            state[f"v.{i}"] = v.copy()
        return state

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"][0])
        for i in range(len(self.params)):
            self._m[i] = np.array(state[f"m.{i}"], dtype=np.float64)
            self._v[i] = np.array(state[f"v.{i}"], dtype=np.float64)


def adam_update(params, grads, m_buffers, v_buffers, lr, beta1, beta2, eps, step: int):
    """One in-place Adam update; ``step`` is 1-based."""
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for p, g, m, v in zip(params, grads, m_buffers, v_buffers):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
