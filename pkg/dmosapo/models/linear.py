"""
Analytic models for the linear system, used as gradient oracles.

``LinearBackwardModel`` implements the backward-model protocol with
l' = A φ(l) + B a (φ = identity or tanh), an identity encoder and the
environment's quadratic reward, so every Jacobian along a rollout has a closed form.
"""

from typing import Optional

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value
from dmosapo.models.local import Latent
from dmosapo.models.nn import Module


class LinearBackwardModel(Module):
    def __init__(self, A: np.ndarray, B: np.ndarray, action_cost: float = 0.01, activation: str = "identity"):
        if activation not in ("identity", "tanh"):
            raise ValueError(f"Unknown activation '{activation}'")
        self.A = Value(np.asarray(A, dtype=np.float64), requires_grad=True)
        self.B = Value(np.asarray(B, dtype=np.float64), requires_grad=True)
        self.action_cost = action_cost
        self.activation = activation
        self.n = self.A.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.n

    @property
    def noise_dim(self) -> int:
        return 0

    def _empty(self, batch: int) -> Value:
        return Value(np.zeros((batch, 0)))

    def phi(self, x):
        return ad.tanh(x) if self.activation == "tanh" else x

    def phi_prime(self, x: np.ndarray) -> np.ndarray:
        return 1.0 - np.tanh(x) ** 2 if self.activation == "tanh" else np.ones_like(x)

    def initial(self, obs, eps=None) -> Latent:
        obs = np.atleast_2d(obs)
        return Latent(Value(obs.copy()), self._empty(len(obs)))

    def encode(self, obs, context: Latent, eps=None) -> Latent:
        obs = np.atleast_2d(obs)
        return Latent(Value(obs.copy()), self._empty(len(obs)))

    def transition(self, latent: Latent, action, eps=None) -> Latent:
        # row-vector convention: l' = φ(l) Aᵀ + a Bᵀ
        h = ad.matmul(self.phi(latent.h), self.A.T) + ad.matmul(ad.as_value(action), self.B.T)
        return Latent(h, self._empty(latent.batch))

    def reward(self, latent: Latent, action) -> Value:
        action = ad.as_value(action)
        return -(ad.vsum(latent.h * latent.h, axis=-1) + ad.vsum(action * action, axis=-1) * self.action_cost)

    def decode(self, latent: Latent) -> np.ndarray:
        return latent.h.data.copy()

    # closed-form partials, row-per-sample
    def reward_grad_state(self, h: np.ndarray) -> np.ndarray:
        return -2.0 * h

    def reward_grad_action(self, a: np.ndarray) -> np.ndarray:
        return -2.0 * self.action_cost * a

    def state_jacobian(self, h: np.ndarray) -> np.ndarray:
        """∂l'/∂l for one sample."""
        return self.A.data * self.phi_prime(h)[None, :]


class LinearPolicy(Module):
    """Deterministic a = l K + b (no squashing, zero entropy)."""

    deterministic = True

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 0.1):
        self.action_dim = n_out
        self.K = Value(rng.normal(0.0, scale, size=(n_in, n_out)), requires_grad=True)
        self.b = Value(rng.normal(0.0, scale, size=(n_out,)), requires_grad=True)

    def __call__(self, features, eps: Optional[np.ndarray] = None):
        action = ad.matmul(ad.as_value(features), self.K) + self.b
        return action, Value(np.zeros(action.shape[0]))

    def mode(self, features) -> np.ndarray:
        return np.atleast_2d(features) @ self.K.data + self.b.data


class QuadraticValue(Module):
    """V(l) = -Σ w l² + c, a fixed-form critic for oracle checks."""

    def __init__(self, n_in: int, weight: float = 1.0):
        self.w = Value(np.full(n_in, weight), requires_grad=True)
        self.c = Value(np.zeros(1), requires_grad=True)

    def __call__(self, features) -> Value:
        f = ad.as_value(features)
        return -ad.vsum(f * f * self.w, axis=-1) + ad.reshape(self.c, ())
