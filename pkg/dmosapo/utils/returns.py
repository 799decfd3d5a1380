"""
Return estimators over a leading time axis; any trailing batch axes broadcast.

Index convention for λ-returns: ``rewards`` holds r_1..r_{H-1} and ``values``
holds V_1..V_H (V_H is the bootstrap). Targets are V̂_1..V̂_{H-1}.
"""

import numpy as np


def lambda_returns(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Backward recursion G_t = r_t + γ[(1 - λ) V_{t+1} + λ G_{t+1}], G_H = V_H."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError(f"Need one more value than rewards, got {values.shape[0]} and {rewards.shape[0]}")
    targets = np.zeros_like(rewards)
    running = values[-1]
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * ((1.0 - lam) * values[t + 1] + lam * running)
        targets[t] = running
    return targets


def n_step_return(rewards: np.ndarray, values: np.ndarray, t: int, n: int, gamma: float) -> np.ndarray:
    """Σ_{k<n} γ^k r_{t+k} + γ^n V_{t+n} (0-based t)."""
    total = gamma ** n * values[t + n]
    for k in range(n):
        total = total + gamma ** k * rewards[t + k]
    return total


def lambda_returns_direct(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Explicit weighted sum of n-step returns:
    V̂_t = (1 - λ) Σ_{n=1}^{N-1} λ^{n-1} V^(n)_t + λ^{N-1} V^(N)_t with N = H - t."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    steps = rewards.shape[0]
    targets = np.zeros_like(rewards)
    for t in range(steps):
        horizon = steps - t
        mixed = lam ** (horizon - 1) * n_step_return(rewards, values, t, horizon, gamma)
        for n in range(1, horizon):
            mixed = mixed + (1.0 - lam) * lam ** (n - 1) * n_step_return(rewards, values, t, n, gamma)
        targets[t] = mixed
    return targets


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float):
    """Generalized advantage estimation without terminations.

    ``values`` has one more entry than ``rewards`` (bootstrap last).
    Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    deltas = rewards + gamma * values[1:] - values[:-1]
    advantages = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = deltas[t] + gamma * lam * running
        advantages[t] = running
    return advantages, advantages + values[:-1]
